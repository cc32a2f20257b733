import json
import math

import numpy as np
import pytest

from petkit.data import (
    Dataset,
    SyntheticTaskSpec,
    accuracy,
    build_few_shot_split,
    generate_synthetic_task,
    load_jsonl,
    macro_f1,
    preprocess_text,
    token_frequencies,
)
from petkit.errors import (
    DataError,
    InsufficientExamples,
    LengthMismatch,
    ParseError,
    UnknownLabel,
)
from petkit.pvp import LabelSet, TextInput

BINARY = LabelSet(("+1", "-1"))


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def test_load_jsonl_basic(tmp_path):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [{"text_a": "Best pizza ever!", "label": "+1"}])
    ds = load_jsonl(path, BINARY)
    assert len(ds) == 1
    assert ds[0].segments == (("Best", "pizza", "ever!"),)
    assert ds[0].label == "+1"


def test_load_jsonl_empty_file_is_valid(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("")
    assert len(load_jsonl(path, BINARY)) == 0


def test_newline_marker_replaced_by_space(tmp_path):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [{"text_a": "line one\\nline two"}])
    ds = load_jsonl(path, BINARY)
    assert ds[0].segments == (("line", "one", "line", "two"),)
    assert preprocess_text(preprocess_text("a\\nb")) == preprocess_text("a\\nb")


def test_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"text_a": "ok"}\nnot json\n')
    with pytest.raises(ParseError) as err:
        load_jsonl(path, BINARY)
    assert err.value.line == 2


def test_unknown_label_rejected(tmp_path):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [{"text_a": "x", "label": "weird"}])
    with pytest.raises(UnknownLabel):
        load_jsonl(path, BINARY)


def _interleaved(n_per_label):
    examples = []
    for i in range(n_per_label):
        examples.append(TextInput.from_texts(f"pos {i}", label="+1"))
        examples.append(TextInput.from_texts(f"neg {i}", label="-1"))
    return Dataset(tuple(examples), BINARY, name="full")


def test_few_shot_split_takes_first_per_label_in_file_order():
    full = _interleaved(20)
    train, unlabeled = build_few_shot_split(full, t=10, unlabeled_per_label=5)
    assert len(train) == 10 and len(unlabeled) == 10
    pos = [" ".join(e.segments[0]) for e in train if e.label == "+1"]
    assert pos == [f"pos {i}" for i in range(5)]
    assert all(e.label is None for e in unlabeled)
    train_texts = {e.segments for e in train}
    assert all(e.segments not in train_texts for e in unlabeled)


def test_few_shot_split_zero_t_gives_empty_train():
    train, unlabeled = build_few_shot_split(_interleaved(5), t=0, unlabeled_per_label=3)
    assert len(train) == 0 and len(unlabeled) == 6


def test_few_shot_split_errors():
    with pytest.raises(DataError):
        build_few_shot_split(_interleaved(10), t=3, unlabeled_per_label=1)  # not divisible
    with pytest.raises(InsufficientExamples):
        build_few_shot_split(_interleaved(2), t=10, unlabeled_per_label=0)
    with pytest.raises(InsufficientExamples):
        build_few_shot_split(_interleaved(5), t=8, unlabeled_per_label=5)


def test_accuracy_and_macro_f1_hand_values():
    assert accuracy(["a", "b"], ["a", "b"]) == 1.0
    assert macro_f1(["a", "b"], ["a", "b"]) == 1.0

    pred = ["1", "1", "0", "0"]
    gold = ["1", "0", "1", "0"]
    assert accuracy(pred, gold) == 0.5
    assert macro_f1(pred, gold) == pytest.approx(0.5)

    # all predictions one class on balanced binary gold
    pred = ["a"] * 4
    gold = ["a", "a", "b", "b"]
    assert macro_f1(pred, gold, over=["a", "b"]) == pytest.approx((2 / 3 + 0.0) / 2)

    with pytest.raises(LengthMismatch):
        accuracy(["a"], ["a", "b"])


def test_macro_f1_subset():
    pred = ["0", "1", "2", "2"]
    gold = ["0", "1", "2", "0"]
    full = macro_f1(pred, gold, over=["0", "1", "2"])
    subset = macro_f1(pred, gold, over=["0", "1"])
    assert subset == pytest.approx((2 / 3 + 1.0) / 2)
    assert full != subset


def test_synthetic_determinism():
    spec = SyntheticTaskSpec(seed=7)
    a = generate_synthetic_task(spec, 10, 50, 20)
    b = generate_synthetic_task(spec, 10, 50, 20)
    assert a.train.examples == b.train.examples
    assert a.unlabeled.examples == b.unlabeled.examples
    assert a.test.examples == b.test.examples


def brute_force_posterior(task, example):
    """Independent full-likelihood computation: filler terms, slot position
    combinatorics and all."""
    spec = task.spec
    owners = {t: l for l, ts in task.signal_tokens.items() for t in ts}
    k, s = spec.label_count, spec.signal_tokens_per_label
    best, best_p = None, -1.0
    for label in task.label_set:
        p = 1.0
        for seg in example.segments:
            for tok in seg:
                owner = owners.get(tok)
                if owner is None:
                    p *= 1.0 / spec.vocab_size
                elif owner == label:
                    p *= (1.0 - spec.noise_rate) / s
                else:
                    p *= spec.noise_rate / ((k - 1) * s)
        if p > best_p * (1 + 1e-12):
            best, best_p = label, p
    return best


def test_bayes_labels_match_bruteforce_posterior():
    task = generate_synthetic_task(SyntheticTaskSpec(seed=3, noise_rate=0.2), 10, 0, 60)
    for ex in task.test:
        assert task.bayes_label(ex) == brute_force_posterior(task, ex)


def test_analytic_bayes_accuracy_edge_cases():
    clean = generate_synthetic_task(SyntheticTaskSpec(noise_rate=0.0), 4, 0, 40)
    assert clean.analytic_bayes_accuracy() == pytest.approx(1.0)
    pred = [clean.bayes_label(e) for e in clean.test]
    assert accuracy(pred, list(clean.test.labels())) == 1.0

    # coin-flip noise on a binary task with one signal slot: chance level
    coin = generate_synthetic_task(
        SyntheticTaskSpec(noise_rate=0.5, signal_slots=1), 4, 0, 40
    )
    assert coin.analytic_bayes_accuracy() == pytest.approx(0.5)


def test_analytic_bayes_accuracy_matches_empirical():
    spec = SyntheticTaskSpec(noise_rate=0.15, seed=11, signal_slots=3)
    task = generate_synthetic_task(spec, 10, 0, 4000)
    pred = [task.bayes_label(e) for e in task.test]
    empirical = accuracy(pred, list(task.test.labels()))
    assert empirical == pytest.approx(task.analytic_bayes_accuracy(), abs=0.03)


def test_token_frequencies():
    ds = Dataset(
        (TextInput.from_texts("a a b"), TextInput.from_texts("b c")), BINARY
    )
    assert token_frequencies(ds) == {"a": 2, "b": 2, "c": 1}
