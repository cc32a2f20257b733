"""Dataset loading, few-shot splits, metrics, and synthetic tasks.

The synthetic generator exists so the whole pipeline can be verified at desk
scale: examples carry label-specific signal tokens, the Bayes-optimal rule is
known in closed form, and everything is reproducible from a seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    InsufficientExamples,
    LengthMismatch,
    ParseError,
    UnknownLabel,
)
from .pvp import LabelSet, Pattern, TextInput, Verbalizer, parse_pattern_dsl, tokenize


def preprocess_text(text: str) -> str:
    """Replace literal ``\\n`` marker sequences and real line breaks with a
    single space.  Idempotent."""
    return text.replace("\\n", " ").replace("\n", " ").replace("\r", " ")


@dataclass(frozen=True)
class Dataset:
    examples: tuple[TextInput, ...]
    label_set: LabelSet
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        for ex in self.examples:
            if ex.label is not None and ex.label not in self.label_set.labels:
                raise UnknownLabel(f"label {ex.label!r} not in {self.label_set.labels}")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i: int) -> TextInput:
        return self.examples[i]

    def labels(self) -> tuple[str, ...]:
        missing = [i for i, ex in enumerate(self.examples) if ex.label is None]
        if missing:
            raise DataError(f"dataset {self.name!r} has unlabeled examples (first: {missing[0]})")
        return tuple(ex.label for ex in self.examples)

    def label_counts(self) -> dict[str, int]:
        counts = {l: 0 for l in self.label_set}
        for ex in self.examples:
            if ex.label is not None:
                counts[ex.label] += 1
        return counts


def load_jsonl(path: str | Path, label_set: LabelSet, name: str = "") -> Dataset:
    """Read ``{"text_a": ..., "text_b": ..., "label": ...}`` records."""
    path = Path(path)
    examples: list[TextInput] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(str(e), line=lineno) from e
            if not isinstance(record, dict) or "text_a" not in record:
                raise ParseError("record must be an object with a 'text_a' field", line=lineno)
            segments = [tokenize(preprocess_text(str(record["text_a"])))]
            if record.get("text_b") is not None:
                segments.append(tokenize(preprocess_text(str(record["text_b"]))))
            label = record.get("label")
            if label is not None:
                label = str(label)
                if label not in label_set.labels:
                    raise UnknownLabel(f"line {lineno}: label {label!r} not in {label_set.labels}")
            examples.append(TextInput(tuple(segments), label=label))
    return Dataset(tuple(examples), label_set, name=name or path.stem)


def save_jsonl(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in dataset:
            record: dict = {"text_a": " ".join(ex.segments[0])}
            if len(ex.segments) > 1:
                record["text_b"] = " ".join(ex.segments[1])
            if ex.label is not None:
                record["label"] = ex.label
            fh.write(json.dumps(record) + "\n")


def build_few_shot_split(
    full: Dataset, t: int, unlabeled_per_label: int
) -> tuple[Dataset, Dataset]:
    """Take the first ``t/|labels|`` examples per label (file order) as the
    labeled set and the next ``unlabeled_per_label`` per label, stripped of
    labels, as the unlabeled pool.  The two are disjoint by construction."""
    n_labels = len(full.label_set)
    if t % n_labels != 0:
        raise DataError(f"t={t} is not divisible by the number of labels ({n_labels})")
    per_label = t // n_labels

    taken: dict[str, list[TextInput]] = {l: [] for l in full.label_set}
    pool: dict[str, list[TextInput]] = {l: [] for l in full.label_set}
    for ex in full:
        if ex.label is None:
            continue
        if len(taken[ex.label]) < per_label:
            taken[ex.label].append(ex)
        elif len(pool[ex.label]) < unlabeled_per_label:
            pool[ex.label].append(ex)
    for label in full.label_set:
        if len(taken[label]) < per_label:
            raise InsufficientExamples(
                f"label {label!r}: need {per_label} labeled examples, found {len(taken[label])}"
            )
        if len(pool[label]) < unlabeled_per_label:
            raise InsufficientExamples(
                f"label {label!r}: need {unlabeled_per_label} pool examples after the "
                f"labeled split, found {len(pool[label])}"
            )

    train = [ex for l in full.label_set for ex in taken[l]]
    unlabeled = [
        TextInput(ex.segments, label=None) for l in full.label_set for ex in pool[l]
    ]
    return (
        Dataset(tuple(train), full.label_set, name=f"{full.name}-train"),
        Dataset(tuple(unlabeled), full.label_set, name=f"{full.name}-unlabeled"),
    )


# -- metrics -----------------------------------------------------------------


def accuracy(pred: list[str], gold: list[str]) -> float:
    if len(pred) != len(gold):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(gold)} gold labels")
    if not gold:
        raise LengthMismatch("empty inputs")
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


def macro_f1(pred: list[str], gold: list[str], over: list[str] | None = None) -> float:
    """Macro-average of per-label F1.  A label with zero predicted and zero
    gold positives contributes F1 = 0."""
    if len(pred) != len(gold):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(gold)} gold labels")
    if not gold:
        raise LengthMismatch("empty inputs")
    if over is None:
        seen: list[str] = []
        for l in list(gold) + list(pred):
            if l not in seen:
                seen.append(l)
        over = seen
    scores = []
    for label in over:
        tp = sum(p == label and g == label for p, g in zip(pred, gold))
        fp = sum(p == label and g != label for p, g in zip(pred, gold))
        fn = sum(p != label and g == label for p, g in zip(pred, gold))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return sum(scores) / len(scores)


# -- synthetic tasks ------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Generative recipe for a desk-scale classification task.

    Each example holds ``signal_slots`` signal tokens per segment-0 sequence;
    a slot carries a token from the true label's signal set with probability
    ``1 - noise_rate`` and from another label's set otherwise.  Remaining
    positions are uniform filler, so the Bayes rule depends only on the
    signal tokens.
    """

    label_count: int = 2
    vocab_size: int = 40  # filler tokens
    signal_tokens_per_label: int = 8
    noise_rate: float = 0.1
    segment_arity: int = 1
    seed: int = 0
    segment_length: int = 8
    signal_slots: int = 2

    def __post_init__(self):
        if not (0.0 <= self.noise_rate < 1.0):
            raise DataError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if self.label_count < 2 or self.signal_tokens_per_label < 1:
            raise DataError("need >= 2 labels and >= 1 signal token per label")
        if self.signal_slots > self.segment_length:
            raise DataError("signal_slots cannot exceed segment_length")


@dataclass(frozen=True)
class SyntheticTask:
    spec: SyntheticTaskSpec
    label_set: LabelSet
    train: Dataset
    unlabeled: Dataset
    test: Dataset
    signal_tokens: dict[str, tuple[str, ...]]
    filler_tokens: tuple[str, ...]
    verbalizer_tokens: tuple[str, ...]
    patterns: tuple[Pattern, ...] = field(default_factory=tuple)
    verbalizer: Verbalizer | None = None

    def all_tokens(self) -> tuple[str, ...]:
        """Every token the task can produce, in canonical order."""
        sig = tuple(t for l in self.label_set for t in self.signal_tokens[l])
        return sig + self.filler_tokens + self.verbalizer_tokens

    def bayes_label(self, example: TextInput) -> str:
        """Bayes-optimal label under the generative model; ties broken by
        canonical label order."""
        owners = {t: l for l, ts in self.signal_tokens.items() for t in ts}
        spec = self.spec
        k, s = spec.label_count, spec.signal_tokens_per_label
        own = math.log((1.0 - spec.noise_rate) / s) if spec.noise_rate < 1.0 else -math.inf
        other = (
            math.log(spec.noise_rate / ((k - 1) * s)) if spec.noise_rate > 0.0 else -math.inf
        )
        best_label, best_ll = None, None
        for label in self.label_set:
            ll = 0.0
            for segment in example.segments:
                for tok in segment:
                    owner = owners.get(tok)
                    if owner is None:
                        continue
                    ll += own if owner == label else other
            if best_ll is None or ll > best_ll + 1e-12:
                best_label, best_ll = label, ll
        return best_label

    def analytic_bayes_accuracy(self) -> float:
        """Exact accuracy of the Bayes rule, by enumeration over contamination
        outcomes (no sampling involved)."""
        spec = self.spec
        k, p, slots = spec.label_count, spec.noise_rate, spec.signal_slots
        labels = list(range(k))
        # own-signal likelihood (1-p)/s vs foreign p/((k-1)s): compare exactly
        own_vs_other = (1.0 - p) * (k - 1) - p
        total = 0.0
        for true in labels:
            # each slot draws an owner: `true` w.p. 1-p, each other w.p. p/(k-1)
            for owners in product(labels, repeat=slots):
                prob = 1.0
                for o in owners:
                    prob *= (1.0 - p) if o == true else p / (k - 1)
                counts = [owners.count(l) for l in labels]
                if own_vs_other > 0:
                    predicted = counts.index(max(counts))  # canonical tie break
                elif own_vs_other < 0:
                    predicted = counts.index(min(counts))
                else:
                    predicted = 0  # all posteriors equal
                if predicted == true:
                    total += prob
        return total / k


def generate_synthetic_task(
    spec: SyntheticTaskSpec,
    n_train: int,
    n_unlabeled: int,
    n_test: int,
    name: str = "synthetic",
) -> SyntheticTask:
    """Deterministically generate a labeled/unlabeled/test triple plus the
    natural cloze patterns and verbalizer for the task."""
    rng = np.random.default_rng(spec.seed)
    labels = tuple(f"L{i}" for i in range(spec.label_count))
    label_set = LabelSet(labels)

    signal = {
        l: tuple(f"sig{i}_{j}" for j in range(spec.signal_tokens_per_label))
        for i, l in enumerate(labels)
    }
    fillers = tuple(f"w{j}" for j in range(spec.vocab_size))
    verb_tokens = tuple(f"label{i}" for i in range(spec.label_count))
    owners_flat = [(l, t) for l in labels for t in signal[l]]

    def draw_example(label: str | None, true_label: str) -> TextInput:
        segments = []
        for seg_idx in range(spec.segment_arity):
            toks = list(rng.choice(fillers, size=spec.segment_length))
            if seg_idx == 0:
                positions = sorted(
                    rng.choice(spec.segment_length, size=spec.signal_slots, replace=False)
                )
                for pos in positions:
                    if rng.random() >= spec.noise_rate:
                        toks[pos] = signal[true_label][rng.integers(spec.signal_tokens_per_label)]
                    else:
                        others = [t for l, t in owners_flat if l != true_label]
                        toks[pos] = others[rng.integers(len(others))]
            segments.append(tuple(str(t) for t in toks))
        return TextInput(tuple(segments), label=label)

    def draw_dataset(n: int, labeled: bool, tag: str) -> Dataset:
        examples = []
        for i in range(n):
            true = labels[i % len(labels)]  # balanced, round-robin
            examples.append(draw_example(true if labeled else None, true))
        return Dataset(tuple(examples), label_set, name=f"{name}-{tag}")

    train = draw_dataset(n_train, True, "train")
    unlabeled = draw_dataset(n_unlabeled, False, "unlabeled")
    test = draw_dataset(n_test, True, "test")

    patterns = tuple(
        parse_pattern_dsl(p)
        for p in ("{0} {mask}", "{mask} : {0}")
    )
    verbalizer = Verbalizer({l: verb_tokens[i] for i, l in enumerate(labels)})

    return SyntheticTask(
        spec=spec,
        label_set=label_set,
        train=train,
        unlabeled=unlabeled,
        test=test,
        signal_tokens=signal,
        filler_tokens=fillers,
        verbalizer_tokens=verb_tokens,
        patterns=patterns,
        verbalizer=verbalizer,
    )


def token_frequencies(*datasets: Dataset) -> dict[str, int]:
    """Occurrence counts over the given datasets (the unlabeled pool, usually)."""
    counts: dict[str, int] = {}
    for dataset in datasets:
        for ex in dataset:
            for segment in ex.segments:
                for tok in segment:
                    counts[tok] = counts.get(tok, 0) + 1
    return counts
