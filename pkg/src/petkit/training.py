"""Per-pattern finetuning on the small labeled set, with an auxiliary
masked-LM objective over pattern-formatted unlabeled data."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backends.base import (
    LabeledMaskExample,
    LossReport,
    MlmBackend,
    MlmExample,
    ParamSnapshot,
)
from .data import Dataset, accuracy
from .errors import EmptyTrainSet, SnapshotUnsupported, VocabularyError
from .pvp import MaskedSequence, Pvp, TextInput, apply_pattern


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1e-4
    steps: int = 1000
    labeled_per_batch: int = 1
    unlabeled_per_batch: int = 3
    learning_rate: float = 1e-5
    lr_multiplier: float = 1000.0  # toy-scale factor; set 1.0 for real backends
    mlm_mask_prob: float = 0.15
    seed: int = 0
    max_seq_length: int = 256

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.mlm_mask_prob <= 1.0):
            raise ValueError("mlm_mask_prob must be in [0, 1]")
        if self.steps < 0 or self.unlabeled_per_batch < 0:
            raise ValueError("counts must be >= 0")
        if self.labeled_per_batch < 1:
            raise ValueError("labeled_per_batch must be >= 1")

    @property
    def effective_learning_rate(self) -> float:
        return self.learning_rate * self.lr_multiplier


@dataclass
class TrainedPvpModel:
    """One finetuned backend copy for one pattern-verbalizer pair."""

    pvp: Pvp
    backend: MlmBackend
    seed: int
    id: str
    train_log: tuple[LossReport, ...] = ()
    initial_snapshot: ParamSnapshot | None = None
    initial_train_accuracy: float | None = None
    max_seq_length: int = 256


def derive_seed(*parts) -> int:
    """Stable sub-seed from heterogeneous parts (ints, strings)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def render_cloze(pvp: Pvp, x: TextInput, max_seq_length: int) -> MaskedSequence:
    return apply_pattern(pvp.pattern, x, max_seq_length)


def score_pvp(
    backend: MlmBackend, pvp: Pvp, x: TextInput, max_seq_length: int
) -> np.ndarray:
    """Raw label scores: the backend's score of each label's verbalization at
    the mask (mean over the group when a label has several)."""
    seq = render_cloze(pvp, x, max_seq_length)
    groups = pvp.candidate_groups()
    flat = tuple(t for g in groups for t in g)
    scores = backend.score_candidates(seq, flat)
    out = np.empty(len(groups))
    i = 0
    for g, group in enumerate(groups):
        out[g] = scores[i : i + len(group)].mean()
        i += len(group)
    return out


def pvp_probabilities(
    backend: MlmBackend, pvp: Pvp, x: TextInput, max_seq_length: int
) -> np.ndarray:
    scores = score_pvp(backend, pvp, x, max_seq_length)
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def predict_pvp(model: TrainedPvpModel, x: TextInput) -> str:
    scores = score_pvp(model.backend, model.pvp, x, model.max_seq_length)
    return model.pvp.label_set.labels[int(np.argmax(scores))]


def evaluate_pvp(model: TrainedPvpModel, dataset: Dataset) -> float:
    """Accuracy of the argmax label; ties resolve to the earlier label."""
    gold = list(dataset.labels())
    pred = [predict_pvp(model, x) for x in dataset]
    return accuracy(pred, gold)


def mask_for_mlm(
    seq: MaskedSequence, prob: float, rng: np.random.Generator
) -> MlmExample:
    """Independently replace each non-slot token by the mask with probability
    ``prob``; the pattern's own mask slot is never a target."""
    tokens = list(seq.tokens)
    targets: list[tuple[int, str]] = []
    for i, tok in enumerate(tokens):
        if i == seq.mask_position:
            continue
        if rng.random() < prob:
            targets.append((i, tok))
            tokens[i] = seq.mask_token
    return MlmExample(tuple(tokens), tuple(targets), seq.mask_token)


def _check_verbalizer_tokens(backend: MlmBackend, pvp: Pvp) -> None:
    vocab = backend.vocabulary
    if vocab is None:
        return  # remote backend validates server-side
    missing = [t for t in pvp.verbalizer.all_tokens() if t not in vocab]
    if missing:
        raise VocabularyError(f"verbalizations not in vocabulary: {missing}")


class _EpochCycler:
    """Deterministic cycling through the labeled set, reshuffled per epoch."""

    def __init__(self, items: list, rng: np.random.Generator):
        self._items = items
        self._rng = rng
        self._order: list[int] = []
        self._pos = 0

    def take(self, n: int) -> list:
        out = []
        for _ in range(n):
            if self._pos >= len(self._order):
                self._order = list(self._rng.permutation(len(self._items)))
                self._pos = 0
            out.append(self._items[self._order[self._pos]])
            self._pos += 1
        return out


def finetune_pvp(
    pvp: Pvp,
    train_set: Dataset,
    unlabeled: Dataset,
    config: TrainConfig,
    backend_factory,
    repetition: int = 0,
) -> TrainedPvpModel:
    """Train one fresh backend copy for ``pvp``.

    Each step draws ``labeled_per_batch`` examples by seeded epoch cycling
    from the labeled set and ``unlabeled_per_batch`` examples uniformly (with
    replacement) from the pool; pool examples are pattern-formatted and then
    randomly masked for the auxiliary objective.
    """
    if len(train_set) == 0:
        raise EmptyTrainSet("labeled training set is empty")
    train_set.labels()  # raises if any example is unlabeled

    backend: MlmBackend = backend_factory(derive_seed(config.seed, pvp.id, repetition, "init"))
    _check_verbalizer_tokens(backend, pvp)

    seed = derive_seed(config.seed, pvp.id, repetition)
    rng = np.random.default_rng(seed)
    model_id = f"{pvp.id}~r{repetition}"

    initial_snapshot: ParamSnapshot | None
    try:
        initial_snapshot = backend.snapshot()
    except SnapshotUnsupported:
        initial_snapshot = None

    model = TrainedPvpModel(
        pvp=pvp,
        backend=backend,
        seed=seed,
        id=model_id,
        initial_snapshot=initial_snapshot,
        max_seq_length=config.max_seq_length,
    )
    # zero-shot training-set accuracy, recorded before any update ("before
    # training"); this is what the weighted ensemble variant uses
    model.initial_train_accuracy = evaluate_pvp(model, train_set)

    groups = pvp.candidate_groups()
    labeled_examples = [
        LabeledMaskExample(
            seq=render_cloze(pvp, x, config.max_seq_length),
            candidate_groups=groups,
            target_index=pvp.label_set.index(x.label),
        )
        for x in train_set
    ]
    pool_renders: dict[int, MaskedSequence] = {}

    cycler = _EpochCycler(labeled_examples, rng)
    log: list[LossReport] = []
    for _ in range(config.steps):
        batch_labeled = cycler.take(config.labeled_per_batch)
        batch_mlm: list[MlmExample] = []
        if len(unlabeled) > 0:
            for _ in range(config.unlabeled_per_batch):
                idx = int(rng.integers(len(unlabeled)))
                if idx not in pool_renders:
                    pool_renders[idx] = render_cloze(pvp, unlabeled[idx], config.max_seq_length)
                batch_mlm.append(mask_for_mlm(pool_renders[idx], config.mlm_mask_prob, rng))
        report = backend.train_step_combined(
            batch_labeled, batch_mlm, config.alpha, config.effective_learning_rate
        )
        log.append(report)

    model.train_log = tuple(log)
    return model


def finetune_all(
    pvps,
    train_set: Dataset,
    unlabeled: Dataset,
    config: TrainConfig,
    backend_factory,
    repetitions: int = 3,
    jobs: int = 1,
) -> list[TrainedPvpModel]:
    """All (pvp, repetition) models; order is deterministic regardless of
    ``jobs``.  Each model trains on its own backend instance."""
    specs = [(pvp, rep) for pvp in pvps for rep in range(repetitions)]
    if jobs <= 1:
        return [
            finetune_pvp(pvp, train_set, unlabeled, config, backend_factory, rep)
            for pvp, rep in specs
        ]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(finetune_pvp, pvp, train_set, unlabeled, config, backend_factory, rep)
            for pvp, rep in specs
        ]
        return [f.result() for f in futures]


def write_train_log(model: TrainedPvpModel, path: str | Path) -> None:
    """Line-delimited ``{"step": ..., "l_ce": ..., "l_mlm": ..., "l_total": ...}``."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for step, report in enumerate(model.train_log):
            fh.write(
                json.dumps(
                    {
                        "step": step,
                        "l_ce": report.l_ce,
                        "l_mlm": report.l_mlm,
                        "l_total": report.l_total,
                    }
                )
                + "\n"
            )
