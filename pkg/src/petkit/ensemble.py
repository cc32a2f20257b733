"""Combining per-pattern models into soft labels, and distilling them into a
standard classifier."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends.base import MlmBackend
from .data import Dataset, accuracy
from .errors import (
    EmptySoftDataset,
    EmptyTrainSet,
    EmptyUnlabeled,
    MixedScoreConventions,
    PetkitError,
    ScoringError,
    SnapshotUnavailable,
    ZeroTotalWeight,
)
from .pvp import LabelSet, TextInput
from .training import TrainedPvpModel, evaluate_pvp, score_pvp


@dataclass(frozen=True)
class EnsembleConfig:
    weighting: str = "uniform"  # "uniform" | "weighted"
    temperature: float = 2.0

    def __post_init__(self):
        if self.weighting not in ("uniform", "weighted"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class PvpWeight:
    model_id: str
    w: float

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("weights must be >= 0")


@dataclass(frozen=True, eq=False)
class SoftLabeledExample:
    input: TextInput
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        object.__setattr__(self, "q", q)
        if (q < 0).any() or abs(q.sum() - 1.0) > 1e-9:
            raise ValueError(f"q must be a probability vector, got {q}")


def compute_weights(
    models: list[TrainedPvpModel], train_set: Dataset, config: EnsembleConfig
) -> list[PvpWeight]:
    """Uniform: 1 for every model.  Weighted: each model's zero-shot accuracy
    on the training set with its *initial* (pre-finetuning) parameters."""
    if config.weighting == "uniform":
        return [PvpWeight(m.id, 1.0) for m in models]
    weights = []
    for model in models:
        weights.append(PvpWeight(model.id, _initial_accuracy(model, train_set)))
    return weights


def _initial_accuracy(model: TrainedPvpModel, train_set: Dataset) -> float:
    if model.initial_train_accuracy is not None:
        return model.initial_train_accuracy
    if model.initial_snapshot is not None:
        current = model.backend.snapshot()
        try:
            model.backend.restore(model.initial_snapshot)
            return evaluate_pvp(model, train_set)
        finally:
            model.backend.restore(current)
    if not model.backend.capabilities.trainable:
        # parameters cannot have changed since creation
        return evaluate_pvp(model, train_set)
    raise SnapshotUnavailable(
        f"model {model.id}: weighted ensembling needs a pre-training snapshot "
        "or a recorded zero-shot accuracy"
    )


def _check_compatible(models: list[TrainedPvpModel]) -> None:
    first = models[0]
    for model in models[1:]:
        if model.pvp.label_set.labels != first.pvp.label_set.labels:
            raise PetkitError("ensemble models must share one label set")
        if (
            model.backend.capabilities.score_convention
            != first.backend.capabilities.score_convention
        ):
            raise MixedScoreConventions(
                "refusing to average raw scores across backends with different "
                "score conventions"
            )


def ensemble_scores(
    models: list[TrainedPvpModel],
    weights: list[PvpWeight],
    x: TextInput,
) -> np.ndarray:
    """Weighted mean of the models' raw label scores, normalized by the total
    weight."""
    if not models:
        raise PetkitError("empty ensemble")
    _check_compatible(models)
    by_id = {w.model_id: w.w for w in weights}
    total = 0.0
    acc = np.zeros(len(models[0].pvp.label_set))
    for model in models:
        if model.id not in by_id:
            raise PetkitError(f"no weight for model {model.id}")
        w = by_id[model.id]
        total += w
        if w != 0.0:
            acc += w * score_pvp(model.backend, model.pvp, x, model.max_seq_length)
    if total <= 0.0:
        raise ZeroTotalWeight("ensemble weights sum to zero")
    return acc / total


def soft_label(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-softened softmax of raw scores."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    scaled = np.asarray(scores, dtype=float) / temperature
    shifted = scaled - scaled.max()
    e = np.exp(shifted)
    return e / e.sum()


def build_soft_dataset(
    models: list[TrainedPvpModel],
    weights: list[PvpWeight],
    unlabeled: Dataset,
    config: EnsembleConfig,
) -> list[SoftLabeledExample]:
    if len(unlabeled) == 0:
        raise EmptyUnlabeled("unlabeled pool is empty")
    out = []
    for i, x in enumerate(unlabeled):
        try:
            scores = ensemble_scores(models, weights, x)
            out.append(SoftLabeledExample(x, soft_label(scores, config.temperature)))
        except (ZeroTotalWeight, MixedScoreConventions):
            raise
        except PetkitError as e:
            raise ScoringError(i, e) from e
    return out


def save_soft_dataset(soft: list[SoftLabeledExample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in soft:
            fh.write(
                json.dumps(
                    {
                        "segments": [list(s) for s in ex.input.segments],
                        "q": [float(v) for v in ex.q],
                    }
                )
                + "\n"
            )


def load_soft_dataset(path: str | Path) -> list[SoftLabeledExample]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            out.append(
                SoftLabeledExample(
                    TextInput(tuple(tuple(s) for s in record["segments"])),
                    np.array(record["q"], dtype=float),
                )
            )
    return out


def train_final_classifier(
    soft: list[SoftLabeledExample],
    backend_factory,
    steps: int = 5000,
    learning_rate: float = 1e-2,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[MlmBackend, list[float]]:
    """Finetune a fresh backend's classification head (and body) on the
    soft-labeled set; batches are drawn by seeded epoch shuffling."""
    if not soft:
        raise EmptySoftDataset("nothing to distill from")
    from .training import _EpochCycler, derive_seed

    classifier: MlmBackend = backend_factory(derive_seed(seed, "classifier-init"))
    classifier.init_head(len(soft[0].q))

    rng = np.random.default_rng(seed)
    cycler = _EpochCycler(soft, rng)
    losses = []
    for _ in range(steps):
        batch = [(ex.input, ex.q) for ex in cycler.take(min(batch_size, len(soft)))]
        losses.append(classifier.train_step_soft(batch, learning_rate))
    return classifier, losses


def one_hot(label: str, label_set: LabelSet) -> np.ndarray:
    q = np.zeros(len(label_set))
    q[label_set.index(label)] = 1.0
    return q


def train_supervised(
    train_set: Dataset,
    backend_factory,
    steps: int = 250,
    learning_rate: float = 1e-2,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[MlmBackend, list[float]]:
    """Plain classification-head baseline on the labeled set (one-hot soft
    labels through the same code path)."""
    if len(train_set) == 0:
        raise EmptyTrainSet("labeled training set is empty")
    soft = [
        SoftLabeledExample(x, one_hot(x.label, train_set.label_set)) for x in train_set
    ]
    return train_final_classifier(
        soft, backend_factory, steps=steps, learning_rate=learning_rate,
        batch_size=batch_size, seed=seed,
    )


def classify_dataset(
    classifier: MlmBackend, dataset: Dataset, label_set: LabelSet
) -> list[str]:
    preds = []
    for x in dataset:
        probs = classifier.classify(x)
        preds.append(label_set.labels[int(np.argmax(probs))])
    return preds


def evaluate_classifier(
    classifier: MlmBackend, dataset: Dataset, label_set: LabelSet
) -> float:
    return accuracy(classify_dataset(classifier, dataset, label_set), list(dataset.labels()))
