"""End-to-end recipes shared by the CLI and the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backends.base import MlmBackend
from .data import Dataset, accuracy
from .ensemble import (
    EnsembleConfig,
    PvpWeight,
    SoftLabeledExample,
    build_soft_dataset,
    classify_dataset,
    compute_weights,
    ensemble_scores,
    evaluate_classifier,
    one_hot,
    train_final_classifier,
    train_supervised,
)
from .pvp import Pvp
from .training import TrainConfig, TrainedPvpModel, evaluate_pvp, finetune_all


@dataclass
class PetResult:
    models: list[TrainedPvpModel]
    weights: list[PvpWeight]
    soft: list[SoftLabeledExample]
    classifier: MlmBackend
    report: dict = field(default_factory=dict)


def ensemble_predictions(
    models: list[TrainedPvpModel], weights: list[PvpWeight], dataset: Dataset
) -> list[str]:
    label_set = models[0].pvp.label_set
    return [
        label_set.labels[int(np.argmax(ensemble_scores(models, weights, x)))]
        for x in dataset
    ]


def run_pet(
    train: Dataset,
    unlabeled: Dataset,
    pvps: list[Pvp],
    train_config: TrainConfig,
    ensemble_config: EnsembleConfig,
    backend_factory,
    eval_set: Dataset | None = None,
    repetitions: int = 3,
    distill_steps: int = 5000,
    classifier_lr: float | None = None,
    classifier_batch: int = 16,
    include_train_in_soft: bool = False,
    jobs: int = 1,
) -> PetResult:
    """Finetune one model per (pattern, repetition), soft-label the pool with
    the weighted ensemble, and distill into a classifier."""
    models = finetune_all(
        pvps, train, unlabeled, train_config, backend_factory,
        repetitions=repetitions, jobs=jobs,
    )
    weights = compute_weights(models, train, ensemble_config)
    soft = build_soft_dataset(models, weights, unlabeled, ensemble_config)
    if include_train_in_soft:
        soft = soft + [
            SoftLabeledExample(x, one_hot(x.label, train.label_set)) for x in train
        ]
    classifier, _ = train_final_classifier(
        soft,
        backend_factory,
        steps=distill_steps,
        learning_rate=classifier_lr
        if classifier_lr is not None
        else train_config.effective_learning_rate,
        batch_size=classifier_batch,
        seed=train_config.seed,
    )

    report: dict = {
        "n_models": len(models),
        "weights": {w.model_id: w.w for w in weights},
        "soft_examples": len(soft),
        "per_model_train_accuracy": {
            m.id: evaluate_pvp(m, train) for m in models
        },
    }
    if eval_set is not None:
        per_model = {m.id: evaluate_pvp(m, eval_set) for m in models}
        report["per_model_eval_accuracy"] = per_model
        report["mean_model_eval_accuracy"] = float(np.mean(list(per_model.values())))
        report["ensemble_eval_accuracy"] = accuracy(
            ensemble_predictions(models, weights, eval_set), list(eval_set.labels())
        )
        report["classifier_eval_accuracy"] = evaluate_classifier(
            classifier, eval_set, train.label_set
        )
    return PetResult(models=models, weights=weights, soft=soft, classifier=classifier, report=report)


def run_supervised(
    train: Dataset,
    backend_factory,
    steps: int = 250,
    learning_rate: float = 1e-2,
    batch_size: int = 16,
    seed: int = 0,
    eval_set: Dataset | None = None,
) -> tuple[MlmBackend, dict]:
    classifier, losses = train_supervised(
        train, backend_factory, steps=steps, learning_rate=learning_rate,
        batch_size=batch_size, seed=seed,
    )
    report: dict = {"steps": steps, "final_loss": losses[-1] if losses else None}
    report["train_accuracy"] = evaluate_classifier(classifier, train, train.label_set)
    if eval_set is not None:
        report["eval_accuracy"] = evaluate_classifier(classifier, eval_set, train.label_set)
    return classifier, report
