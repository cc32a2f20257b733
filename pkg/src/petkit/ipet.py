"""Iterative training: generations of models trained on datasets grown by a
constant factor and labeled by random subsets of the previous generation,
plus the zero-shot bootstrap."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backends.base import MlmBackend, ParamSnapshot
from .data import Dataset
from .ensemble import (
    EnsembleConfig,
    SoftLabeledExample,
    build_soft_dataset,
    compute_weights,
    evaluate_classifier,
    train_final_classifier,
)
from .errors import PetkitError, TooFewModels, UnlabeledTooSmall
from .pvp import LabelSet, Pvp, TextInput
from .training import (
    TrainConfig,
    TrainedPvpModel,
    derive_seed,
    evaluate_pvp,
    finetune_pvp,
    score_pvp,
)


@dataclass(frozen=True)
class IpetConfig:
    lam: float = 0.25  # fraction of other previous-generation models that annotate
    d: int = 5
    target_examples: int = 1000
    zero_shot: bool = False
    seed: int = 0
    repetitions: int = 3
    size_schedule: tuple[int, ...] | None = None  # per-generation multipliers
    zero_shot_examples: int = 10  # first-generation total in zero-shot mode
    top_pool: int = 100
    bootstrap_pretrain_steps: int = 0  # MLM-only warmup for untrained models

    def __post_init__(self):
        if not (0.0 < self.lam <= 1.0):
            raise ValueError("lam must be in (0, 1]")
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.size_schedule is not None:
            sched = tuple(int(m) for m in self.size_schedule)
            if any(b <= a for a, b in zip(sched, sched[1:])):
                raise ValueError("size_schedule must be strictly increasing")
            object.__setattr__(self, "size_schedule", sched)


def compute_k(train_size: int, target: int, d: int) -> int:
    """Smallest k >= 0 with ``train_size * d**k >= target`` (i.e. the ceiling
    of log_d(target / train_size)), in exact integer arithmetic."""
    if train_size <= 0:
        raise ValueError("train_size must be positive")
    k, size = 0, train_size
    while size < target:
        size *= d
        k += 1
    return k


@dataclass(frozen=True, eq=False)
class AnnotatedExample:
    """One pool example scored by an annotator subset."""

    index: int
    input: TextInput
    label: str  # argmax of the combined scores
    confidence: float  # softmax probability of the assigned label
    scores: np.ndarray  # combined raw label scores
    probs: np.ndarray


@dataclass
class GenerationState:
    generation: int
    datasets: list[Dataset]  # per-model training sets
    models: list[TrainedPvpModel]
    label_counts: dict[str, int]  # exact per-label counts shared by all sets


def select_annotators(
    previous: list,
    exclude: int,
    lam: float,
    rng: np.random.Generator,
) -> list:
    """Uniformly choose ``ceil(lam * (n-1))`` distinct models from the
    previous generation, never including the excluded one (min 1)."""
    n = len(previous)
    if n < 2:
        raise TooFewModels(f"need at least 2 models, have {n}")
    count = max(1, math.ceil(lam * (n - 1)))
    others = [m for i, m in enumerate(previous) if i != exclude]
    picked = rng.choice(len(others), size=count, replace=False)
    return [others[i] for i in sorted(picked)]


def _model_scores(
    model: TrainedPvpModel, unlabeled: Dataset, cache: dict | None
) -> np.ndarray:
    """Raw label scores of one model over the whole pool, cached by model id."""
    if cache is not None and model.id in cache:
        return cache[model.id]
    scores = np.stack(
        [score_pvp(model.backend, model.pvp, x, model.max_seq_length) for x in unlabeled]
    )
    if cache is not None:
        cache[model.id] = scores
    return scores


def annotate_pool(
    annotators: list[TrainedPvpModel],
    unlabeled: Dataset,
    score_cache: dict | None = None,
) -> list[AnnotatedExample]:
    """Label every pool example with the argmax of the annotators' mean raw
    scores (ties to the earlier label); confidence is the softmax probability
    of the assigned label."""
    if not annotators:
        raise PetkitError("empty annotator set")
    label_set = annotators[0].pvp.label_set
    combined = np.mean(
        [_model_scores(m, unlabeled, score_cache) for m in annotators], axis=0
    )
    out = []
    for i, x in enumerate(unlabeled):
        scores = combined[i]
        shifted = scores - scores.max()
        probs = np.exp(shifted)
        probs /= probs.sum()
        best = int(np.argmax(scores))
        out.append(
            AnnotatedExample(
                index=i,
                input=x,
                label=label_set.labels[best],
                confidence=float(probs[best]),
                scores=scores,
                probs=probs,
            )
        )
    return out


def grow_to_counts(
    train: Dataset,
    annotated: list[AnnotatedExample],
    target_counts: dict[str, int],
    rng: np.random.Generator,
    label_set: LabelSet | None = None,
) -> Dataset:
    """``train`` plus pool examples drawn per label, without replacement,
    with probability proportional to confidence, until each label reaches its
    target count exactly.

    If a label lacks argmax examples, the shortfall is topped up with the
    not-yet-drawn examples scoring highest for that label regardless of their
    argmax (the same remedy the zero-shot bootstrap uses).
    """
    label_set = label_set or train.label_set
    c0 = {l: 0 for l in label_set}
    for ex in train:
        c0[ex.label] += 1

    drawn: set[int] = set()
    extras: list[TextInput] = []
    for li, label in enumerate(label_set):
        need = target_counts[label] - c0[label]
        if need < 0:
            raise PetkitError(
                f"label {label!r}: target {target_counts[label]} below the "
                f"labeled set's own count {c0[label]}"
            )
        if need == 0:
            continue
        cands = [a for a in annotated if a.label == label and a.index not in drawn]
        take: list[AnnotatedExample] = []
        if cands:
            k = min(need, len(cands))
            weights = np.array([a.confidence for a in cands])
            weights = weights / weights.sum()
            picked = rng.choice(len(cands), size=k, replace=False, p=weights)
            take = [cands[i] for i in picked]
        if len(take) < need:
            chosen = drawn | {a.index for a in take}
            rest = [a for a in annotated if a.index not in chosen]
            rest.sort(key=lambda a: (-a.scores[li], a.index))
            take.extend(rest[: need - len(take)])
        if len(take) < need:
            raise UnlabeledTooSmall(
                f"label {label!r}: need {need} examples, pool offers {len(take)}"
            )
        drawn.update(a.index for a in take)
        extras.extend(TextInput(a.input.segments, label=label) for a in take)

    examples = tuple(train.examples) + tuple(extras)
    return Dataset(examples, label_set, name=f"{train.name}+grown")


def grow_training_set(
    train: Dataset,
    annotated: list[AnnotatedExample],
    c_prev: dict[str, int],
    d: int,
    rng: np.random.Generator,
) -> Dataset:
    """One growth step: per-label targets ``d * c_prev(l)``."""
    ratios = {
        l: c_prev[l] / max(c, 1)
        for l, c in train.label_counts().items()
        if c > 0 and l in c_prev
    }
    if ratios and len(set(ratios.values())) > 1:
        raise PetkitError(f"c_prev does not preserve the label ratio: {c_prev}")
    targets = {l: d * c_prev[l] for l in c_prev}
    return grow_to_counts(train, annotated, targets, rng)


# -- zero-shot bootstrap -----------------------------------------------------


def make_initial_model(
    pvp: Pvp,
    repetition: int,
    backend_factory,
    config: TrainConfig,
    unlabeled: Dataset | None = None,
    pretrain_steps: int = 0,
) -> TrainedPvpModel:
    """An un-finetuned model: fresh backend, optionally warmed up with
    MLM-only steps over the pool (the analog of starting from a pretrained
    LM; a raw-random toy model carries no signal)."""
    backend: MlmBackend = backend_factory(derive_seed(config.seed, pvp.id, repetition, "init"))
    model = TrainedPvpModel(
        pvp=pvp,
        backend=backend,
        seed=derive_seed(config.seed, pvp.id, repetition),
        id=f"{pvp.id}~r{repetition}",
        max_seq_length=config.max_seq_length,
    )
    if pretrain_steps > 0 and unlabeled is not None and len(unlabeled) > 0:
        if backend.capabilities.trainable:
            from .training import mask_for_mlm, render_cloze

            rng = np.random.default_rng(derive_seed(config.seed, pvp.id, repetition, "mlm"))
            renders: dict[int, object] = {}
            for _ in range(pretrain_steps):
                batch = []
                for _ in range(max(1, config.unlabeled_per_batch)):
                    idx = int(rng.integers(len(unlabeled)))
                    if idx not in renders:
                        renders[idx] = render_cloze(pvp, unlabeled[idx], config.max_seq_length)
                    batch.append(mask_for_mlm(renders[idx], config.mlm_mask_prob, rng))
                backend.train_step_combined(
                    [], batch, alpha=1.0, learning_rate=config.effective_learning_rate
                )
    return model


def bootstrap_zero_shot(
    models: list[TrainedPvpModel],
    unlabeled: Dataset,
    config: IpetConfig,
) -> list[Dataset]:
    """First-generation training sets from untrained models: for each model,
    an annotator subset scores the pool; per label, ``ceil(10/|L|)`` examples
    are sampled from the 100 highest-scoring for that label (even when the
    label is not the argmax), weighted by confidence."""
    if len(unlabeled) < config.top_pool:
        raise UnlabeledTooSmall(
            f"zero-shot bootstrap needs at least {config.top_pool} pool examples, "
            f"have {len(unlabeled)}"
        )
    label_set = models[0].pvp.label_set
    per_label = math.ceil(config.zero_shot_examples / len(label_set))
    cache: dict = {}
    datasets = []
    for i in range(len(models)):
        rng = np.random.default_rng(derive_seed(config.seed, "bootstrap", i))
        annotators = select_annotators(models, i, config.lam, rng)
        annotated = annotate_pool(annotators, unlabeled, score_cache=cache)
        drawn: set[int] = set()
        examples: list[TextInput] = []
        for li, label in enumerate(label_set):
            ranked = sorted(annotated, key=lambda a: (-a.scores[li], a.index))
            pool = [a for a in ranked[: config.top_pool] if a.index not in drawn]
            weights = np.array([a.probs[li] for a in pool])
            weights = weights / weights.sum()
            picked = rng.choice(len(pool), size=per_label, replace=False, p=weights)
            for j in picked:
                drawn.add(pool[j].index)
                examples.append(TextInput(pool[j].input.segments, label=label))
        datasets.append(Dataset(tuple(examples), label_set, name=f"bootstrap-{i}"))
    return datasets


# -- orchestration ---------------------------------------------------------------


@dataclass
class GenerationReport:
    generation: int
    per_label_count: dict[str, int]
    dataset_size: int
    model_accuracies: list[float] | None = None
    mean_accuracy: float | None = None


@dataclass
class IpetResult:
    generations: list[GenerationState]
    reports: list[GenerationReport]
    soft_dataset: list[SoftLabeledExample]
    classifier: MlmBackend
    classifier_accuracy: float | None = None


def _schedule(config: IpetConfig, base_total: int) -> tuple[int, ...]:
    """Per-generation multipliers over the base per-label counts."""
    if config.size_schedule is not None:
        return config.size_schedule
    if config.zero_shot:
        gens = 1 + compute_k(config.zero_shot_examples, config.target_examples, config.d)
        return tuple(config.d ** j for j in range(gens))  # 1, d, d^2, ...
    k = compute_k(base_total, config.target_examples, config.d)
    return tuple(config.d ** j for j in range(1, k + 1))


def run_ipet(
    train: Dataset,
    unlabeled: Dataset,
    pvps: list[Pvp],
    config: IpetConfig,
    train_config: TrainConfig,
    ensemble_config: EnsembleConfig,
    backend_factory,
    eval_set: Dataset | None = None,
    distill_steps: int = 5000,
    classifier_lr: float | None = None,
    classifier_batch: int = 16,
    run_dir: str | Path | None = None,
    jobs: int = 1,
) -> IpetResult:
    """Train generations of growing datasets, then distill the final
    generation into a classifier.  With ``run_dir`` set, per-generation
    artifacts are persisted and completed generations are resumed."""
    specs = [(pvp, rep) for pvp in pvps for rep in range(config.repetitions)]
    label_set = train.label_set if len(train) else pvps[0].label_set
    persist = _GenerationStore(run_dir, train, unlabeled, backend_factory) if run_dir else None

    def train_generation(
        datasets: list[Dataset], generation: int
    ) -> list[TrainedPvpModel]:
        gen_cfg = replace(train_config, seed=derive_seed(train_config.seed, "generation", generation))
        def worker(i: int) -> TrainedPvpModel:
            pvp, rep = specs[i]
            return finetune_pvp(pvp, datasets[i], unlabeled, gen_cfg, backend_factory, rep)
        if jobs <= 1:
            return [worker(i) for i in range(len(specs))]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(worker, range(len(specs))))

    generations: list[GenerationState] = []
    reports: list[GenerationReport] = []

    # generation 0
    if config.zero_shot:
        if len(train) != 0:
            raise PetkitError("zero-shot mode requires an empty labeled set")
        models0 = [
            make_initial_model(
                pvp, rep, backend_factory, train_config, unlabeled,
                config.bootstrap_pretrain_steps,
            )
            for pvp, rep in specs
        ]
        state0 = GenerationState(0, [train] * len(specs), models0, {l: 0 for l in label_set})
        base_counts = {
            l: math.ceil(config.zero_shot_examples / len(label_set)) for l in label_set
        }
    else:
        if len(train) == 0:
            raise PetkitError("labeled set is empty; use zero_shot mode")
        state0 = persist.load(0, specs) if persist and persist.has(0) else None
        if state0 is None:
            models0 = train_generation([train] * len(specs), 0)
            state0 = GenerationState(0, [train] * len(specs), models0, train.label_counts())
            if persist:
                persist.save(state0)
        base_counts = train.label_counts()

    generations.append(state0)
    reports.append(_report(state0, eval_set))

    multipliers = _schedule(config, len(train) if len(train) else config.zero_shot_examples)

    for j, mult in enumerate(multipliers, start=1):
        if persist and persist.has(j):
            state = persist.load(j, specs)
            if state is not None:
                generations.append(state)
                reports.append(_report(state, eval_set))
                continue
        prev = generations[-1].models
        cache: dict = {}
        datasets: list[Dataset] = []
        if config.zero_shot and j == 1:
            datasets = bootstrap_zero_shot(prev, unlabeled, config)
        else:
            for i in range(len(specs)):
                rng = np.random.default_rng(derive_seed(config.seed, "ipet", j, i))
                annotators = select_annotators(prev, i, config.lam, rng)
                annotated = annotate_pool(annotators, unlabeled, score_cache=cache)
                targets = {l: mult * base_counts[l] for l in label_set}
                datasets.append(
                    grow_to_counts(train, annotated, targets, rng, label_set=label_set)
                )
        models = train_generation(datasets, j)
        counts = datasets[0].label_counts()
        state = GenerationState(j, datasets, models, counts)
        generations.append(state)
        reports.append(_report(state, eval_set))
        if persist:
            persist.save(state)

    final = generations[-1].models
    if len(train) == 0 and ensemble_config.weighting == "weighted":
        ensemble_config = EnsembleConfig("uniform", ensemble_config.temperature)
    weights = compute_weights(final, train, ensemble_config)
    soft = build_soft_dataset(final, weights, unlabeled, ensemble_config)
    classifier, _ = train_final_classifier(
        soft,
        backend_factory,
        steps=distill_steps,
        learning_rate=classifier_lr
        if classifier_lr is not None
        else train_config.effective_learning_rate,
        batch_size=classifier_batch,
        seed=derive_seed(config.seed, "distill"),
    )
    result = IpetResult(
        generations=generations,
        reports=reports,
        soft_dataset=soft,
        classifier=classifier,
    )
    if eval_set is not None:
        result.classifier_accuracy = evaluate_classifier(classifier, eval_set, label_set)
    return result


def _report(state: GenerationState, eval_set: Dataset | None) -> GenerationReport:
    report = GenerationReport(
        generation=state.generation,
        per_label_count=dict(state.label_counts),
        dataset_size=len(state.datasets[0]) if state.datasets else 0,
    )
    if eval_set is not None:
        accs = [evaluate_pvp(m, eval_set) for m in state.models]
        report.model_accuracies = accs
        report.mean_accuracy = float(np.mean(accs))
    return report


class _GenerationStore:
    """Per-generation persistence: dataset manifests plus parameter
    snapshots, enough to resume a run."""

    def __init__(self, root: str | Path, train: Dataset, unlabeled: Dataset, backend_factory):
        self.root = Path(root) / "generations"
        self.root.mkdir(parents=True, exist_ok=True)
        self.train = train
        self.unlabeled = unlabeled
        self.backend_factory = backend_factory
        self._pool_index = {ex.segments: i for i, ex in enumerate(unlabeled)}
        self._train_index = {(ex.segments, ex.label): i for i, ex in enumerate(train)}

    def _dir(self, generation: int) -> Path:
        return self.root / f"gen{generation:02d}"

    def has(self, generation: int) -> bool:
        return (self._dir(generation) / "DONE").exists()

    def save(self, state: GenerationState) -> None:
        gen_dir = self._dir(state.generation)
        gen_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"generation": state.generation, "label_counts": state.label_counts, "models": []}
        for i, (model, dataset) in enumerate(zip(state.models, state.datasets)):
            entry = {
                "id": model.id,
                "seed": model.seed,
                "initial_train_accuracy": model.initial_train_accuracy,
                "examples": [],
            }
            for ex in dataset:
                key = (ex.segments, ex.label)
                if key in self._train_index:
                    entry["examples"].append({"source": "train", "index": self._train_index[key]})
                else:
                    entry["examples"].append(
                        {
                            "source": "pool",
                            "index": self._pool_index[ex.segments],
                            "label": ex.label,
                        }
                    )
            manifest["models"].append(entry)
            try:
                payload = model.backend.snapshot().payload
                if isinstance(payload, dict):
                    arrays = {k: v for k, v in payload.items() if v is not None}
                    np.savez(gen_dir / f"model{i:02d}.npz", **arrays)
            except Exception:
                pass  # backends without snapshots simply cannot be resumed
        (gen_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        (gen_dir / "DONE").write_text("")

    def load(self, generation: int, specs) -> GenerationState | None:
        gen_dir = self._dir(generation)
        manifest = json.loads((gen_dir / "manifest.json").read_text())
        datasets, models = [], []
        label_set = self.train.label_set if len(self.train) else specs[0][0].label_set
        for i, entry in enumerate(manifest["models"]):
            pvp, rep = specs[i]
            examples = []
            for ref in entry["examples"]:
                if ref["source"] == "train":
                    examples.append(self.train[ref["index"]])
                else:
                    pooled = self.unlabeled[ref["index"]]
                    examples.append(TextInput(pooled.segments, label=ref["label"]))
            datasets.append(Dataset(tuple(examples), label_set, name=f"gen{generation}-{i}"))
            snap_path = gen_dir / f"model{i:02d}.npz"
            if not snap_path.exists():
                return None
            arrays = dict(np.load(snap_path))
            payload = {
                "emb": arrays["emb"],
                "out_w": arrays["out_w"],
                "out_b": arrays["out_b"],
                "head_w": arrays.get("head_w"),
                "head_b": arrays.get("head_b"),
            }
            backend = self.backend_factory(0)
            backend.restore(ParamSnapshot(payload))
            model = TrainedPvpModel(
                pvp=pvp,
                backend=backend,
                seed=entry["seed"],
                id=entry["id"],
                initial_train_accuracy=entry.get("initial_train_accuracy"),
            )
            models.append(model)
        counts = {str(k): int(v) for k, v in manifest["label_counts"].items()}
        return GenerationState(generation, datasets, models, counts)
