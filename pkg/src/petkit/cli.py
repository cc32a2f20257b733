"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error.
Every run writes a manifest with the fully resolved parameters; re-running
with ``--from-manifest`` reproduces the numbers bit-exactly on the toy
backend.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import runs
from .avs import (
    AvsConfig,
    AvsScoreCache,
    avs_iterate,
    extract_multi_verbalizer,
    filter_candidates,
    with_multi_verbalizer,
    write_report as write_avs_report,
)
from .backends import RemoteBackend, ToyConfig, ToyMlmBackend, Vocabulary
from .backends.base import build_vocabulary
from .data import Dataset, load_jsonl, token_frequencies
from .ensemble import EnsembleConfig, evaluate_classifier, save_soft_dataset, load_soft_dataset, train_final_classifier
from .errors import BackendError, ConfigError, DataError
from .ipet import IpetConfig, run_ipet
from .pipeline import run_pet, run_supervised
from .task import TaskSpec, load_task_config
from .training import TrainConfig


def _add_common(parser: argparse.ArgumentParser, need_train: bool = True) -> None:
    parser.add_argument("--task", required=True, help="task config file (TOML)")
    if need_train:
        parser.add_argument("--train", required=True, help="labeled JSONL")
    parser.add_argument("--out", required=True, help="run directory")
    parser.add_argument("--backend", default="toy",
                        help="toy | external:cmd:<argv> | external:tcp:<host>:<port>")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-seq-length", type=int, default=256)
    parser.add_argument("--dim", type=int, default=16, help="toy embedding dimension")
    parser.add_argument("--window", type=int, default=8, help="toy context window")
    parser.add_argument("--lr", type=float, default=1e-5)
    parser.add_argument("--lr-multiplier", type=float, default=1000.0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--eval", default=None, help="labeled JSONL for evaluation")
    parser.add_argument("--from-manifest", default=None,
                        help="re-run with the resolved parameters of a previous run")


def _add_pet_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--unlabeled", required=True, help="unlabeled JSONL")
    parser.add_argument("--alpha", type=float, default=1e-4)
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--labeled-per-batch", type=int, default=1)
    parser.add_argument("--unlabeled-per-batch", type=int, default=3)
    parser.add_argument("--mlm-mask-prob", type=float, default=0.15)
    parser.add_argument("--weighting", choices=["uniform", "weighted"], default="weighted")
    parser.add_argument("--temperature", type=float, default=2.0)
    parser.add_argument("--repetitions", type=int, default=3)
    parser.add_argument("--distill-steps", type=int, default=5000)
    parser.add_argument("--classifier-batch", type=int, default=16)
    parser.add_argument("--include-train-in-soft", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_pet = sub.add_parser("pet", help="finetune per-pattern models, soft-label, distill")
    _add_common(p_pet)
    _add_pet_args(p_pet)

    p_ipet = sub.add_parser("ipet", help="iterative training over growing datasets")
    _add_common(p_ipet)
    _add_pet_args(p_ipet)
    p_ipet.add_argument("--lambda", dest="lam", type=float, default=0.25)
    p_ipet.add_argument("--d", type=int, default=5)
    p_ipet.add_argument("--target", type=int, default=1000)
    p_ipet.add_argument("--zero-shot", action="store_true")
    p_ipet.add_argument("--size-schedule", default=None,
                        help="comma-separated per-generation multipliers, e.g. 5,625")
    p_ipet.add_argument("--pretrain-steps", type=int, default=0,
                        help="MLM-only warmup steps for zero-shot initial models")

    p_sup = sub.add_parser("supervised", help="classification-head baseline on the labeled set")
    _add_common(p_sup)
    p_sup.add_argument("--steps", type=int, default=250)
    p_sup.add_argument("--batch", type=int, default=16)

    p_avs = sub.add_parser("avs", help="automatic verbalizer search")
    _add_common(p_avs)
    p_avs.add_argument("--unlabeled", required=True)
    p_avs.add_argument("--k", type=int, default=250)
    p_avs.add_argument("--epsilon", type=float, default=1e-3)
    p_avs.add_argument("--imax", type=int, default=5)
    p_avs.add_argument("--m", type=int, default=10)
    p_avs.add_argument("--min-alpha-chars", type=int, default=2)
    p_avs.add_argument("--top-frequent", type=int, default=10_000)
    p_avs.add_argument("--emit-cache", action="store_true")
    p_avs.add_argument("--pretrain-steps", type=int, default=0,
                       help="MLM-only warmup steps before scoring candidates")

    p_label = sub.add_parser("label", help="soft-label the pool without distilling")
    _add_common(p_label)
    _add_pet_args(p_label)

    p_distill = sub.add_parser("distill", help="train a classifier from a saved soft dataset")
    _add_common(p_distill, need_train=False)
    p_distill.add_argument("--soft", required=True, help="soft-labeled JSONL")
    p_distill.add_argument("--steps", type=int, default=5000)
    p_distill.add_argument("--batch", type=int, default=16)

    p_eval = sub.add_parser("eval", help="score a saved classifier on a labeled set")
    _add_common(p_eval, need_train=False)
    p_eval.add_argument("--run", required=True, help="run directory holding the classifier")
    p_eval.add_argument("--data", required=True, help="labeled JSONL")

    return parser


def _resolve_manifest(args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "from_manifest", None):
        return args
    manifest = runs.read_manifest(args.from_manifest)
    if manifest["command"] != args.command:
        raise ConfigError(
            f"manifest is for {manifest['command']!r}, not {args.command!r}"
        )
    params = dict(manifest["params"])
    params["out"] = args.out  # the only parameter a re-run may change
    params["from_manifest"] = None
    return argparse.Namespace(command=args.command, **params)


def _manifest_params(args: argparse.Namespace) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("command", "from_manifest")}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()}


class _Context:
    """Datasets, vocabulary and backend factory resolved from the arguments."""

    def __init__(self, args: argparse.Namespace, need_unlabeled: bool = False):
        self.task: TaskSpec = load_task_config(args.task)
        label_set = self.task.label_set
        self.train = (
            load_jsonl(args.train, label_set, "train") if getattr(args, "train", None) else None
        )
        self.unlabeled = (
            load_jsonl(args.unlabeled, label_set, "unlabeled")
            if getattr(args, "unlabeled", None)
            else None
        )
        if need_unlabeled and self.unlabeled is None:
            raise ConfigError("--unlabeled is required")
        self.eval_set = (
            load_jsonl(args.eval, label_set, "eval") if getattr(args, "eval", None) else None
        )
        self.args = args
        self.vocab = self._build_vocab()
        self.backend_factory = self._make_factory()

    def _build_vocab(self) -> Vocabulary:
        extra = []
        for pattern in self.task.patterns:
            for element in pattern.elements:
                if hasattr(element, "tokens"):
                    extra.extend(element.tokens)
        for verbalizer in self.task.verbalizers:
            extra.extend(verbalizer.all_tokens())
        datasets = [d for d in (self.train, self.unlabeled, self.eval_set) if d is not None]
        freq = token_frequencies(self.unlabeled) if self.unlabeled else {}
        return build_vocabulary(datasets, tuple(extra), frequencies=freq)

    def _make_factory(self):
        spec = self.args.backend
        if spec == "toy":
            vocab, args = self.vocab, self.args

            def factory(seed: int):
                return ToyMlmBackend(vocab, ToyConfig(dim=args.dim, window=args.window, seed=seed))

            return factory
        if spec.startswith("external:cmd:"):
            argv = spec[len("external:cmd:"):].split()

            def factory(seed: int):
                return RemoteBackend.spawn(argv)

            return factory
        if spec.startswith("external:tcp:"):
            host, _, port = spec[len("external:tcp:"):].rpartition(":")

            def factory(seed: int):
                return RemoteBackend.connect(host, int(port))

            return factory
        raise ConfigError(f"unknown backend {spec!r}")


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        alpha=args.alpha,
        steps=args.steps,
        labeled_per_batch=args.labeled_per_batch,
        unlabeled_per_batch=args.unlabeled_per_batch,
        learning_rate=args.lr,
        lr_multiplier=args.lr_multiplier,
        mlm_mask_prob=args.mlm_mask_prob,
        seed=args.seed,
        max_seq_length=args.max_seq_length,
    )


def cmd_pet(args: argparse.Namespace) -> int:
    ctx = _Context(args, need_unlabeled=True)
    root = runs.prepare_run_dir(args.out)
    runs.write_manifest(root, "pet", _manifest_params(args))
    result = run_pet(
        ctx.train,
        ctx.unlabeled,
        list(ctx.task.pvps()),
        _train_config(args),
        EnsembleConfig(args.weighting, args.temperature),
        ctx.backend_factory,
        eval_set=ctx.eval_set,
        repetitions=args.repetitions,
        distill_steps=args.distill_steps,
        classifier_batch=args.classifier_batch,
        include_train_in_soft=args.include_train_in_soft,
        jobs=args.jobs,
    )
    runs.save_vocabulary(root, ctx.vocab)
    runs.save_backend_params(root, "classifier", result.classifier)
    save_soft_dataset(result.soft, root / "reports" / "soft.jsonl")
    runs.write_report(root, "report", result.report)
    print(json.dumps(result.report, indent=2, sort_keys=True))
    return 0


def cmd_ipet(args: argparse.Namespace) -> int:
    ctx = _Context(args, need_unlabeled=True)
    root = runs.prepare_run_dir(args.out)
    runs.write_manifest(root, "ipet", _manifest_params(args))
    schedule = None
    if args.size_schedule:
        schedule = tuple(int(x) for x in args.size_schedule.split(","))
    config = IpetConfig(
        lam=args.lam,
        d=args.d,
        target_examples=args.target,
        zero_shot=args.zero_shot,
        seed=args.seed,
        repetitions=args.repetitions,
        size_schedule=schedule,
        bootstrap_pretrain_steps=args.pretrain_steps,
    )
    train = ctx.train
    if args.zero_shot:
        train = Dataset((), ctx.task.label_set, name="empty")
    result = run_ipet(
        train,
        ctx.unlabeled,
        list(ctx.task.pvps()),
        config,
        _train_config(args),
        EnsembleConfig(args.weighting, args.temperature),
        ctx.backend_factory,
        eval_set=ctx.eval_set,
        distill_steps=args.distill_steps,
        classifier_batch=args.classifier_batch,
        run_dir=root,
        jobs=args.jobs,
    )
    report = {
        "generations": [
            {
                "generation": r.generation,
                "per_label_count": r.per_label_count,
                "dataset_size": r.dataset_size,
                "mean_accuracy": r.mean_accuracy,
                "model_accuracies": r.model_accuracies,
            }
            for r in result.reports
        ],
        "classifier_eval_accuracy": result.classifier_accuracy,
    }
    runs.save_vocabulary(root, ctx.vocab)
    runs.save_backend_params(root, "classifier", result.classifier)
    save_soft_dataset(result.soft_dataset, root / "reports" / "soft.jsonl")
    runs.write_report(root, "report", report)
    runs.write_metrics_csv(
        root, "generations",
        [
            {"generation": r.generation, "dataset_size": r.dataset_size,
             "mean_accuracy": r.mean_accuracy}
            for r in result.reports
        ],
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_supervised(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    root = runs.prepare_run_dir(args.out)
    runs.write_manifest(root, "supervised", _manifest_params(args))
    classifier, report = run_supervised(
        ctx.train,
        ctx.backend_factory,
        steps=args.steps,
        learning_rate=args.lr * args.lr_multiplier,
        batch_size=args.batch,
        seed=args.seed,
        eval_set=ctx.eval_set,
    )
    runs.save_vocabulary(root, ctx.vocab)
    runs.save_backend_params(root, "classifier", classifier)
    runs.write_report(root, "report", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_avs(args: argparse.Namespace) -> int:
    ctx = _Context(args, need_unlabeled=True)
    root = runs.prepare_run_dir(args.out)
    runs.write_manifest(root, "avs", _manifest_params(args))
    config = AvsConfig(
        k=args.k,
        epsilon=args.epsilon,
        i_max=args.imax,
        m=args.m,
        min_alpha_chars=args.min_alpha_chars,
        top_frequent=args.top_frequent,
        seed=args.seed,
        max_seq_length=args.max_seq_length,
    )
    backend = ctx.backend_factory(args.seed)
    if args.pretrain_steps:
        from .ipet import make_initial_model

        model = make_initial_model(
            ctx.task.pvps()[0], 0, lambda s: backend, _avs_train_config(args),
            ctx.unlabeled, args.pretrain_steps,
        )
        backend = model.backend
    freq = token_frequencies(ctx.unlabeled)
    candidates = filter_candidates(ctx.vocab, freq, config)
    cache = AvsScoreCache.build(
        list(ctx.task.patterns), ctx.train, candidates, backend, config.max_seq_length
    )
    if args.emit_cache:
        cache.save(root / "reports" / "avs-cache.npz")
    rhos = avs_iterate(
        list(ctx.task.patterns), ctx.train, candidates, config, backend, cache=cache
    )
    mv = extract_multi_verbalizer(rhos[-1], min(config.m, len(candidates)), candidates,
                                  ctx.task.label_set)
    write_avs_report(root / "reports" / "avs-report.txt", rhos[-1], candidates,
                     ctx.task.label_set)
    report = {"multi_verbalizer": {l: list(ts) for l, ts in mv.mapping.items()},
              "candidates": len(candidates)}
    runs.write_report(root, "report", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _avs_train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(seed=args.seed, max_seq_length=args.max_seq_length,
                       learning_rate=args.lr, lr_multiplier=args.lr_multiplier)


def cmd_label(args: argparse.Namespace) -> int:
    ctx = _Context(args, need_unlabeled=True)
    root = runs.prepare_run_dir(args.out)
    runs.write_manifest(root, "label", _manifest_params(args))
    result = run_pet(
        ctx.train,
        ctx.unlabeled,
        list(ctx.task.pvps()),
        _train_config(args),
        EnsembleConfig(args.weighting, args.temperature),
        ctx.backend_factory,
        eval_set=ctx.eval_set,
        repetitions=args.repetitions,
        distill_steps=0,
        classifier_batch=args.classifier_batch,
        jobs=args.jobs,
    )
    save_soft_dataset(result.soft, root / "reports" / "soft.jsonl")
    runs.write_report(root, "report", {"soft_examples": len(result.soft)})
    print(f"wrote {len(result.soft)} soft-labeled examples")
    return 0


def cmd_distill(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    root = runs.prepare_run_dir(args.out)
    runs.write_manifest(root, "distill", _manifest_params(args))
    soft = load_soft_dataset(args.soft)
    # tokens seen only in the soft set must be embeddable as well
    extra = tuple(t for ex in soft for seg in ex.input.segments for t in seg)
    vocab = Vocabulary(
        tuple(dict.fromkeys(ctx.vocab.tokens + extra)), mask_token=ctx.vocab.mask_token
    )

    def factory(seed: int):
        return ToyMlmBackend(vocab, ToyConfig(dim=args.dim, window=args.window, seed=seed))

    classifier, _ = train_final_classifier(
        soft, factory if args.backend == "toy" else ctx.backend_factory,
        steps=args.steps, learning_rate=args.lr * args.lr_multiplier,
        batch_size=args.batch, seed=args.seed,
    )
    runs.save_vocabulary(root, vocab)
    runs.save_backend_params(root, "classifier", classifier)
    report = {"soft_examples": len(soft), "steps": args.steps}
    if ctx.eval_set is not None:
        report["eval_accuracy"] = evaluate_classifier(classifier, ctx.eval_set,
                                                      ctx.task.label_set)
    runs.write_report(root, "report", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ctx = _Context(args)
    source = Path(args.run)
    vocab = runs.load_vocabulary(source)
    data = load_jsonl(args.data, ctx.task.label_set, "eval")
    backend = ToyMlmBackend(vocab, ToyConfig(dim=args.dim, window=args.window, seed=0))
    backend.init_head(len(ctx.task.label_set))
    runs.load_backend_params(source, "classifier", backend)
    acc = evaluate_classifier(backend, data, ctx.task.label_set)
    root = runs.prepare_run_dir(args.out)
    runs.write_manifest(root, "eval", _manifest_params(args))
    runs.write_report(root, "report", {"accuracy": acc, "examples": len(data)})
    print(json.dumps({"accuracy": acc, "examples": len(data)}, indent=2))
    return 0


_COMMANDS = {
    "pet": cmd_pet,
    "ipet": cmd_ipet,
    "supervised": cmd_supervised,
    "avs": cmd_avs,
    "label": cmd_label,
    "distill": cmd_distill,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _resolve_manifest(args)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
