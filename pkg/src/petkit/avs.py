"""Automatic verbalizer search.

Iteratively refines per-label probability distributions over candidate
tokens: sample complete verbalizer assignments from the current
distribution, score every candidate token for every label against the
training set, floor at epsilon and renormalize.  The top-m tokens per label
form a multi-token verbalizer whose label score is the mean over its tokens.

One backend forward per (pattern, example) caches the raw mask scores of all
candidates; everything after that is arithmetic on the cache.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .backends.base import MlmBackend, Vocabulary
from .data import Dataset
from .errors import (
    EmptyCandidateSet,
    LabelAbsent,
    MTooLarge,
    NonFiniteScore,
)
from .pvp import LabelSet, MultiVerbalizer, Pattern, Pvp, TextInput, apply_pattern
from .training import TrainedPvpModel, score_pvp


@dataclass(frozen=True)
class AvsConfig:
    k: int = 250
    epsilon: float = 1e-3
    i_max: int = 5
    m: int = 10
    min_alpha_chars: int = 2
    top_frequent: int = 10_000
    seed: int = 0
    max_seq_length: int = 256

    def __post_init__(self):
        if self.k < 1 or self.m < 1 or self.i_max < 1:
            raise ValueError("k, m and i_max must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True, eq=False)
class VerbalizerDistribution:
    """Per-label probabilities over the candidate tokens after one search
    iteration."""

    probs: np.ndarray  # [n_labels, n_candidates]
    iteration: int

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if (probs < 0).any():
            raise ValueError("distribution entries must be >= 0")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("each label's distribution must sum to 1")


def filter_candidates(
    vocab: Vocabulary,
    frequencies: Mapping[str, int],
    config: AvsConfig,
) -> tuple[str, ...]:
    """Tokens with enough alphabetic characters, restricted to the most
    frequent ones in the unlabeled pool; frequency ties break by canonical
    vocabulary order.  The mask token is excluded.  The result keeps
    canonical vocabulary order."""
    eligible = [
        (i, t)
        for i, t in enumerate(vocab.tokens)
        if t != vocab.mask_token
        and sum(c.isalpha() for c in t) >= config.min_alpha_chars
    ]
    if not eligible:
        raise EmptyCandidateSet("no tokens satisfy the alphabetic-character filter")
    ranked = sorted(eligible, key=lambda it: (-frequencies.get(it[1], 0), it[0]))
    kept = {i for i, _ in ranked[: config.top_frequent]}
    out = tuple(t for i, t in eligible if i in kept)
    if not out:
        raise EmptyCandidateSet("frequency filter removed every candidate")
    return out


@dataclass(frozen=True, eq=False)
class AvsScoreCache:
    """Raw mask scores ``M(t | P_i(x))`` for every candidate token.

    ``raw[i, x, c]`` is pattern i, training example x, candidate c.  ``exp``
    holds the per-(i, x) max-shifted exponentials used by the softmax-style
    probability; the shift cancels in every ratio, so values are exact."""

    candidates: tuple[str, ...]
    raw: np.ndarray
    exp: np.ndarray
    col: dict

    @classmethod
    def build(
        cls,
        patterns: list[Pattern],
        train: Dataset,
        candidates: tuple[str, ...],
        backend: MlmBackend,
        max_seq_length: int,
    ) -> "AvsScoreCache":
        rows = []
        for pattern in patterns:
            per_pattern = []
            for x in train:
                seq = apply_pattern(pattern, x, max_seq_length)
                per_pattern.append(backend.score_candidates(seq, candidates))
            rows.append(np.stack(per_pattern))
        raw = np.stack(rows)  # [n_patterns, n_examples, n_candidates]
        if not np.isfinite(raw).all():
            raise NonFiniteScore("backend produced non-finite scores")
        shifted = raw - raw.max(axis=2, keepdims=True)
        return cls(
            candidates=tuple(candidates),
            raw=raw,
            exp=np.exp(shifted),
            col={t: i for i, t in enumerate(candidates)},
        )

    def save(self, path: str | Path) -> None:
        np.savez(
            Path(path),
            raw=self.raw,
            candidates=np.array(self.candidates, dtype=object),
        )

    @classmethod
    def from_raw(cls, candidates: tuple[str, ...], raw: np.ndarray) -> "AvsScoreCache":
        shifted = raw - raw.max(axis=2, keepdims=True)
        return cls(
            candidates=tuple(candidates),
            raw=raw,
            exp=np.exp(shifted),
            col={t: i for i, t in enumerate(candidates)},
        )


def _label_masks(train: Dataset, label_set: LabelSet) -> dict[str, np.ndarray]:
    labels = np.array(train.labels())
    masks = {}
    for label in label_set:
        mask = labels == label
        if not mask.any():
            raise LabelAbsent(f"no training examples with label {label!r}")
        if mask.all():
            raise LabelAbsent(f"all training examples share label {label!r}")
        masks[label] = mask
    return masks


def _pair_probability(
    cache: AvsScoreCache, pattern_index: int, token_col: int, other_cols: list[int]
) -> np.ndarray:
    """q(label | x) for token t standing in for the label, against the other
    labels' current verbalizations; vector over training examples."""
    e = cache.exp[pattern_index]
    numer = e[:, token_col]
    denom = numer + e[:, other_cols].sum(axis=1)
    return numer / denom


def verbalizer_token_score(
    token: str,
    label: str,
    pattern_index: int,
    assignment: Mapping[str, str],
    cache: AvsScoreCache,
    train: Dataset,
) -> float:
    """How well ``token`` verbalizes ``label`` under one pattern and one
    assignment of the remaining labels: mean probability on the label's own
    examples minus mean probability on the rest."""
    label_set = train.label_set
    masks = _label_masks(train, label_set)
    others = [cache.col[assignment[l]] for l in label_set if l != label]
    q = _pair_probability(cache, pattern_index, cache.col[token], others)
    own = masks[label]
    return float(q[own].mean() - q[~own].mean())


def verbalizer_token_score_nocache(
    token: str,
    label: str,
    pattern: Pattern,
    assignment: Mapping[str, str],
    backend: MlmBackend,
    train: Dataset,
    max_seq_length: int = 256,
) -> float:
    """Cache-free reference route: one backend call per example."""
    label_set = train.label_set
    other_tokens = [assignment[l] for l in label_set if l != label]
    own_vals, other_vals = [], []
    for x in train:
        seq = apply_pattern(pattern, x, max_seq_length)
        scores = backend.score_candidates(seq, tuple([token] + other_tokens))
        shifted = scores - scores.max()
        e = np.exp(shifted)
        q = e[0] / e.sum()
        (own_vals if x.label == label else other_vals).append(q)
    if not own_vals:
        raise LabelAbsent(f"no training examples with label {label!r}")
    if not other_vals:
        raise LabelAbsent(f"all training examples share label {label!r}")
    return float(np.mean(own_vals) - np.mean(other_vals))


def avs_iterate(
    patterns: list[Pattern],
    train: Dataset,
    candidates: tuple[str, ...],
    config: AvsConfig,
    backend: MlmBackend,
    cache: AvsScoreCache | None = None,
) -> list[VerbalizerDistribution]:
    """The search proper: returns the distribution after each iteration."""
    label_set = train.label_set
    n_labels, n_cand = len(label_set), len(candidates)
    if cache is None:
        cache = AvsScoreCache.build(patterns, train, candidates, backend, config.max_seq_length)
    masks = _label_masks(train, label_set)
    own = np.stack([masks[l] for l in label_set])  # [n_labels, n_examples]

    rng = np.random.default_rng(config.seed)
    rho = np.full((n_labels, n_cand), 1.0 / n_cand)
    out: list[VerbalizerDistribution] = []
    n_patterns = len(patterns)

    for iteration in range(1, config.i_max + 1):
        # k complete assignments, sampled per label from the current rho
        assignments = np.stack(
            [rng.choice(n_cand, size=config.k, p=rho[li]) for li in range(n_labels)],
            axis=1,
        )  # [k, n_labels]
        scores = np.zeros((n_labels, n_cand))
        for j in range(config.k):
            for li in range(n_labels):
                other_cols = [assignments[j, lo] for lo in range(n_labels) if lo != li]
                for pi in range(n_patterns):
                    e = cache.exp[pi]
                    denom_others = e[:, other_cols].sum(axis=1)
                    q = e / (e + denom_others[:, None])  # [n_examples, n_cand]
                    pos = q[own[li]].mean(axis=0)
                    neg = q[~own[li]].mean(axis=0)
                    scores[li] += pos - neg
        scores /= n_patterns * config.k
        if not np.isfinite(scores).all():
            raise NonFiniteScore("non-finite verbalizer scores")
        floored = np.maximum(scores, config.epsilon)
        z = floored.sum(axis=1)
        if (z <= 0).any():
            raise NonFiniteScore("all scores non-positive and epsilon is zero")
        rho = floored / z[:, None]
        out.append(VerbalizerDistribution(rho.copy(), iteration))
    return out


def extract_multi_verbalizer(
    rho_final: VerbalizerDistribution,
    m: int,
    candidates: tuple[str, ...],
    label_set: LabelSet,
) -> MultiVerbalizer:
    """Top-m tokens per label by final probability; ties break toward the
    earlier candidate."""
    if m > len(candidates):
        raise MTooLarge(f"m={m} exceeds the {len(candidates)} candidates")
    mapping = {}
    for li, label in enumerate(label_set):
        order = sorted(range(len(candidates)), key=lambda c: (-rho_final.probs[li, c], c))
        mapping[label] = tuple(candidates[c] for c in order[:m])
    return MultiVerbalizer(mapping)


def with_multi_verbalizer(pvp: Pvp, mv: MultiVerbalizer) -> Pvp:
    return Pvp(pattern=pvp.pattern, verbalizer=mv, label_set=pvp.label_set, id=f"{pvp.id}+avs")


def score_with_multi_verbalizer(
    model: TrainedPvpModel, mv: MultiVerbalizer, x: TextInput
) -> np.ndarray:
    """Label scores as the mean over each label's m verbalizations; with
    m = 1 this is exactly single-verbalizer scoring."""
    return score_pvp(
        model.backend, with_multi_verbalizer(model.pvp, mv), x, model.max_seq_length
    )


def write_report(
    path: str | Path,
    rho_final: VerbalizerDistribution,
    candidates: tuple[str, ...],
    label_set: LabelSet,
    top: int = 20,
) -> None:
    """Ranked candidate list per label, as both text and JSON lines."""
    lines = []
    records = []
    for li, label in enumerate(label_set):
        order = sorted(range(len(candidates)), key=lambda c: (-rho_final.probs[li, c], c))
        ranked = [(candidates[c], float(rho_final.probs[li, c])) for c in order[:top]]
        lines.append(f"label {label}: " + ", ".join(f"{t}={p:.4f}" for t, p in ranked))
        records.append({"label": label, "ranked": ranked})
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    path.with_suffix(".json").write_text(
        "\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8"
    )
