"""Deterministic scripted backend for tests and bookkeeping-only runs.

An oracle wraps a function from a rendered sequence to token scores; it never
trains and snapshots are no-ops (its parameters cannot change).
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from ..errors import HeadNotInitialized, NotTrainable, UnknownToken
from ..pvp import MaskedSequence
from .base import (
    BackendCapabilities,
    ClassifiableInput,
    MlmBackend,
    ParamSnapshot,
    Vocabulary,
)

ScoreFn = Callable[[MaskedSequence], Mapping[str, float]]


class OracleBackend(MlmBackend):
    def __init__(
        self,
        score_fn: ScoreFn,
        vocab: Vocabulary | None = None,
        convention: str = "log_probs",
    ):
        self._score_fn = score_fn
        self._vocab = vocab
        self._convention = convention

    @classmethod
    def from_distribution(cls, dist: Mapping[str, float], **kwargs) -> "OracleBackend":
        """Same token probabilities at every context; scores are log-probs."""
        logs = {t: math.log(p) for t, p in dist.items()}
        return cls(lambda seq: logs, **kwargs)

    @classmethod
    def from_table(
        cls, table: Mapping[tuple[str, ...], Mapping[str, float]], **kwargs
    ) -> "OracleBackend":
        """Per-context log-prob distributions, keyed by the token tuple."""
        logs = {
            key: {t: math.log(p) for t, p in dist.items()} for key, dist in table.items()
        }

        def fn(seq: MaskedSequence) -> Mapping[str, float]:
            try:
                return logs[tuple(seq.tokens)]
            except KeyError:
                raise UnknownToken(f"oracle has no entry for {seq.tokens}") from None

        return cls(fn, **kwargs)

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            trainable=False,
            supports_mlm_loss=False,
            supports_classification_head=False,
            score_convention=self._convention,
        )

    @property
    def vocabulary(self) -> Vocabulary | None:
        return self._vocab

    def score_candidates(self, seq, candidates) -> np.ndarray:
        scores = self._score_fn(seq)
        out = []
        for token in candidates:
            if token not in scores:
                raise UnknownToken(f"oracle defines no score for {token!r}")
            out.append(float(scores[token]))
        return np.array(out)

    def train_step_combined(self, labeled, mlm, alpha, learning_rate):
        raise NotTrainable("oracle backend does not train")

    def init_head(self, n_labels: int) -> None:
        raise HeadNotInitialized("oracle backend has no classification head")

    def classify(self, x: ClassifiableInput) -> np.ndarray:
        raise HeadNotInitialized("oracle backend has no classification head")

    def train_step_soft(self, batch, learning_rate) -> float:
        raise NotTrainable("oracle backend does not train")

    def snapshot(self) -> ParamSnapshot:
        return ParamSnapshot(payload="oracle")

    def restore(self, snap: ParamSnapshot) -> None:
        pass  # stateless
