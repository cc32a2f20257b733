"""Masked-LM backend contract.

A backend scores candidate tokens at a mask position, optionally supports
gradient training (combined cloze + masked-LM objective, and a soft-label
classification head), and can snapshot/restore its parameters so independent
copies can be trained per pattern.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, UnknownToken
from ..pvp import DEFAULT_MASK_TOKEN, MaskedSequence, TextInput


@dataclass(frozen=True)
class Vocabulary:
    """Ordered distinct tokens with a single mask token; indices are dense
    and stable."""

    tokens: tuple[str, ...]
    mask_token: str = DEFAULT_MASK_TOKEN
    frequencies: dict[str, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        if self.tokens.count(self.mask_token) != 1:
            raise ConfigError(f"mask token {self.mask_token!r} must occur exactly once")
        object.__setattr__(
            self, "_index", {t: i for i, t in enumerate(self.tokens)}
        )

    def index(self, token: str) -> int:
        try:
            return self._index[token]  # type: ignore[attr-defined]
        except KeyError:
            raise UnknownToken(f"token {token!r} not in vocabulary") from None

    def __contains__(self, token: str) -> bool:
        return token in self._index  # type: ignore[attr-defined]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def mask_index(self) -> int:
        return self._index[self.mask_token]  # type: ignore[attr-defined]


def build_vocabulary(
    datasets,
    extra_tokens: tuple[str, ...] = (),
    mask_token: str = DEFAULT_MASK_TOKEN,
    frequencies: dict[str, int] | None = None,
) -> Vocabulary:
    """First-seen ordering over mask, extra tokens (pattern literals,
    verbalizations), then dataset tokens; deterministic for fixed inputs."""
    seen: dict[str, None] = {mask_token: None}
    for tok in extra_tokens:
        seen.setdefault(tok, None)
    for dataset in datasets:
        for ex in dataset:
            for segment in ex.segments:
                for tok in segment:
                    seen.setdefault(tok, None)
    return Vocabulary(tuple(seen), mask_token=mask_token, frequencies=frequencies)


@dataclass(frozen=True)
class BackendCapabilities:
    trainable: bool
    supports_mlm_loss: bool
    supports_classification_head: bool
    score_convention: str = "logits"  # or "log_probs"


@dataclass(frozen=True)
class LabeledMaskExample:
    """A cloze training example: the rendered sequence, the per-label
    verbalization groups (canonical label order), and the true label index.
    A label's logit is the mean score of its group."""

    seq: MaskedSequence
    candidate_groups: tuple[tuple[str, ...], ...]
    target_index: int

    def __post_init__(self):
        if not (0 <= self.target_index < len(self.candidate_groups)):
            raise ConfigError("target_index out of range")


@dataclass(frozen=True)
class MlmExample:
    """A masked-LM training example: tokens where some positions were
    replaced by the mask; ``targets`` maps each such position to the original
    token.  May contain additional mask tokens that are *not* targets (the
    pattern's own slot); those are never predicted."""

    tokens: tuple[str, ...]
    targets: tuple[tuple[int, str], ...]
    mask_token: str = DEFAULT_MASK_TOKEN

    def __post_init__(self):
        for pos, original in self.targets:
            if not (0 <= pos < len(self.tokens)):
                raise ConfigError("target position out of range")
            if self.tokens[pos] != self.mask_token:
                raise ConfigError("target position does not hold the mask token")
            if original == self.mask_token:
                raise ConfigError("mask token cannot be an MLM target")


@dataclass(frozen=True)
class LossReport:
    l_ce: float
    l_mlm: float
    l_total: float


@dataclass(frozen=True)
class ParamSnapshot:
    """Opaque parameter snapshot; ``payload`` is backend-specific."""

    payload: object


ClassifiableInput = MaskedSequence | TextInput | tuple


def flatten_input(x: ClassifiableInput) -> tuple[str, ...]:
    """Token view used by the classification head."""
    if isinstance(x, MaskedSequence):
        return x.tokens
    if isinstance(x, TextInput):
        return tuple(t for seg in x.segments for t in seg)
    return tuple(x)


class MlmBackend(abc.ABC):
    """Single-writer for training; concurrent reads are safe when no step is
    in flight.  Distinct instances may train concurrently."""

    @property
    @abc.abstractmethod
    def capabilities(self) -> BackendCapabilities: ...

    @property
    @abc.abstractmethod
    def vocabulary(self) -> Vocabulary | None: ...

    @abc.abstractmethod
    def score_candidates(self, seq: MaskedSequence, candidates: tuple[str, ...]) -> np.ndarray:
        """Unnormalized scores for each candidate at the mask position, in
        candidate order; deterministic given parameters."""

    @abc.abstractmethod
    def train_step_combined(
        self,
        labeled: list[LabeledMaskExample],
        mlm: list[MlmExample],
        alpha: float,
        learning_rate: float,
    ) -> LossReport:
        """One gradient step on ``(1-alpha)*CE + alpha*MLM``; the returned
        losses are computed before the update.  Empty batches contribute 0."""

    @abc.abstractmethod
    def init_head(self, n_labels: int) -> None: ...

    @abc.abstractmethod
    def classify(self, x: ClassifiableInput) -> np.ndarray:
        """Probability vector over labels (sums to 1 within 1e-9)."""

    @abc.abstractmethod
    def train_step_soft(
        self, batch: list[tuple[ClassifiableInput, np.ndarray]], learning_rate: float
    ) -> float:
        """One gradient step on the soft cross-entropy
        ``-sum_l q(l) log p(l|x)`` averaged over the batch."""

    @abc.abstractmethod
    def snapshot(self) -> ParamSnapshot: ...

    @abc.abstractmethod
    def restore(self, snap: ParamSnapshot) -> None: ...
