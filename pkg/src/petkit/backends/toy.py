"""Trainable toy masked LM: a windowed log-linear scorer.

The score of token ``w`` at a mask is ``u_w . h + b_w`` where ``h`` is the
mean input embedding of the tokens within ``window`` positions of the mask
(mask tokens themselves excluded).  The classification head applies a linear
softmax layer to the mean embedding of the whole sequence.  Everything is
dense float64 numpy, hand-differentiated, and bit-reproducible from a seed,
which keeps the full training pipeline checkable against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import (
    HeadNotInitialized,
    NonFiniteLoss,
    NotTrainable,
    UnknownToken,
)
from .base import (
    BackendCapabilities,
    ClassifiableInput,
    LabeledMaskExample,
    LossReport,
    MlmBackend,
    MlmExample,
    ParamSnapshot,
    Vocabulary,
    flatten_input,
)


@dataclass(frozen=True)
class ToyConfig:
    dim: int = 16
    window: int = 8
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.window < 1:
            raise ValueError("dim and window must be >= 1")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


class ToyMlmBackend(MlmBackend):
    """See module docstring.  Parameters: input embeddings ``emb`` (V x d),
    output weights ``out_w`` (V x d), output bias ``out_b`` (V), plus an
    optional classification head ``head_w`` (L x d), ``head_b`` (L)."""

    def __init__(self, vocab: Vocabulary, config: ToyConfig = ToyConfig()):
        self._vocab = vocab
        self.config = config
        rng = np.random.default_rng(config.seed)
        v, d = len(vocab), config.dim
        scale = config.init_scale
        self.emb = rng.uniform(-scale, scale, size=(v, d))
        self.out_w = rng.uniform(-scale, scale, size=(v, d))
        self.out_b = np.zeros(v)
        self.head_w: np.ndarray | None = None
        self.head_b: np.ndarray | None = None

    # -- contract ---------------------------------------------------------

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(
            trainable=True,
            supports_mlm_loss=True,
            supports_classification_head=True,
            score_convention="logits",
        )

    @property
    def vocabulary(self) -> Vocabulary:
        return self._vocab

    def score_candidates(self, seq, candidates) -> np.ndarray:
        if not candidates:
            raise UnknownToken("empty candidate list")
        cand_ids = np.array([self._vocab.index(t) for t in candidates])
        h = self._context(tuple(seq.tokens), seq.mask_position)
        return self.out_w[cand_ids] @ h + self.out_b[cand_ids]

    def train_step_combined(self, labeled, mlm, alpha, learning_rate) -> LossReport:
        if not (0.0 <= alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        l_ce, l_mlm, grads = self._combined_loss_grads(
            self._params(), labeled, mlm, alpha, want_grads=True
        )
        l_total = (1.0 - alpha) * l_ce + alpha * l_mlm
        if not np.isfinite(l_total):
            raise NonFiniteLoss(f"combined loss is {l_total}")
        self.emb -= learning_rate * grads["emb"]
        self.out_w -= learning_rate * grads["out_w"]
        self.out_b -= learning_rate * grads["out_b"]
        return LossReport(l_ce=float(l_ce), l_mlm=float(l_mlm), l_total=float(l_total))

    def init_head(self, n_labels: int) -> None:
        # zero init: a fresh head predicts the uniform distribution
        self.head_w = np.zeros((n_labels, self.config.dim))
        self.head_b = np.zeros(n_labels)

    def classify(self, x: ClassifiableInput) -> np.ndarray:
        if self.head_w is None or self.head_b is None:
            raise HeadNotInitialized("call init_head() first")
        g = self._sequence_embedding(flatten_input(x))
        return _softmax(self.head_w @ g + self.head_b)

    def train_step_soft(self, batch, learning_rate) -> float:
        if self.head_w is None or self.head_b is None:
            raise HeadNotInitialized("call init_head() first")
        if not batch:
            raise ValueError("empty batch")
        n_labels = self.head_w.shape[0]
        d_head_w = np.zeros_like(self.head_w)
        d_head_b = np.zeros_like(self.head_b)
        d_emb = np.zeros_like(self.emb)
        loss = 0.0
        for x, q in batch:
            q = np.asarray(q, dtype=float)
            if q.shape != (n_labels,) or abs(q.sum() - 1.0) > 1e-6 or (q < 0).any():
                raise ValueError(f"soft label must be a distribution over {n_labels} labels")
            tokens = flatten_input(x)
            token_ids = self._embeddable_ids(tokens)
            g = self.emb[token_ids].mean(axis=0) if token_ids else np.zeros(self.config.dim)
            p = _softmax(self.head_w @ g + self.head_b)
            loss += float(-(q * np.log(p)).sum())
            dlogits = p - q
            d_head_w += np.outer(dlogits, g)
            d_head_b += dlogits
            if token_ids:
                dg = self.head_w.T @ dlogits / len(token_ids)
                np.add.at(d_emb, token_ids, dg)
        loss /= len(batch)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"soft loss is {loss}")
        self.head_w -= learning_rate * d_head_w / len(batch)
        self.head_b -= learning_rate * d_head_b / len(batch)
        self.emb -= learning_rate * d_emb / len(batch)
        return loss

    def snapshot(self) -> ParamSnapshot:
        payload = {
            "emb": self.emb.copy(),
            "out_w": self.out_w.copy(),
            "out_b": self.out_b.copy(),
            "head_w": None if self.head_w is None else self.head_w.copy(),
            "head_b": None if self.head_b is None else self.head_b.copy(),
        }
        return ParamSnapshot(payload)

    def restore(self, snap: ParamSnapshot) -> None:
        payload = snap.payload
        self.emb = payload["emb"].copy()
        self.out_w = payload["out_w"].copy()
        self.out_b = payload["out_b"].copy()
        self.head_w = None if payload["head_w"] is None else payload["head_w"].copy()
        self.head_b = None if payload["head_b"] is None else payload["head_b"].copy()

    # -- internals ----------------------------------------------------------

    def _params(self) -> dict[str, np.ndarray]:
        return {"emb": self.emb, "out_w": self.out_w, "out_b": self.out_b}

    def _embeddable_ids(self, tokens: tuple[str, ...]) -> list[int]:
        mask = self._vocab.mask_token
        return [self._vocab.index(t) for t in tokens if t != mask]

    def _sequence_embedding(self, tokens: tuple[str, ...]) -> np.ndarray:
        ids = self._embeddable_ids(tokens)
        if not ids:
            return np.zeros(self.config.dim)
        return self.emb[ids].mean(axis=0)

    def _context_ids(self, tokens: tuple[str, ...], position: int) -> list[int]:
        """Vocabulary ids of the non-mask tokens within the window around
        ``position`` (the position itself excluded)."""
        lo = max(0, position - self.config.window)
        hi = min(len(tokens), position + self.config.window + 1)
        mask = self._vocab.mask_token
        return [
            self._vocab.index(tokens[i])
            for i in range(lo, hi)
            if i != position and tokens[i] != mask
        ]

    def _context(self, tokens, position, params=None) -> np.ndarray:
        emb = self.emb if params is None else params["emb"]
        ids = self._context_ids(tokens, position)
        if not ids:
            return np.zeros(self.config.dim)
        return emb[ids].mean(axis=0)

    def _combined_loss_grads(self, params, labeled, mlm, alpha, want_grads):
        """Losses (and, optionally, the gradient of the combined loss) at the
        given parameters.  One code path serves training and the
        finite-difference check."""
        emb, out_w, out_b = params["emb"], params["out_w"], params["out_b"]

        def zeros():
            return {
                "emb": np.zeros_like(emb),
                "out_w": np.zeros_like(out_w),
                "out_b": np.zeros_like(out_b),
            }

        g_ce = zeros() if want_grads else None
        l_ce = 0.0
        for ex in labeled:
            group_ids = [
                [self._vocab.index(t) for t in group] for group in ex.candidate_groups
            ]
            ctx = self._context_ids(tuple(ex.seq.tokens), ex.seq.mask_position)
            h = emb[ctx].mean(axis=0) if ctx else np.zeros(emb.shape[1])
            logits = np.array(
                [np.mean(out_w[ids] @ h + out_b[ids]) for ids in group_ids]
            )
            p = _softmax(logits)
            l_ce += -np.log(p[ex.target_index])
            if want_grads:
                dlogits = p.copy()
                dlogits[ex.target_index] -= 1.0
                dlogits /= len(labeled)
                dh = np.zeros_like(h)
                for g, ids in enumerate(group_ids):
                    coeff = dlogits[g] / len(ids)
                    for tid in ids:
                        g_ce["out_w"][tid] += coeff * h
                        g_ce["out_b"][tid] += coeff
                    dh += dlogits[g] * out_w[ids].mean(axis=0)
                if ctx:
                    np.add.at(g_ce["emb"], ctx, dh / len(ctx))
        if labeled:
            l_ce /= len(labeled)

        g_mlm = zeros() if want_grads else None
        l_mlm = 0.0
        n_positions = sum(len(ex.targets) for ex in mlm)
        for ex in mlm:
            for pos, original in ex.targets:
                target_id = self._vocab.index(original)
                ctx = self._context_ids(tuple(ex.tokens), pos)
                h = emb[ctx].mean(axis=0) if ctx else np.zeros(emb.shape[1])
                logits = out_w @ h + out_b
                p = _softmax(logits)
                l_mlm += -np.log(p[target_id])
                if want_grads:
                    dlogits = p.copy()
                    dlogits[target_id] -= 1.0
                    dlogits /= n_positions
                    g_mlm["out_w"] += np.outer(dlogits, h)
                    g_mlm["out_b"] += dlogits
                    if ctx:
                        dh = out_w.T @ dlogits
                        np.add.at(g_mlm["emb"], ctx, dh / len(ctx))
        if n_positions:
            l_mlm /= n_positions

        grads = None
        if want_grads:
            grads = {
                name: (1.0 - alpha) * g_ce[name] + alpha * g_mlm[name]
                for name in ("emb", "out_w", "out_b")
            }
        return l_ce, l_mlm, grads


def gradient_check(
    backend: MlmBackend,
    labeled: list[LabeledMaskExample],
    mlm: list[MlmExample],
    alpha: float,
    epsilon: float = 1e-5,
    entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the analytic gradient of the combined loss
    and central finite differences, over all parameter entries (or a random
    subset of at least 100 when ``entries`` is given)."""
    if not isinstance(backend, ToyMlmBackend):
        raise NotTrainable("gradient_check requires the trainable toy backend")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    params = {k: v.copy() for k, v in backend._params().items()}
    l_ce, l_mlm, grads = backend._combined_loss_grads(
        params, labeled, mlm, alpha, want_grads=True
    )

    names = ("emb", "out_w", "out_b")
    sizes = {name: params[name].size for name in names}
    coords: list[tuple[str, int]] = [
        (name, i) for name in names for i in range(sizes[name])
    ]
    if entries is not None and entries < len(coords):
        entries = max(entries, 100)
        rng = rng or np.random.default_rng(0)
        picked = rng.choice(len(coords), size=min(entries, len(coords)), replace=False)
        coords = [coords[i] for i in picked]

    def loss_at(p) -> float:
        ce, ml, _ = backend._combined_loss_grads(p, labeled, mlm, alpha, want_grads=False)
        return (1.0 - alpha) * ce + alpha * ml

    max_rel = 0.0
    for name, flat_idx in coords:
        flat = params[name].reshape(-1)
        original = flat[flat_idx]
        flat[flat_idx] = original + epsilon
        hi = loss_at(params)
        flat[flat_idx] = original - epsilon
        lo = loss_at(params)
        flat[flat_idx] = original
        numeric = (hi - lo) / (2.0 * epsilon)
        analytic = grads[name].reshape(-1)[flat_idx]
        scale = max(abs(numeric), abs(analytic), 1e-8)
        max_rel = max(max_rel, abs(numeric - analytic) / scale)
    return max_rel
