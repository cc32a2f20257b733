"""Client adapter: an external process speaking the wire protocol, presented
through the standard backend interface."""

from __future__ import annotations

import numpy as np

from ..errors import SnapshotUnsupported
from ..pvp import MaskedSequence
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
from ..wire import PipeTransport, TcpTransport, Transport


def _seq_payload(seq: MaskedSequence) -> dict:
    return {
        "tokens": list(seq.tokens),
        "mask_pos": seq.mask_position,
        "segment_ids": list(seq.segment_ids),
        "mask_token": seq.mask_token,
    }


class RemoteBackend(MlmBackend):
    """Token validation happens server-side; ``vocabulary`` is None here."""

    def __init__(self, transport: Transport):
        self._transport = transport
        caps = transport.request({"op": "capabilities"})
        self._caps = BackendCapabilities(
            trainable=bool(caps.get("trainable")),
            supports_mlm_loss=bool(caps.get("supports_mlm_loss")),
            supports_classification_head=bool(caps.get("supports_classification_head")),
            score_convention=str(caps.get("score_convention", "logits")),
        )

    @classmethod
    def spawn(cls, argv: list[str]) -> "RemoteBackend":
        return cls(PipeTransport(argv))

    @classmethod
    def connect(cls, host: str, port: int) -> "RemoteBackend":
        return cls(TcpTransport(host, port))

    @property
    def capabilities(self) -> BackendCapabilities:
        return self._caps

    @property
    def vocabulary(self) -> Vocabulary | None:
        return None

    def score_candidates(self, seq, candidates) -> np.ndarray:
        result = self._transport.request(
            {"op": "score", **_seq_payload(seq), "candidates": list(candidates)}
        )
        return np.array(result["scores"], dtype=float)

    def train_step_combined(self, labeled, mlm, alpha, learning_rate) -> LossReport:
        payload = {
            "op": "train_combined",
            "labeled": [
                {
                    **_seq_payload(ex.seq),
                    "groups": [list(g) for g in ex.candidate_groups],
                    "target": ex.target_index,
                }
                for ex in labeled
            ],
            "mlm": [
                {
                    "tokens": list(ex.tokens),
                    "targets": [[p, t] for p, t in ex.targets],
                    "mask_token": ex.mask_token,
                }
                for ex in mlm
            ],
            "alpha": alpha,
            "learning_rate": learning_rate,
        }
        result = self._transport.request(payload)
        return LossReport(
            l_ce=float(result["l_ce"]),
            l_mlm=float(result["l_mlm"]),
            l_total=float(result["l_total"]),
        )

    def init_head(self, n_labels: int) -> None:
        self._transport.request({"op": "init_head", "n_labels": n_labels})

    def classify(self, x: ClassifiableInput) -> np.ndarray:
        result = self._transport.request(
            {"op": "classify", "tokens": list(flatten_input(x))}
        )
        return np.array(result["probs"], dtype=float)

    def train_step_soft(self, batch, learning_rate) -> float:
        payload = {
            "op": "train_soft",
            "batch": [
                {"tokens": list(flatten_input(x)), "q": [float(v) for v in q]}
                for x, q in batch
            ],
            "learning_rate": learning_rate,
        }
        return float(self._transport.request(payload)["loss"])

    def snapshot(self) -> ParamSnapshot:
        try:
            result = self._transport.request({"op": "snapshot"})
        except SnapshotUnsupported:
            raise
        return ParamSnapshot(payload=result["id"])

    def restore(self, snap: ParamSnapshot) -> None:
        self._transport.request({"op": "restore", "id": snap.payload})

    def close(self) -> None:
        self._transport.close()
