"""Run directories and manifests.

Layout: ``manifest.json`` (full resolved configuration and seeds — enough to
re-execute the run bit-identically on the toy backend), ``models/``,
``generations/``, ``reports/``.  Reports contain no timestamps, so re-runs
compare byte-for-byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backends.base import MlmBackend, ParamSnapshot, Vocabulary


def prepare_run_dir(path: str | Path) -> Path:
    root = Path(path)
    for sub in ("models", "generations", "reports"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def write_manifest(root: Path, command: str, params: dict) -> None:
    manifest = {"command": command, "params": params}
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text(encoding="utf-8"))


def write_report(root: Path, name: str, payload: dict) -> Path:
    out = root / "reports" / f"{name}.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def write_metrics_csv(root: Path, name: str, rows: list[dict]) -> Path:
    """Flat CSV alongside the JSON report, for plotting."""
    out = root / "reports" / f"{name}.csv"
    if rows:
        keys = list(rows[0].keys())
        lines = [",".join(keys)]
        for row in rows:
            lines.append(",".join(str(row.get(k, "")) for k in keys))
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def save_vocabulary(root: Path, vocab: Vocabulary) -> None:
    (root / "models" / "vocab.json").write_text(
        json.dumps({"tokens": list(vocab.tokens), "mask_token": vocab.mask_token}),
        encoding="utf-8",
    )


def load_vocabulary(root: Path) -> Vocabulary:
    raw = json.loads((root / "models" / "vocab.json").read_text(encoding="utf-8"))
    return Vocabulary(tuple(raw["tokens"]), mask_token=raw["mask_token"])


def save_backend_params(root: Path, name: str, backend: MlmBackend) -> None:
    payload = backend.snapshot().payload
    if isinstance(payload, dict):
        arrays = {k: v for k, v in payload.items() if v is not None}
        np.savez(root / "models" / f"{name}.npz", **arrays)


def load_backend_params(root: Path, name: str, backend: MlmBackend) -> None:
    arrays = dict(np.load(root / "models" / f"{name}.npz"))
    payload = {
        "emb": arrays["emb"],
        "out_w": arrays["out_w"],
        "out_b": arrays["out_b"],
        "head_w": arrays.get("head_w"),
        "head_b": arrays.get("head_b"),
    }
    backend.restore(ParamSnapshot(payload))
