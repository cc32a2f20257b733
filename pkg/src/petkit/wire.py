"""Wire protocol for external masked-LM backends.

Newline-delimited JSON messages over a child-process pipe or a TCP socket.
Every message carries a mandatory protocol version field ``v``.  Requests
are ``{"v": 1, "op": ..., ...}``; responses are ``{"v": 1, "ok": true,
"result": ...}`` or ``{"v": 1, "ok": false, "error": code, "message": ...}``.
Floats travel as JSON numbers in shortest exact decimal form, so they
round-trip bit-identically.
"""

from __future__ import annotations

import json
import socket
import subprocess
from typing import Any

from .errors import (
    BackendUnavailable,
    HeadNotInitialized,
    NotTrainable,
    ProtocolError,
    SnapshotUnsupported,
    UnknownToken,
)

PROTOCOL_VERSION = 1

_ERROR_CLASSES = {
    "unknown_token": UnknownToken,
    "not_trainable": NotTrainable,
    "head_not_initialized": HeadNotInitialized,
    "snapshot_unsupported": SnapshotUnsupported,
    "bad_request": ProtocolError,
    "unsupported_op": ProtocolError,
}

_ERROR_CODES = {cls: code for code, cls in _ERROR_CLASSES.items()}


def encode_message(payload: dict) -> bytes:
    message = dict(payload)
    message.setdefault("v", PROTOCOL_VERSION)
    return (json.dumps(message) + "\n").encode("utf-8")


def decode_message(line: bytes | str) -> dict:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        message = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"invalid message: {e}") from e
    if not isinstance(message, dict):
        raise ProtocolError(f"message must be an object, got {type(message).__name__}")
    if message.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: {message.get('v')!r}")
    return message


def ok_response(result: Any) -> dict:
    return {"v": PROTOCOL_VERSION, "ok": True, "result": result}


def error_response(code: str, message: str) -> dict:
    return {"v": PROTOCOL_VERSION, "ok": False, "error": code, "message": message}


def raise_for_error(response: dict) -> Any:
    """Return the result of a response, or raise the mapped exception."""
    if response.get("ok") is True:
        return response.get("result")
    if response.get("ok") is False:
        code = response.get("error", "")
        cls = _ERROR_CLASSES.get(code, BackendUnavailable)
        raise cls(f"backend error [{code}]: {response.get('message', '')}")
    raise ProtocolError(f"response missing 'ok' field: {response}")


class Transport:
    """One request in flight at a time; not thread-safe by design."""

    def request(self, payload: dict) -> Any:
        self._send(encode_message(payload))
        line = self._recv()
        if not line:
            raise BackendUnavailable("backend closed the connection")
        return raise_for_error(decode_message(line))

    def _send(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class PipeTransport(Transport):
    """Child process speaking the protocol on stdin/stdout."""

    def __init__(self, argv: list[str]):
        try:
            self.proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                bufsize=0,
            )
        except OSError as e:
            raise BackendUnavailable(f"cannot start backend process {argv!r}: {e}") from e

    def _send(self, data: bytes) -> None:
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, ValueError) as e:
            raise BackendUnavailable(f"backend process is gone: {e}") from e

    def _recv(self) -> bytes:
        return self.proc.stdout.readline()

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class TcpTransport(Transport):
    def __init__(self, host: str, port: int):
        try:
            self.sock = socket.create_connection((host, port), timeout=30)
        except OSError as e:
            raise BackendUnavailable(f"cannot connect to {host}:{port}: {e}") from e
        self.rfile = self.sock.makefile("rb")

    def _send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as e:
            raise BackendUnavailable(f"connection lost: {e}") from e

    def _recv(self) -> bytes:
        return self.rfile.readline()

    def close(self) -> None:
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass


def dispatch_request(backend, request: dict) -> dict:
    """Serve one protocol request against a local backend instance.

    Used to run loop-back servers (tests, the toy backend behind the
    protocol).  Never raises: every failure becomes an error response.
    """
    from .backends.base import LabeledMaskExample, MlmExample
    from .pvp import MaskedSequence
    import numpy as np

    try:
        op = request.get("op")
        if op == "capabilities":
            caps = backend.capabilities
            return ok_response(
                {
                    "trainable": caps.trainable,
                    "supports_mlm_loss": caps.supports_mlm_loss,
                    "supports_classification_head": caps.supports_classification_head,
                    "score_convention": caps.score_convention,
                    "mask_token": getattr(backend.vocabulary, "mask_token", "<mask>")
                    if backend.vocabulary
                    else "<mask>",
                }
            )
        if op == "score":
            seq = MaskedSequence(
                tokens=tuple(request["tokens"]),
                mask_position=int(request["mask_pos"]),
                segment_ids=tuple(request.get("segment_ids") or [0] * len(request["tokens"])),
                mask_token=request.get("mask_token", "<mask>"),
            )
            scores = backend.score_candidates(seq, tuple(request["candidates"]))
            return ok_response({"scores": [float(s) for s in scores]})
        if op == "train_combined":
            labeled = [
                LabeledMaskExample(
                    seq=MaskedSequence(
                        tokens=tuple(ex["tokens"]),
                        mask_position=int(ex["mask_pos"]),
                        segment_ids=tuple(ex.get("segment_ids") or [0] * len(ex["tokens"])),
                        mask_token=ex.get("mask_token", "<mask>"),
                    ),
                    candidate_groups=tuple(tuple(g) for g in ex["groups"]),
                    target_index=int(ex["target"]),
                )
                for ex in request.get("labeled", [])
            ]
            mlm = [
                MlmExample(
                    tokens=tuple(ex["tokens"]),
                    targets=tuple((int(p), t) for p, t in ex["targets"]),
                    mask_token=ex.get("mask_token", "<mask>"),
                )
                for ex in request.get("mlm", [])
            ]
            report = backend.train_step_combined(
                labeled, mlm, float(request["alpha"]), float(request["learning_rate"])
            )
            return ok_response(
                {"l_ce": report.l_ce, "l_mlm": report.l_mlm, "l_total": report.l_total}
            )
        if op == "init_head":
            backend.init_head(int(request["n_labels"]))
            return ok_response({})
        if op == "classify":
            probs = backend.classify(tuple(request["tokens"]))
            return ok_response({"probs": [float(p) for p in probs]})
        if op == "train_soft":
            batch = [
                (tuple(item["tokens"]), np.array(item["q"], dtype=float))
                for item in request["batch"]
            ]
            loss = backend.train_step_soft(batch, float(request["learning_rate"]))
            return ok_response({"loss": float(loss)})
        if op == "snapshot":
            snap = backend.snapshot()
            snap_id = f"snap-{id(snap)}"
            _SNAPSHOTS.setdefault(id(backend), {})[snap_id] = snap
            return ok_response({"id": snap_id})
        if op == "restore":
            store = _SNAPSHOTS.get(id(backend), {})
            snap = store.get(request.get("id"))
            if snap is None:
                return error_response("bad_request", f"unknown snapshot {request.get('id')!r}")
            backend.restore(snap)
            return ok_response({})
        return error_response("unsupported_op", f"unknown op {op!r}")
    except UnknownToken as e:
        return error_response("unknown_token", str(e))
    except NotTrainable as e:
        return error_response("not_trainable", str(e))
    except HeadNotInitialized as e:
        return error_response("head_not_initialized", str(e))
    except SnapshotUnsupported as e:
        return error_response("snapshot_unsupported", str(e))
    except Exception as e:  # malformed fields, missing keys, anything else
        return error_response("bad_request", f"{type(e).__name__}: {e}")


_SNAPSHOTS: dict[int, dict] = {}


def serve_stdio(backend, stdin=None, stdout=None) -> None:
    """Blocking stdio server loop over a local backend; survives malformed
    requests by answering with protocol errors."""
    import sys

    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    for line in iter(stdin.readline, b""):
        if not line.strip():
            continue
        try:
            request = decode_message(line)
            response = dispatch_request(backend, request)
        except ProtocolError as e:
            response = error_response("bad_request", str(e))
        stdout.write(encode_message(response))
        stdout.flush()
