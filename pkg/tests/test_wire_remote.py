import json
import socket
import subprocess
import sys
import threading
from pathlib import Path

import numpy as np
import pytest

from petkit.backends import OracleBackend, RemoteBackend, ToyConfig, ToyMlmBackend, Vocabulary
from petkit.backends.base import LabeledMaskExample, MlmExample
from petkit.errors import ProtocolError, UnknownToken
from petkit.pvp import MaskedSequence
from petkit.wire import (
    PROTOCOL_VERSION,
    decode_message,
    dispatch_request,
    encode_message,
    serve_stdio,
)

MASK = "<mask>"
VOCAB = (MASK, "great", "bad", "food", "nice")
SERVER = Path(__file__).parent / "stub_server.py"


def local_toy(seed=0):
    return ToyMlmBackend(Vocabulary(VOCAB), ToyConfig(dim=4, window=3, seed=seed))


def spawn_remote(seed=0):
    return RemoteBackend.spawn([sys.executable, str(SERVER), ",".join(VOCAB), str(seed)])


def seq(tokens, pos):
    return MaskedSequence(tuple(tokens), pos, (0,) * len(tokens))


def test_codec_roundtrip_floats_bit_exact():
    values = [0.1, 1 / 3, 1e-300, 123456.789012345678, -2.5e17]
    message = decode_message(encode_message({"op": "x", "floats": values}))
    assert message["floats"] == values
    assert all(a == b for a, b in zip(message["floats"], values))  # bit-identical


def test_version_field_is_mandatory():
    with pytest.raises(ProtocolError):
        decode_message(json.dumps({"op": "score"}))
    with pytest.raises(ProtocolError):
        decode_message(json.dumps({"v": 99, "op": "score"}))


def test_remote_capabilities():
    remote = spawn_remote()
    try:
        caps = remote.capabilities
        assert caps.trainable
        assert caps.supports_mlm_loss
        assert caps.score_convention == "logits"
    finally:
        remote.close()


def test_remote_scores_match_local_bit_exact():
    remote, local = spawn_remote(seed=3), local_toy(seed=3)
    try:
        s = seq(["food", MASK, "nice"], 1)
        got = remote.score_candidates(s, ("great", "bad"))
        want = local.score_candidates(s, ("great", "bad"))
        assert np.array_equal(got, want)
    finally:
        remote.close()


def test_remote_training_matches_local_bit_exact():
    remote, local = spawn_remote(seed=1), local_toy(seed=1)
    try:
        labeled = [LabeledMaskExample(seq(["food", MASK], 1), (("great",), ("bad",)), 0)]
        mlm = [MlmExample((MASK, "nice"), ((0, "food"),))]
        for _ in range(3):
            a = remote.train_step_combined(labeled, mlm, alpha=0.25, learning_rate=0.1)
            b = local.train_step_combined(labeled, mlm, alpha=0.25, learning_rate=0.1)
            assert (a.l_ce, a.l_mlm, a.l_total) == (b.l_ce, b.l_mlm, b.l_total)
        s = seq(["nice", MASK], 1)
        assert np.array_equal(
            remote.score_candidates(s, ("great",)), local.score_candidates(s, ("great",))
        )
    finally:
        remote.close()


def test_remote_classifier_and_snapshot():
    remote = spawn_remote(seed=2)
    try:
        remote.init_head(2)
        assert np.allclose(remote.classify(("food", "nice")), [0.5, 0.5])
        snap = remote.snapshot()
        loss = remote.train_step_soft([(("food",), np.array([0.9, 0.1]))], 0.5)
        assert loss > 0
        moved = remote.classify(("food",))
        remote.restore(snap)
        assert np.allclose(remote.classify(("food",)), [0.5, 0.5])
        assert not np.allclose(moved, [0.5, 0.5])
    finally:
        remote.close()


def test_remote_unknown_token_error():
    remote = spawn_remote()
    try:
        with pytest.raises(UnknownToken):
            remote.score_candidates(seq(["food", MASK], 1), ("martian",))
    finally:
        remote.close()


def test_malformed_requests_do_not_kill_server():
    proc = subprocess.Popen(
        [sys.executable, str(SERVER), ",".join(VOCAB)],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        bufsize=0,
    )
    try:
        for garbage in (b"this is not json\n", b'{"v": 1}\n', b'{"v": 5, "op": "score"}\n',
                        b'{"v": 1, "op": "launch_missiles"}\n'):
            proc.stdin.write(garbage)
            proc.stdin.flush()
            reply = json.loads(proc.stdout.readline())
            assert reply["ok"] is False
            assert reply["v"] == PROTOCOL_VERSION
        # server still answers a well-formed request afterwards
        proc.stdin.write(encode_message({"op": "capabilities"}))
        proc.stdin.flush()
        reply = json.loads(proc.stdout.readline())
        assert reply["ok"] is True
    finally:
        proc.kill()


def test_tcp_transport():
    backend = local_toy(seed=4)
    server = socket.socket()
    server.bind(("127.0.0.1", 0))
    server.listen(1)
    port = server.getsockname()[1]

    def serve_one():
        conn, _ = server.accept()
        with conn, conn.makefile("rb") as rfile, conn.makefile("wb") as wfile:
            serve_stdio(backend, stdin=rfile, stdout=wfile)

    thread = threading.Thread(target=serve_one, daemon=True)
    thread.start()
    remote = RemoteBackend.connect("127.0.0.1", port)
    try:
        s = seq(["food", MASK], 1)
        got = remote.score_candidates(s, ("great", "bad"))
        want = local_toy(seed=4).score_candidates(s, ("great", "bad"))
        assert np.array_equal(got, want)
    finally:
        remote.close()
        server.close()


def test_dispatch_oracle_backend():
    oracle = OracleBackend.from_distribution({"great": 0.8, "bad": 0.2})
    reply = dispatch_request(
        oracle,
        {"v": 1, "op": "score", "tokens": ["x", MASK], "mask_pos": 1,
         "candidates": ["great", "bad"]},
    )
    assert reply["ok"]
    assert reply["result"]["scores"] == pytest.approx([np.log(0.8), np.log(0.2)])
    reply = dispatch_request(oracle, {"v": 1, "op": "train_combined", "labeled": [],
                                      "mlm": [], "alpha": 0.0, "learning_rate": 0.1})
    assert reply["error"] == "not_trainable"
