import math

import numpy as np
import pytest

from petkit.backends import ToyConfig, ToyMlmBackend, Vocabulary
from petkit.backends.base import LabeledMaskExample, MlmExample
from petkit.backends.toy import gradient_check
from petkit.errors import HeadNotInitialized, UnknownToken
from petkit.pvp import MaskedSequence

MASK = "<mask>"


def vocab(*tokens):
    return Vocabulary((MASK,) + tokens)


def seq(tokens, mask_pos):
    return MaskedSequence(tuple(tokens), mask_pos, (0,) * len(tokens))


def zeroed(backend):
    backend.emb[:] = 0.0
    backend.out_w[:] = 0.0
    backend.out_b[:] = 0.0
    return backend


@pytest.fixture
def small():
    return ToyMlmBackend(vocab("great", "bad", "food"), ToyConfig(dim=2, window=4, seed=1))


def test_zero_parameters_score_zero(small):
    zeroed(small)
    s = seq(["food", MASK, "food"], 1)
    assert np.allclose(small.score_candidates(s, ("great", "bad")), [0.0, 0.0])


def test_hand_computed_scores(small):
    # d=2, 3 content tokens; set every parameter explicitly
    v = small.vocabulary
    small.emb[:] = 0.0
    small.out_w[:] = 0.0
    small.out_b[:] = 0.0
    small.emb[v.index("food")] = [1.0, 2.0]
    small.emb[v.index("bad")] = [0.5, -1.0]
    small.out_w[v.index("great")] = [2.0, 1.0]
    small.out_w[v.index("bad")] = [-1.0, 3.0]
    small.out_b[v.index("great")] = 0.25
    s = seq(["food", MASK, "bad"], 1)
    # h = mean(emb[food], emb[bad]) = (0.75, 0.5)
    h = np.array([0.75, 0.5])
    expected_great = 2.0 * 0.75 + 1.0 * 0.5 + 0.25
    expected_bad = -1.0 * 0.75 + 3.0 * 0.5
    got = small.score_candidates(s, ("great", "bad"))
    assert np.allclose(got, [expected_great, expected_bad], atol=1e-12)
    assert np.allclose(small.out_w[[v.index("great"), v.index("bad")]] @ h
                       + small.out_b[[v.index("great"), v.index("bad")]], got)


def test_window_limits_context(small):
    v = small.vocabulary
    narrow = ToyMlmBackend(vocab("great", "bad", "food"), ToyConfig(dim=2, window=1, seed=1))
    narrow.emb[:] = 0.0
    narrow.out_w[:] = 1.0
    narrow.out_b[:] = 0.0
    narrow.emb[v.index("food")] = [1.0, 1.0]
    narrow.emb[v.index("great")] = [10.0, 10.0]
    # window=1: only "food" and "bad" are neighbours; distant "great" ignored
    s = seq(["great", "food", MASK, "bad", "great"], 2)
    got = narrow.score_candidates(s, ("bad",))
    # h = mean(emb[food], emb[bad]) = (0.5, 0.5); u=(1,1) -> 1.0
    assert np.allclose(got, [1.0])


def test_extra_masks_excluded_from_mlm_context(small):
    """Positions masked for the auxiliary objective must not contribute to
    each other's context; verify the loss against a hand computation."""
    v = small.vocabulary
    zeroed(small)
    small.emb[v.index("food")] = [1.0, 0.0]
    small.out_w[v.index("great")] = [1.0, 0.0]
    # tokens: food <mask> <mask>; both masks are targets
    ex = MlmExample((MASK, MASK, "food"), ((0, "great"), (1, "great")))
    report = small.train_step_combined([], [ex], alpha=1.0, learning_rate=0.0)
    # each target's context is just "food" (the other mask is excluded):
    # logits = out_w @ (1,0) = e_great -> softmax over 4 vocab entries
    logits = np.array([0.0, 1.0, 0.0, 0.0])  # mask, great, bad, food
    p = np.exp(logits) / np.exp(logits).sum()
    expected = -math.log(p[1])
    assert report.l_mlm == pytest.approx(expected, abs=1e-12)


def test_equal_logit_cross_entropy_is_ln2(small):
    zeroed(small)
    ex = LabeledMaskExample(seq(["food", MASK], 1), (("great",), ("bad",)), 0)
    report = small.train_step_combined([ex], [], alpha=0.0, learning_rate=0.0)
    assert report.l_ce == pytest.approx(math.log(2), abs=1e-12)
    assert report.l_total == report.l_ce  # alpha = 0
    assert report.l_mlm == 0.0


def test_alpha_zero_empty_labeled_means_zero_gradients(small):
    before = {k: v.copy() for k, v in small._params().items()}
    mlm = [MlmExample((MASK, "food"), ((0, "great"),))]
    small.train_step_combined([], mlm, alpha=0.0, learning_rate=10.0)
    after = small._params()
    for key in before:
        assert np.array_equal(before[key], after[key])


def test_bias_gradient_at_zero_params_is_softmax_minus_onehot(small):
    zeroed(small)
    ex = LabeledMaskExample(seq(["food", MASK], 1), (("great",), ("bad",)), 0)
    _, _, grads = small._combined_loss_grads(small._params(), [ex], [], 0.0, True)
    v = small.vocabulary
    # softmax of equal logits = (1/2, 1/2); target one-hot on "great"
    assert grads["out_b"][v.index("great")] == pytest.approx(0.5 - 1.0, abs=1e-12)
    assert grads["out_b"][v.index("bad")] == pytest.approx(0.5, abs=1e-12)
    assert grads["out_b"][v.index("food")] == 0.0


def test_losses_reported_before_update(small):
    zeroed(small)
    ex = LabeledMaskExample(seq(["food", MASK], 1), (("great",), ("bad",)), 0)
    r1 = small.train_step_combined([ex], [], alpha=0.0, learning_rate=1.0)
    r2 = small.train_step_combined([ex], [], alpha=0.0, learning_rate=1.0)
    assert r1.l_ce == pytest.approx(math.log(2))
    assert r2.l_ce < r1.l_ce  # the step moved the loss


def random_batch(backend, rng):
    toks = [t for t in backend.vocabulary.tokens if t != MASK]
    labeled = []
    for _ in range(2):
        tokens = [str(rng.choice(toks)) for _ in range(5)]
        pos = int(rng.integers(5))
        tokens[pos] = MASK
        labeled.append(
            LabeledMaskExample(seq(tokens, pos), (("great",), ("bad", "food")), int(rng.integers(2)))
        )
    mlm = []
    for _ in range(2):
        tokens = [str(rng.choice(toks)) for _ in range(6)]
        targets = []
        for pos in (1, 4):
            targets.append((pos, tokens[pos]))
            tokens[pos] = MASK
        mlm.append(MlmExample(tuple(tokens), tuple(targets)))
    return labeled, mlm


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_check_random_models(seed):
    rng = np.random.default_rng(seed)
    backend = ToyMlmBackend(
        vocab("great", "bad", "food", "nice", "meh"), ToyConfig(dim=3, window=3, seed=seed)
    )
    labeled, mlm = random_batch(backend, rng)
    err = gradient_check(backend, labeled, mlm, alpha=0.3, epsilon=1e-5)
    assert err < 1e-4


def test_gradient_check_subset_entries():
    rng = np.random.default_rng(5)
    backend = ToyMlmBackend(
        vocab("great", "bad", "food", "nice", "meh", "ok"), ToyConfig(dim=8, window=3, seed=5)
    )
    labeled, mlm = random_batch(backend, rng)
    err = gradient_check(backend, labeled, mlm, alpha=0.7, epsilon=1e-5, entries=120)
    assert err < 1e-4


def test_classify_zero_head_is_uniform(small):
    small.init_head(4)
    probs = small.classify(("food", "great"))
    assert np.allclose(probs, 0.25)
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)


def test_classify_hand_set_head(small):
    small.init_head(2)
    v = small.vocabulary
    small.emb[:] = 0.0
    small.emb[v.index("food")] = [2.0, 0.0]
    small.head_w[0] = [1.0, 0.0]
    small.head_w[1] = [-1.0, 0.0]
    small.head_b[:] = [0.1, -0.1]
    # g = emb[food] = (2, 0); logits = (2.1, -2.1)
    expected = np.exp([2.1, -2.1])
    expected /= expected.sum()
    assert np.allclose(small.classify(("food",)), expected, atol=1e-12)


def test_classify_requires_head(small):
    with pytest.raises(HeadNotInitialized):
        small.classify(("food",))


def test_soft_loss_uniform_vs_uniform_is_ln2(small):
    small.init_head(2)
    zeroed(small)  # head stays zero-init: model uniform
    loss = small.train_step_soft([(("food",), np.array([0.5, 0.5]))], learning_rate=0.0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_soft_loss_at_matching_distribution_is_entropy(small):
    small.init_head(2)
    small.emb[:] = 0.0
    small.head_b[:] = [math.log(0.8), math.log(0.2)]
    loss = small.train_step_soft([(("food",), np.array([0.8, 0.2]))], learning_rate=0.0)
    entropy = -(0.8 * math.log(0.8) + 0.2 * math.log(0.2))
    assert loss == pytest.approx(entropy, abs=1e-12)
    assert loss == pytest.approx(0.5004, abs=1e-4)


def test_one_hot_soft_equals_hard_cross_entropy(small):
    small.init_head(2)
    rng = np.random.default_rng(0)
    small.head_w[:] = rng.normal(size=small.head_w.shape)
    small.head_b[:] = rng.normal(size=2)
    x = ("food", "great")
    p = small.classify(x)
    hard = -math.log(p[1])
    loss = small.train_step_soft([(x, np.array([0.0, 1.0]))], learning_rate=0.0)
    assert loss == pytest.approx(hard, abs=1e-12)


def test_soft_gradients_match_finite_differences(small):
    """Test-side oracle for the classifier path: numeric differentiation of
    the soft loss over head and embedding entries."""
    small.init_head(2)
    rng = np.random.default_rng(2)
    small.emb[:] = rng.normal(scale=0.2, size=small.emb.shape)
    small.head_w[:] = rng.normal(scale=0.2, size=small.head_w.shape)
    small.head_b[:] = rng.normal(scale=0.2, size=2)
    batch = [(("food", "great"), np.array([0.7, 0.3])), (("bad",), np.array([0.2, 0.8]))]

    def loss_now():
        total = 0.0
        for x, q in batch:
            p = small.classify(x)
            total += -(q * np.log(p)).sum()
        return total / len(batch)

    snap = small.snapshot()
    lr = 1.0
    small.train_step_soft(batch, learning_rate=lr)
    analytic = {
        "head_w": (snap.payload["head_w"] - small.head_w) / lr,
        "head_b": (snap.payload["head_b"] - small.head_b) / lr,
        "emb": (snap.payload["emb"] - small.emb) / lr,
    }
    small.restore(snap)
    eps = 1e-6
    for name, arr in (("head_w", small.head_w), ("head_b", small.head_b), ("emb", small.emb)):
        flat = arr.reshape(-1)
        for idx in range(0, flat.size, max(1, flat.size // 10)):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = loss_now()
            flat[idx] = orig - eps
            lo = loss_now()
            flat[idx] = orig
            numeric = (hi - lo) / (2 * eps)
            assert numeric == pytest.approx(analytic[name].reshape(-1)[idx], abs=1e-6)


def test_snapshot_restore_bit_exact(small):
    s = seq(["food", MASK], 1)
    snap = small.snapshot()
    before = small.score_candidates(s, ("great", "bad"))
    ex = LabeledMaskExample(s, (("great",), ("bad",)), 0)
    small.train_step_combined([ex], [], alpha=0.0, learning_rate=0.5)
    changed = small.score_candidates(s, ("great", "bad"))
    assert not np.array_equal(before, changed)
    small.restore(snap)
    after = small.score_candidates(s, ("great", "bad"))
    assert np.array_equal(before, after)


def test_two_restores_diverge_only_with_different_data(small):
    snap = small.snapshot()
    s = seq(["food", MASK], 1)
    ex_a = LabeledMaskExample(s, (("great",), ("bad",)), 0)
    ex_b = LabeledMaskExample(s, (("great",), ("bad",)), 1)

    small.restore(snap)
    small.train_step_combined([ex_a], [], 0.0, 0.5)
    run_a = small.score_candidates(s, ("great", "bad"))

    small.restore(snap)
    small.train_step_combined([ex_a], [], 0.0, 0.5)
    run_a2 = small.score_candidates(s, ("great", "bad"))

    small.restore(snap)
    small.train_step_combined([ex_b], [], 0.0, 0.5)
    run_b = small.score_candidates(s, ("great", "bad"))

    assert np.array_equal(run_a, run_a2)
    assert not np.array_equal(run_a, run_b)


def test_same_seed_same_parameters():
    a = ToyMlmBackend(vocab("x", "y"), ToyConfig(dim=4, seed=9))
    b = ToyMlmBackend(vocab("x", "y"), ToyConfig(dim=4, seed=9))
    assert np.array_equal(a.emb, b.emb)
    assert np.array_equal(a.out_w, b.out_w)


def test_unknown_token_raises(small):
    s = seq(["food", MASK], 1)
    with pytest.raises(UnknownToken):
        small.score_candidates(s, ("nonexistent",))
    with pytest.raises(UnknownToken):
        small.score_candidates(seq(["martian", MASK], 1), ("great",))
