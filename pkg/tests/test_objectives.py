import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lim import numcore as nc
from lim.errors import DegenerateError, DimensionError, EmptyBatchError, InsufficientDataError
from lim.objectives import (
    bce_loss,
    discriminate,
    init_discriminator,
    init_speaker_head,
    lim_objective,
    mine_loss,
    nce_loss,
    pairwise_scores,
    speaker_logits,
    speaker_objective,
    triplet_loss,
)
from lim.trainer import OptimState, rmsprop_step

scores = st.lists(st.floats(-30, 30), min_size=1, max_size=20)


def zeroed(m, hidden=8):
    d = init_discriminator(m, hidden, 0)
    for t in d.values():
        t.data[...] = 0
    return d


# -- discriminator ---------------------------------------------------------------
def test_zero_discriminator_outputs():
    d = zeroed(3)
    za, zb = np.random.default_rng(0).standard_normal((2, 5, 3))
    np.testing.assert_array_equal(discriminate(za, zb, d, head="sigmoid").data, 0.5)
    np.testing.assert_array_equal(discriminate(za, zb, d).data, 0.0)


def test_discriminator_width_checked():
    with pytest.raises(DimensionError):
        discriminate(np.zeros((2, 3)), np.zeros((2, 4)), init_discriminator(3))


def test_discriminator_input_gradient():
    with nc.precision(64):
        rng = np.random.default_rng(1)
        d = init_discriminator(4, 16, rng)
        za = nc.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        zb = nc.Tensor(rng.standard_normal((6, 4)))
        w = rng.standard_normal(6)
        err = nc.gradcheck(lambda: (discriminate(za, zb, d) * w).sum(), [za])
    assert err < 1e-4


def test_pairwise_scores_match_rowwise_scores():
    rng = np.random.default_rng(2)
    d = init_discriminator(3, 10, rng)
    za, zb = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    S = pairwise_scores(za, zb, d).data
    for i in range(4):
        row = discriminate(np.repeat(za[i : i + 1], 5, 0), zb, d).data
        np.testing.assert_allclose(S[i], row, rtol=1e-5, atol=1e-6)


# -- BCE -----------------------------------------------------------------------------
def test_bce_examples():
    assert bce_loss(np.array([0.9, 0.8]), np.array([0.2]), logits=False).item() == pytest.approx(-0.3874, abs=1e-4)
    assert bce_loss(np.array([0.5]), np.array([0.5]), logits=False).item() == pytest.approx(-1.3863, abs=1e-4)
    assert bce_loss(np.array([1 - 1e-7]), np.array([1e-7]), logits=False).item() > -1e-6


def test_bce_chance_level_from_logits():
    with nc.precision(64):
        assert abs(bce_loss(np.zeros(7), np.zeros(3)).item() + 2 * np.log(2)) < 1e-6


@given(scores, scores)
def test_bce_bounded_above_by_zero(pos, neg):
    assert bce_loss(np.array(pos), np.array(neg)).item() <= 0


@settings(max_examples=50)
@given(st.lists(st.floats(-8, 8), min_size=1, max_size=10), st.lists(st.floats(-8, 8), min_size=1, max_size=10))
def test_bce_logit_form_equals_probability_form(pos, neg):
    with nc.precision(64):
        sig = lambda x: 1 / (1 + np.exp(-np.array(x)))  # noqa: E731
        a = bce_loss(np.array(pos), np.array(neg)).item()
        b = bce_loss(sig(pos), sig(neg), logits=False).item()
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_empty_scores_rejected():
    for fn in (bce_loss, mine_loss):
        with pytest.raises(EmptyBatchError):
            fn(np.array([]), np.array([1.0]))


# -- MINE ------------------------------------------------------------------------------
def test_mine_examples():
    assert mine_loss(np.array([2.0, 0.0]), np.array([0.0, 0.0])).item() == pytest.approx(1.0)


@given(scores.map(len), st.floats(-50, 50))
def test_mine_constant_critic_is_zero(n, c):
    with nc.precision(64):
        assert abs(mine_loss(np.full(n, c), np.full(n + 1, c)).item()) < 1e-6


@given(scores, scores, st.floats(-20, 20))
def test_mine_shift_invariance(pos, neg, c):
    with nc.precision(64):
        a = mine_loss(np.array(pos), np.array(neg)).item()
        b = mine_loss(np.array(pos) + c, np.array(neg) + c).item()
    assert abs(a - b) < 1e-6


def test_mine_null_sanity():
    # a fixed critic on independent pairs: positives and negatives share a
    # distribution.  Single batches scatter by about sd/sqrt(512), so the
    # bound is on the average magnitude across seeds.
    est = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = init_discriminator(1, 32, rng)
        x, y = rng.standard_normal((2, 512, 1))
        est.append(mine_loss(discriminate(x, y, d), discriminate(x, y[rng.permutation(512)], d)).item())
    assert np.mean(np.abs(est)) < 0.05


# -- NCE --------------------------------------------------------------------------------
def test_nce_examples():
    assert nce_loss(np.zeros(1), np.zeros((1, 127))).item() == pytest.approx(-4.8520, abs=1e-4)
    assert nce_loss(np.array([1.0]), np.array([[0.0]])).item() == pytest.approx(-0.3133, abs=1e-4)
    assert nce_loss(np.array([60.0]), np.zeros((1, 9))).item() == pytest.approx(0.0, abs=1e-6)


def test_nce_literal_form():
    assert nce_loss(np.array([1.0]), np.array([[0.0]]), literal=True).item() == pytest.approx(1 - np.log(2), abs=1e-6)


def test_nce_needs_two_candidates():
    with pytest.raises(InsufficientDataError):
        nce_loss(np.array([1.0]), np.zeros((1, 0)))


@settings(max_examples=100)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31), st.floats(-40, 40))
def test_nce_bounds_and_shift_invariance(n, k1, seed, c):
    with nc.precision(64):
        rng = np.random.default_rng(seed)
        pos, neg = rng.normal(0, 10, n), rng.normal(0, 10, (n, k1))
        value = nce_loss(pos, neg).item()
        assert value <= 0
        assert abs(nce_loss(pos + c, neg + c).item() - value) < 1e-6
        top = np.maximum(pos, neg.max(axis=1))
        assert nce_loss(top, neg).item() >= -np.log(k1 + 1) - 1e-12


# -- triplet ------------------------------------------------------------------------------
def test_triplet_examples():
    a, p, n = np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 0.0])
    assert triplet_loss(a, a, p).item() == pytest.approx(0.0)
    assert triplet_loss(a, p, n).item() == pytest.approx(-1.5)
    assert triplet_loss(a, p, p, margin=0.0).item() == pytest.approx(0.0)


def test_triplet_zero_norm():
    with pytest.raises(DegenerateError):
        triplet_loss(np.zeros(3), np.ones(3), np.ones(3))


# -- combined objective --------------------------------------------------------------------
@pytest.mark.parametrize("loss", ["bce", "mine", "nce", "triplet"])
def test_lim_objective_reaches_all_parameters(loss):
    rng = np.random.default_rng(3)
    d = init_discriminator(4, 8, rng)
    z = [nc.Tensor(rng.standard_normal((6, 4)), requires_grad=True) for _ in range(3)]
    obj, stats = lim_objective(loss, *z, d)
    nc.backward(obj)
    assert np.isfinite(obj.item()) and 0 <= stats["accuracy"] <= 1
    for t in z:
        assert t.grad is not None and np.any(t.grad)
    if loss != "triplet":
        assert all(t.grad is not None for t in d.values())


def test_nce_uses_batch_size_candidates():
    z = np.random.default_rng(0).standard_normal((3, 16, 2))
    obj, _ = lim_objective("nce", *z, zeroed(2))
    assert obj.item() == pytest.approx(-np.log(16), abs=1e-5)


def test_bce_chance_in_objective():
    z = np.random.default_rng(0).standard_normal((3, 5, 2))
    obj, _ = lim_objective("bce", *z, zeroed(2))
    assert obj.item() == pytest.approx(-2 * np.log(2), abs=1e-6)


@pytest.mark.parametrize("loss", ["bce", "mine", "nce"])
def test_objective_rises_on_separable_pairs(loss):
    # positives: y = x; negatives: y = -x.  A discriminator learns this quickly.
    rng = np.random.default_rng(4)
    d = init_discriminator(2, 16, rng)
    state = OptimState(lr=1e-2)
    epochs = []
    for _ in range(4):
        vals = []
        for step in range(25):
            x = rng.standard_normal((32, 2))
            obj, _ = lim_objective(loss, x, x, -x, d)
            for t in d.values():
                t.grad = None
            nc.backward(obj)
            rmsprop_step(d, {k: t.grad for k, t in d.items()}, state, step)
            vals.append(obj.item())
        epochs.append(np.mean(vals))
    assert epochs[-1] > epochs[0]
    assert sum(b >= a - 0.02 for a, b in zip(epochs, epochs[1:])) >= 2


# -- speaker head ------------------------------------------------------------------------------
def test_uniform_head_gives_log_n_classes():
    head = init_speaker_head(4, 20, 0, 0)
    for t in head.values():
        t.data[...] = 0
    logits = speaker_logits(np.random.default_rng(0).standard_normal((40, 4)), head)
    assert speaker_objective(logits, np.arange(40) % 20).item() == pytest.approx(-np.log(20), abs=1e-5)


def test_speaker_head_shapes():
    head = init_speaker_head(4, 3, 7, 0)
    assert speaker_logits(np.ones((2, 4)), head).shape == (2, 3)
    assert set(head) == {"head.fc0.weight", "head.fc0.bias", "head.out.weight", "head.out.bias"}
    with pytest.raises(EmptyBatchError):
        speaker_objective(np.zeros((0, 3)), [])
