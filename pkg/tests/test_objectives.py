import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tunes.objectives import (
    bce_loss,
    cross_entropy_loss,
    downsample_labels,
    median_frequency_weights,
    smoothing_loss,
    total_loss,
)

LN2 = math.log(2.0)


# ---- independent numpy oracles ------------------------------------------------

def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def ce_oracle(scores, y, w):
    lp = _log_softmax(scores)
    return -np.mean([w[c - 1] * lp[t, c - 1] for t, c in enumerate(y)])


def smooth_oracle(scores, prev_scores=None, tau=4.0):
    prev = scores if prev_scores is None else prev_scores
    lp, lq = _log_softmax(scores), _log_softmax(prev)
    d = np.minimum(np.abs(lp[1:] - lq[:-1]), tau)
    return (d**2).sum() / ((scores.shape[0] - 1) * scores.shape[1])


def bce_oracle(scores, target, w):
    s, c = scores.shape
    total = 0.0
    for i in range(s):
        for p in range(c):
            total += w[p] * target[i, p] * _log_sigmoid(scores[i, p])
            total += (1 - target[i, p]) * _log_sigmoid(-scores[i, p])
    return -total / (s * c)


def labels_oracle(y, factor, c):
    rows = []
    for s in range(len(y) // factor):
        row = np.zeros(c)
        for p in y[s * factor : (s + 1) * factor]:
            row[p - 1] = 1
        rows.append(row)
    return np.array(rows)


def central_difference(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def _t(a):
    return torch.tensor(a, dtype=torch.float64)


# ---- hand examples ---------------------------------------------------------------

def test_median_frequency_weights_examples():
    np.testing.assert_allclose(median_frequency_weights([[1, 1, 1, 2]], 2), [2 / 3, 2], rtol=1e-6)
    np.testing.assert_allclose(
        median_frequency_weights([[1, 1, 2, 2], [3, 3, 3, 3]], 3), [1, 1, 0.5], rtol=1e-6
    )
    np.testing.assert_allclose(median_frequency_weights([[1, 2, 3, 4, 5]], 5), np.ones(5), rtol=1e-6)


def test_median_frequency_weights_errors():
    with pytest.raises(ValueError, match="absent"):
        median_frequency_weights([[1, 1, 2]], 3)
    with pytest.raises(ValueError):
        median_frequency_weights([[0, 1]], 2)
    with pytest.raises(ValueError):
        median_frequency_weights([[]], 2)


def test_cross_entropy_examples():
    z = torch.zeros(2, 2, dtype=torch.float64)
    assert cross_entropy_loss(z, [1, 2], [1, 1]).item() == pytest.approx(LN2, rel=1e-6)
    assert cross_entropy_loss(z, [1, 2], [2, 0.5]).item() == pytest.approx(1.25 * LN2, rel=1e-6)
    saturated = _t([[60.0, -60.0], [-60.0, 60.0]])
    assert cross_entropy_loss(saturated, [1, 2]).item() < 1e-20
    with pytest.raises(ValueError):
        cross_entropy_loss(z, [1, 3])
    with pytest.raises(ValueError):
        cross_entropy_loss(z, [1, 2, 1])


def test_smoothing_examples():
    z = _t([[0.0, 0.0], [math.log(3), 0.0]])
    expected = (math.log(1.5) ** 2 + LN2**2) / 2
    assert smoothing_loss(z).item() == pytest.approx(expected, rel=1e-6)
    assert expected == pytest.approx(0.3224, abs=5e-5)
    assert smoothing_loss(torch.ones(5, 3)).item() == 0.0
    with pytest.raises(ValueError):
        smoothing_loss(torch.zeros(1, 3))


def test_smoothing_clips_at_threshold():
    # class 2 drops by about 99 nats and is clipped to 4; class 1 changes by ln 2
    z = _t([[0.0, 0.0], [50.0, -50.0]])
    assert smoothing_loss(z).item() == pytest.approx((LN2**2 + 16.0) / 2, rel=1e-9)


def test_bce_examples():
    z = torch.zeros(1, 2, dtype=torch.float64)
    assert bce_loss(z, [[1, 0]], [1, 1]).item() == pytest.approx(LN2, rel=1e-6)
    assert bce_loss(z, [[1, 0]], [3, 1]).item() == pytest.approx(2 * LN2, rel=1e-6)
    # weighting the absent class leaves the negative term alone
    assert bce_loss(z, [[1, 0]], [1, 7]).item() == pytest.approx(LN2, rel=1e-6)
    assert bce_loss(_t([[60.0, -60.0]]), [[1, 0]]).item() < 1e-20


def test_downsample_label_examples():
    assert downsample_labels([1, 1, 2], 3, 2).tolist() == [[1, 1]]
    assert downsample_labels([1, 1, 1], 3, 2).tolist() == [[1, 0]]
    assert downsample_labels([1, 2, 3, 3, 3, 3], 3, 3).tolist() == [[1, 1, 1], [0, 0, 1]]
    with pytest.raises(ValueError):
        downsample_labels([1, 2, 3, 3], 3, 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=8), st.sampled_from([1, 2, 3]))
def test_downsample_labels_matches_oracle(chunks, factor):
    rng = np.random.default_rng(len(chunks))
    y = np.repeat(chunks, factor)[rng.permutation(len(chunks) * factor)] if factor else chunks
    got = downsample_labels(y, factor, 4)
    np.testing.assert_array_equal(got, labels_oracle(y, factor, 4))
    assert (got.sum(axis=1) >= 1).all()
    # rows with several active phases only occur where the window holds a change
    windows = np.asarray(y).reshape(-1, factor)
    multi = got.sum(axis=1) > 1
    changes = (windows != windows[:, :1]).any(axis=1)
    np.testing.assert_array_equal(multi, changes)


def test_total_loss_hand_assembly():
    rng = np.random.default_rng(4)
    y = np.repeat([1, 2, 3, 2], [5, 4, 6, 3])
    preds = [rng.normal(size=(18 // s, 3)) for s in (1, 3, 9, 18)]
    w = np.array([0.8, 1.3, 1.1])
    expected = ce_oracle(preds[0], y, w) + 0.15 * smooth_oracle(preds[0])
    for p, s in zip(preds[1:], (3, 9, 18)):
        expected += bce_oracle(p, labels_oracle(y, s, 3), w)
    got = total_loss([_t(p) for p in preds], y, w).item()
    assert got == pytest.approx(expected, rel=1e-10)


def test_total_loss_without_smoothing_is_additive():
    rng = np.random.default_rng(5)
    y = np.repeat([1, 2], [10, 8])
    preds = [_t(rng.normal(size=(18 // s, 2))) for s in (1, 3, 9, 18)]
    parts = cross_entropy_loss(preds[0], y) + sum(
        bce_loss(p, downsample_labels(y, s, 2)) for p, s in zip(preds[1:], (3, 9, 18))
    )
    assert total_loss(preds, y, smooth_weight=0.0).item() == pytest.approx(parts.item(), rel=1e-12)


def test_total_loss_scale_mismatch():
    preds = [torch.zeros(18 // s, 2) for s in (1, 3, 9, 18)]
    with pytest.raises(ValueError):
        total_loss(preds, [1] * 36)
    with pytest.raises(ValueError):
        total_loss(preds[:3], [1] * 18)


def test_saturated_predictions_give_near_zero_total():
    # a single-phase video: a phase change would legitimately cost smoothing loss
    y = np.ones(18, dtype=int)
    preds = []
    for s in (1, 3, 9, 18):
        target = downsample_labels(y, s, 2) if s > 1 else np.eye(2)[y - 1]
        preds.append(_t(np.where(target > 0, 60.0, -60.0)))
    assert total_loss(preds, y).item() < 1e-12


# ---- finite differences -----------------------------------------------------------

def _instance(rng):
    t = int(rng.integers(2, 19))
    c = int(rng.integers(2, 8))
    scores = rng.normal(scale=2.0, size=(t, c))
    y = rng.integers(1, c + 1, size=t)
    w = rng.uniform(0.2, 3.0, size=c)
    return scores, y, w


def _grad(fn, scores):
    x = _t(scores).requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g.numpy()


def _close(analytic, numeric):
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)


@pytest.mark.parametrize("seed", range(50))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    scores, y, w = _instance(rng)
    c = scores.shape[1]

    _close(_grad(lambda x: cross_entropy_loss(x, y, w), scores),
           central_difference(lambda z: ce_oracle(z, y, w), scores))

    # the previous frame is a constant for the smoothing gradient
    _close(_grad(smoothing_loss, scores),
           central_difference(lambda z: smooth_oracle(z, scores), scores))

    target = (rng.random(scores.shape) < 0.4).astype(float)
    _close(_grad(lambda x: bce_loss(x, target, w), scores),
           central_difference(lambda z: bce_oracle(z, target, w), scores))


@pytest.mark.parametrize("seed", range(50))
def test_loss_values_match_oracles(seed):
    rng = np.random.default_rng(1000 + seed)
    scores, y, w = _instance(rng)
    target = (rng.random(scores.shape) < 0.4).astype(float)
    x = _t(scores)
    assert cross_entropy_loss(x, y, w).item() == pytest.approx(ce_oracle(scores, y, w), rel=1e-6)
    assert smoothing_loss(x).item() == pytest.approx(smooth_oracle(scores), rel=1e-6, abs=1e-12)
    assert bce_loss(x, target, w).item() == pytest.approx(bce_oracle(scores, target, w), rel=1e-6)
    for v in (cross_entropy_loss(x, y, w), smoothing_loss(x), bce_loss(x, target, w)):
        assert np.isfinite(v.item()) and v.item() >= 0


# ---- stop-gradient and invariances ------------------------------------------------------

def test_stop_gradient_on_previous_frame():
    x = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(smoothing_loss(x), x)
    assert torch.count_nonzero(g[0]) == 0
    assert torch.count_nonzero(g[1]) > 0


def test_stop_gradient_for_every_previous_step():
    # frame t-1 only receives gradient from its own term, never from frame t's
    x = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    (full,) = torch.autograd.grad(smoothing_loss(x), x)
    # the first frame never appears as a current frame
    assert torch.count_nonzero(full[0]) == 0
    # dropping the last frame's term leaves earlier gradients unchanged up to normalization
    (head,) = torch.autograd.grad(smoothing_loss(x[:5]), x)
    torch.testing.assert_close(full[:5] * 5 * 4, head[:5] * 4 * 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    y = np.repeat([1, 2, 3], 6)
    s1 = rng.normal(size=(18, 3))
    shift = rng.normal(scale=3.0, size=(18, 1))
    w = [1.0, 0.7, 1.4]
    assert cross_entropy_loss(_t(s1 + shift), y, w).item() == pytest.approx(
        cross_entropy_loss(_t(s1), y, w).item(), rel=1e-9)
    assert smoothing_loss(_t(s1 + shift)).item() == pytest.approx(
        smoothing_loss(_t(s1)).item(), rel=1e-9, abs=1e-12)
    s2 = rng.normal(size=(6, 3))
    t2 = downsample_labels(y, 3, 3)
    assert bce_loss(_t(s2 + 1.0), t2, w).item() != pytest.approx(bce_loss(_t(s2), t2, w).item(), rel=1e-6)
