"""Property-based checks of the invariants (hypothesis)."""

import numpy as np
from hypothesis import given, reject, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from subseg.core import Parameter, Rng, Tensor, ops, sgd_step
from subseg.data import HierarchySpec, PlacementError, SyntheticSpec, generate_sample, random_crop
from subseg.hiermix import (PseudoLabel, SpatialTransform, make_pseudo_label, mix_images, mixed_target,
                            tau_schedule)
from subseg.metrics import dice_score, hd95

H = HierarchySpec((1, 3))
masks = arrays(bool, st.tuples(st.integers(1, 10), st.integers(1, 10)))
seeds = st.integers(0, 2 ** 63)


def _probs(seed, shape):
    rng = np.random.default_rng(seed)
    e = np.exp(rng.standard_normal(shape) * 3)
    return e / e.sum(axis=0, keepdims=True)


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 5), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-50, 50)))
def test_softmax_sums_to_one_and_positive(x):
    p = ops.softmax(Tensor(x), axis=1).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


@given(st.data())
def test_dice_and_hd95_symmetric_and_bounded(data):
    a = data.draw(masks)
    b = data.draw(arrays(bool, a.shape))
    d = dice_score(a, b)
    assert d == dice_score(b, a) and 0.0 <= d <= 1.0
    h = hd95(a, b)
    assert h == hd95(b, a)
    if h is not None:
        assert 0.0 <= h <= np.hypot(*a.shape)


@given(seeds, st.floats(0, 1), st.floats(0, 1))
def test_pseudo_label_sound_and_monotone(seed, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    pa, pb = _probs(seed, (4, 5, 5)), _probs(seed + 1, (4, 5, 5))
    y = np.random.default_rng(seed).integers(0, 2, (5, 5))
    low = make_pseudo_label(pa, pb, y, lo, H)
    high = make_pseudo_label(pa, pb, y, hi, H)
    assert np.all(H.parent_map[low.z_pse[low.valid]] == y[low.valid])
    assert not np.any(high.valid & ~low.valid)
    assert np.all(low.z_pse[~low.valid] == 0)


@given(seeds)
def test_identical_predictions_always_agree(seed):
    pa = _probs(seed, (4, 4, 4))
    y = H.collapse(pa.argmax(axis=0))
    pl = make_pseudo_label(pa, pa.copy(), y, 0.0, H)
    assert pl.valid.all()


@given(st.integers(0, 10 ** 6), st.integers(1, 10 ** 6))
def test_tau_in_range(it, total):
    it = it % (total + 1)
    assert 0.4 <= tau_schedule(it, total) <= 1.0


@given(st.integers(0, 3), st.booleans(), st.booleans(),
       arrays(np.float32, st.tuples(st.integers(1, 2), st.integers(1, 6), st.integers(1, 6))))
def test_transform_roundtrip(k, fh, fv, x):
    tf = SpatialTransform(k, fh, fv)
    assert np.array_equal(tf.inverse(tf.apply(x)), x, equal_nan=True)


@st.composite
def mix_case(draw):
    n = draw(st.integers(4, 12))
    rng = np.random.default_rng(draw(seeds))

    def box():
        t, l = draw(st.integers(0, n - 1)), draw(st.integers(0, n - 1))
        b, r = draw(st.integers(t + 1, n)), draw(st.integers(l + 1, n))
        m = np.zeros((n, n), int)
        m[t:b, l:r] = 1
        return m

    y, yf = box(), box()
    zf = yf * rng.integers(1, 4, (n, n))
    return (rng.random((1, n, n)).astype(np.float32), y, rng.random((1, n, n)).astype(np.float32), yf, zf,
            draw(st.floats(0.5, 1.0)))


@given(mix_case())
def test_mix_locality_and_target_rows(case):
    x, y, xf, yf, zf, alpha = case
    m = mix_images(x, y, xf, yf, zf, alpha)
    t, l, b, r = m.mix_bbox
    outside = np.ones(y.shape, bool)
    outside[t:b, l:r] = False
    assert np.array_equal(m.x_mix[:, outside], x[:, outside])
    assert np.all(m.z_full[outside] == 0)
    rng = np.random.default_rng(int(alpha * 1000))
    pl = PseudoLabel(rng.integers(0, 4, y.shape), rng.random(y.shape) < 0.5, 0.5)
    target, mask = mixed_target(m.z_full, pl, alpha, 4)
    np.testing.assert_allclose(target.sum(axis=0), 1.0, atol=1e-6)
    assert np.all(mask == 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 9), st.integers(0, 10 ** 9))
def test_generated_and_cropped_samples_stay_consistent(seed, crop_seed):
    spec = SyntheticSpec()
    try:
        s = generate_sample(seed, spec)
    except PlacementError:
        # rare crowded seeds; dataset generation re-derives the seed for these
        reject()
    assert np.array_equal(spec.hierarchy.collapse(s.z), s.y)
    c = random_crop(s, (32, 32), Rng(crop_seed))
    assert np.array_equal(spec.hierarchy.collapse(c.z), c.y)
    assert 0 <= c.image.min() and c.image.max() <= 1


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 1), st.floats(0, 0.99))
def test_sgd_matches_recursion(v, g, lr, m):
    p = Parameter(np.array([v], np.float64))
    buf, val = 0.0, v
    for _ in range(3):
        p.grad[:] = g
        sgd_step([p], lr, m)
        buf = m * buf + g
        val = val - lr * buf
    assert np.isclose(p.data[0], val, rtol=1e-12, atol=1e-12)
    assert not p.grad.any()
