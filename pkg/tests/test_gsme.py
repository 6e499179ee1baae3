import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstkd import autodiff as ad
from mstkd.autodiff import Tensor
from mstkd.distill import LossWeights
from mstkd.gsme import (
    D_CLAMP,
    Discriminator,
    StyleFeatures,
    adversarial_loss,
    discriminator_loss,
    literal_adversarial_value,
    generator_loss,
    gram_match_loss,
    gram_pairs,
    gsme_loss,
    separation,
)
from mstkd.train import Adam


def _features(rng, ce=3, ct=4, cd=2, s=5):
    return StyleFeatures(*(Tensor(rng.normal(size=(c, s))) for c in (ce, ct, cd)))


def _gram_brute(a, b):
    rows, cols, s = a.shape[0], b.shape[0], a.shape[1]
    return [[sum(a[i, k] * b[j, k] for k in range(s)) for j in range(cols)] for i in range(rows)]


def _gsme_brute(sf, sm, theta):
    total = 0.0
    for x, y in (("f_enc", "f_dec"), ("f_enc", "f_t"), ("f_dec", "f_t")):
        gf = _gram_brute(getattr(sf, x).data, getattr(sf, y).data)
        gm = _gram_brute(getattr(sm, x).data, getattr(sm, y).data)
        rows, cols = len(gf), len(gf[0])
        sq = 0.0
        for i in range(rows):
            for j in range(cols):
                sq += (gf[i][j] - gm[i][j]) ** 2
        total += theta / (4.0 * rows * cols) * sq
    return total


def test_gram_pairs_identity_and_zero():
    eye = Tensor(np.eye(3))
    for m in gram_pairs(StyleFeatures(eye, eye, eye)):
        np.testing.assert_array_equal(m.data, np.eye(3))
    z = Tensor(np.zeros((2, 4)))
    for m in gram_pairs(StyleFeatures(z, z, z)):
        np.testing.assert_array_equal(m.data, 0.0)


def test_gram_inner_product_example():
    s = StyleFeatures(Tensor([[1.0, 1.0]]), Tensor([[0.0, 0.0]]), Tensor([[1.0, -1.0]]))
    m1, _, _ = gram_pairs(s)
    np.testing.assert_array_equal(m1.data, [[0.0]])


def test_gram_shapes():
    m1, m2, m3 = gram_pairs(_features(np.random.default_rng(0)))
    assert m1.shape == (3, 2) and m2.shape == (3, 4) and m3.shape == (2, 4)


def test_style_features_need_shared_length():
    with pytest.raises(ad.ShapeError):
        StyleFeatures(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))))


def test_gsme_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        sf, sm = _features(rng), _features(rng)
        theta = rng.uniform(0.1, 3.0)
        got = gram_match_loss(sf, sm, theta).item()
        assert abs(got - _gsme_brute(sf, sm, theta)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), s=st.integers(2, 9))
def test_gram_permutation_invariance(seed, s):
    rng = np.random.default_rng(seed)
    f = _features(rng, s=s)
    perm = rng.permutation(s)
    g = StyleFeatures(*(Tensor(t.data[:, perm]) for t in (f.f_enc, f.f_t, f.f_dec)))
    for a, b in zip(gram_pairs(f), gram_pairs(g)):
        # a permutation reorders the summands, so compare to rounding
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)
    # exact for integer-valued features where every partial sum is representable
    fi = StyleFeatures(*(Tensor(rng.integers(-9, 10, size=t.shape).astype(float)) for t in (f.f_enc, f.f_t, f.f_dec)))
    gi = StyleFeatures(*(Tensor(t.data[:, perm]) for t in (fi.f_enc, fi.f_t, fi.f_dec)))
    for a, b in zip(gram_pairs(fi), gram_pairs(gi)):
        np.testing.assert_array_equal(a.data, b.data)


def test_gsme_zero_case_and_normalisation():
    rng = np.random.default_rng(2)
    sf = _features(rng)
    w = LossWeights(epsilon=0.0)
    assert gsme_loss(sf, sf, Tensor(0.7), w).item() == 0.0
    # one Gram entry off by one with theta = 4 n^2 contributes exactly 1
    e = Tensor([[1.0, 0.0]])
    t_f = Tensor([[1.0, 0.0]])
    t_m = Tensor([[2.0, 0.0]])
    d = Tensor([[0.0, 0.0]])
    got = gram_match_loss(StyleFeatures(e, t_f, d), StyleFeatures(e, t_m, d), theta=4.0)
    assert got.item() == 1.0


def test_gsme_adds_weighted_adversarial_term():
    rng = np.random.default_rng(3)
    sf, sm = _features(rng), _features(rng)
    w = LossWeights(epsilon=0.25, theta=2.0)
    assert gsme_loss(sf, sm, Tensor(1.2), w).item() == pytest.approx(0.3 + gram_match_loss(sf, sm, 2.0).item(), abs=1e-14)


def test_gram_loss_gradients_student_only():
    rng = np.random.default_rng(4)
    for _ in range(20):
        sf = _features(rng)
        arrays = [rng.normal(size=(c, 5)) for c in (3, 4, 2)]
        ad.gradcheck(lambda a, b, c: gram_match_loss(sf, StyleFeatures(a, b, c), 1.7), arrays, rtol=1e-4)
    sf = StyleFeatures(*(Tensor(rng.normal(size=(c, 5)), requires_grad=True) for c in (3, 4, 2)))
    sm = StyleFeatures(*(Tensor(rng.normal(size=(c, 5)), requires_grad=True) for c in (3, 4, 2)))
    gram_match_loss(sf, sm).backward()
    assert all(t.grad is None for t in (sf.f_enc, sf.f_t, sf.f_dec))
    assert all(np.any(t.grad) for t in (sm.f_enc, sm.f_t, sm.f_dec))


# --- discriminator -------------------------------------------------------------


def test_literal_adversarial_at_chance():
    assert literal_adversarial_value(0.5, 0.5) == pytest.approx(2 * math.log(0.5), abs=1e-12)
    assert literal_adversarial_value(0.5, 0.5) == pytest.approx(-1.3863, abs=1e-4)


def test_clamp_keeps_logs_finite():
    assert math.isfinite(literal_adversarial_value(1.0, 0.0))
    d = Discriminator(4, seed=0)
    d.params["d3.b"].data[:] = 1e4  # saturate to D == 1
    x = Tensor(np.ones((4, 3)))
    loss_d, loss_g = adversarial_loss(d, x, x)
    assert math.isfinite(loss_d.item()) and math.isfinite(loss_g.item())
    assert loss_d.item() == pytest.approx(-math.log(D_CLAMP) - math.log(1.0 - D_CLAMP), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-3, 1e3))
def test_discriminator_output_open_interval(seed, scale):
    rng = np.random.default_rng(seed)
    d = Discriminator(6, seed=seed % 100)
    p = d(Tensor(rng.normal(size=(6, 4)) * scale)).item()
    assert 0.0 < p < 1.0


def test_identical_inputs_give_chance_level_discriminator():
    rng = np.random.default_rng(5)
    d = Discriminator(5, seed=1)
    x = Tensor(rng.normal(size=(5, 8)))
    assert separation(d, x, x) == 0.0
    xm = Tensor(x.data.copy(), requires_grad=True)
    generator_loss(d, xm).backward()
    assert np.all(np.isfinite(xm.grad))


def test_adversarial_gradients():
    rng = np.random.default_rng(6)
    for _ in range(20):
        d = Discriminator(4, hidden=6, seed=int(rng.integers(1000)))
        xf = Tensor(rng.normal(size=(4, 3)))
        xm = rng.normal(size=(4, 3))
        ad.gradcheck(lambda x: generator_loss(d, x), [xm], rtol=1e-4)
        w = d.state_dict()
        names = list(w)

        def f_d(*arrays):
            dd = Discriminator(4, hidden=6, params=dict(zip(names, arrays)))
            return discriminator_loss(dd, xf, Tensor(xm))

        ad.gradcheck(f_d, [w[k] for k in names], rtol=1e-4)


def test_discriminator_loss_stops_feature_gradients():
    rng = np.random.default_rng(7)
    d = Discriminator(4, seed=0)
    xf = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    xm = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    discriminator_loss(d, xf, xm).backward()
    assert xf.grad is None and xm.grad is None
    assert np.any(d.params["d1.w"].grad)


def test_alternating_update_moves_separation_in_opposite_directions():
    rng = np.random.default_rng(8)
    d = Discriminator(6, seed=3)
    xf = Tensor(rng.normal(1.0, 0.3, size=(6, 4)))
    xm = Tensor(rng.normal(-1.0, 0.3, size=(6, 4)), requires_grad=True)
    d_opt = Adam(d.params, lr=1e-2)
    g_opt = Adam({"xm": xm}, lr=1e-2)

    before = separation(d, xf, xm)
    d.zero_grad()
    discriminator_loss(d, xf, xm).backward()
    d_opt.step()
    after_d = separation(d, xf, xm)

    xm.zero_grad()
    d.zero_grad()
    generator_loss(d, xm).backward()
    g_opt.step()
    after_g = separation(d, xf, xm)

    assert after_d > before
    assert after_g < after_d
