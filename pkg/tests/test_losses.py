import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jpfa import autodiff as ad
from jpfa import losses as L
from jpfa.autodiff import Tensor, gradient_check
from jpfa.losses import KernelFamily, LossWeights

from .oracles import brute_dhn, brute_mmd

EPS = 1e-4
TOL = 1e-4


def val(t):
    return float(t.data)


# ---------------------------------------------------------------------------
# fixtures from hand derivations


def test_feature_distance():
    assert val(L.feature_distance([0.3, -0.2], [0.3, -0.2])) == 0.0
    assert val(L.feature_distance([1.0, 1.0], [-1.0, 1.0])) == 4.0
    assert val(L.feature_distance([1.0, 1.0], [-1.0, 1.0], squared=False)) == 2.0
    with pytest.raises(ad.ShapeError):
        L.feature_distance([1.0], [1.0, 2.0])


def test_feature_distance_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        u, v = rng.normal(size=(2, 8))
        assert val(L.feature_distance(u, v)) == val(L.feature_distance(v, u))


def test_hashing_loss_fixtures():
    assert val(L.hashing_loss([0.5, -0.5], [0.5, -0.5], 1, 3.0)) == 0.0
    for m in (0.1, 4.0, 100.0):
        assert val(L.hashing_loss([1.0, 1.0], [-1.0, 1.0], 1, m)) == 2.0
    assert val(L.hashing_loss([1.0, 1.0], [-1.0, 1.0], 0, 4.0)) == 0.0
    # D=4, m=10: 0.5 * (10 - 4)
    assert val(L.hashing_loss([1.0, 1.0], [-1.0, 1.0], 0, 10.0)) == 3.0
    with pytest.raises(ValueError):
        L.hashing_loss([1.0], [1.0], 0, 0.0)


def test_quantization_loss_fixtures():
    assert val(L.quantization_loss([1.0, -1.0, -1.0, 1.0])) == 0.0
    assert abs(val(L.quantization_loss([0.0, 0.0])) - 0.5 * math.sqrt(2.0)) < 1e-12
    assert abs(val(L.quantization_loss([0.0, 0.0])) - 0.70711) < 1e-5


def test_quantization_sign_flip_invariance():
    rng = np.random.default_rng(1)
    u = rng.normal(size=10)
    flips = rng.choice([-1.0, 1.0], size=10)
    assert val(L.quantization_loss(u)) == val(L.quantization_loss(u * flips))


def test_quantization_zero_only_on_binary():
    rng = np.random.default_rng(2)
    for _ in range(50):
        u = rng.choice([-1.0, 1.0], size=6)
        assert val(L.quantization_loss(u)) == 0.0
        u[rng.integers(6)] = rng.uniform(-0.99, 0.99)
        assert val(L.quantization_loss(u)) > 0.0


def test_consistency_fixtures():
    assert val(L.consistency_loss([0.2, 0.4], [0.2, 0.4])) == 0.0
    assert val(L.consistency_loss([1.0, -1.0], [-1.0, -1.0])) == 1.0
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 4, 6))
    assert val(L.consistency_loss(a, b)) == val(L.consistency_loss(b, a))
    assert abs(val(L.consistency_loss(a, b)) - np.abs(a - b).mean()) < 1e-12
    with pytest.raises(ad.ShapeError):
        L.consistency_loss([1.0], [1.0, 2.0])


def test_identity_loss_fixtures():
    assert val(L.identity_loss([[1.0, 2.0]], [[1.0, 2.0]])) == 0.0
    assert val(L.identity_loss([[1.0, 1.0]], [[1.0, -1.0]])) == 2.0
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 5, 3))
    whole = val(L.identity_loss(a, b))
    parts = val(L.identity_loss(a[:2], b[:2])) + val(L.identity_loss(a[2:], b[2:]))
    assert abs(whole - parts) < 1e-12
    with pytest.raises(ad.ShapeError):
        L.identity_loss(a, b[:4])


def test_gan_losses_fixtures():
    g, d = L.gan_losses(np.ones(6), np.zeros(6))
    assert val(d) == 0.0
    g, d = L.gan_losses(np.zeros(3), np.ones(3))
    assert val(g) == 0.0
    g, d = L.gan_losses(np.full(4, 0.5), np.full(4, 0.5))
    assert val(d) == 0.5
    assert val(g) == 0.25


def test_cycle_loss_fixtures():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, size=(2, 1, 4, 4))
    assert val(L.cycle_loss(x, x)) == 0.0
    assert abs(val(L.cycle_loss(x, x + 0.3)) - 0.3) < 1e-12
    y = rng.uniform(-1, 1, size=x.shape)
    oracle = 0.0
    for idx in np.ndindex(x.shape):
        oracle += abs(x[idx] - y[idx])
    oracle /= x.size
    assert abs(val(L.cycle_loss(x, y)) - oracle) < 1e-12
    with pytest.raises(ad.ShapeError):
        L.cycle_loss(x, y[:1])


def test_pixel_objective():
    w = LossWeights()
    assert val(L.pixel_objective(0.0, 0.0, 0.0, 0.0, w)) == 0.0
    rng = np.random.default_rng(6)
    for _ in range(10):
        a, b, c, d = rng.uniform(0, 5, size=4)
        w = LossWeights(cycle_weight=rng.uniform(0, 20), identity_weight=rng.uniform(0, 3))
        expect = a + b + w.cycle_weight * c + w.identity_weight * d
        assert abs(val(L.pixel_objective(a, b, c, d, w)) - expect) < 1e-12
        plain = LossWeights(cycle_weight=w.cycle_weight, identity_weight=0.0)
        assert abs(val(L.pixel_objective(a, b, c, d, plain)) - (a + b + w.cycle_weight * c)) < 1e-12


def test_joint_objective():
    assert val(L.joint_objective(0, 0, 0, 0, 0)) == 0.0
    assert val(L.joint_objective(1, 2, 3, 4, 5, LossWeights(beta=1.5))) == 17.5
    assert val(L.joint_objective(1, 2, 3, 4, 5, LossWeights(beta=0.0))) == 10.0


def test_defaults():
    w = LossWeights()
    assert w.alpha == 0.5
    assert w.beta == 1.5
    assert w.cycle_weight == 10.0 and w.identity_weight == 1.0
    assert w.margin_for(64) == 128.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)
    with pytest.raises(ValueError):
        LossWeights(beta=float("nan"))
    with pytest.raises(ValueError):
        LossWeights(margin_m=0.0)


# ---------------------------------------------------------------------------
# DHN batch loss vs brute force


def test_dhn_all_identical_binary():
    codes = np.tile(np.array([1.0, -1.0, 1.0, 1.0]), (5, 1))
    assert val(L.dhn_batch_loss(codes, np.ones((5, 5)))) == 0.0


def test_dhn_two_codes_reduces_to_pair():
    rng = np.random.default_rng(7)
    w = LossWeights(margin_m=3.0)
    for s in (0, 1):
        u, v = rng.uniform(-1, 1, size=(2, 4))
        rel = np.array([[1, s], [s, 1]])
        expect = val(L.hashing_loss(u, v, s, 3.0)) + w.alpha * (val(L.quantization_loss(u)) + val(L.quantization_loss(v)))
        assert abs(val(L.dhn_batch_loss(np.stack([u, v]), rel, w)) - expect) < 1e-12


@pytest.mark.parametrize("n", [2, 3, 4, 6, 8])
@pytest.mark.parametrize("squared", [True, False])
def test_dhn_matches_brute_force(n, squared):
    rng = np.random.default_rng(100 + n)
    for _ in range(5):
        k = int(rng.integers(2, 9))
        codes = rng.uniform(-1, 1, size=(n, k))
        labels = rng.integers(0, 3, size=n)
        rel = (labels[:, None] == labels[None, :]).astype(float)
        w = LossWeights(alpha=float(rng.uniform(0, 1)), margin_m=float(rng.uniform(0.5, 2 * k)))
        got = val(L.dhn_batch_loss(codes, rel, w, squared=squared))
        assert abs(got - brute_dhn(codes, labels, w.alpha, w.margin_m, squared)) < 1e-12


def test_dhn_rejects_small_batch():
    with pytest.raises(ValueError):
        L.dhn_batch_loss(np.zeros((1, 4)), np.ones((1, 1)))


@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.floats(0.1, 8.0))
def test_hashing_loss_properties(d1, d2, m):
    # build codes at squared distance d exactly along one axis
    def pair(d):
        return np.array([0.0]), np.array([math.sqrt(d)])

    for s in (0, 1):
        for d in (d1, d2):
            assert val(L.hashing_loss(*pair(d), s, m)) >= 0.0
    lo, hi = sorted((d1, d2))
    assert val(L.hashing_loss(*pair(lo), 1, m)) <= val(L.hashing_loss(*pair(hi), 1, m))
    if d1 >= m:
        # sqrt then square can land one ulp below d1
        assert val(L.hashing_loss(*pair(d1), 0, m)) <= 1e-12


# ---------------------------------------------------------------------------
# MMD


def test_mmd_identical_sets_zero():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(7, 5))
    assert abs(val(L.mmd(x, x, 1.3))) < 1e-12
    assert abs(val(L.mmd(x, x[::-1], 0.7))) < 1e-12


def test_mmd_single_points_hand_value():
    z = 1.7
    sigma = z / math.sqrt(2.0 * math.log(2.0))  # k(0, z) = 0.5
    got = val(L.mmd([[0.0]], [[z]], sigma))
    assert abs(got - 1.0) < 1e-12


def test_mmd_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(30):
        n, m, d = rng.integers(1, 33), rng.integers(1, 33), rng.integers(1, 17)
        x, y = rng.normal(size=(n, d)), rng.normal(size=(m, d)) + 0.3
        sigma = float(rng.uniform(0.3, 4.0))
        assert abs(val(L.mmd(x, y, sigma)) - brute_mmd(x, y, [sigma], [1.0])) < 1e-10


def test_mk_mmd_degenerate_and_linearity():
    rng = np.random.default_rng(10)
    x, y = rng.normal(size=(9, 4)), rng.normal(size=(6, 4))
    fam = KernelFamily((1.5,), (1.0,))
    assert val(L.mk_mmd(x, y, fam)) == val(L.mmd(x, y, 1.5))
    bws = (0.5, 1.0, 2.0, 4.0)
    fam = KernelFamily(bws)
    per = [val(L.mmd(x, y, b)) for b in bws]
    assert abs(val(L.mk_mmd(x, y, fam)) - np.mean(per)) < 1e-12
    assert abs(val(L.mk_mmd(x, x, fam))) < 1e-12


def test_mmd_symmetric():
    rng = np.random.default_rng(11)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(8, 3))
    fam = KernelFamily((0.5, 2.0), (0.3, 0.7))
    assert abs(val(L.mk_mmd(x, y, fam)) - val(L.mk_mmd(y, x, fam))) < 1e-12


def test_mmd_errors():
    with pytest.raises(ValueError):
        L.mmd(np.zeros((0, 3)), np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        KernelFamily((1.0, 2.0), (0.7, 0.7))
    with pytest.raises(ValueError):
        KernelFamily((1.0, 2.0), (1.2, -0.2))
    with pytest.raises(ValueError):
        KernelFamily(())
    with pytest.raises(ValueError):
        L.mmd(np.zeros((2, 3)), np.zeros((2, 3)), KernelFamily((1.0, 2.0)))


def test_median_heuristic_family():
    x = Tensor([[0.0, 0.0], [3.0, 4.0]])
    y = Tensor([[0.0, 0.0]])
    fam = L.median_heuristic_family(x, y)
    # pooled distances: 5, 0, 5 (each twice) -> median 5
    assert fam.bandwidths == (1.25, 2.5, 5.0, 10.0, 20.0)
    assert fam.weights == (0.2,) * 5


# ---------------------------------------------------------------------------
# gradients


def _rand_codes(rng, n, k):
    return rng.uniform(-0.9, 0.9, size=(n, k))


def test_loss_gradients():
    rng = np.random.default_rng(12)
    for _ in range(10):
        n, k = 5, 4
        labels = rng.integers(0, 2, size=n)
        rel = (labels[:, None] == labels[None, :]).astype(float)
        w = LossWeights(margin_m=3.0)
        codes = _rand_codes(rng, n, k)
        assert gradient_check(lambda t: L.dhn_batch_loss(t, rel, w), codes, EPS) < TOL
        assert gradient_check(lambda t: L.dhn_batch_loss(t, rel, w, squared=False), codes, EPS) < TOL

        other = _rand_codes(rng, 1, k)[0]
        assert gradient_check(lambda t: L.hashing_loss(t, other, 1, 3.0), codes[0], EPS) < TOL
        assert gradient_check(lambda t: L.hashing_loss(t, other, 0, 50.0), codes[0], EPS) < TOL
        assert gradient_check(L.quantization_loss, codes[0], EPS) < TOL

        y = rng.normal(size=(7, k))
        fam = KernelFamily((0.5, 1.0, 2.0))
        assert gradient_check(lambda t: L.mk_mmd(t, y, fam), codes, EPS) < TOL
        assert gradient_check(lambda t: L.mmd(y, t, 1.1), codes, EPS) < TOL

        cf = codes + rng.choice([-0.3, 0.3], size=codes.shape)
        assert gradient_check(lambda t: L.consistency_loss(t, cf), codes, EPS) < TOL
        assert gradient_check(lambda t: L.identity_loss(cf, t), codes, EPS) < TOL

        img = rng.uniform(-1, 1, size=(2, 1, 3, 3))
        rec = img + rng.choice([-0.2, 0.2], size=img.shape)
        assert gradient_check(lambda t: L.cycle_loss(img, t), rec, EPS) < TOL
        assert gradient_check(lambda t: L.gan_losses(np.ones(4), t)[0], rng.normal(size=(4,)), EPS) < TOL
        assert gradient_check(lambda t: L.gan_losses(t, rng.normal(size=4) * 0 + 0.2)[1], rng.normal(size=(4,)), EPS) < TOL

        parts = rng.uniform(0, 3, size=5)
        assert gradient_check(lambda t: L.joint_objective(*[ad.take_rows(t, [i]) for i in range(5)],
                                                          LossWeights(beta=1.5)),
                              parts, EPS) < TOL
