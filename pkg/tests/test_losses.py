import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixbound import losses as LS
from mixbound import tensor as T
from mixbound.losses import LossConfig

from oracles import REL_TOL, loss_cases, run_gradient_suite

EPS0 = 1e-12  # stands in for smoothing -> 0+


def val(t):
    return t.item()


def rand_case(rng, n=None):
    n = n or int(rng.integers(2, 30))
    p = rng.uniform(0.01, 0.99, n)
    y = (np.arange(n) >= rng.integers(1, n)).astype(float)
    return p, y


class TestBce:
    def test_half(self):
        assert val(LS.bce(np.full(6, 0.5), [0, 0, 1, 1, 1, 0])) == pytest.approx(math.log(2), abs=1e-15)

    def test_perfect_is_near_zero(self):
        y = np.array([0, 0, 1, 1.0])
        assert val(LS.bce(y, y)) == pytest.approx(0.0, abs=1e-6)

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(0)
        p, y = rand_case(rng, 9)
        direct = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)) / 9
        assert val(LS.bce(p, y)) == pytest.approx(direct, rel=1e-13)


class TestDice:
    def test_perfect_overlap(self):
        y = np.array([0, 1, 1, 1.0])
        assert val(LS.dice(y, y, EPS0)) == pytest.approx(0.0, abs=1e-9)

    def test_total_miss(self):
        y = np.array([0, 0, 1, 1.0])
        assert val(LS.dice(1 - y, y, EPS0)) == pytest.approx(1.0, abs=1e-9)

    def test_plug_in_value(self):
        # both classes: I = 1.7, P = 2.0, G = 2 -> (3.4 + 1) / (4 + 1) = 0.88
        assert val(LS.dice([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1], 1.0)) == pytest.approx(0.12, abs=1e-12)

    def test_bce_dice_composition(self):
        p, y = rand_case(np.random.default_rng(1))
        assert val(LS.bce_dice(p, y)) == pytest.approx(val(LS.bce(p, y)) + val(LS.dice(p, y)), abs=1e-14)
        yy = y.copy()
        assert val(LS.bce_dice(yy, yy, EPS0)) == pytest.approx(0.0, abs=1e-6)


class TestJaccard:
    def test_dice_jaccard_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p, y = rand_case(rng)
            for d, j in zip(LS.dice_coefficients(p, y, 0.0), LS.jaccard_indices(p, y, 0.0)):
                assert val(d) == pytest.approx(2 * val(j) / (1 + val(j)), abs=1e-12)

    def test_jaccard_loss_dominates_dice(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p, y = rand_case(rng)
            for d, j in zip(LS.dice_coefficients(p, y, 0.0), LS.jaccard_indices(p, y, 0.0)):
                assert 1 - val(j) >= 1 - val(d) - 1e-15

    def test_perfect(self):
        y = np.array([0, 1.0, 1.0])
        assert val(LS.jaccard(y, y, EPS0)) == pytest.approx(0.0, abs=1e-9)


class TestFocal:
    def test_reduces_to_half_bce(self):
        p, y = rand_case(np.random.default_rng(4))
        assert val(LS.focal(p, y, 0.0, 0.5)) == pytest.approx(0.5 * val(LS.bce(p, y)), abs=1e-14)

    def test_easy_token_down_weighted(self):
        f = val(LS.focal([0.9], [1], 2.0, 0.5))
        b = val(LS.bce([0.9], [1]))
        # (1 - 0.9)^2 * 0.5 = 0.005 of the BCE term
        assert f == pytest.approx(0.005 * b, rel=1e-9)
        assert f / b < val(LS.focal([0.6], [1], 2.0, 0.5)) / val(LS.bce([0.6], [1]))

    def test_matches_direct_recomputation(self):
        p, y = rand_case(np.random.default_rng(5), 7)
        terms = []
        for pi, yi in zip(p, y):
            pt = pi if yi == 1 else 1 - pi
            at = 0.25 if yi == 1 else 0.75
            terms.append(-at * (1 - pt) ** 2 * math.log(pt))
        assert val(LS.focal(p, y, 2.0, 0.25)) == pytest.approx(sum(terms) / 7, rel=1e-12)


class TestCombo:
    def test_endpoints_and_midpoint(self):
        p, y = rand_case(np.random.default_rng(6))
        b, d = val(LS.bce(p, y)), val(LS.dice(p, y))
        assert val(LS.combo(p, y, 1.0)) == pytest.approx(b, abs=1e-15)
        assert val(LS.combo(p, y, 0.0)) == pytest.approx(d, abs=1e-15)
        assert val(LS.combo(p, y, 0.5)) == pytest.approx((b + d) / 2, abs=1e-15)


class TestTversky:
    def test_half_half_is_dice(self):
        # exact without smoothing; with smoothing the two place eps differently
        rng = np.random.default_rng(7)
        for _ in range(100):
            p, y = rand_case(rng)
            assert abs(val(LS.tversky(p, y, 0.5, 0.5, 0.0)) - val(LS.dice(p, y, 0.0))) < 1e-12

    @pytest.mark.parametrize("smooth", [0.0, 1.0])
    def test_one_one_is_jaccard(self, smooth):
        rng = np.random.default_rng(8)
        for _ in range(100):
            p, y = rand_case(rng)
            assert abs(val(LS.tversky(p, y, 1.0, 1.0, smooth)) - val(LS.jaccard(p, y, smooth))) < 1e-12

    def test_beta_monotone_with_false_negatives(self):
        p, y = np.array([0.2, 0.3, 0.6, 0.4]), np.array([0, 0, 1, 1.0])
        vals = [val(LS.tversky(p, y, 0.3, b)) for b in (0.2, 0.5, 0.7, 1.0, 2.0)]
        assert all(a < b for a, b in zip(vals, vals[1:]))


class TestBceMae:
    def test_exact_counts(self):
        y = np.array([0, 0, 1, 1.0])
        total = val(LS.bce_mae(y, y))
        assert total == pytest.approx(val(LS.bce(y, y)), abs=1e-15)

    def test_half_everywhere(self):
        y = np.array([0, 1, 1, 1.0])
        mae_term = val(LS.bce_mae(np.full(4, 0.5), y)) - val(LS.bce(np.full(4, 0.5), y))
        assert mae_term == pytest.approx(0.25, abs=1e-15)

    def test_kink_uses_zero_subgradient(self):
        # soft count equals gold count exactly: the |.| term contributes no gradient
        y = np.array([0, 0, 1, 1.0])
        p = T.Tensor([0.3, 0.7, 0.4, 0.6], requires_grad=True)
        T.backward(LS.bce_mae(p, y) - LS.bce(p, y))
        np.testing.assert_array_equal(p.grad, np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1), st.sampled_from(LS.VARIANTS))
def test_non_negative_and_permutation_equivariant(n, seed, variant):
    rng = np.random.default_rng(seed)
    p, y = rand_case(rng, n)
    cfg = LossConfig(variant)
    a = val(LS.compute_loss(p, y, cfg))
    perm = rng.permutation(n)
    b = val(LS.compute_loss(p[perm], y[perm], cfg))
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("variant", LS.VARIANTS)
def test_zero_at_perfect_prediction(variant):
    y = np.array([0, 0, 0, 1, 1.0])
    cfg = LossConfig(variant, smooth=EPS0)
    assert val(LS.compute_loss(y, y, cfg)) == pytest.approx(0.0, abs=1e-5)
    assert val(LS.compute_loss(np.full(5, 0.5), y, cfg)) > 1e-3


def test_masked_positions_are_excluded():
    p = T.constant([0.2, 0.9, 0.3, 0.1])
    q, y = LS.masked(p, np.array([0, 1, 1, 1]), np.array([1, 1, 0, 0]))
    assert val(LS.bce(q, y)) == pytest.approx(val(LS.bce([0.2, 0.9], [0, 1])), abs=1e-15)


@pytest.mark.parametrize("bad", [dict(variant="hinge"), dict(smooth=0.0), dict(focal_gamma=-1.0), dict(tversky_alpha=0.0), dict(combo_alpha=1.5)])
def test_config_validation(bad):
    with pytest.raises(LS.LossConfigError):
        LossConfig(**bad).validate()


@pytest.mark.parametrize("name", sorted(loss_cases()))
def test_loss_gradients_fd_suite(name):
    assert run_gradient_suite({name: loss_cases()[name]}, n_cases=100)[name] < REL_TOL
