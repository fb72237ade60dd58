import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spevec.losses import (AnnealSchedule, ClassifierHead, DegenerateBatchError, L2Constraint,
                           LossOutput, RingState, asoftmax_loss, asoftmax_psi, init_ring_R,
                           l2_constrain, ring_loss, softmax_loss, total_loss)
from spevec.numerics import check_gradients, finite_difference_gradient, gradient_relative_error


def _unit_head(rng, n, dim):
    head = ClassifierHead(n, dim, rng, unit_rows=True)
    return head


# --- softmax ------------------------------------------------------------------

def test_uniform_logits_give_log_n():
    head = ClassifierHead(7, 4)
    head.params["weight"][...] = 0.0
    out = softmax_loss(np.random.default_rng(0).standard_normal((5, 4)), [0, 1, 2, 3, 6], head)
    assert out.value == pytest.approx(math.log(7), abs=1e-14)


def test_saturated_logits():
    head = ClassifierHead(3, 3)
    head.params["weight"][...] = np.eye(3) * 100
    head.params["bias"][...] = 0
    assert softmax_loss(np.eye(3), [0, 1, 2], head).value < 1e-10


def test_two_class_hand_value():
    head = ClassifierHead(2, 2)
    head.params["weight"][...] = [[1.0, -2.0], [0.5, 3.0]]
    head.params["bias"][...] = [0.25, -1.0]
    f = np.array([[0.3, 0.7]])
    z0 = 1.0 * 0.3 - 2.0 * 0.7 + 0.25
    z1 = 0.5 * 0.3 + 3.0 * 0.7 - 1.0
    expected = -(z1 - math.log(math.exp(z0) + math.exp(z1)))
    assert softmax_loss(f, [1], head).value == pytest.approx(expected, abs=1e-14)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_loss(np.ones((2, 3)), [0, 3], ClassifierHead(3, 3))
    with pytest.raises(ValueError):
        softmax_loss(np.ones((1, 3)), [-1], ClassifierHead(3, 3))


# --- psi ------------------------------------------------------------------------

def test_psi_values():
    assert asoftmax_psi(0.0, 4) == 1.0
    assert asoftmax_psi(math.pi / 4, 4) == pytest.approx(-1.0, abs=1e-15)
    assert asoftmax_psi(math.pi, 4) == pytest.approx(-7.0, abs=1e-15)


def test_psi_m1_is_cosine():
    th = np.linspace(0, math.pi, 101)
    np.testing.assert_allclose(asoftmax_psi(th, 1), np.cos(th), atol=1e-15)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_psi_continuous_at_knots(m):
    for k in range(1, m):
        knot = k * math.pi / m
        left = (-1.0) ** (k - 1) * math.cos(m * knot) - 2 * (k - 1)
        right = (-1.0) ** k * math.cos(m * knot) - 2 * k
        assert abs(left - right) < 1e-12
        lo, hi = np.nextafter(knot, 0), np.nextafter(knot, 4)
        assert abs(asoftmax_psi(lo, m) - asoftmax_psi(hi, m)) < 1e-12


@pytest.mark.parametrize("m", [2, 3, 4])
def test_psi_strictly_decreasing(m):
    vals = asoftmax_psi(np.linspace(0, math.pi, 1000), m)
    assert np.all(np.diff(vals) < 0)


@pytest.mark.parametrize("theta", [-1e-3, math.pi + 1e-3])
def test_psi_domain(theta):
    with pytest.raises(ValueError):
        asoftmax_psi(theta, 4)


# --- A-softmax --------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.integers(2, 6), st.integers(0, 2 ** 31))
def test_asoftmax_m1_equals_softmax(n, classes, seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n, 5)) * 3
    labels = rng.integers(0, classes, n)
    head = _unit_head(rng, classes, 5)
    a = asoftmax_loss(f, labels, head, margin=1, beta=0.0)
    s = softmax_loss(f, labels, head)
    assert abs(a.value - s.value) < 1e-10
    np.testing.assert_allclose(a.d_embeddings, s.d_embeddings, atol=1e-10)


def test_collinear_target_logit_is_norm():
    head = ClassifierHead(3, 3, unit_rows=True)
    head.params["weight"][...] = np.eye(3)
    f = np.array([[2.5, 0.0, 0.0]])
    for m in (1, 2, 4):
        expected = -(2.5 - math.log(math.exp(2.5) + 2.0))
        assert asoftmax_loss(f, [0], head, margin=m).value == pytest.approx(expected, abs=1e-12)


def test_margin_increases_loss():
    rng = np.random.default_rng(0)
    for _ in range(20):
        f = rng.standard_normal((16, 6))
        labels = rng.integers(0, 4, 16)
        head = _unit_head(rng, 4, 6)
        assert asoftmax_loss(f, labels, head, 4).value >= asoftmax_loss(f, labels, head, 1).value


def test_zero_norm_embedding_rejected():
    with pytest.raises(ValueError):
        asoftmax_loss(np.zeros((1, 3)), [0], ClassifierHead(2, 3, unit_rows=True))


def test_anneal_schedule():
    a = AnnealSchedule()
    assert a.beta(0) == 1000.0
    assert a.beta(10) == pytest.approx(500.0)
    assert a.beta(10 ** 6) == 5.0
    assert AnnealSchedule.constant(3.0).beta(123) == 3.0


def test_renormalize_gives_unit_rows():
    head = ClassifierHead(5, 4, np.random.default_rng(0), unit_rows=True)
    head.params["weight"] *= 3.7
    head.params["bias"] += 1
    head.renormalize()
    np.testing.assert_allclose(np.linalg.norm(head.params["weight"], axis=1), 1.0, atol=1e-15)
    assert np.all(head.params["bias"] == 0)


# --- L2 constraint ---------------------------------------------------------------

def test_l2_constrain_examples():
    np.testing.assert_allclose(l2_constrain(np.array([3.0, 4.0]), 1.0)[0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_allclose(l2_constrain(np.array([3.0, 4.0]), 10.0)[0], [6.0, 8.0], atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.floats(0.01, 100), st.integers(0, 2 ** 31))
def test_l2_constrain_norm_and_direction(dim, alpha, seed):
    f = np.random.default_rng(seed).standard_normal((4, dim)) * 10
    out, _ = l2_constrain(f, alpha)
    assert np.all(np.abs(np.linalg.norm(out, axis=1) - alpha) <= 1e-12 * max(1.0, alpha))
    cos = (out * f).sum(1) / (np.linalg.norm(out, axis=1) * np.linalg.norm(f, axis=1))
    np.testing.assert_allclose(cos, 1.0, atol=1e-14)


def test_l2_constrain_zero_vector():
    with pytest.raises(ValueError):
        l2_constrain(np.zeros(3), 1.0)


def test_l2_constraint_module():
    fixed = L2Constraint(12.0)
    assert fixed.alpha == 12.0 and fixed.initialized and not fixed.learned
    learned = L2Constraint(learned=True)
    assert not learned.initialized


# --- ring loss ------------------------------------------------------------------

def test_ring_hand_example():
    f = np.array([[1.0, 0.0], [0.0, 3.0]])
    assert ring_loss(f, 2.0).value == pytest.approx(0.25, abs=1e-15)


def test_ring_zero_at_radius():
    f = np.random.default_rng(0).standard_normal((6, 4))
    f *= 1.7 / np.linalg.norm(f, axis=1, keepdims=True)
    assert ring_loss(f, 1.7).value < 1e-28


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.floats(0.1, 10), st.floats(0.01, 100), st.integers(0, 2 ** 31))
def test_ring_nonneg_and_scale_invariant(n, R, kappa, seed):
    f = np.random.default_rng(seed).standard_normal((n, 5))
    v = ring_loss(f, R).value
    assert v >= 0
    assert ring_loss(kappa * f, kappa * R).value == pytest.approx(v, rel=1e-10, abs=1e-14)


def test_ring_positive_unless_all_norms_equal_R():
    f = np.array([[2.0, 0.0], [0.0, 2.0], [0.0, 2.0 + 1e-6]])
    assert ring_loss(f, 2.0).value > 0


def test_ring_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        ring_loss(np.zeros((3, 2)), 1.0)


def test_ring_radius_gradient_hand_value():
    # d/dR of mean((n - R)^2) / E^2 = -2 mean(n - R) / E^2 ; norms {1,3}, R=2 -> 0
    f = np.array([[1.0, 0.0], [0.0, 3.0]])
    assert ring_loss(f, 2.0).d_params["R"][0] == pytest.approx(0.0, abs=1e-15)
    assert ring_loss(f, 1.0).d_params["R"][0] == pytest.approx(-2 * 1.0 / 4.0, abs=1e-15)


def test_ring_fd_tight():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((2, 5))
    E = float(np.linalg.norm(f, axis=1).mean())
    analytic = ring_loss(f, 1.3, E).d_embeddings
    numeric = finite_difference_gradient(lambda x: ring_loss(x, 1.3, E).value, f)
    assert gradient_relative_error(analytic, numeric) < 1e-6


def test_ring_state():
    st_ = RingState(2.0, 0.5)
    assert st_.R == 2.0 and st_.lam == 0.5 and not st_.initialized
    st_.R = 3.0
    assert st_.params["R"][0] == 3.0
    with pytest.raises(ValueError):
        RingState(1.0, -1.0)


# --- total loss, R initialization ----------------------------------------------------------

def _outputs(rng):
    p = LossOutput(1.5, rng.standard_normal((3, 4)), {"weight": rng.standard_normal((2, 4))})
    r = LossOutput(0.25, rng.standard_normal((3, 4)), {"R": np.array([0.7])})
    return p, r


def test_total_loss_lambda_zero_is_primary():
    p, r = _outputs(np.random.default_rng(0))
    assert total_loss(p, r, 0.0) is p


def test_total_loss_sums():
    p, r = _outputs(np.random.default_rng(1))
    for lam in (1.0, 0.3):
        t = total_loss(p, r, lam)
        assert t.value == p.value + lam * r.value
        np.testing.assert_array_equal(t.d_embeddings, p.d_embeddings + lam * r.d_embeddings)
        assert t.d_params["R"][0] == lam * 0.7
        np.testing.assert_array_equal(t.d_params["weight"], p.d_params["weight"])


def test_init_R_examples():
    assert init_ring_R(np.array([[2.0, 0.0], [0.0, 4.0]])) == 3.0
    u = np.random.default_rng(0).standard_normal((5, 3))
    assert init_ring_R(u / np.linalg.norm(u, axis=1, keepdims=True)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DegenerateBatchError):
        init_ring_R(np.zeros((2, 3)))


def test_init_R_matches_norm_loop():
    f = np.random.default_rng(7).standard_normal((9, 6))
    total = 0.0
    for row in f:
        total += math.sqrt(sum(v * v for v in row))
    assert init_ring_R(f) == pytest.approx(total / 9, abs=1e-13)


# --- gradient checks ---------------------------------------------------------------

def _scalar_check(value_fn, grads, wrt, seed):
    def backward(probe):
        return {k: probe * g for k, g in grads.items()}
    return check_gradients(value_fn, backward, wrt, seed=seed)


@pytest.mark.parametrize("seed", range(3))
def test_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    f, labels = rng.standard_normal((4, 5)), rng.integers(0, 3, 4)
    head = ClassifierHead(3, 5, rng)
    out = softmax_loss(f, labels, head)
    errs = _scalar_check(lambda: softmax_loss(f, labels, head).value,
                         {"f": out.d_embeddings, **out.d_params},
                         {"f": f, "weight": head.params["weight"], "bias": head.params["bias"]}, seed)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("seed,margin,beta", [(0, 4, 0.0), (1, 4, 5.0), (2, 2, 0.0), (3, 3, 100.0)])
def test_asoftmax_gradients(seed, margin, beta):
    rng = np.random.default_rng(seed)
    f, labels = rng.standard_normal((5, 4)), rng.integers(0, 3, 5)
    head = ClassifierHead(3, 4, rng)  # un-normalized rows: exercises the in-loss normalization
    out = asoftmax_loss(f, labels, head, margin, beta)
    errs = _scalar_check(lambda: asoftmax_loss(f, labels, head, margin, beta).value,
                         {"f": out.d_embeddings, **out.d_params},
                         {"f": f, "weight": head.params["weight"]}, seed)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("seed", range(3))
def test_l2_constrain_gradients(seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((3, 4))
    alpha = np.array([rng.uniform(0.5, 20)])
    probe = rng.standard_normal((3, 4))
    _, back = l2_constrain(f, alpha[0])
    d_f, d_alpha = back(probe)

    def value():
        return float((l2_constrain(f, alpha[0])[0] * probe).sum())
    g_f = finite_difference_gradient(lambda _: value(), f)
    g_a = finite_difference_gradient(lambda _: value(), alpha)
    assert gradient_relative_error(d_f, g_f) < 1e-4
    assert gradient_relative_error(np.array([d_alpha]), g_a) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_ring_gradients_including_radius(seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((4, 6))
    R = np.array([rng.uniform(0.5, 4)])
    E = float(np.linalg.norm(f, axis=1).mean())
    out = ring_loss(f, R[0], E)
    errs = _scalar_check(lambda: ring_loss(f, R[0], E).value,
                         {"f": out.d_embeddings, "R": out.d_params["R"]}, {"f": f, "R": R}, seed)
    assert max(errs.values()) < 1e-4, errs
