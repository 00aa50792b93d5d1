import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subdistill import losses as L
from helpers import fdiff_logits, max_rel_error


def assert_grad_matches(fn_value, grad, z, tol=1e-4):
    numeric = fdiff_logits(fn_value, z)
    assert max_rel_error(grad, numeric) <= tol


def rand_logits(rng, n=3, c=2, s=2):
    return rng.standard_normal((n, c, s))


# --- subclass softmax -------------------------------------------------------

def test_subclass_softmax_symmetry():
    p = L.subclass_softmax(np.zeros((1, 2, 2)), t=1.0)
    assert np.allclose(p, 0.25)


def test_subclass_softmax_against_direct_exp_sum():
    z = np.array([2.0, 0.0, 0.0, 0.0]).reshape(1, 2, 2)
    p = L.subclass_softmax(z, t=2.0)
    direct = np.exp(np.array([1.0, 0, 0, 0])) / np.exp(np.array([1.0, 0, 0, 0])).sum()
    assert np.allclose(p.reshape(-1), direct, atol=1e-12)
    assert p.reshape(-1)[0] == pytest.approx(0.4754, abs=5e-5)


def test_subclass_softmax_infinite_temperature_limit():
    rng = np.random.default_rng(0)
    p = L.subclass_softmax(rand_logits(rng), t=1e6)
    assert np.max(np.abs(p - 0.25)) <= 1e-5


def test_subclass_softmax_rejects_bad_temperature():
    with pytest.raises(ValueError):
        L.subclass_softmax(np.zeros((1, 2, 2)), t=0.0)
    with pytest.raises(ValueError):
        L.subclass_softmax(np.zeros((1, 2, 2)), t=-1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 4),
       st.integers(0, 2**31 - 1), st.floats(0.25, 32.0))
def test_softmax_normalization_and_shift_invariance(n, c, s, seed, t):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-40, 40, size=(n, c, s))
    p = L.subclass_softmax(z, t)
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.max(np.abs(p.reshape(n, -1).sum(axis=1) - 1.0)) <= 1e-6
    shifted = L.subclass_softmax(z + rng.uniform(-5, 5, size=(n, 1, 1)), t)
    assert np.max(np.abs(p - shifted)) <= 1e-6
    assert np.max(np.abs(L.class_marginal(p).sum(axis=1) - 1.0)) <= 1e-6


# --- class marginal and hard-label loss -------------------------------------

def test_class_marginal_examples():
    p = np.full((1, 2, 5), 0.1)
    assert np.allclose(L.class_marginal(p), [[0.5, 0.5]])
    p = np.array([[[0.3, 0.2], [0.4, 0.1]]])
    assert np.allclose(L.class_marginal(p), [[0.5, 0.5]])
    one_hot = np.zeros((1, 2, 2))
    one_hot[0, 1, 0] = 1.0
    assert np.allclose(L.class_marginal(one_hot), [[0.0, 1.0]])


def test_xent_class_zero_when_correct_class_has_all_mass():
    p = np.zeros((2, 2, 3))
    p[0, 0, :] = [0.5, 0.3, 0.2]
    p[1, 1, :] = [0.1, 0.1, 0.8]
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert L.xent_class(p, y).value == pytest.approx(0.0, abs=1e-12)


def test_xent_class_half_marginal_is_ln2():
    p = np.full((1, 2, 1), 0.5)
    y = np.array([[1.0, 0.0]])
    assert L.xent_class(p, y).value == pytest.approx(np.log(2.0), rel=1e-12)


def test_xent_class_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for c, s in [(2, 5), (3, 2), (2, 1)]:
        z = rand_logits(rng, 4, c, s)
        y = np.zeros((4, c))
        y[np.arange(4), rng.integers(0, c, 4)] = 1.0
        for t in (1.0, 4.0):
            res = L.xent_class(L.subclass_softmax(z, t), y, t)
            assert_grad_matches(
                lambda zz: L.xent_class(L.subclass_softmax(zz, t), y, t).value,
                res.grad, z)


def test_xent_class_clamps_and_counts_degenerate_marginals():
    p = np.zeros((1, 2, 2))
    p[0, 1, 0] = 1.0  # confident, wrong
    y = np.array([[1.0, 0.0]])
    res = L.xent_class(p, y)
    assert res.clamp_events == 1
    assert res.value == pytest.approx(-np.log(L.LOG_CLAMP))
    assert np.all(np.isfinite(res.grad))


# --- subclass distillation ---------------------------------------------------

def test_distill_subclass_self_distillation_fixed_point():
    rng = np.random.default_rng(2)
    z = rand_logits(rng, 5, 2, 3)
    for t in (1.0, 4.0):
        p_t = L.subclass_softmax(z, t)
        res = L.distill_subclass(p_t, z, t)
        entropy = float(-np.sum(p_t * np.log(p_t)) / z.shape[0])
        assert res.value == pytest.approx(t * t * entropy, rel=1e-10)
        assert np.max(np.abs(res.grad)) <= 1e-6


def test_distill_subclass_one_hot_teacher_uniform_student():
    p_t = np.zeros((1, 2, 2))
    p_t[0, 0, 0] = 1.0
    res = L.distill_subclass(p_t, np.zeros((1, 2, 2)), t=1.0)
    assert res.value == pytest.approx(np.log(4.0), rel=1e-12)


def test_distill_subclass_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    z_t = rand_logits(rng, 3, 2, 3)
    z_s = rand_logits(rng, 3, 2, 3)
    for t in (1.0, 8.0):
        p_t = L.subclass_softmax(z_t, t)
        res = L.distill_subclass(p_t, z_s, t)
        assert_grad_matches(lambda zz: L.distill_subclass(p_t, zz, t).value,
                            res.grad, z_s)


def test_distill_subclass_high_temperature_is_zero_meaned_mse():
    # closed-form limit: gradient of 0.5/(n*c*s) * sum((zs0 - zt0)^2)
    rng = np.random.default_rng(4)
    n, c, s = 4, 2, 2
    z_t = rand_logits(rng, n, c, s)
    z_s = rand_logits(rng, n, c, s)
    t = 1000.0
    res = L.distill_subclass(L.subclass_softmax(z_t, t), z_s, t)
    center = lambda z: z - z.reshape(n, -1).mean(axis=1)[:, None, None]
    g_mse = (center(z_s) - center(z_t)) / (n * c * s)
    assert np.linalg.norm(res.grad - g_mse) <= 0.02 * np.linalg.norm(g_mse)


def test_distill_subclass_t_squared_scaling_identity():
    rng = np.random.default_rng(5)
    z_t = rand_logits(rng)
    z_s = rand_logits(rng)
    t = 4.0
    p_t = L.subclass_softmax(z_t, t)
    scaled = L.distill_subclass(p_t, z_s, t).value
    unscaled = float(-np.sum(p_t * np.log(L.subclass_softmax(z_s, t))) / z_s.shape[0])
    assert scaled == pytest.approx(t * t * unscaled, abs=1e-6)


# --- conventional distillation ----------------------------------------------

def test_distill_conventional_matching_distributions_zero_grad():
    rng = np.random.default_rng(6)
    z = rand_logits(rng, 4, 2, 3)
    for t in (1.0, 4.0):
        p_class = L.class_marginal(L.subclass_softmax(z, t))
        res = L.distill_conventional(p_class, z, t)
        assert np.max(np.abs(res.grad)) <= 1e-6


def test_distill_conventional_one_hot_uniform_is_ln2():
    res = L.distill_conventional(np.array([[1.0, 0.0]]), np.zeros((1, 2, 3)), t=1.0)
    assert res.value == pytest.approx(np.log(2.0), rel=1e-12)


def test_distill_conventional_against_direct_formula():
    rng = np.random.default_rng(7)
    z_t = rand_logits(rng, 3, 2, 4)
    z_s = rand_logits(rng, 3, 2, 4)
    t = 4.0
    p_class = L.class_marginal(L.subclass_softmax(z_t, t))
    res = L.distill_conventional(p_class, z_s, t)
    direct = -t * t * np.mean(np.sum(
        p_class * np.log(L.class_marginal(L.subclass_softmax(z_s, t))), axis=1))
    assert res.value == pytest.approx(float(direct), abs=1e-6)
    assert_grad_matches(
        lambda zz: L.distill_conventional(p_class, zz, t).value, res.grad, z_s)


# --- combined objectives ------------------------------------------------------

def test_student_loss_boundaries_and_mix():
    assert L.student_loss(2.0, 4.0, 0.0) == 4.0
    assert L.student_loss(2.0, 4.0, 1.0) == 2.0
    assert L.student_loss(2.0, 4.0, 0.75) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        L.student_loss(1.0, 1.0, 1.5)


def test_teacher_loss_boundaries_and_mix():
    assert L.teacher_loss(0.5, -0.2, 0.0) == 0.5
    assert L.teacher_loss(0.5, -0.2, 0.1) == pytest.approx(0.48)
    with pytest.raises(ValueError):
        L.teacher_loss(1.0, 1.0, -0.1)


def test_teacher_loss_gradient_linearity():
    rng = np.random.default_rng(8)
    z = rand_logits(rng, 4, 2, 5)
    y = np.zeros((4, 2))
    y[np.arange(4), rng.integers(0, 2, 4)] = 1.0
    beta = 0.7
    gx = L.xent_class(L.subclass_softmax(z), y).grad
    ga = L.aux_loss(z, 1.0).grad
    combined = fdiff_logits(lambda zz: L.teacher_loss(
        L.xent_class(L.subclass_softmax(zz), y).value,
        L.aux_loss(zz, 1.0).value, beta), z)
    assert np.max(np.abs(combined - (gx + beta * ga))) <= 1e-6


# --- penultimate-layer distillation -----------------------------------------

def test_penultimate_identity_projection_equal_activations():
    a = np.random.default_rng(9).standard_normal((3, 4))
    res = L.penultimate_distill(a, a, np.eye(4))
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_penultimate_single_example_analytic():
    res = L.penultimate_distill(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0, 0.0]]),
                                np.zeros((2, 3)))
    assert res.value == pytest.approx(1.0)


def test_penultimate_against_direct_evaluation_and_gradients():
    rng = np.random.default_rng(10)
    a_t = rng.standard_normal((4, 5))
    a_s = rng.standard_normal((4, 3))
    w = rng.standard_normal((5, 3))
    res = L.penultimate_distill(a_t, a_s, w)
    direct = np.mean([np.sum((a_t[i] - w @ a_s[i]) ** 2) for i in range(4)])
    assert res.value == pytest.approx(float(direct), abs=1e-6)

    h = 1e-6
    num_s = np.zeros_like(a_s)
    for idx in np.ndindex(a_s.shape):
        a_s[idx] += h
        up = L.penultimate_distill(a_t, a_s, w).value
        a_s[idx] -= 2 * h
        down = L.penultimate_distill(a_t, a_s, w).value
        a_s[idx] += h
        num_s[idx] = (up - down) / (2 * h)
    assert np.max(np.abs(num_s - res.grad_student)) <= 1e-4

    num_w = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        w[idx] += h
        up = L.penultimate_distill(a_t, a_s, w).value
        w[idx] -= 2 * h
        down = L.penultimate_distill(a_t, a_s, w).value
        w[idx] += h
        num_w[idx] = (up - down) / (2 * h)
    assert np.max(np.abs(num_w - res.grad_projection)) <= 1e-4


def test_penultimate_dimension_mismatch():
    with pytest.raises(ValueError):
        L.penultimate_distill(np.zeros((2, 4)), np.zeros((2, 3)), np.eye(4))


# --- logit normalization and auxiliary loss ----------------------------------

def test_normalize_logit_vector_analytic():
    out = L.normalize_logit_vector(np.array([1.0, -1.0]))
    assert np.allclose(out, [1 / np.sqrt(2), -1 / np.sqrt(2)])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_normalize_postconditions_and_affine_invariance(dim, seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-10, 10, size=dim)
    if np.ptp(v) == 0:
        v[0] += 1.0
    out = L.normalize_logit_vector(v)
    assert abs(out.mean()) <= 1e-7
    assert abs(np.linalg.norm(out) - 1.0) <= 1e-7
    a, b = float(rng.uniform(0.1, 5)), float(rng.uniform(-20, 20))
    again = L.normalize_logit_vector(a * v + b)
    assert np.max(np.abs(again - out)) <= 1e-7


def test_normalize_rejects_constant_vector():
    with pytest.raises(L.DegenerateLogitsError):
        L.normalize_logit_vector(np.full(6, 3.3))


def test_aux_loss_zero_for_identical_vectors():
    base = np.array([1.0, -0.5, 0.2, 0.8]).reshape(1, 2, 2)
    for n in (1, 2, 7):
        for t in (0.5, 1.0, 4.0):
            z = np.repeat(base, n, axis=0)
            assert abs(L.aux_loss(z, t).value) <= 1e-6


def test_aux_loss_antipodal_pair_analytic():
    z = np.array([[1.0, -1.0], [-1.0, 1.0]]).reshape(2, 1, 2)
    res = L.aux_loss(z, 1.0)
    direct = np.log(np.e + 1.0 / np.e) - 1.0 - np.log(2.0)
    assert res.value == pytest.approx(float(direct), rel=1e-10)
    assert res.value == pytest.approx(-0.5662, abs=5e-5)


def test_aux_loss_nonpositive_and_maximized_at_identical():
    rng = np.random.default_rng(11)
    for _ in range(50):
        z = rand_logits(rng, int(rng.integers(2, 6)), 2, 3)
        assert L.aux_loss(z, float(rng.uniform(0.3, 8.0))).value <= 0.0 + 1e-12


def test_aux_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    for include_self in (True, False):
        z = rand_logits(rng, 4, 2, 3)
        for t in (1.0, 2.0):
            res = L.aux_loss(z, t, include_self=include_self)
            assert_grad_matches(
                lambda zz: L.aux_loss(zz, t, include_self=include_self).value,
                res.grad, z)


def test_aux_loss_degenerate_batch_raises():
    z = np.zeros((3, 2, 2))
    with pytest.raises(L.DegenerateLogitsError):
        L.aux_loss(z, 1.0)


# --- intra-class softmax and distillation ------------------------------------

def test_intra_class_softmax_uniform():
    q = L.intra_class_softmax(np.zeros((1, 2, 5)))
    assert np.allclose(q, 0.2)


def test_intra_class_softmax_per_class_shift_invariance():
    rng = np.random.default_rng(13)
    z = rand_logits(rng, 3, 2, 4)
    shift = rng.standard_normal((3, 2, 1)) * 10
    a = L.intra_class_softmax(z, 2.0)
    b = L.intra_class_softmax(z + shift, 2.0)
    assert np.max(np.abs(a - b)) <= 1e-6


def test_intra_class_softmax_against_per_group_oracle():
    rng = np.random.default_rng(14)
    z = rand_logits(rng, 3, 2, 4)
    t = 3.0
    q = L.intra_class_softmax(z, t)
    for i in range(3):
        for j in range(2):
            e = np.exp(z[i, j] / t)
            assert np.max(np.abs(q[i, j] - e / e.sum())) <= 1e-6


def test_intra_class_distill_fixed_point_and_analytic():
    rng = np.random.default_rng(15)
    z = rand_logits(rng, 4, 2, 5)
    for t in (1.0, 4.0):
        q_t = L.intra_class_softmax(z, t)
        assert np.max(np.abs(L.intra_class_distill(q_t, z, t).grad)) <= 1e-6

    q_t = np.zeros((1, 2, 5))
    q_t[0, :, 0] = 1.0  # one-hot per class
    res = L.intra_class_distill(q_t, np.zeros((1, 2, 5)), t=1.0)
    assert res.value == pytest.approx(2 * np.log(5.0), rel=1e-12)


def test_intra_class_distill_against_direct_formula():
    rng = np.random.default_rng(16)
    z_t = rand_logits(rng, 3, 2, 4)
    z_s = rand_logits(rng, 3, 2, 4)
    t = 4.0
    q_t = L.intra_class_softmax(z_t, t)
    res = L.intra_class_distill(q_t, z_s, t)
    direct = -t * t * np.mean(
        np.sum(q_t * np.log(L.intra_class_softmax(z_s, t)), axis=(1, 2)))
    assert res.value == pytest.approx(float(direct), abs=1e-6)
    assert_grad_matches(lambda zz: L.intra_class_distill(q_t, zz, t).value,
                        res.grad, z_s)
