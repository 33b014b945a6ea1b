"""Tape autodiff: finite-difference checks per primitive, determinism, complex pairs."""

import numpy as np
import pytest

from spatea import autodiff as ad
from spatea import tensor


def fd_scalar(f, x, eps=1e-6):
    """Central finite differences of a scalar function of one flat array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def check_grad(build, x0, eps=1e-6, tol=1e-6):
    """build(tape, xvar) -> scalar Var; compares backward against FD."""
    x0 = np.asarray(x0, dtype=np.float64)

    def value_of(x):
        t = ad.Tape()
        return float(build(t, t.leaf(x)).value)

    t = ad.Tape()
    xv = t.leaf(x0)
    out = build(t, xv)
    grads = ad.backward_grads(t, out)
    g_ad = grads.of(xv)
    g_fd = fd_scalar(value_of, x0.copy(), eps=eps)
    err = np.max(np.abs(g_ad - g_fd)) / max(1.0, np.max(np.abs(g_fd)))
    assert err <= tol, f"grad mismatch {err:.3e}"


class TestPrimitives:
    def test_arithmetic_chain(self):
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((3, 4))
        y0 = rng.standard_normal((3, 4))

        def build(t, x):
            z = (x * t.constant(y0) - x / 2.5 + 1.5) * x
            return ad.sum_(ad.tanh(z))

        check_grad(build, x0)

    def test_broadcasting_grads(self):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((4,))
        m0 = rng.standard_normal((3, 4))

        def build(t, x):
            return ad.sum_(ad.mul(t.constant(m0), x))

        check_grad(build, x0)

    def test_quadratic_gradient_is_2x(self):
        x0 = np.array([1.0, -2.0, 3.0])
        t = ad.Tape()
        x = t.leaf(x0)
        out = ad.sum_(x * x)
        g = ad.backward_grads(t, out).of(x)
        assert np.array_equal(g, 2.0 * x0)

    def test_matmul_batched(self):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((2, 3, 4))
        w0 = rng.standard_normal((4, 5))

        def build(t, x):
            return ad.sum_(ad.sin(x @ t.constant(w0)))

        check_grad(build, x0)

    def test_tensordot_random_axes(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            ra = int(rng.integers(1, 4))
            rb = int(rng.integers(1, 4))
            sa = tuple(int(d) for d in rng.integers(1, 4, size=ra))
            sb = list(int(d) for d in rng.integers(1, 4, size=rb))
            k = int(rng.integers(0, min(ra, rb) + 1))
            ax_a = [int(v) for v in rng.choice(ra, size=k, replace=False)]
            ax_b = [int(v) for v in rng.choice(rb, size=k, replace=False)]
            for i, j in zip(ax_a, ax_b):
                sb[j] = sa[i]
            b_const = rng.standard_normal(tuple(sb))
            x0 = rng.standard_normal(sa)

            def build(t, x):
                y = ad.tensordot(x, t.constant(b_const), (ax_a, ax_b))
                return ad.sum_(ad.tanh(y))

            check_grad(build, x0)
            # and gradient with respect to the second operand

            def build_b(t, b):
                y = ad.tensordot(t.constant(x0), b, (ax_a, ax_b))
                return ad.sum_(ad.tanh(y))

            check_grad(build_b, b_const)

    def test_shape_ops(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((2, 3, 4))

        def build(t, x):
            y = ad.permute(x, (2, 0, 1))
            y = ad.reshape(y, (4, 6))
            z = ad.concat([y, y * 2.0], axis=1)
            return ad.sum_(z[1:3, ::2] * z[1:3, ::2])

        check_grad(build, x0)

    def test_take_accumulates_repeats(self):
        x0 = np.array([1.0, 2.0, 3.0])
        t = ad.Tape()
        x = t.leaf(x0)
        y = ad.take(x, [0, 0, 2], axis=0)
        g = ad.backward_grads(t, ad.sum_(y)).of(x)
        assert np.array_equal(g, [2.0, 0.0, 1.0])

    def test_elementwise_unary(self):
        rng = np.random.default_rng(5)
        x0 = rng.standard_normal((5,)) * 0.7 + 2.0  # keep sqrt away from zero

        def build(t, x):
            return ad.sum_(ad.sqrt(x) + ad.sin(x) * ad.cos(x) + ad.tanh(x))

        check_grad(build, x0)

    def test_l2norm_matches_fd(self):
        rng = np.random.default_rng(6)
        x0 = rng.standard_normal((3, 4))

        def build(t, x):
            return ad.sum_(ad.l2norm(x, axes=(1,)))

        check_grad(build, x0)

    def test_l2norm_zero_input_zero_grad(self):
        t = ad.Tape()
        x = t.leaf(np.zeros(3))
        y = ad.l2norm(x)
        g = ad.backward_grads(t, y).of(x)
        assert np.all(np.isfinite(g))
        assert np.array_equal(g, np.zeros(3))

    def test_max_const_floor(self):
        t = ad.Tape()
        x = t.leaf(np.array([0.5, 2.0]))
        y = ad.sum_(ad.max_const(x, 1.0))
        assert np.allclose(y.value, 3.0)
        g = ad.backward_grads(t, y).of(x)
        assert np.array_equal(g, [0.0, 1.0])

    def test_inv_gradient(self):
        rng = np.random.default_rng(7)
        x0 = rng.standard_normal((4, 4)) + 4.0 * np.eye(4)
        w0 = rng.standard_normal((4, 4))

        def build(t, x):
            return ad.sum_(ad.inv(x) * t.constant(w0))

        check_grad(build, x0, tol=1e-5)

    def test_cross_gradient(self):
        rng = np.random.default_rng(8)
        x0 = rng.standard_normal((5, 3))
        y0 = rng.standard_normal((5, 3))

        def build(t, x):
            return ad.sum_(ad.tanh(ad.cross(x, t.constant(y0))))

        check_grad(build, x0)

    def test_layer_norm_composite(self):
        rng = np.random.default_rng(9)
        x0 = rng.standard_normal((2, 6))
        gamma0 = rng.standard_normal(6)
        beta0 = rng.standard_normal(6)

        def build(t, x):
            return ad.sum_(ad.tanh(ad.layer_norm(x, t.constant(gamma0), t.constant(beta0))))

        check_grad(build, x0)


class TestBackwardContract:
    def test_non_scalar_output_rejected(self):
        t = ad.Tape()
        x = t.leaf(np.ones(3))
        with pytest.raises(ad.ContractViolation):
            ad.backward_grads(t, x)

    def test_untouched_param_gets_zeros(self):
        t = ad.Tape()
        x = t.leaf(np.ones(3))
        unused = t.leaf(np.ones((2, 2)))
        out = ad.sum_(x)
        g = ad.backward_grads(t, out)
        assert np.array_equal(g.of(unused), np.zeros((2, 2)))

    def test_backward_bitwise_deterministic(self):
        rng = np.random.default_rng(10)
        x0 = rng.standard_normal((6, 6))

        def run():
            t = ad.Tape()
            x = t.leaf(x0)
            y = ad.tanh(x @ x)
            z = ad.sum_(ad.l2norm(y, axes=(0,)) * ad.sum_(y, axes=(1,)))
            return ad.backward_grads(t, z).of(x).tobytes()

        assert run() == run()

    def test_forward_eval_rejects_non_var(self):
        with pytest.raises(ad.CapabilityError):
            ad.forward_eval(lambda t: np.ones(3))


class TestComplexPairs:
    def test_cmul_matches_numpy(self):
        rng = np.random.default_rng(11)
        za = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        zb = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        t = ad.Tape()
        a = ad.cwrap(t, za)
        b = ad.cwrap(t, zb)
        assert np.allclose(ad.cmul(a, b).value, za * zb, atol=1e-14)
        assert np.allclose(ad.cmatmul(a, b).value, za @ zb, atol=1e-13)
        assert np.allclose(ad.cconj(a).value, za.conj(), atol=1e-15)

    def test_ctensordot_matches_numpy(self):
        rng = np.random.default_rng(12)
        za = rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))
        zb = rng.standard_normal((3, 4, 5)) + 1j * rng.standard_normal((3, 4, 5))
        t = ad.Tape()
        got = ad.ctensordot(ad.cwrap(t, za), ad.cwrap(t, zb), ([1, 2], [0, 1])).value
        assert np.allclose(got, np.tensordot(za, zb, axes=([1, 2], [0, 1])), atol=1e-13)

    def test_cayley_matches_reference(self):
        rng = np.random.default_rng(13)
        for chi in (1, 2, 5):
            raw = rng.standard_normal((2, chi, chi))
            ref = tensor.materialize_unitary(tensor.UnitaryParam(dim=chi, raw=raw))
            t = ad.Tape()
            u = ad.cayley_unitary(t.leaf(raw[0]), t.leaf(raw[1]))
            assert np.max(np.abs(u.value - ref)) <= 1e-12

    def test_cayley_gradient(self):
        rng = np.random.default_rng(14)
        chi = 3
        raw0 = rng.standard_normal((2, chi, chi))
        w = rng.standard_normal((chi, chi)) + 1j * rng.standard_normal((chi, chi))

        def build(t, x):
            u = ad.cayley_unitary(x[0], x[1])
            # real part of <w, u>: a smooth real functional of the unitary
            re = ad.sum_(ad.mul(u.re, t.constant(w.real)))
            im = ad.sum_(ad.mul(u.im, t.constant(w.imag)))
            return ad.add(re, im)

        check_grad(build, raw0, tol=1e-5)

    def test_cnorm_small_values_finite_grad(self):
        t = ad.Tape()
        a = ad.CVar(t.leaf(np.full(4, 1e-200)), t.leaf(np.zeros(4)))
        y = ad.cnorm(a)
        g = ad.backward_grads(t, y)
        assert np.all(np.isfinite(g.of(a.re)))
        assert np.all(np.isfinite(g.of(a.im)))


class TestFiniteDiffHarness:
    def test_report_passes_for_smooth_loss(self):
        rng = np.random.default_rng(15)
        params = {"w": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)}

        def loss(p):
            h = ad.tanh(ad.add(ad.matmul(p["w"], ad.reshape(p["b"], (3, 1))), 0.3))
            return ad.sum_(ad.mul(h, h))

        report = ad.finite_diff_check(loss, params, eps=1e-5, tol=1e-6)
        assert report.passed, str(report)
        assert report.n_coords == 12

    def test_bad_eps_rejected(self):
        with pytest.raises(ad.ContractViolation):
            ad.finite_diff_check(lambda p: ad.sum_(p["x"]), {"x": np.ones(2)}, eps=0.0)
