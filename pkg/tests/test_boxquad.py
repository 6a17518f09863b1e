"""Tests for the radial box integrals of the pair kernel.

The oracle here is deliberately a different route from the implementation:
plain nested adaptive quadrature in the original (r, rho) variables, with an
algebraic-weight inner integral for the q = 0 diagonal singularity.  The
implementation works in center/difference variables with sinh grading, so
agreement is a genuine cross-check.
"""

import numpy as np
import pytest
from scipy import integrate

from rieszstab.boxquad import (
    disjoint_box_batch,
    full_box_batch,
    radial_box_kernel,
    rect_box_batch,
    square_box_batch,
)
from rieszstab.exceptions import PreconditionError
from rieszstab.kernel import KernelParams


def box_oracle(p, q, I, J):
    """Nested adaptive quadrature of f(q, r, rho) over I x J."""
    lam = (p.dim - p.alpha) / 2.0

    if q > 0.0:
        def f(rho, r):
            return (r * rho) ** (p.dim - 1) * ((r - rho) ** 2 + r * rho * q * q) ** (-lam)

        val, _ = integrate.dblquad(f, I[0], I[1], J[0], J[1], epsabs=0, epsrel=1e-11)
        return val

    # q = 0: the inner rho-integral has an |r - rho|^(alpha-dim) endpoint
    # singularity at rho = r; use QAWS algebraic weights there.
    expo = p.alpha - p.dim

    def inner(r):
        lo, hi = J
        tot = 0.0
        if lo < r:
            b = min(hi, r)
            if b == r:
                val, _ = integrate.quad(
                    lambda rho: rho ** (p.dim - 1),
                    lo, b, weight="alg", wvar=(0.0, expo), epsabs=0, epsrel=1e-11,
                )
            else:
                val, _ = integrate.quad(
                    lambda rho: rho ** (p.dim - 1) * (r - rho) ** expo,
                    lo, b, epsabs=0, epsrel=1e-11,
                )
            tot += val
        if hi > r:
            a = max(lo, r)
            if a == r:
                val, _ = integrate.quad(
                    lambda rho: rho ** (p.dim - 1),
                    a, hi, weight="alg", wvar=(expo, 0.0), epsabs=0, epsrel=1e-11,
                )
            else:
                val, _ = integrate.quad(
                    lambda rho: rho ** (p.dim - 1) * (rho - r) ** expo,
                    a, hi, epsabs=0, epsrel=1e-11,
                )
            tot += val
        return r ** (p.dim - 1) * tot

    val, _ = integrate.quad(inner, I[0], I[1], epsabs=0, epsrel=1e-10, limit=300)
    return val


class TestOracleAgreement:
    # (dim, alpha, q, I, J, rtol); rtol reflects measured accuracy with margin
    CASES = [
        (3, 2.0, 1.0, (0.0, 1.0), (0.0, 1.0), 1e-6),       # reference full-box case
        (3, 2.0, 0.7, (0.0, 1.0), (0.0, 1.0), 1e-6),
        (3, 2.5, 0.5, (0.0, 1.2), (0.0, 1.2), 1e-6),
        (3, 2.0, 0.3, (0.9, 1.1), (0.9, 1.1), 1e-9),        # matched thin shell
        (2, 1.5, 1.2, (0.95, 1.05), (0.95, 1.05), 1e-9),
        (3, 2.0, 0.002, (1.0, 1.05), (1.0, 1.05), 1e-9),    # extreme near-diagonal
        (3, 2.0, 0.9, (0.2, 0.7), (0.9, 1.3), 1e-9),        # gapped
        (2, 1.2, 0.4, (0.8, 1.1), (0.95, 1.3), 1e-6),       # partial overlap rect
        (3, 2.0, 0.0, (0.1, 0.5), (1.1, 1.4), 1e-9),        # q = 0 gapped
        (2, 1.8, 0.0, (0.2, 0.8), (0.8, 1.3), 1e-9),        # q = 0 touching
        (3, 2.5, 0.0, (0.3, 0.9), (0.9, 1.5), 1e-9),
        (3, 2.5, 0.0, (0.0, 1.0), (0.7, 1.2), 1e-9),        # q = 0 staggered overlap
        (3, 2.5, 0.0, (0.2, 1.2), (0.5, 0.9), 1e-9),        # q = 0 containment
        (2, 1.5, 0.0, (0.0, 1.0), (0.0, 1.0), 1e-9),        # q = 0 full square
    ]

    @pytest.mark.parametrize("dim,alpha,q,I,J,rtol", CASES)
    def test_against_nested_quadrature(self, dim, alpha, q, I, J, rtol):
        p = KernelParams(dim, alpha)
        got = radial_box_kernel(p, q, I[0], I[1], J[0], J[1])
        ref = box_oracle(p, q, I, J)
        assert got == pytest.approx(ref, rel=rtol)

    def test_q0_full_square_closed_form(self):
        # dim=2, alpha=3/2: int_0^1 int_0^1 r*rho*|r-rho|^(-1/2) = 16/21
        p = KernelParams(2, 1.5)
        assert radial_box_kernel(p, 0.0, 0.0, 1.0, 0.0, 1.0) == pytest.approx(16.0 / 21.0, rel=1e-10)


class TestInvariances:
    def test_symmetry_in_boxes(self):
        p = KernelParams(3, 2.2)
        v1 = radial_box_kernel(p, 0.6, 0.3, 0.8, 0.9, 1.4)
        v2 = radial_box_kernel(p, 0.6, 0.9, 1.4, 0.3, 0.8)
        assert v1 == v2

    @pytest.mark.parametrize("dim,alpha,q,a,b,scale", [
        (3, 2.0, 0.5, 1.0, 1.2, 1.7),
        (2, 1.5, 0.8, 0.9, 0.6, 0.4),
    ])
    def test_full_box_homogeneity(self, dim, alpha, q, a, b, scale):
        # full-box value scales like scale**(dim + alpha)
        p = KernelParams(dim, alpha)
        qa = np.array([q])
        v1 = full_box_batch(p, qa, np.array([scale * a]), np.array([scale * b]))[0]
        v2 = full_box_batch(p, qa, np.array([a]), np.array([b]))[0]
        assert v1 == pytest.approx(scale ** (dim + alpha) * v2, rel=1e-12)

    def test_zero_width_boxes(self):
        p = KernelParams(3, 2.0)
        assert radial_box_kernel(p, 0.5, 1.0, 1.0, 0.9, 1.1) == 0.0
        assert radial_box_kernel(p, 0.5, 0.9, 1.1, 1.0, 1.0) == 0.0
        assert radial_box_kernel(p, 0.0, 1.0, 1.0, 1.0, 1.0) == 0.0

    def test_unordered_endpoints_canonicalized(self):
        p = KernelParams(3, 2.0)
        v1 = radial_box_kernel(p, 0.5, 1.1, 0.9, 1.3, 1.2)
        v2 = radial_box_kernel(p, 0.5, 0.9, 1.1, 1.2, 1.3)
        assert v1 == v2

    def test_additivity_in_first_interval(self):
        p = KernelParams(3, 2.0)
        whole = radial_box_kernel(p, 0.8, 0.2, 1.0, 0.5, 1.2)
        part1 = radial_box_kernel(p, 0.8, 0.2, 0.6, 0.5, 1.2)
        part2 = radial_box_kernel(p, 0.8, 0.6, 1.0, 0.5, 1.2)
        assert whole == pytest.approx(part1 + part2, rel=1e-8)


class TestDivergence:
    def test_q0_overlap_divergent(self):
        # dim - alpha >= 1 with overlapping intervals at q = 0 diverges
        p = KernelParams(3, 1.5)
        with pytest.raises(PreconditionError):
            radial_box_kernel(p, 0.0, 0.5, 1.0, 0.8, 1.2)

    def test_q0_touching_divergent(self):
        p = KernelParams(4, 1.5)
        with pytest.raises(PreconditionError):
            radial_box_kernel(p, 0.0, 0.5, 1.0, 1.0, 1.3)

    def test_q0_touching_convergent_when_mild(self):
        # dim - alpha in [1, 2): overlap diverges but touching does not
        p = KernelParams(3, 1.5)
        val = radial_box_kernel(p, 0.0, 0.5, 1.0, 1.0, 1.3)
        assert np.isfinite(val) and val > 0.0
        ref = box_oracle(p, 0.0, (0.5, 1.0), (1.0, 1.3))
        assert val == pytest.approx(ref, rel=1e-7)

    def test_negative_inputs_rejected(self):
        p = KernelParams(3, 2.0)
        with pytest.raises(PreconditionError):
            radial_box_kernel(p, -0.1, 0.0, 1.0, 0.0, 1.0)
        with pytest.raises(PreconditionError):
            radial_box_kernel(p, 0.5, -0.2, 1.0, 0.0, 1.0)


class TestBatchEvaluators:
    def test_square_batch_matches_scalar(self):
        p = KernelParams(3, 2.0)
        rng = np.random.default_rng(11)
        q = rng.uniform(0.05, 1.8, size=40)
        lo = rng.uniform(0.7, 1.0, size=40)
        hi = lo + rng.uniform(0.01, 0.3, size=40)
        batch = square_box_batch(p, q, lo, hi, panels=2)
        for i in range(40):
            scalar = radial_box_kernel(p, q[i], lo[i], hi[i], lo[i], hi[i])
            assert batch[i] == pytest.approx(scalar, rel=1e-7)

    def test_disjoint_batch_matches_oracle(self):
        p = KernelParams(2, 1.5)
        q = np.array([0.3, 0.9, 1.5])
        s1 = np.array([0.1, 0.4, 0.0])
        s2 = np.array([0.6, 0.9, 0.8])
        t1 = np.array([0.6, 0.9, 0.8])
        t2 = np.array([1.2, 1.1, 1.6])
        batch = disjoint_box_batch(p, q, s1, s2, t1, t2, panels=2)
        for i in range(3):
            ref = box_oracle(p, q[i], (s1[i], s2[i]), (t1[i], t2[i]))
            assert batch[i] == pytest.approx(ref, rel=1e-7)

    def test_rect_batch_matches_scalar(self):
        p = KernelParams(3, 2.5)
        q = np.array([0.4, 1.1])
        got = rect_box_batch(p, q, np.array([0.8, 0.3]), np.array([1.1, 0.9]),
                             np.array([0.95, 0.5]), np.array([1.3, 1.0]), panels=2)
        for i in range(2):
            ref = box_oracle(p, q[i], (0.8, 1.1) if i == 0 else (0.3, 0.9),
                             (0.95, 1.3) if i == 0 else (0.5, 1.0))
            assert got[i] == pytest.approx(ref, rel=1e-6)

    def test_zero_width_entries_in_batch(self):
        p = KernelParams(3, 2.0)
        q = np.array([0.5, 0.5])
        out = square_box_batch(p, q, np.array([1.0, 0.9]), np.array([1.0, 1.1]))
        assert out[0] == 0.0 and out[1] > 0.0
