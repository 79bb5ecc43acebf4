"""Explicit time steppers over a generic RHS backend.

Every stepper works against a small backend protocol (``rhs``, ``combine``,
``new_fields`` ...) implemented both by :class:`phaselab.model.KksSystem`
(banded PDE fields, simplex projection per stage) and by :class:`OdeSystem`
(plain arrays, no projection), so the same code integrates the benchmark
PDEs, the Dahlquist test equation and the symbolic stability-polynomial
accumulation used by the tests.

``combine(out, a0, s0, ...)`` may alias ``out`` with ``s0`` but with no
other operand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Fields


@dataclass
class RhsCounter:
    """Counts full-field RHS evaluations, estimator calls included."""

    count: int = 0

    def bump(self):
        self.count += 1


@dataclass
class Tolerances:
    rel_phase: float = 1e-4
    abs_phase: float = 1e-4
    rel_conc: float = 1e-4
    abs_conc: float = 1e-4


@dataclass
class StepOutcome:
    """Result of one attempted step."""

    fields: Fields
    error: float = 0.0
    accepted: bool = True
    rhs_evals: int = 0


class OdeSystem:
    """Minimal backend for vector ODEs; no projection, no banding."""

    def __init__(self, fn, counter=None):
        self.fn = fn
        self.counter = counter

    def rhs(self, u):
        if self.counter is not None:
            self.counter.bump()
        return Fields(np.asarray(self.fn(u.phi), dtype=np.float64), None)

    def new_fields(self):
        return None  # combine allocates

    def copy_fields(self, u):
        return Fields(u.phi.copy(), None)

    def release(self, *vecs):
        pass

    def combine(self, out, a0, s0, a1=0.0, s1=None, a2=0.0, s2=None,
                b1=0.0, f1=None, b0=0.0, f0=None, record=False):
        acc = a0 * s0.phi
        if s1 is not None and a1 != 0.0:
            acc = acc + a1 * s1.phi
        if s2 is not None and a2 != 0.0:
            acc = acc + a2 * s2.phi
        if f1 is not None and b1 != 0.0:
            acc = acc + b1 * f1.phi
        if f0 is not None and b0 != 0.0:
            acc = acc + b0 * f0.phi
        if out is None:
            out = Fields(acc, None)
        else:
            out.phi = acc
        return out if record is False else (out, None)

    def fixup_rhs0(self, viol, u0, u1, mu1dt, f0):
        return False


def _combine(sys, out, *args, **kw):
    """combine() that tolerates backends returning a fresh vector."""
    res = sys.combine(out, *args, **kw)
    if isinstance(res, Fields):
        return res, None
    if isinstance(res, tuple):
        return res
    return out, res


# ---------------------------------------------------------------------------
# steppers


def feuler_step(sys, u0, dt):
    """u + dt * rhs(u); one evaluation."""
    f0 = sys.rhs(u0)
    u1, _ = _combine(sys, sys.new_fields(), 1.0, u0, b1=dt, f1=f0)
    sys.release(f0)
    return u1


def ssp2_step(sys, u0, dt, nstages, embedded=None):
    """n-stage second-order strong-stability-preserving step.

    n-1 inner updates of size dt/(n-1), then the closing convex
    combination; n evaluations total.  ``embedded`` optionally supplies
    per-stage weights for a lower-order companion; the weighted defect is
    returned alongside the step.
    """
    if nstages < 2:
        raise ValueError("need at least two stages")
    h = dt / (nstages - 1)
    acc = None
    cur = u0
    for stage in range(nstages - 1):
        f = sys.rhs(cur)
        if embedded is not None:
            acc = _accumulate(sys, acc, embedded[stage], f)
        nxt, _ = _combine(sys, sys.new_fields(), 1.0, cur, b1=h, f1=f)
        sys.release(f)
        if cur is not u0:
            sys.release(cur)
        cur = nxt
    f = sys.rhs(cur)
    if embedded is not None:
        acc = _accumulate(sys, acc, embedded[nstages - 1], f)
    w = (nstages - 1) / nstages
    out, _ = _combine(sys, sys.new_fields(), 1.0 / nstages, u0, w, cur,
                      b1=w * h, f1=f)
    sys.release(f)
    if cur is not u0:
        sys.release(cur)
    if embedded is None:
        return out
    est = _embedded_defect(sys, u0, out, acc, dt)
    sys.release(acc)
    return out, est


def ssp104_step(sys, u0, dt, embedded=None):
    """Ten-stage fourth-order SSP step in the two-register form."""
    h = dt / 6.0
    acc = None
    q1 = sys.copy_fields(u0)
    q2 = sys.copy_fields(u0)
    for stage in range(5):
        f = sys.rhs(q1)
        if embedded is not None:
            acc = _accumulate(sys, acc, embedded[stage], f)
        q1, _ = _combine(sys, q1, 1.0, q1, b1=h, f1=f)
        sys.release(f)
    q2, _ = _combine(sys, q2, 1.0 / 25.0, q2, 9.0 / 25.0, q1)
    q1, _ = _combine(sys, q1, -5.0, q1, 15.0, q2)
    for stage in range(5, 9):
        f = sys.rhs(q1)
        if embedded is not None:
            acc = _accumulate(sys, acc, embedded[stage], f)
        q1, _ = _combine(sys, q1, 1.0, q1, b1=h, f1=f)
        sys.release(f)
    f = sys.rhs(q1)
    if embedded is not None:
        acc = _accumulate(sys, acc, embedded[9], f)
    out, _ = _combine(sys, sys.new_fields(), 1.0, q2, 3.0 / 5.0, q1,
                      b1=dt / 10.0, f1=f)
    sys.release(f, q1, q2)
    if embedded is None:
        return out
    est = _embedded_defect(sys, u0, out, acc, dt)
    sys.release(acc)
    return out, est


def _accumulate(sys, acc, weight, f):
    """acc += weight * f without projection (plain array arithmetic)."""
    if acc is None:
        acc = sys.copy_fields(f)
        acc.phi *= weight
        if acc.c is not None:
            acc.c *= weight
        return acc
    acc.phi += weight * f.phi
    if acc.c is not None:
        acc.c += weight * f.c
    return acc


def _embedded_defect(sys, u0, u1, acc, dt):
    """u1 - (u0 + dt * acc) as a raw per-DoF error estimate."""
    est = sys.copy_fields(u1)
    est.phi -= u0.phi + dt * acc.phi
    if est.c is not None:
        est.c -= u0.c + dt * acc.c
    return est


@dataclass
class StsCoeffs:
    """Recurrence coefficients of a super-timestepping scheme (1-based)."""

    s: int
    order: int
    mu: np.ndarray
    nu: np.ndarray
    mu_tilde: np.ndarray
    gamma_tilde: np.ndarray

    @property
    def dt_limit_factor(self):
        """Stable step in units of the forward-Euler step."""
        return sts_limit(self.s, self.order)


def sts_limit(s, order):
    if order == 1:
        return (s * s + s) / 2.0
    return (s * s + s - 2.0) / 4.0


def sts_coeffs(s, order):
    """Coefficients of the s-stage Legendre super-timestepping scheme.

    Both orders run the three-term recurrence, whose internal stages stay
    bounded (a factored one-term form reaches the same stability polynomial
    but its huge intermediate stages collide with the per-stage simplex
    projection).  Order 1 leaves the initial-slope reuse weights at zero.
    """
    s = int(s)
    if s % 2 == 0:
        raise ValueError("stage count must be odd")
    if order == 1:
        if s < 1:
            raise ValueError("order 1 needs s >= 1")
        w1 = 2.0 / (s * s + s)
        mu = np.zeros(s + 1)
        nu = np.zeros(s + 1)
        gt = np.zeros(s + 1)
        mt = np.zeros(s + 1)
        mu[1] = 1.0
        mt[1] = w1
        for k in range(2, s + 1):
            mu[k] = (2.0 * k - 1.0) / k
            nu[k] = -(k - 1.0) / k
            mt[k] = mu[k] * w1
        return StsCoeffs(s, 1, mu, nu, mt, gt)
    if order == 2:
        if s < 3:
            raise ValueError("order 2 needs s >= 3")
        j = np.arange(s + 1, dtype=np.float64)
        b = np.empty(s + 1)
        b[:3] = 1.0 / 3.0
        jj = j[2:]
        b[2:] = (jj * jj + jj - 2.0) / (2.0 * jj * (jj + 1.0))
        a = 1.0 - b
        w1 = 4.0 / (s * s + s - 2.0)
        mu = np.zeros(s + 1)
        nu = np.zeros(s + 1)
        mt = np.zeros(s + 1)
        gt = np.zeros(s + 1)
        mt[1] = b[1] * w1
        mu[1] = 1.0
        for k in range(2, s + 1):
            mu[k] = (2.0 * k - 1.0) / k * b[k] / b[k - 1]
            nu[k] = -(k - 1.0) / k * b[k] / b[k - 2]
            mt[k] = mu[k] * w1
            gt[k] = -a[k - 1] * mt[k]
        return StsCoeffs(s, 2, mu, nu, mt, gt)
    raise ValueError("order must be 1 or 2")


def sts_step(sys, u0, dt, coeffs, want_f0=False):
    """Run the super-timestepping recurrence; s evaluations.

    For the second-order scheme the first stage watches for simplex
    violations; where one occurs the initial RHS is replaced by the
    projection-consistent difference quotient before it is reused in the
    later stages.  Returns ``(u_new, f0_raw)``; ``f0_raw`` is a copy of the
    untouched initial RHS when requested (the error estimator wants it).
    """
    s = coeffs.s
    f0 = sys.rhs(u0)
    f0_raw = sys.copy_fields(f0) if want_f0 else None
    mu1dt = coeffs.mu_tilde[1] * dt
    record = coeffs.order == 2
    u1, viol = _combine(sys, sys.new_fields(), 1.0, u0, b1=mu1dt, f1=f0,
                        record=record)
    if record and viol is not None and viol.any():
        sys.fixup_rhs0(viol, u0, u1, mu1dt, f0)
    um2, um1 = u0, u1
    for j in range(2, s + 1):
        f = sys.rhs(um1)
        uj, _ = _combine(sys, sys.new_fields(),
                         1.0 - coeffs.mu[j] - coeffs.nu[j], u0,
                         coeffs.mu[j], um1, coeffs.nu[j], um2,
                         b1=coeffs.mu_tilde[j] * dt, f1=f,
                         b0=coeffs.gamma_tilde[j] * dt, f0=f0)
        sys.release(f)
        if um2 is not u0:
            sys.release(um2)
        um2, um1 = um1, uj
    if um2 is not u0 and um2 is not um1:
        sys.release(um2)
    sys.release(f0)
    if want_f0:
        return um1, f0_raw
    return um1


def sts2_simplex_fixup(u0, u1_raw, mu1dt):
    """Effective initial RHS after a violated first stage (cell-level op).

    Projects the raw stage and returns ``(S(u1) - u0) / (mu1 * dt)``;
    replaying the stage with this RHS reproduces the projected stage.
    """
    from .model import simplex_project

    u0 = np.asarray(u0, dtype=np.float64)
    raw = np.asarray(u1_raw, dtype=np.float64)
    if np.all((raw >= 0.0) & (raw <= 1.0)):
        return None  # no violation: keep the original RHS
    proj = simplex_project(raw)
    return (proj - u0) / mu1dt


# ---------------------------------------------------------------------------
# error estimation


def sommeijer_error(u_n, u_np1, rhs_n, rhs_np1, dt, is_phase=False):
    """Per-DoF local error estimate from endpoint values and slopes.

    Vanishes on exact linear trends; for phase components, entries whose
    trapezoidal trial solution leaves [0, 1] report zero error.
    """
    u_n = np.asarray(u_n, dtype=np.float64)
    u_np1 = np.asarray(u_np1, dtype=np.float64)
    rhs_n = np.asarray(rhs_n, dtype=np.float64)
    rhs_np1 = np.asarray(rhs_np1, dtype=np.float64)
    est = (12.0 * (u_np1 - u_n) - 6.0 * dt * (rhs_n + rhs_np1)) / 15.0
    if is_phase:
        trial = u_n + 0.5 * dt * (rhs_n + rhs_np1)
        est = np.where((trial < 0.0) | (trial > 1.0), 0.0, est)
    return est


def weighted_error_norm(sys, est, u0, u1, tols):
    """Weighted l2 norm over the nontrivial degrees of freedom.

    Concentration DoFs always count; phase DoFs count only with nonzero
    estimate, and a cell with no nontrivial phase entry counts as two.
    """
    from . import kernels

    ssq, ndof, nt_cells = kernels.weighted_norm_accumulate(
        sys.band_count, est.phi, u0.phi, u1.phi,
        tols.rel_phase, tols.abs_phase)
    ncells = sys.grid.ncells
    n = ndof + 2 * (ncells - nt_cells)
    if sys.use_chem:
        ssq += kernels.weighted_norm_dense(est.c, u0.c, u1.c,
                                           tols.rel_conc, tols.abs_conc)
        n += ncells
    return math.sqrt(ssq / n)


def weighted_error_norm_dense(phase_err, phase_u0, phase_u1, conc_err,
                              conc_u0, conc_u1, tols):
    """Dense-array reference of the weighted norm (slow path, used as oracle).

    ``phase_err`` rows are cells; pass None for a missing field.
    """
    ssq = 0.0
    n = 0
    if phase_err is not None:
        phase_err = np.asarray(phase_err, dtype=np.float64)
        ncells = phase_err.shape[0]
        for i in range(ncells):
            nontrivial = 0
            for a in range(phase_err.shape[1]):
                e = phase_err[i, a]
                if e == 0.0:
                    continue
                um = max(phase_u0[i, a], phase_u1[i, a])
                w = e / (tols.rel_phase * um + tols.abs_phase)
                ssq += w * w
                nontrivial += 1
            n += nontrivial if nontrivial > 0 else 2
    if conc_err is not None:
        conc_err = np.asarray(conc_err, dtype=np.float64)
        for i in range(conc_err.shape[0]):
            um = max(conc_u0[i], conc_u1[i])
            w = conc_err[i] / (tols.rel_conc * um + tols.abs_conc)
            ssq += w * w
        n += conc_err.shape[0]
    return math.sqrt(ssq / n)


# ---------------------------------------------------------------------------
# adaptive attempts


def sts_attempt(sys, u0, dt, coeffs, tols):
    """One adaptive step attempt: s stage evaluations plus one estimator."""
    u1, f0 = sts_step(sys, u0, dt, coeffs, want_f0=True)
    f1 = sys.rhs(u1)
    est = sys.sommeijer_estimate(u0, u1, f0, f1, dt)
    err = weighted_error_norm(sys, est, u0, u1, tols)
    sys.release(f0, f1, est)
    return u1, err


def richardson_attempt(sys, u0, dt, step_fn, order, tols):
    """Step-halving error estimate; advances with the half-step solution."""
    u_big = step_fn(sys, u0, dt)
    u_mid = step_fn(sys, u0, 0.5 * dt)
    u_half = step_fn(sys, u_mid, 0.5 * dt)
    sys.release(u_mid)
    est = sys.richardson_estimate(u_big, u_half, order)
    err = weighted_error_norm(sys, est, u0, u_half, tols)
    sys.release(u_big, est)
    return u_half, err


def embedded_attempt(sys, u0, dt, step_fn, tols):
    """Attempt with a stepper that returns (u1, raw defect)."""
    u1, est = step_fn(sys, u0, dt)
    err = weighted_error_norm(sys, est, u0, u1, tols)
    sys.release(est)
    return u1, err


# ---------------------------------------------------------------------------
# stability polynomials


def stability_polynomial(step_once, stages):
    """Coefficients of R(z) for a one-step map, by symbolic accumulation.

    Runs the stepper on the shift operator over polynomial coefficients:
    starting from u = 1, every RHS call multiplies by z, so the final
    vector holds R's coefficients exactly as the stepper accumulates them.
    """
    deg = stages + 1

    def shift(arr):
        out = np.zeros_like(arr)
        out[1:] = arr[:-1]
        return out

    sys = OdeSystem(shift)
    u0 = Fields(np.zeros(deg + 1), None)
    u0.phi[0] = 1.0
    u1 = step_once(sys, u0, 1.0)
    return u1.phi.copy()


def eval_polynomial(coeffs, z):
    """Horner evaluation of a coefficient vector (ascending powers)."""
    z = np.asarray(z, dtype=np.float64)
    acc = np.zeros_like(z) + coeffs[-1]
    for c in coeffs[-2::-1]:
        acc = acc * z + c
    return acc
