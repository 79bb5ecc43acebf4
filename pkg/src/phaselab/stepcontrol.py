"""Stable-step estimation and the smoothed PID step-size controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .integrators import feuler_step, sts_limit

PID_GAINS = (1.25, 0.5, -0.6, 0.25, 0.0)
BIAS_START = 0.9
BIAS_MIN = 0.1
BIAS_MAX = 0.98
ERR_FLOOR = 1e-12  # keeps the controller finite on a zero error estimate


@dataclass
class EigEstimate:
    """Largest-eigenvalue bounds of the two operators, and the Euler step."""

    lam_phase: float
    lam_conc: float

    @property
    def dt_euler(self):
        lam = max(self.lam_phase, self.lam_conc)
        if lam <= 0:
            raise ValueError("nonpositive eigenvalue bound")
        return 2.0 / lam


def gershgorin_bounds(state, model, phys, grid=None) -> EigEstimate:
    """Default circle-theorem bounds for the two-phase reduction.

    lam_phase = 2 L (A * 4d/dx^2 + B + chi) with chi the chemical stiffness
    k (c0 spread)^2 when a concentration field exists; lam_conc bounds the
    diffusion operator through the steepest phase-concentration slope.
    These are estimates, not guarantees: gate them with validate_bounds.
    """
    grid = state.phases.grid if grid is None else grid
    d = grid.ndim
    lap = 4.0 * d / grid.dx ** 2
    n = phys.nphases
    off = ~np.eye(n, dtype=bool)
    if n > 1:
        l_max = float(np.max(model.mobility[off]))
        a_max = float(np.max(model.grad_coeff[off]))
        b_max = float(np.max(model.well_coeff[off]))
    else:
        l_max = a_max = b_max = 0.0
    use_chem = state.conc is not None
    chi = 0.0
    lam_c = 0.0
    if use_chem:
        spread = float(np.max(phys.eq_conc) - np.min(phys.eq_conc))
        chi = float(np.max(phys.gibbs_prefactor)) * spread * spread
        ph = state.phases
        slope = kernels.max_conc_slope(ph.ids, ph.vals, ph.count,
                                       phys.gibbs_prefactor)
        lam_c = lap * float(np.max(phys.diffusivity)) * slope
    lam_phi = 2.0 * l_max * (a_max * lap + b_max + chi)
    return EigEstimate(lam_phase=lam_phi, lam_conc=lam_c)


def sts_stage_count(dt_target, dt_euler, order, safety=0.9, max_stages=2001):
    """Smallest odd stage count whose safeguarded stability covers the step."""
    if dt_target <= 0 or dt_euler <= 0:
        raise ValueError("time steps must be positive")
    s = 1 if order == 1 else 3
    while safety * dt_euler * sts_limit(s, order) < dt_target:
        s += 2
        if s > max_stages:
            raise ValueError(f"stage count beyond {max_stages}; reduce the step")
    return s


@dataclass
class ControllerState:
    """PID history: up to two previous normalized errors and steps."""

    order: int
    bias: float = BIAS_START
    err_hist: list = field(default_factory=list)  # newest first
    dt_hist: list = field(default_factory=list)


def pid_update(cs: ControllerState, e_n, dt_n, accepted):
    """Propose the next step; mutate the controller history and bias.

    The smoothed multiplier 1 + 5*atan((F-1)/5) limits growth; missing
    history factors are dropped.  A rejection squares the bias and falls
    back to the pure proportional factor whenever the full expression
    would not shrink the step, so rejected steps strictly decrease.
    """
    k1, k2, k3, k4, k5 = PID_GAINS
    expo = 1.0 / (cs.order + 1.0)
    e_n = max(e_n, ERR_FLOOR)
    big_e = e_n / cs.bias
    f = big_e ** (-k1 * expo)
    if len(cs.err_hist) >= 1:
        f *= cs.err_hist[0] ** (-k2 * expo)
    if len(cs.err_hist) >= 2:
        f *= cs.err_hist[1] ** (-k3 * expo)
    if len(cs.dt_hist) >= 1 and k4 != 0.0:
        f *= (dt_n / cs.dt_hist[0]) ** k4
    if len(cs.dt_hist) >= 2 and k5 != 0.0:
        f *= (cs.dt_hist[0] / cs.dt_hist[1]) ** k5
    if not accepted and f >= 1.0:
        f = big_e ** (-k1 * expo)
    dt_next = dt_n * (1.0 + 5.0 * math.atan((f - 1.0) / 5.0))
    if accepted:
        cs.bias = min(math.sqrt(cs.bias), BIAS_MAX)
        cs.err_hist = [big_e] + cs.err_hist[:1]
        cs.dt_hist = [dt_n] + cs.dt_hist[:1]
    else:
        cs.bias = max(cs.bias * cs.bias, BIAS_MIN)
    return dt_next, cs


def validate_bounds(make_system, eig: EigEstimate, steps=500,
                    blowup_factor=1e3):
    """Experimental gate for an eigenvalue bound.

    Forward Euler at 0.9 dt_e must stay bounded for ``steps`` steps, and at
    4 dt_e the probe should detect divergence on at least one benchmark
    (asserted across cases by the caller).  Returns (stable, diverged).
    """
    stable = _fe_probe(make_system(), 0.9 * eig.dt_euler, steps, blowup_factor)
    diverged = not _fe_probe(make_system(), 4.0 * eig.dt_euler, steps,
                             blowup_factor)
    return stable, diverged


def _fe_probe(sys, dt, steps, blowup_factor):
    """True when the RHS magnitude stays within ``blowup_factor`` of start."""
    u0 = sys.snapshot()
    f = sys.rhs(u0)
    ref = _rhs_magnitude(f) + 1e-12
    sys.release(u0, f)
    for n in range(steps):
        u0 = sys.snapshot()
        u1 = feuler_step(sys, u0, dt)
        if not sys.isfinite(u1):
            return False
        sys.accept(u1, (n + 1) * dt)
        sys.release(u0, u1)
        if (n + 1) % 25 == 0 or n == steps - 1:
            u = sys.snapshot()
            f = sys.rhs(u)
            mag = _rhs_magnitude(f)
            sys.release(u, f)
            if not math.isfinite(mag) or mag > blowup_factor * ref:
                return False
    return True


def _rhs_magnitude(f):
    mag = float(np.max(np.abs(f.phi))) if f.phi.size else 0.0
    if f.c is not None:
        mag = max(mag, float(np.max(np.abs(f.c))))
    return mag
