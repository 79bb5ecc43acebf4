"""Verification cases with sharp-interface oracles, and the run loop.

Four cases: a circular phase embedded in another (Laplace pressure), a
lens on a grain boundary (dihedral angle), a shrinking single grain
(curvature-driven area decay) and a one-dimensional solutal moving-boundary
problem (square-root-of-time interface motion).  Each builder returns a
:class:`phaselab.model.State`; ``run_benchmark`` integrates it and collects
a :class:`BenchmarkReport`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import erf

from . import kernels
from .grid import (DIRICHLET, PERIODIC, ZERO_GRADIENT, Grid, ScalarField,
                   SparsePhaseField, half_crossing, integrate,
                   marching_squares)
from .integrators import (RhsCounter, Tolerances, embedded_attempt,
                          feuler_step, richardson_attempt, ssp104_step,
                          ssp2_step, sts_attempt, sts_coeffs, sts_step)
from .model import (KksSystem, PhysicalParams, State, derive_model_params,
                    grand_potential, profile, thin_interface_mobility)
from .stepcontrol import (ControllerState, gershgorin_bounds, pid_update,
                          sts_stage_count)


class BlowupError(RuntimeError):
    """Numerical blow-up (NaN) detected; carries the step index."""

    def __init__(self, step):
        super().__init__(f"numerical blow-up at step {step}")
        self.step = step


def refinement_width(dx, prefactor=3.0, exponent=0.4):
    """Interface parameter of a grid-convergence level: W = 3 dx^0.4."""
    return prefactor * dx ** exponent


def table_params(nphases=2, gamma=1.0, mobility=1.0, width=2.5,
                 diffusivity=1.0, prefactor=500.0, eq_conc=(0.02, 0.98)):
    """Standard parameter set; scalars broadcast to matrices/arrays."""
    return PhysicalParams(
        nphases=nphases,
        gamma=gamma,
        intf_mobility=mobility,
        width=width,
        diffusivity=diffusivity,
        gibbs_prefactor=prefactor,
        eq_conc=np.asarray(eq_conc, dtype=np.float64),
    )


@dataclass
class BenchmarkSpec:
    """Geometry, parameters, outputs and termination for one case."""

    case: str
    dims: tuple
    phys: PhysicalParams
    dx: float = 1.0
    radius: float = None
    height: float = None
    capacity: int = 3
    t_end: float = None
    t_max: float = None
    output_interval: float = None
    output_times: tuple = None
    equilibrium: dict = None   # kind, threshold, window
    initial_dt: float = None
    conc_dirichlet: dict = None
    seed: int = 0

    def outputs(self):
        if self.output_times is not None:
            return list(self.output_times)
        horizon = self.t_end if self.t_end is not None else self.t_max
        if self.output_interval is None or horizon is None:
            return []
        n = int(round(horizon / self.output_interval))
        return [self.output_interval * (k + 1) for k in range(n)]


@dataclass
class IntegratorConfig:
    kind: str                    # feuler | ssp2 | ssp104 | sts1 | sts2
    dt_factor: float = None      # fixed step as a multiple of dt_euler
    adaptive: bool = False
    tols: Tolerances = field(default_factory=Tolerances)
    nstages: int = 5             # ssp2 stage count
    embedded: tuple = None       # per-stage companion weights, optional
    max_stages: int = 2001
    safety: float = 0.9

    @property
    def order(self):
        return {"feuler": 1, "ssp2": 2, "ssp104": 4, "sts1": 1, "sts2": 2}[self.kind]

    @property
    def label(self):
        if self.kind == "ssp2":
            base = f"SSP({self.nstages})2"
        elif self.kind == "ssp104":
            base = "SSP(10)4"
        else:
            base = {"feuler": "FEuler", "sts1": "STS1", "sts2": "STS2"}[self.kind]
        if self.adaptive:
            return f"{base} adaptive a_phi={self.tols.abs_phase:g}"
        return f"{base} dt={self.dt_factor:g}dt_e"


@dataclass
class BenchmarkReport:
    spec: BenchmarkSpec
    config: IntegratorConfig
    times: list
    observable: list
    energy: list
    step_rows: list
    accepted_steps: int
    rejected_steps: int
    rhs_evals: int
    error: float
    extras: dict
    equilibrated: bool = False
    final_state: State = None

    @property
    def rejected_fraction(self):
        att = self.accepted_steps + self.rejected_steps
        return self.rejected_steps / att if att else 0.0


# ---------------------------------------------------------------------------
# geometry builders


def _disk_distance(grid, radius):
    centers = grid.cell_centers()
    half = [0.5 * n * grid.dx for n in grid.dims]
    r2 = sum((x - c) ** 2 for x, c in zip(centers, half))
    return radius - np.sqrt(r2)


def build_embedding(spec) -> State:
    """Circular phase 0 embedded in phase 1, chemistry at flat equilibrium."""
    grid = Grid(spec.dims, spec.dx, PERIODIC)
    if grid.ndim != 2:
        raise ValueError("the embedding case is two-dimensional")
    d = _disk_distance(grid, spec.radius)
    if spec.radius + 0.5 * math.pi * spec.phys.width > 0.5 * min(
            n * spec.dx for n in grid.dims):
        raise ValueError("embedded phase does not fit the domain")
    inner = profile(d, spec.phys.width).reshape(-1)
    dense = np.stack([inner, 1.0 - inner], axis=1)
    phases = SparsePhaseField.from_dense(grid, dense, spec.capacity)
    c0 = spec.phys.eq_conc
    conc = ScalarField(grid, dense @ c0[:2])
    state = State(phases, conc, 0.0)
    _finalize(state)
    area = math.pi * spec.radius ** 2
    vol = grid.ncells * grid.cell_volume
    target = area * c0[0] + (vol - area) * c0[1]
    concentration_shift(state, target)
    return state


def concentration_shift(state, sharp_target):
    """Shift the whole concentration field to the sharp-interface total."""
    grid = state.conc.grid
    total = integrate(state.conc)
    vol = grid.ncells * grid.cell_volume
    shift = (sharp_target - total) / vol
    state.conc.values += shift
    return shift


def build_triple_junction(spec) -> State:
    """Lens of phase 2 on the boundary between grains 0 and 1.

    Axis 0 splits the grains, so the grain boundary runs along axis 1 (the
    long side).  Grain values are rescaled under the lens so per-cell
    ratios survive and the sums stay one.
    """
    grid = Grid(spec.dims, spec.dx, PERIODIC)
    if grid.ndim != 2 or spec.phys.nphases != 3:
        raise ValueError("the junction case needs a 2D grid and three phases")
    w = spec.phys.width
    centers = grid.cell_centers()
    half = [0.5 * n * grid.dx for n in grid.dims]
    d_lens = spec.radius - np.sqrt(sum((x - c) ** 2
                                       for x, c in zip(centers, half)))
    phi_lens = profile(d_lens, w)
    g1 = profile(half[0] - centers[0], w)
    rest = 1.0 - phi_lens
    dense = np.stack([(rest * g1).reshape(-1),
                      (rest * (1.0 - g1)).reshape(-1),
                      phi_lens.reshape(-1)], axis=1)
    phases = SparsePhaseField.from_dense(grid, dense, spec.capacity)
    c0 = spec.phys.eq_conc
    conc = ScalarField(grid, dense @ c0)
    state = State(phases, conc, 0.0)
    _finalize(state)
    area = math.pi * spec.radius ** 2
    vol = grid.ncells * grid.cell_volume
    target = area * c0[2] + (vol - area) * c0[0]
    concentration_shift(state, target)
    return state


def build_single_grain(spec) -> State:
    """Shrinking circular grain; two fields of one phase, no chemistry."""
    grid = Grid(spec.dims, spec.dx, PERIODIC)
    inner = profile(_disk_distance(grid, spec.radius),
                    spec.phys.width).reshape(-1)
    dense = np.stack([inner, 1.0 - inner], axis=1)
    phases = SparsePhaseField.from_dense(grid, dense, spec.capacity)
    state = State(phases, None, 0.0)
    _finalize(state)
    return state


def build_stefan(spec) -> State:
    """Two half-spaces: phase 0 (left, high solute) grows into phase 1.

    Phase boundary conditions are zero-gradient; the concentration holds
    its far-field values at both ends with Dirichlet faces.
    """
    grid = Grid(spec.dims, spec.dx, ZERO_GRADIENT)
    if grid.ndim != 1:
        raise ValueError("the moving-boundary case is one-dimensional")
    x = grid.cell_centers()[0]
    beta = profile(spec.height - x, spec.phys.width).reshape(-1)
    dense = np.stack([beta, 1.0 - beta], axis=1)
    phases = SparsePhaseField.from_dense(grid, dense, spec.capacity)
    far = spec.conc_dirichlet  # {0: left value, 1: right value}
    conc = ScalarField(grid, dense @ np.array([far[0], far[1]]),
                       bcs=(DIRICHLET,), dirichlet_values=far)
    state = State(phases, conc, 0.0)
    _finalize(state)
    return state


def build_heat(spec) -> State:
    """Pure diffusion probe: one phase, concentration only."""
    grid = Grid(spec.dims, spec.dx, PERIODIC)
    phases = SparsePhaseField.from_dense(
        grid, np.ones((grid.ncells, 1)), max(spec.capacity, 1))
    rng = np.random.default_rng(spec.seed)
    conc = ScalarField(grid, 0.5 + 0.25 * rng.standard_normal(grid.ncells))
    state = State(phases, conc, 0.0)
    _finalize(state)
    return state


def _finalize(state):
    """Project every cell and set up the narrow-band halos."""
    ph = state.phases
    bad = kernels.project_rows(ph.vals, ph.count)
    if bad >= 0:
        raise ValueError(f"initial state degenerate in cell {bad}")
    sys = KksSystem(state, _dummy_phys(ph.nphases),
                    derive_model_params(_dummy_phys(ph.nphases)))
    sys.full_bookkeeping()


def _dummy_phys(n):
    return PhysicalParams(nphases=n, gamma=1.0, intf_mobility=1.0, width=1.0)


# ---------------------------------------------------------------------------
# analytic oracles and detectors


def theta_eq(gamma_bb, gamma_ab):
    """Equilibrium dihedral angle of a lens on a grain boundary."""
    ratio = gamma_bb / (2.0 * gamma_ab)
    if ratio > 1.0:
        raise ValueError("no equilibrium angle: gamma_bb > 2 gamma_ab")
    return 2.0 * math.acos(ratio)


def _linear_crossings(values, spacing, level=0.5):
    """All linearly interpolated level crossings along a sampled line."""
    v = np.asarray(values, dtype=np.float64) - level
    out = []
    for i in range(v.size - 1):
        if v[i] == 0.0:
            out.append(i * spacing)
        elif v[i] * v[i + 1] < 0.0:
            out.append((i + v[i] / (v[i] - v[i + 1])) * spacing)
    if v[-1] == 0.0:
        out.append((v.size - 1) * spacing)
    return out


def dihedral_angle(state, phase=2, method="contour"):
    """Momentary dihedral angle of the lens phase, vesica-piscis reading.

    ``centerline`` measures the 0.5 crossings along the two lines through
    the domain center with linear interpolation (the cheap run-time
    detector); ``contour`` takes the extremal extents of the marching
    squares contour (the reported value).
    """
    grid = state.phases.grid
    view = state.phases.phase_values(phase).reshape(grid.dims)
    if method == "centerline":
        nx, ny = grid.dims
        along = view[nx // 2, :]
        across = view[:, ny // 2]
        ys = _linear_crossings(along, grid.dx)
        xs = _linear_crossings(across, grid.dx)
        if len(ys) < 2 or len(xs) < 2:
            raise ValueError("lens does not cross the centerlines")
        length = max(ys) - min(ys)
        sag = max(xs) - min(xs)
    else:
        segs = marching_squares(view, 0.5, grid.dx)
        pts = segs.points()
        if pts.size == 0:
            raise ValueError("no 0.5 contour found")
        length = float(np.ptp(pts[:, 1]))
        sag = float(np.ptp(pts[:, 0]))
    return 4.0 * math.atan2(sag, length)


def trailing_slope(times, values, window):
    """Least-squares slope over the trailing window; None if too short."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.size < 2 or times[-1] - times[0] < window:
        return None
    sel = times >= times[-1] - window
    t = times[sel]
    v = values[sel]
    if t.size < 2:
        return None
    tm = t - t.mean()
    denom = float(np.dot(tm, tm))
    if denom == 0.0:
        return 0.0
    return float(np.dot(tm, v - v.mean()) / denom)


def equilibrium_detected(times, values, threshold, window):
    """Oscillation-resistant rate-of-change test over two diffusion times."""
    slope = trailing_slope(times, values, window)
    return slope is not None and abs(slope) < threshold


def stefan_growth_constant(diffusivity, c_a, c_b, c_ab, c_ba):
    """Growth parameter of the similarity solution, solved to 1e-12 residual."""
    if c_ba == c_ab:
        raise ValueError("interface concentrations must differ")
    root = math.sqrt(4.0 * diffusivity)
    pref = root / math.sqrt(math.pi)

    def residual(a):
        arg = a / root
        gauss = math.exp(-arg * arg)
        return a - pref * ((c_a - c_ab) / (c_ba - c_ab) * gauss / (1.0 - erf(arg))
                           + (c_b - c_ba) / (c_ba - c_ab) * gauss / (1.0 + erf(arg)))

    lo, hi = -4.0 * root, 4.0 * root
    if residual(lo) * residual(hi) > 0:
        raise ValueError("no sign change in the growth-constant bracket")
    a = brentq(residual, lo, hi, xtol=1e-15, rtol=8.9e-16)
    if abs(residual(a)) > 1e-12:
        raise RuntimeError("growth-constant solve did not reach 1e-12")
    return a


def stefan_fit(times, positions):
    """Single-parameter least squares of X = A sqrt(t) over t > 0 samples."""
    t = np.asarray(times, dtype=np.float64)
    x = np.asarray(positions, dtype=np.float64)
    sel = t > 0
    t = t[sel]
    x = x[sel]
    if t.size < 1:
        raise ValueError("need samples at positive times")
    return float(np.sum(x * np.sqrt(t)) / np.sum(t))


def area_slope_error(times, areas, rate_exact):
    """Mean second-order derivative of the area series against the oracle.

    Centered differences at interior samples, one-sided at the ends, then
    the average over derivative samples at t > 0.
    """
    t = np.asarray(times, dtype=np.float64)
    a = np.asarray(areas, dtype=np.float64)
    n = t.size
    if n < 3:
        raise ValueError("need at least three samples")
    d = np.empty(n)
    d[0] = (a[1] - a[0]) / (t[1] - t[0])
    d[-1] = (a[-1] - a[-2]) / (t[-1] - t[-2])
    for i in range(1, n - 1):
        d[i] = (a[i + 1] - a[i - 1]) / (t[i + 1] - t[i - 1])
    sel = t > 0
    mean_rate = float(np.mean(d[sel]))
    return abs(mean_rate - rate_exact), mean_rate


def laplace_pressure_parts(sys, spec):
    """(pressure jump from the grand potentials, curvature, error).

    The grand potential is the negative pressure, so the embedded phase's
    excess pressure is the outer-minus-inner potential difference at the
    domain-average chemical potential.
    """
    mu_bar = sys.mean_mu()
    dpsi = (grand_potential(mu_bar, 1, sys.phys)
            - grand_potential(mu_bar, 0, sys.phys))
    area = integrate(sys.state.phases, 0)
    r_eq = math.sqrt(max(area, 1e-300) / math.pi)
    kappa = 1.0 / r_eq
    gamma = sys.phys.gamma[0, 1]
    return dpsi, kappa, abs(gamma * kappa - dpsi)


# ---------------------------------------------------------------------------
# spec factories with paper-scale defaults


def embedding_spec(n=128, radius=32.0, dx=1.0, width=3.0, diffusivity=100.0,
                   output_interval=50.0, t_max=20000.0):
    phys = table_params(width=width, diffusivity=diffusivity)
    window = 2.0 * (n * dx) ** 2 / diffusivity
    return BenchmarkSpec(
        case="embedding", dims=(n, n), dx=dx, radius=radius, phys=phys,
        output_interval=output_interval, t_max=t_max,
        equilibrium={"kind": "pressure", "threshold": 1e-14, "window": window})


def triple_junction_spec(long_side=192, short_side=96, radius=32.0, dx=1.0,
                         width=3.0, gamma_bb=1.0, gamma_ab=2.0,
                         diffusivity=100.0, output_interval=100.0,
                         t_max=60000.0):
    gamma = np.array([[1.0, gamma_bb, gamma_ab],
                      [gamma_bb, 1.0, gamma_ab],
                      [gamma_ab, gamma_ab, 1.0]])  # diagonal unused
    phys = PhysicalParams(
        nphases=3, gamma=gamma, intf_mobility=np.ones((3, 3)), width=width,
        diffusivity=np.full(3, diffusivity), gibbs_prefactor=np.full(3, 500.0),
        eq_conc=np.array([0.98, 0.98, 0.02]))
    window = 2.0 * (long_side * dx) ** 2 / diffusivity
    return BenchmarkSpec(
        case="triple-junction", dims=(short_side, long_side), dx=dx,
        radius=radius, phys=phys, output_interval=output_interval,
        t_max=t_max,
        equilibrium={"kind": "angle", "threshold": 1e-11, "window": window})


def single_grain_spec(n=256, radius=110.0, dx=1.0, width=2.5, t_end=5750.0,
                      n_outputs=50):
    phys = table_params(width=width)
    return BenchmarkSpec(case="single-grain", dims=(n, n), dx=dx,
                         radius=radius, phys=phys, t_end=t_end,
                         output_interval=t_end / n_outputs)


def stefan_spec(size=1800, height=400.0, dx=1.0, width=2.5, diffusivity=1.0,
                t_end=43000.0, n_outputs=43, far_left=0.98, far_right=0.2):
    phys = table_params(width=width, diffusivity=diffusivity, prefactor=1.0,
                        eq_conc=(0.98, 0.02))
    return BenchmarkSpec(case="stefan", dims=(int(size / dx),), dx=dx,
                         height=height, phys=phys, t_end=t_end,
                         output_interval=t_end / n_outputs,
                         conc_dirichlet={0: far_left, 1: far_right})


def heat_spec(n=48, dx=1.0, diffusivity=1.0, t_end=10.0, ndim=2, seed=0):
    phys = PhysicalParams(nphases=1, gamma=np.ones((1, 1)),
                          intf_mobility=np.ones((1, 1)), width=2.5,
                          diffusivity=np.array([diffusivity]),
                          gibbs_prefactor=np.array([1.0]),
                          eq_conc=np.array([0.0]))
    return BenchmarkSpec(case="heat", dims=(n,) * ndim, dx=dx, phys=phys,
                         t_end=t_end, output_interval=t_end, seed=seed)


_BUILDERS = {
    "embedding": build_embedding,
    "triple-junction": build_triple_junction,
    "single-grain": build_single_grain,
    "stefan": build_stefan,
    "heat": build_heat,
}


def build_state(spec) -> State:
    return _BUILDERS[spec.case](spec)


def make_system(spec, counter=None):
    """State, derived model (with any case overrides) and system backend."""
    state = build_state(spec)
    model = derive_model_params(spec.phys)
    if spec.case == "stefan":
        mob = thin_interface_mobility(spec.phys, spec.phys.diffusivity[0],
                                      spec.phys.width)
        model.mobility[0, 1] = mob
        model.mobility[1, 0] = mob
    sys = KksSystem(state, spec.phys, model, counter)
    return sys


# ---------------------------------------------------------------------------
# the run loop


def run_benchmark(spec, config, log_steps=False, keep_state=False,
                  step_limit=20_000_000, frame_hook=None):
    """Integrate one case to its termination rule and report.

    Adaptive configurations estimate per-step errors and drive the PID
    controller; fixed configurations always accept.  Output times are hit
    exactly by truncating the step.
    """
    counter = RhsCounter()
    sys = make_system(spec, counter)
    eig = gershgorin_bounds(sys.state, sys.model, spec.phys)
    dt_e = eig.dt_euler
    observe = _observable(spec, sys)

    adaptive = config.adaptive
    if adaptive:
        dt = dt_e if spec.initial_dt is None else min(dt_e, spec.initial_dt)
        controller = ControllerState(order=config.order)
    else:
        if config.dt_factor is None:
            raise ValueError("fixed-step runs need dt_factor")
        dt = config.dt_factor * dt_e

    outputs = spec.outputs()
    t_stop = spec.t_end if spec.t_end is not None else spec.t_max
    if t_stop is None:
        raise ValueError("spec needs t_end or t_max")
    if not outputs or outputs[-1] < t_stop - 1e-9:
        outputs = outputs + [t_stop]

    times = [0.0]
    series = [observe()]
    energies = [sys.free_energy()]
    if frame_hook:
        frame_hook(sys, 0.0)
    step_rows = []
    hist_t = [0.0]
    hist_v = [series[0]]
    eq = spec.equilibrium
    equilibrated = False

    t = 0.0
    out_i = 0
    accepted = 0
    rejected = 0
    attempts = 0
    while t < t_stop - 1e-9 * max(1.0, t_stop):
        if attempts > step_limit:
            raise RuntimeError("step limit exceeded")
        attempts += 1
        next_out = outputs[out_i]
        dt_try = dt
        hit = False
        if t + dt_try >= next_out - 1e-12 * max(1.0, next_out):
            dt_try = next_out - t
            hit = True
        if dt_try <= 1e-14 * dt_e:
            raise RuntimeError("time step collapsed")
        u0 = sys.snapshot()
        err = 0.0
        if config.kind == "feuler":
            u1 = feuler_step(sys, u0, dt_try)
        elif config.kind == "ssp2":
            if adaptive:
                if config.embedded is None:
                    raise ValueError("adaptive ssp2 needs an embedded table")
                u1, err = embedded_attempt(
                    sys, u0, dt_try,
                    lambda s, u, h: ssp2_step(s, u, h, config.nstages,
                                              embedded=config.embedded),
                    config.tols)
            else:
                u1 = ssp2_step(sys, u0, dt_try, config.nstages)
        elif config.kind == "ssp104":
            if adaptive:
                if config.embedded is not None:
                    u1, err = embedded_attempt(
                        sys, u0, dt_try,
                        lambda s, u, h: ssp104_step(s, u, h,
                                                    embedded=config.embedded),
                        config.tols)
                else:
                    u1, err = richardson_attempt(sys, u0, dt_try, ssp104_step,
                                                 4, config.tols)
            else:
                u1 = ssp104_step(sys, u0, dt_try)
        elif config.kind in ("sts1", "sts2"):
            order = 1 if config.kind == "sts1" else 2
            s = sts_stage_count(dt_try, dt_e, order, config.safety,
                                config.max_stages)
            coeffs = sts_coeffs(s, order)
            if adaptive:
                u1, err = sts_attempt(sys, u0, dt_try, coeffs, config.tols)
            else:
                u1 = sts_step(sys, u0, dt_try, coeffs)
        else:
            raise ValueError(f"unknown integrator {config.kind!r}")

        ok = (not adaptive) or err < 1.0
        if adaptive:
            dt, controller = pid_update(controller, err, dt_try, ok)
        if not ok:
            rejected += 1
            sys.release(u0, u1)
            if log_steps:
                step_rows.append((t, dt_try, 0, err))
            continue

        if (adaptive or hit or accepted % 64 == 0) and not sys.isfinite(u1):
            raise BlowupError(accepted + rejected)
        sys.accept(u1, next_out if hit else t + dt_try)
        sys.release(u0, u1)
        t = sys.state.time
        accepted += 1
        if eq is not None or log_steps:
            value = observe()
            hist_t.append(t)
            hist_v.append(value)
            if log_steps:
                step_rows.append((t, dt_try, 1, err))
        if hit:
            times.append(t)
            series.append(observe() if eq is None else hist_v[-1])
            energies.append(sys.free_energy())
            if frame_hook:
                frame_hook(sys, t)
            out_i += 1
            if eq is not None and equilibrium_detected(
                    hist_t, hist_v, eq["threshold"], eq["window"]):
                equilibrated = True
                break

    error, extras = _final_metrics(spec, sys, times, series)
    return BenchmarkReport(
        spec=spec, config=config, times=times, observable=series,
        energy=energies, step_rows=step_rows, accepted_steps=accepted,
        rejected_steps=rejected, rhs_evals=counter.count, error=error,
        extras=extras, equilibrated=equilibrated,
        final_state=sys.state if keep_state else None)


def _observable(spec, sys):
    case = spec.case
    if case == "embedding":
        def obs():
            dpsi, _, _ = laplace_pressure_parts(sys, spec)
            return dpsi
        return obs
    if case == "triple-junction":
        def obs():
            try:
                return dihedral_angle(sys.state, 2, "centerline")
            except ValueError:
                return float("nan")
        return obs
    if case == "single-grain":
        return lambda: integrate(sys.state.phases, 0)
    if case == "stefan":
        def obs():
            line = sys.state.phases.phase_values(1)
            rel = half_crossing(line, spec.dx)
            return 0.5 * spec.dx + rel  # absolute position of the 0.5 point
        return obs
    if case == "heat":
        return lambda: float(np.max(np.abs(sys.state.conc.values)))
    raise ValueError(case)


def _final_metrics(spec, sys, times, series):
    case = spec.case
    if case == "embedding":
        dpsi, kappa, err = laplace_pressure_parts(sys, spec)
        gamma = sys.phys.gamma[0, 1]
        return err, {"dpsi": dpsi, "kappa": kappa,
                     "target": gamma / spec.radius,
                     "mean_mu": sys.mean_mu()}
    if case == "triple-junction":
        theta = dihedral_angle(sys.state, 2, "contour")
        target = theta_eq(sys.phys.gamma[0, 1], sys.phys.gamma[0, 2])
        return abs(target - theta), {"theta": theta, "theta_eq": target,
                                     "theta_deg": math.degrees(theta)}
    if case == "single-grain":
        gamma = sys.phys.gamma[0, 1]
        mob = sys.phys.intf_mobility[0, 1]
        exact = -2.0 * math.pi * mob * gamma
        err, mean_rate = area_slope_error(times, series, exact)
        return err, {"mean_rate": mean_rate, "exact_rate": exact,
                     "rel_error": err / abs(exact)}
    if case == "stefan":
        d = sys.phys.diffusivity[0]
        far = spec.conc_dirichlet
        a_exact = stefan_growth_constant(d, far[1], far[0],
                                         sys.phys.eq_conc[1],
                                         sys.phys.eq_conc[0])
        disp = [p - series[0] for p in series]
        a_fit = stefan_fit(times, disp)
        c = sys.state.conc.values
        edge_grad = max(abs(c[1] - c[0]), abs(c[-1] - c[-2])) / spec.dx
        return abs(a_exact - a_fit), {
            "a_exact": a_exact, "a_fit": a_fit,
            "rel_error": abs(a_exact - a_fit) / abs(a_exact),
            "farfield_grad": edge_grad,
            "farfield_ok": edge_grad < 1e-6}
    return 0.0, {}
