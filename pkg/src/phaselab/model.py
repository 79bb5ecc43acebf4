"""Multiphase obstacle-potential model with parabolic two-sublattice chemistry.

Physical parameters (interface energies, mobilities, interface width W)
convert to the model matrices

    grad_coeff  = 4 * W * gamma / pi        (gradient energy)
    well_coeff  = 4 * gamma / (pi * W)      (obstacle well)
    mobility    = pi * M / (4 * W)          (phase-field mobility)

so that a flat equilibrium interface carries energy gamma and a curved one
moves by mean curvature flow at rate M*gamma*kappa.  Concentration couples
in through a per-phase parabolic Gibbs energy; local equilibrium fixes the
partition in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .grid import (DegenerateCellError, CapacityError, ScalarField,
                   SparsePhaseField)

THIN_INTERFACE_MF = 0.3084251  # profile/weighting integrals of the matched asymptotics


@dataclass
class PhysicalParams:
    """Interface and chemistry inputs; arrays are per phase or per pair."""

    nphases: int
    gamma: np.ndarray          # (N, N) interface energy, symmetric
    intf_mobility: np.ndarray  # (N, N) interface mobility, symmetric
    width: float               # interface parameter W
    diffusivity: np.ndarray = None   # (N,) per-phase solute diffusivity
    gibbs_prefactor: np.ndarray = None  # (N,) parabolic curvature k
    eq_conc: np.ndarray = None  # (N,) equilibrium concentration

    def __post_init__(self):
        n = self.nphases
        self.gamma = _sym_matrix(self.gamma, n, "gamma")
        self.intf_mobility = _sym_matrix(self.intf_mobility, n, "intf_mobility")
        if self.width <= 0:
            raise ValueError("interface parameter must be positive")
        self.diffusivity = _per_phase(self.diffusivity, n, 1.0)
        self.gibbs_prefactor = _per_phase(self.gibbs_prefactor, n, 1.0)
        self.eq_conc = _per_phase(self.eq_conc, n, 0.0)
        off = ~np.eye(n, dtype=bool)
        if np.any(self.gamma[off] <= 0) or np.any(self.intf_mobility[off] <= 0):
            raise ValueError("off-diagonal gamma and mobility entries must be positive")
        if np.any(self.gibbs_prefactor <= 0):
            raise ValueError("parabolic prefactors must be positive")
        if np.any((self.eq_conc < 0) | (self.eq_conc > 1)):
            raise ValueError("equilibrium concentrations must lie in [0, 1]")


def _sym_matrix(m, n, name):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 0:
        m = np.full((n, n), float(m))
    if m.shape != (n, n) or not np.allclose(m, m.T):
        raise ValueError(f"{name} must be a symmetric {n}x{n} matrix")
    return m.copy()


def _per_phase(v, n, default):
    if v is None:
        return np.full(n, default)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise ValueError(f"per-phase array must have length {n}")
    return v.copy()


@dataclass
class ModelParams:
    grad_coeff: np.ndarray
    well_coeff: np.ndarray
    mobility: np.ndarray


def derive_model_params(p: PhysicalParams) -> ModelParams:
    w = p.width
    return ModelParams(
        grad_coeff=4.0 * w * p.gamma / math.pi,
        well_coeff=4.0 * p.gamma / (math.pi * w),
        mobility=math.pi * p.intf_mobility / (4.0 * w),
    )


def thin_interface_mobility(p: PhysicalParams, diffusivity, width,
                            pair=(0, 1)) -> float:
    """Phase-field mobility that cancels the kinetic coefficient.

    Valid for two phases with equal diffusivities and equal parabolic
    prefactors; dc/dmu is then 1/k.
    """
    a, b = pair
    if p.gibbs_prefactor[a] != p.gibbs_prefactor[b]:
        raise ValueError("thin-interface mobility assumes equal prefactors")
    dc_dmu = 1.0 / p.gibbs_prefactor[a]
    dc = p.eq_conc[b] - p.eq_conc[a]
    return (math.pi ** 2 / (16.0 * width ** 2) * diffusivity * dc_dmu
            / (dc ** 2 * THIN_INTERFACE_MF))


def profile(d, width):
    """Equilibrium interface profile over the signed distance ``d``."""
    d = np.asarray(d, dtype=np.float64)
    half = 0.5 * math.pi * width
    out = np.where(d <= -half, 0.0,
                   np.where(d >= half, 1.0, 0.5 * (1.0 + np.sin(d / width))))
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class Partition:
    """Shared chemical potential and the per-phase concentrations."""

    mu: float
    conc: np.ndarray


def kks_partition(c, h, p: PhysicalParams) -> Partition:
    """Closed-form local equilibrium split of ``c`` among the phases."""
    h = np.asarray(h, dtype=np.float64)
    s1 = float(np.sum(h * p.eq_conc))
    s2 = float(np.sum(h / p.gibbs_prefactor))
    mu = (c - s1) / s2
    return Partition(mu=mu, conc=p.eq_conc + mu / p.gibbs_prefactor)


def grand_potential(mu, phase, p: PhysicalParams) -> float:
    k = p.gibbs_prefactor[phase]
    return -mu * mu / (2.0 * k) - mu * p.eq_conc[phase]


def simplex_project(values):
    """Project one cell's phase values onto the simplex.

    Negatives clamp to zero; a value at or above one wins the cell; the
    rest divides by its sum.  Idempotent to the bit.
    """
    out = np.array(values, dtype=np.float64).reshape(1, -1)
    cnt = np.array([out.shape[1]], dtype=np.int16)
    if kernels.project_rows(out, cnt) >= 0:
        raise DegenerateCellError("all phase values nonpositive")
    return out[0]


@dataclass
class State:
    """Phase field plus optional concentration at one time."""

    phases: SparsePhaseField
    conc: ScalarField = None
    time: float = 0.0

    def copy(self):
        return State(self.phases.copy(),
                     None if self.conc is None else self.conc.copy(),
                     self.time)


class Fields:
    """One stage vector: band-compact phase values, dense concentration."""

    __slots__ = ("phi", "c")

    def __init__(self, phi, c):
        self.phi = phi
        self.c = c


class KksSystem:
    """Bundles a state's layout with parameter arrays and work passes.

    The sparse layout (ids/count, active band) is frozen while a step is in
    flight; stage vectors only carry values.  ``accept`` writes a stage back
    into the state and refreshes the narrow-band bookkeeping where phase
    support appeared or died.
    """

    def __init__(self, state: State, phys: PhysicalParams,
                 model: ModelParams, counter=None):
        self.state = state
        self.phys = phys
        self.model = model
        self.counter = counter
        g = state.phases.grid
        self.grid = g
        self.use_chem = state.conc is not None
        self.nbr_phase = state.phases.nbr
        if self.use_chem:
            self.nbr_conc = state.conc.nbr
            self.dval_conc = state.conc.dirichlet_values
        else:
            self.nbr_conc = self.nbr_phase
            self.dval_conc = np.zeros(2 * g.ndim)
        self._mu = np.zeros(g.ncells)
        self._no_band = np.full(g.ncells, -1, dtype=np.int64)
        self._pool = []
        self.rebuild_band()

    # -- band bookkeeping -------------------------------------------------

    def rebuild_band(self):
        ph = self.state.phases
        self.band_idx = np.flatnonzero(ph.count >= 2).astype(np.int64)
        self.band_pos = np.full(self.grid.ncells, -1, dtype=np.int64)
        self.band_pos[self.band_idx] = np.arange(self.band_idx.size)
        self.band_count = ph.count[self.band_idx].astype(np.int16)
        self._events = np.empty(max(self.band_idx.size, 1), dtype=np.int64)
        nb = self.band_idx.size
        nf = self.nbr_phase.shape[1]
        self._nslot = np.full((nb, ph.capacity, nf), -1, dtype=np.int8)
        self._nb_cell = np.empty((nb, nf), dtype=np.int64)
        self._nb_band = np.empty((nb, nf), dtype=np.int64)
        kernels.build_neighbor_slots(self.band_idx, ph.ids, ph.count,
                                     self.nbr_phase, self.band_pos,
                                     self._nslot, self._nb_cell,
                                     self._nb_band)
        self._pool = []

    def full_bookkeeping(self):
        """Rebuild every cell's stored list, then the band (init path)."""
        ph = self.state.phases
        cells = np.arange(self.grid.ncells, dtype=np.int64)
        self._rebuild_cells(cells)
        self.rebuild_band()

    def _rebuild_cells(self, cells):
        ph = self.state.phases
        cap = ph.capacity
        bad = kernels.rebuild_cells(cells, ph.ids, ph.vals, ph.count,
                                    self.nbr_phase,
                                    np.empty(cap, dtype=np.int16),
                                    np.empty(cap))
        if bad >= 0:
            raise CapacityError(f"cell {bad} needs more than {cap} phase slots")

    # -- stage vector plumbing --------------------------------------------

    def snapshot(self):
        """Current accepted state as a stage vector."""
        ph = self.state.phases
        out = self.new_fields()
        np.take(ph.vals, self.band_idx, axis=0, out=out.phi)
        if self.use_chem:
            out.c[:] = self.state.conc.values
        return out

    def new_fields(self):
        if self._pool:
            return self._pool.pop()
        phi = np.empty((self.band_idx.size, self.state.phases.capacity))
        c = np.empty(self.grid.ncells) if self.use_chem else None
        return Fields(phi, c)

    def release(self, *vecs):
        nband = self.band_idx.size
        for v in vecs:
            if v is not None and v.phi.shape[0] == nband:
                self._pool.append(v)

    def copy_fields(self, u):
        v = self.new_fields()
        v.phi[:] = u.phi
        if self.use_chem:
            v.c[:] = u.c
        return v

    # -- physics passes ----------------------------------------------------

    def mu_of(self, u):
        """Chemical potential array for a stage vector (shared buffer)."""
        ph = self.state.phases
        kernels.mu_field(ph.ids, ph.vals, ph.count, self.band_pos, u.phi,
                         u.c, self.phys.gibbs_prefactor, self.phys.eq_conc,
                         self._mu)
        return self._mu

    def rhs(self, u):
        if self.counter is not None:
            self.counter.bump()
        ph = self.state.phases
        out = self.new_fields()
        if self.use_chem:
            mu = self.mu_of(u)
        else:
            mu = self._mu
        kernels.phase_rhs(ph.ids, ph.vals, ph.count, self.band_idx, u.phi,
                          self._nslot, self._nb_cell, self._nb_band,
                          1.0 / self.grid.dx ** 2,
                          self.model.grad_coeff, self.model.well_coeff,
                          self.model.mobility, self.use_chem, mu,
                          self.phys.gibbs_prefactor, self.phys.eq_conc,
                          out.phi)
        if self.use_chem:
            kernels.conc_rhs(ph.ids, ph.vals, ph.count, self.band_pos, u.phi,
                             u.c, mu, self.nbr_conc, self.dval_conc,
                             self.phys.gibbs_prefactor, self.phys.eq_conc,
                             self.phys.diffusivity, 1.0 / self.grid.dx,
                             out.c)
        return out

    def combine(self, out, a0, s0, a1=0.0, s1=None, a2=0.0, s2=None,
                b1=0.0, f1=None, b0=0.0, f0=None, record=False):
        """out = a0*s0 + a1*s1 + a2*s2 + b1*f1 + b0*f0, then projection.

        Returns the per-band-cell violation flags when ``record`` is set.
        """
        s1 = s0 if s1 is None else s1
        s2 = s0 if s2 is None else s2
        f1 = s0 if f1 is None else f1
        f0 = s0 if f0 is None else f0
        viol = np.empty(self.band_idx.size, dtype=np.bool_) if record else _NO_VIOL
        bad = kernels.combine_project(self.band_count, a0, s0.phi, a1, s1.phi,
                                      a2, s2.phi, b1, f1.phi, b0, f0.phi,
                                      out.phi, viol, record)
        if bad >= 0:
            raise DegenerateCellError(
                f"projection degenerated in band cell {bad}")
        if self.use_chem:
            np.multiply(s0.c, a0, out=out.c)
            if a1 != 0.0:
                out.c += a1 * s1.c
            if a2 != 0.0:
                out.c += a2 * s2.c
            if b1 != 0.0:
                out.c += b1 * f1.c
            if b0 != 0.0:
                out.c += b0 * f0.c
        return viol if record else None

    def fixup_rhs0(self, viol, u0, u1, mu1dt, f0):
        """Per-cell projection-consistent replacement of the initial RHS."""
        if viol is None or not viol.any():
            return False
        kernels.fixup_rhs0(self.band_count, viol, u0.phi, u1.phi,
                           1.0 / mu1dt, f0.phi)
        return True

    # -- acceptance ---------------------------------------------------------

    def accept(self, u, time):
        ph = self.state.phases
        n_ev = kernels.scatter_accept(ph.vals, self.band_idx, u.phi,
                                      ph.count, self._events)
        if self.use_chem:
            self.state.conc.values[:] = u.c
        self.state.time = time
        if n_ev:
            ev = self._events[:n_ev]
            cells = np.unique(np.concatenate(
                [ev, self.nbr_phase[ev].reshape(-1)]))
            cells = cells[cells >= 0]
            self._rebuild_cells(cells)
            self.rebuild_band()

    # -- error machinery -----------------------------------------------------

    def sommeijer_estimate(self, u0, u1, f0, f1, dt):
        """Per-DoF estimate; phase trials outside [0,1] get zero error."""
        est = self.new_fields()
        kernels.sommeijer_phase(self.band_count, u0.phi, u1.phi, f0.phi,
                                f1.phi, dt, est.phi)
        if self.use_chem:
            est.c[:] = ((12.0 / 15.0) * (u1.c - u0.c)
                        - (6.0 / 15.0) * dt * (f0.c + f1.c))
        return est

    def richardson_estimate(self, u_big, u_half, order):
        est = self.new_fields()
        scale = 1.0 / (2.0 ** order - 1.0)
        np.subtract(u_half.phi, u_big.phi, out=est.phi)
        est.phi *= scale
        if self.use_chem:
            np.subtract(u_half.c, u_big.c, out=est.c)
            est.c *= scale
        return est

    def error_norm(self, est, u0, u1, tols):
        """Weighted l2 norm with nontrivial-DoF counting."""
        from .integrators import weighted_error_norm

        return weighted_error_norm(self, est, u0, u1, tols)

    def isfinite(self, u):
        ok = np.all(np.isfinite(u.phi))
        if ok and self.use_chem:
            ok = np.all(np.isfinite(u.c))
        return bool(ok)

    # -- diagnostics ---------------------------------------------------------

    def free_energy(self, u=None):
        """Midpoint-quadrature energy of the accepted state."""
        ph = self.state.phases
        acc = kernels.energy_band(self.band_idx, ph.ids, ph.vals, ph.count,
                                  self.nbr_phase, self.model.grad_coeff,
                                  self.model.well_coeff,
                                  1.0 / (2.0 * self.grid.dx))
        if self.use_chem:
            kernels.mu_field(ph.ids, ph.vals, ph.count, self._no_band,
                             _EMPTY_PHI, self.state.conc.values,
                             self.phys.gibbs_prefactor, self.phys.eq_conc,
                             self._mu)
            acc += kernels.energy_chemical(ph.ids, ph.vals, ph.count,
                                           self._mu, self.phys.gibbs_prefactor)
        return acc * self.grid.cell_volume

    def mean_mu(self):
        ph = self.state.phases
        kernels.mu_field(ph.ids, ph.vals, ph.count, self._no_band, _EMPTY_PHI,
                         self.state.conc.values, self.phys.gibbs_prefactor,
                         self.phys.eq_conc, self._mu)
        return float(np.mean(self._mu))


_NO_VIOL = np.zeros(1, dtype=np.bool_)
_EMPTY_PHI = np.zeros((1, 1))


def phase_rhs(state: State, model: ModelParams, p: PhysicalParams):
    """Per-cell per-phase rates, dense-aligned with the state's slot layout."""
    sys = KksSystem(state, p, model)
    u = sys.snapshot()
    f = sys.rhs(u)
    out = np.zeros_like(state.phases.vals)
    out[sys.band_idx] = f.phi
    return out


def concentration_rhs(state: State, p: PhysicalParams):
    """Rate of the conserved concentration field, one value per cell."""
    model = derive_model_params(p)
    sys = KksSystem(state, p, model)
    u = sys.snapshot()
    f = sys.rhs(u)
    return f.c.copy()


def free_energy(state: State, model: ModelParams, p: PhysicalParams) -> float:
    sys = KksSystem(state, p, model)
    return sys.free_energy()
