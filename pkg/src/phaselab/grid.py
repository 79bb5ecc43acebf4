"""Cell-centered Cartesian grids and field storage.

Cells are indexed row-major (C order) over ``dims``; cell centers sit at
``(i + 0.5) * dx``.  Boundary handling is encoded in a per-cell neighbor
table: entries >= 0 are neighbor cell indices (a zero-gradient face maps a
cell onto itself, which makes the mirrored ghost implicit), entries < 0
encode a Dirichlet face as ``-(face + 1)`` whose ghost value is
``2*u_b - u_i`` so the face value equals the boundary value ``u_b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PERIODIC = "periodic"
ZERO_GRADIENT = "zero-gradient"
DIRICHLET = "dirichlet"
_BC_KINDS = (PERIODIC, ZERO_GRADIENT, DIRICHLET)

# face id convention: face = 2*axis + side with side 0 = low, 1 = high.
# Neighbor tables list faces in that order; kernels sum them in that order,
# which keeps reductions reproducible.


class DegenerateCellError(RuntimeError):
    """Raised when a simplex projection meets an all-nonpositive cell."""


class CapacityError(RuntimeError):
    """Raised when a cell needs more phase slots than the field provides."""


@dataclass(frozen=True)
class Grid:
    """Regular cell-centered Cartesian grid, 1 to 3 axes."""

    dims: tuple
    dx: float
    bcs: tuple = None  # per-axis default boundary kind

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        bcs = self.bcs
        if bcs is None:
            bcs = (PERIODIC,) * len(dims)
        elif isinstance(bcs, str):
            bcs = (bcs,) * len(dims)
        else:
            bcs = tuple(bcs)
        object.__setattr__(self, "bcs", bcs)
        if not 1 <= len(dims) <= 3:
            raise ValueError("grid must have 1 to 3 axes")
        if any(n < 3 for n in dims):
            raise ValueError("every extent must be >= 3 (stencil width)")
        if not self.dx > 0:
            raise ValueError("spacing must be positive")
        if len(bcs) != len(dims) or any(b not in _BC_KINDS for b in bcs):
            raise ValueError(f"boundary kinds must be per-axis from {_BC_KINDS}")

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def ncells(self):
        return int(np.prod(self.dims))

    @property
    def cell_volume(self):
        return self.dx ** self.ndim

    def cell_centers(self):
        """Per-axis center coordinate arrays, shaped like ``dims``."""
        axes = [(np.arange(n) + 0.5) * self.dx for n in self.dims]
        return np.meshgrid(*axes, indexing="ij")

    def neighbor_table(self, bcs=None):
        """(ncells, 2*ndim) int64 table; see module docstring for encoding."""
        bcs = self.bcs if bcs is None else tuple(bcs)
        idx = np.arange(self.ncells, dtype=np.int64).reshape(self.dims)
        cols = []
        for ax, bc in enumerate(bcs):
            for side in (0, 1):
                shift = 1 if side == 0 else -1  # roll by +1 fetches the low-side neighbor
                nbr = np.roll(idx, shift, axis=ax)
                if bc != PERIODIC:
                    edge = [slice(None)] * self.ndim
                    edge[ax] = 0 if side == 0 else -1
                    edge = tuple(edge)
                    if bc == ZERO_GRADIENT:
                        nbr[edge] = idx[edge]
                    else:  # DIRICHLET sentinel
                        nbr[edge] = -(2 * ax + side) - 1
                cols.append(nbr.reshape(-1))
        return np.stack(cols, axis=1)


class ScalarField:
    """One value per cell, with optional per-field boundary override."""

    def __init__(self, grid, values=None, bcs=None, dirichlet_values=None):
        self.grid = grid
        self.bcs = grid.bcs if bcs is None else tuple(bcs)
        if values is None:
            values = np.zeros(grid.ncells)
        values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        if values.size != grid.ncells:
            raise ValueError("value count must equal the cell count")
        self.values = values
        # one boundary value per face, meaningful only on Dirichlet faces
        self.dirichlet_values = np.zeros(2 * grid.ndim)
        if dirichlet_values is not None:
            for face, val in dict(dirichlet_values).items():
                self.dirichlet_values[face] = val
        self._nbr = None

    @property
    def nbr(self):
        if self._nbr is None:
            self._nbr = self.grid.neighbor_table(self.bcs)
        return self._nbr

    def view(self):
        """Values reshaped to the grid dims (shares memory)."""
        return self.values.reshape(self.grid.dims)

    def copy(self):
        f = ScalarField(self.grid, self.values.copy(), self.bcs)
        f.dirichlet_values = self.dirichlet_values.copy()
        return f


class SparsePhaseField:
    """Fixed-capacity per-cell list of (phase id, value) pairs.

    Slots ``[0:count)`` hold distinct phase ids sorted ascending; unused
    slots carry id -1 and value 0.  A phase absent from a cell's list has
    implicit value 0.  Per cell, stored values sum to 1.
    """

    def __init__(self, grid, nphases, capacity, bcs=None):
        if capacity < 1 or nphases < 1:
            raise ValueError("need nphases >= 1 and capacity >= 1")
        self.grid = grid
        self.nphases = int(nphases)
        self.capacity = int(capacity)
        self.bcs = grid.bcs if bcs is None else tuple(bcs)
        if any(b == DIRICHLET for b in self.bcs):
            raise ValueError("phase fields support periodic or zero-gradient axes only")
        V = grid.ncells
        self.ids = np.full((V, capacity), -1, dtype=np.int16)
        self.vals = np.zeros((V, capacity))
        self.count = np.zeros(V, dtype=np.int16)
        self._nbr = None

    @property
    def nbr(self):
        if self._nbr is None:
            self._nbr = self.grid.neighbor_table(self.bcs)
        return self._nbr

    @classmethod
    def from_dense(cls, grid, dense, capacity=None, bcs=None, prune=True):
        """Build from an (ncells, N) dense array; drops zero entries if ``prune``."""
        dense = np.asarray(dense, dtype=np.float64)
        V, N = dense.shape
        cap = N if capacity is None else capacity
        f = cls(grid, N, cap, bcs=bcs)
        for i in range(V):
            entries = [(g, dense[i, g]) for g in range(N)
                       if (not prune) or dense[i, g] != 0.0]
            if len(entries) > cap:
                raise CapacityError(f"cell {i} needs {len(entries)} slots, capacity {cap}")
            for a, (g, v) in enumerate(entries):
                f.ids[i, a] = g
                f.vals[i, a] = v
            f.count[i] = len(entries)
        return f

    def to_dense(self):
        """(ncells, nphases) array; absent phases expand to 0."""
        out = np.zeros((self.grid.ncells, self.nphases))
        for a in range(self.capacity):
            mask = self.ids[:, a] >= 0
            out[np.flatnonzero(mask), self.ids[mask, a]] = self.vals[mask, a]
        return out

    def phase_values(self, phase):
        """Dense (ncells,) view of one phase (copies)."""
        out = np.zeros(self.grid.ncells)
        for a in range(self.capacity):
            mask = self.ids[:, a] == phase
            out[mask] = self.vals[mask, a]
        return out

    def get(self, cell, phase):
        for a in range(self.count[cell]):
            if self.ids[cell, a] == phase:
                return self.vals[cell, a]
        return 0.0

    def set_cell(self, cell, phases, values):
        order = np.argsort(phases, kind="stable")
        phases = [phases[o] for o in order]
        values = [values[o] for o in order]
        if len(phases) > self.capacity:
            raise CapacityError(f"cell {cell} over capacity")
        if len(set(phases)) != len(phases):
            raise ValueError("phase ids must be distinct within a cell")
        self.ids[cell, :] = -1
        self.vals[cell, :] = 0.0
        for a, (g, v) in enumerate(zip(phases, values)):
            self.ids[cell, a] = g
            self.vals[cell, a] = v
        self.count[cell] = len(phases)

    def copy(self):
        f = SparsePhaseField(self.grid, self.nphases, self.capacity, self.bcs)
        f.ids[:] = self.ids
        f.vals[:] = self.vals
        f.count[:] = self.count
        return f


@dataclass
class ContourSegmentSet:
    """Line segments (M, 2, 2) in physical coordinates approximating a level set."""

    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))

    def total_length(self):
        if len(self.segments) == 0:
            return 0.0
        d = self.segments[:, 1, :] - self.segments[:, 0, :]
        return float(np.sum(np.hypot(d[:, 0], d[:, 1])))

    def points(self):
        return self.segments.reshape(-1, 2)


# ---------------------------------------------------------------------------
# stencil operations


def laplacian(fld, cell=None):
    """Second-order Laplacian; scalar at ``cell`` or the full array."""
    from . import kernels

    out = np.empty(fld.grid.ncells)
    kernels.scalar_laplacian(fld.values, fld.nbr, fld.dirichlet_values,
                             1.0 / fld.grid.dx ** 2, out)
    if cell is None:
        return out
    return float(out[cell])


def flux_divergence(face_coeffs, fld, cell=None):
    """Divergence of ``coeff * grad(u)`` as a sum of face-flux differences.

    ``face_coeffs`` is a per-axis list; the axis-``a`` array is shaped like
    the grid but with ``dims[a] + 1`` faces along that axis (boundary faces
    included; for a periodic axis the first and last face coincide and the
    caller supplies matching values).
    """
    g = fld.grid
    u = fld.view()
    dval = fld.dirichlet_values
    total = np.zeros(g.dims)
    inv_dx = 1.0 / g.dx
    for ax in range(g.ndim):
        coeff = np.asarray(face_coeffs[ax], dtype=np.float64)
        want = list(g.dims)
        want[ax] += 1
        if coeff.shape != tuple(want):
            raise ValueError(f"axis {ax} face array must have shape {tuple(want)}")
        lo = [slice(None)] * g.ndim
        hi = [slice(None)] * g.ndim
        lo[ax] = slice(0, g.dims[ax])
        hi[ax] = slice(1, g.dims[ax] + 1)
        ghost_shape = list(g.dims)
        ghost_shape[ax] = 1
        first = [slice(None)] * g.ndim
        first[ax] = slice(0, 1)
        last = [slice(None)] * g.ndim
        last[ax] = slice(g.dims[ax] - 1, g.dims[ax])
        bc = fld.bcs[ax]
        if bc == PERIODIC:
            u_lo_ghost = u[tuple(last)]
            u_hi_ghost = u[tuple(first)]
        elif bc == ZERO_GRADIENT:
            u_lo_ghost = u[tuple(first)]
            u_hi_ghost = u[tuple(last)]
        else:  # dirichlet ghost 2*u_b - u_i
            u_lo_ghost = 2.0 * dval[2 * ax] - u[tuple(first)]
            u_hi_ghost = 2.0 * dval[2 * ax + 1] - u[tuple(last)]
        ext = np.concatenate([u_lo_ghost, u, u_hi_ghost], axis=ax)
        n = g.dims[ax]
        grad = (np.take(ext, range(1, n + 2), axis=ax)
                - np.take(ext, range(0, n + 1), axis=ax)) * inv_dx
        flux = coeff * grad
        total += (flux[tuple(hi)] - flux[tuple(lo)]) * inv_dx
    out = total.reshape(-1)
    if cell is None:
        return out
    return float(out[cell])


def integrate(fld, phase=None):
    """Volume integral: sum of cell values times the cell volume."""
    if isinstance(fld, SparsePhaseField):
        if phase is None:
            raise ValueError("pick a phase to integrate a SparsePhaseField")
        from . import kernels

        return kernels.integrate_phase(fld.ids, fld.vals, fld.count,
                                       phase) * fld.grid.cell_volume
    return float(np.sum(fld.values)) * fld.grid.cell_volume


class NoCrossingError(RuntimeError):
    """No 0.5 crossing found in the probed window."""


def half_crossing(values, spacing, level=0.5):
    """Position of the ``level`` crossing along a sampled line.

    Fits a local cubic through the four samples bracketing the single sign
    change of ``value - level`` and bisects it to 1e-12.  Positions are
    relative to the first sample.
    """
    v = np.asarray(values, dtype=np.float64) - level
    if v.size < 2:
        raise NoCrossingError("need at least two samples")
    exact = np.flatnonzero(v == 0.0)
    if exact.size == 1 and not np.any(v[:-1] * v[1:] < 0.0):
        return float(exact[0]) * spacing
    sign_change = np.flatnonzero(v[:-1] * v[1:] < 0.0)
    if sign_change.size == 0:
        raise NoCrossingError("no sign change in the probed window")
    i = int(sign_change[0])
    lo = max(0, min(i - 1, v.size - 4))
    pts = np.arange(lo, min(lo + 4, v.size))
    xs = pts.astype(np.float64)
    coeffs = np.polynomial.polynomial.polyfit(xs, v[pts], deg=len(pts) - 1)

    def f(x):
        return np.polynomial.polynomial.polyval(x, coeffs)

    a, b = float(i), float(i + 1)
    fa = f(a)
    if fa == 0.0:
        return a * spacing
    for _ in range(200):
        m = 0.5 * (a + b)
        fm = f(m)
        if fm == 0.0 or (b - a) < 1e-12:
            a = b = m
            break
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b) * spacing


# marching squares: corner order (i,j), (i+1,j), (i+1,j+1), (i,j+1);
# edges 0: (0-1), 1: (1-2), 2: (2-3), 3: (3-0)
_MS_TABLE = {
    0: [], 15: [],
    1: [(3, 0)], 14: [(3, 0)],
    2: [(0, 1)], 13: [(0, 1)],
    4: [(1, 2)], 11: [(1, 2)],
    8: [(2, 3)], 7: [(2, 3)],
    3: [(3, 1)], 12: [(3, 1)],
    6: [(0, 2)], 9: [(0, 2)],
}


def marching_squares(values2d, level, dx=1.0, origin=0.5):
    """Standard 16-case marching squares with linear edge interpolation.

    ``values2d`` holds cell values; contour vertices live on edges between
    adjacent cell centers at ``(i + origin) * dx``.  The ambiguous saddle
    cases (5, 10) are split using the cell-center average.
    """
    v = np.asarray(values2d, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("marching squares needs a 2D field view")
    nx, ny = v.shape
    segs = []

    def corner_xy(i, j):
        return (i + origin) * dx, (j + origin) * dx

    def edge_point(ci, cj, di, dj, vi, vj):
        t = (level - vi) / (vj - vi)
        x0, y0 = corner_xy(ci, cj)
        x1, y1 = corner_xy(di, dj)
        return (x0 + t * (x1 - x0), y0 + t * (y1 - y0))

    for i in range(nx - 1):
        for j in range(ny - 1):
            corners = ((i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1))
            cv = (v[i, j], v[i + 1, j], v[i + 1, j + 1], v[i, j + 1])
            code = sum(1 << k for k in range(4) if cv[k] >= level)
            if code in (0, 15):
                continue
            edges = [((0, 1)), ((1, 2)), ((2, 3)), ((3, 0))]

            def pt(e):
                a, b = edges[e]
                return edge_point(*corners[a], *corners[b], cv[a], cv[b])

            if code in (5, 10):
                center = 0.25 * sum(cv)
                inside = center >= level
                # connect so that the center's side stays contiguous
                if (code == 5) == inside:
                    pairs = [(0, 1), (2, 3)]
                else:
                    pairs = [(3, 0), (1, 2)]
                for ea, eb in pairs:
                    segs.append((pt(ea), pt(eb)))
            else:
                ea, eb = _MS_TABLE[code]
                segs.append((pt(ea), pt(eb)))
    if not segs:
        return ContourSegmentSet()
    return ContourSegmentSet(np.asarray(segs, dtype=np.float64))


# ---------------------------------------------------------------------------
# field dumps

_MAGIC = b"PHASELAB-FIELDS v1\n"


def dump_fields(path, grid, fields, time=0.0, meta=None):
    """Write a lossless structured dump: JSON header + raw float64 payload."""
    names = list(fields.keys())
    header = {
        "dims": list(grid.dims),
        "dx": grid.dx,
        "bcs": list(grid.bcs),
        "time": time,
        "fields": names,
        "dtype": "<f8",
    }
    if meta:
        header["meta"] = meta
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        for name in names:
            arr = np.ascontiguousarray(fields[name], dtype="<f8").reshape(-1)
            if arr.size != grid.ncells:
                raise ValueError(f"field {name} does not match the grid")
            fh.write(arr.tobytes())


def load_fields(path):
    """Read a dump back; returns (grid, {name: values}, time, meta)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a phaselab field dump")
        header = json.loads(fh.readline().decode())
        grid = Grid(tuple(header["dims"]), header["dx"], tuple(header["bcs"]))
        fields = {}
        for name in header["fields"]:
            raw = fh.read(8 * grid.ncells)
            fields[name] = np.frombuffer(raw, dtype="<f8").copy()
    return grid, fields, header["time"], header.get("meta")
