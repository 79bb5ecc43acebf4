"""Numba kernels backing the stencil, RHS, projection and norm passes.

Conventions shared by every kernel (and mirrored by the dense reference
implementations in the test suite):

* neighbor tables list faces as (axis0-low, axis0-high, axis1-low, ...);
  loops run in that order so float accumulation is reproducible;
* per-cell phase slots are sorted by phase id and iterated in slot order;
* all reductions are serial, so reruns are bit-identical.

Stage vectors for the phase field are band-compact: ``band_pos[cell]`` maps
a cell to its row in a ``(nband, cap)`` array, or -1 where the cell is not
in the active band and its values live in the full accepted-state array.
"""

import numpy as np
from numba import njit

NJIT_OPTS = dict(cache=True, fastmath=False)


@njit(**NJIT_OPTS)
def scalar_laplacian(values, nbr, dval, inv_dx2, out):
    V = values.shape[0]
    nf = nbr.shape[1]
    for i in range(V):
        acc = 0.0
        vi = values[i]
        for f in range(nf):
            j = nbr[i, f]
            if j >= 0:
                acc += values[j] - vi
            else:
                ub = dval[-j - 1]
                acc += 2.0 * ub - 2.0 * vi  # ghost 2*ub - vi
        out[i] = acc * inv_dx2


@njit(inline="always")
def _slot_of(ids, count, cell, g):
    for a in range(count[cell]):
        if ids[cell, a] == g:
            return a
    return -1


@njit(inline="always")
def _phase_val(ids, count, full_vals, band_pos, band_vals, cell, g):
    a = _slot_of(ids, count, cell, g)
    if a < 0:
        return 0.0
    b = band_pos[cell]
    if b >= 0:
        return band_vals[b, a]
    return full_vals[cell, a]


@njit(**NJIT_OPTS)
def mu_field(ids, vals_full, count, band_pos, band_vals, c, k_arr, c0_arr, out):
    """Chemical potential from the parabolic partition, every cell."""
    V = c.shape[0]
    for i in range(V):
        b = band_pos[i]
        s1 = 0.0
        s2 = 0.0
        for a in range(count[i]):
            g = ids[i, a]
            h = band_vals[b, a] if b >= 0 else vals_full[i, a]
            s1 += h * c0_arr[g]
            s2 += h / k_arr[g]
        out[i] = (c[i] - s1) / s2


@njit(**NJIT_OPTS)
def build_neighbor_slots(band_idx, ids, count, nbr, band_pos, nslot, nb_cell,
                         nb_band):
    """Face-neighbor slot table for the band; refreshed on bookkeeping.

    nslot[r, a, f] is the slot of phase ids[i, a] inside neighbor f's list
    (-1 when absent there); nb_cell/nb_band locate that neighbor's values.
    """
    nf = nbr.shape[1]
    for r in range(band_idx.shape[0]):
        i = band_idx[r]
        for f in range(nf):
            j = nbr[i, f]
            nb_cell[r, f] = j
            nb_band[r, f] = band_pos[j]
            for a in range(count[i]):
                nslot[r, a, f] = _slot_of(ids, count, j, ids[i, a])


@njit(**NJIT_OPTS)
def phase_rhs(ids, vals_full, count, band_idx, band_vals, nslot, nb_cell,
              nb_band, inv_dx2, Amat, Bmat, Lmat, use_chem, mu, k_arr,
              c0_arr, out):
    """Pairwise multiphase rates for the active band; out is (nband, cap).

    Rates follow the energy-descent direction: each present phase moves
    against the difference of its functional derivative with its partners,
    averaged over the locally present count.  A phase is present when it
    holds value in the cell or any face neighbor.
    """
    cap = out.shape[1]
    nf = nb_cell.shape[1]
    lap = np.empty(cap)
    dfd = np.empty(cap)
    present = np.empty(cap, np.bool_)
    for r in range(band_idx.shape[0]):
        i = band_idx[r]
        cnt = count[i]
        nz = 0
        for a in range(cnt):
            vi = band_vals[r, a]
            acc = 0.0
            alive = vi > 0.0
            for f in range(nf):
                s = nslot[r, a, f]
                if s >= 0:
                    nb = nb_band[r, f]
                    if nb >= 0:
                        val = band_vals[nb, s]
                    else:
                        val = vals_full[nb_cell[r, f], s]
                    acc += val - vi
                    if val > 0.0:
                        alive = True
                else:
                    acc += -vi
            lap[a] = acc * inv_dx2
            present[a] = alive
            if alive:
                nz += 1
        if nz <= 1:
            for a in range(cap):
                out[r, a] = 0.0
            continue
        for a in range(cnt):
            if not present[a]:
                dfd[a] = 0.0
                continue
            ga = ids[i, a]
            acc = 0.0
            for b in range(cnt):
                if b == a or not present[b]:
                    continue
                gb = ids[i, b]
                acc += Amat[ga, gb] * lap[b] + Bmat[ga, gb] * band_vals[r, b]
            if use_chem:
                m = mu[i]
                acc += -m * m / (2.0 * k_arr[ga]) - m * c0_arr[ga]
            dfd[a] = acc
        inv_nz = 1.0 / nz
        for a in range(cap):
            if a >= cnt or not present[a]:
                out[r, a] = 0.0
                continue
            ga = ids[i, a]
            acc = 0.0
            for b in range(cnt):
                if b == a or not present[b]:
                    continue
                acc += Lmat[ga, ids[i, b]] * (dfd[a] - dfd[b])
            out[r, a] = -acc * inv_nz


@njit(**NJIT_OPTS)
def conc_rhs(ids, vals_full, count, band_pos, band_vals, c, mu, nbr_c, dval_c,
             k_arr, c0_arr, d_arr, inv_dx, out):
    """Flux-difference divergence of the weighted phase-diffusion fluxes.

    Face coefficients are arithmetic means of the adjacent cell values of
    ``D_g * h_g``; phase concentrations come from the shared chemical
    potential.  Face terms merge the two cells' slot lists in ascending
    phase-id order so that opposing face fluxes are exact negations.
    """
    V = c.shape[0]
    nf = nbr_c.shape[1]
    for i in range(V):
        mu_i = mu[i]
        bi = band_pos[i]
        div = 0.0
        for f in range(nf):
            j = nbr_c[i, f]
            if j == i:
                continue  # zero-gradient face
            flux = 0.0
            if j >= 0:
                mu_j = mu[j]
                bj = band_pos[j]
                ai = 0
                aj = 0
                ci_n = count[i]
                cj_n = count[j]
                while ai < ci_n or aj < cj_n:
                    gi = ids[i, ai] if ai < ci_n else np.int16(32767)
                    gj = ids[j, aj] if aj < cj_n else np.int16(32767)
                    if gi == gj:
                        g = gi
                        hi = band_vals[bi, ai] if bi >= 0 else vals_full[i, ai]
                        hj = band_vals[bj, aj] if bj >= 0 else vals_full[j, aj]
                        ai += 1
                        aj += 1
                    elif gi < gj:
                        g = gi
                        hi = band_vals[bi, ai] if bi >= 0 else vals_full[i, ai]
                        hj = 0.0
                        ai += 1
                    else:
                        g = gj
                        hi = 0.0
                        hj = band_vals[bj, aj] if bj >= 0 else vals_full[j, aj]
                        aj += 1
                    hbar = 0.5 * (hi + hj)
                    if hbar != 0.0:
                        dca = (mu_j - mu_i) / k_arr[g]
                        flux += d_arr[g] * hbar * dca * inv_dx
            else:
                # Dirichlet ghost: mirrored phases, reflected concentration
                cb = dval_c[-j - 1]
                cg = 2.0 * cb - c[i]
                s1 = 0.0
                s2 = 0.0
                for a in range(count[i]):
                    g = ids[i, a]
                    h = band_vals[bi, a] if bi >= 0 else vals_full[i, a]
                    s1 += h * c0_arr[g]
                    s2 += h / k_arr[g]
                mu_g = (cg - s1) / s2
                for a in range(count[i]):
                    g = ids[i, a]
                    h = band_vals[bi, a] if bi >= 0 else vals_full[i, a]
                    if h != 0.0:
                        flux += d_arr[g] * h * ((mu_g - mu_i) / k_arr[g]) * inv_dx
            div += flux
        out[i] = div * inv_dx


@njit(inline="always")
def _project_row(vals, r, cnt):
    """Project one slot row onto the simplex; returns False when degenerate.

    Exact zeros stay exact and the returned row re-projects to itself
    bit-for-bit (the slot-order sum is made to equal 1.0 exactly).
    """
    neg = False
    big = False
    s = 0.0
    for a in range(cnt):
        v = vals[r, a]
        if v < 0.0:
            neg = True
        if v >= 1.0:
            big = True
        s += v
    if not neg and not big and s == 1.0:
        return True
    if neg:
        for a in range(cnt):
            if vals[r, a] < 0.0:
                vals[r, a] = 0.0
    if big:
        for a in range(cnt):
            if vals[r, a] >= 1.0:
                for b in range(cnt):
                    vals[r, b] = 0.0
                vals[r, a] = 1.0
                return True
    s = 0.0
    for a in range(cnt):
        s += vals[r, a]
    if s <= 0.0:
        return False
    for a in range(cnt):
        vals[r, a] = vals[r, a] / s
    # pin the slot-order sum to exactly 1.0 on the last nonzero slot
    m = -1
    for a in range(cnt):
        if vals[r, a] > 0.0:
            m = a
    t = 0.0
    for a in range(m):
        t += vals[r, a]
    rem = 1.0 - t
    if rem >= 0.0:
        vals[r, m] = rem
    else:
        vals[r, m] = 0.0
    for _ in range(32):
        s2 = 0.0
        for a in range(cnt):
            s2 += vals[r, a]
        if s2 == 1.0:
            break
        mx = 0
        for a in range(1, cnt):
            if vals[r, a] > vals[r, mx]:
                mx = a
        vals[r, mx] += 1.0 - s2
    return True


@njit(**NJIT_OPTS)
def project_rows(vals, counts):
    """Project every row; returns the index of a degenerate row or -1."""
    for r in range(vals.shape[0]):
        if not _project_row(vals, r, counts[r]):
            return r
    return -1


@njit(**NJIT_OPTS)
def combine_project(band_count, a0, s0, a1, s1, a2, s2, b1, f1, b0, f0,
                    out, viol, record):
    """out = a0*s0 + a1*s1 + a2*s2 + b1*f1 + b0*f0, then per-row projection.

    With ``record`` set, rows whose raw combination leaves [0, 1] anywhere
    are flagged in ``viol`` before being projected.  Returns the index of a
    degenerate row or -1.
    """
    B, cap = out.shape
    for r in range(B):
        cnt = band_count[r]
        bad = False
        for a in range(cap):
            v = (a0 * s0[r, a] + a1 * s1[r, a] + a2 * s2[r, a]
                 + b1 * f1[r, a] + b0 * f0[r, a])
            out[r, a] = v
            if a < cnt and (v < 0.0 or v > 1.0):
                bad = True
        if record:
            viol[r] = bad
        if not _project_row(out, r, cnt):
            return r
    return -1


@njit(**NJIT_OPTS)
def fixup_rhs0(band_count, viol, u0, u1, inv_mu1dt, f0):
    """Replace f0 by the projection-consistent difference quotient.

    Applied per cell, only where the first stage left the simplex:
    f0 = (S(u1) - u0) / (mu1 * dt) reproduces the projected stage exactly.
    """
    B = u0.shape[0]
    for r in range(B):
        if not viol[r]:
            continue
        for a in range(band_count[r]):
            f0[r, a] = (u1[r, a] - u0[r, a]) * inv_mu1dt


@njit(**NJIT_OPTS)
def scatter_accept(vals_full, band_idx, new_band, count, events):
    """Write accepted band rows back; collect cells where a slot crossed 0.

    Returns the number of event cells recorded (support grew or died there,
    so the stored lists around them need a rebuild).
    """
    n_ev = 0
    for r in range(band_idx.shape[0]):
        i = band_idx[r]
        changed = False
        for a in range(count[i]):
            old = vals_full[i, a]
            new = new_band[r, a]
            if (old == 0.0) != (new == 0.0):
                changed = True
            vals_full[i, a] = new
        if changed and n_ev < events.shape[0]:
            events[n_ev] = i
            n_ev += 1
    return n_ev


@njit(**NJIT_OPTS)
def rebuild_cells(cells, ids, vals, count, nbr, scratch_ids, scratch_vals):
    """Recompute the stored set of each listed cell.

    Stored set = phases with value > 0 in the cell or any face neighbor;
    kept entries keep their value, fresh entries start at 0.  Returns the
    index of an over-capacity cell or -1.
    """
    cap = ids.shape[1]
    nf = nbr.shape[1]
    for idx in range(cells.shape[0]):
        i = cells[idx]
        n_new = 0
        # phases alive in the cell itself (slots are sorted by id)
        for a in range(count[i]):
            if vals[i, a] > 0.0:
                scratch_ids[n_new] = ids[i, a]
                scratch_vals[n_new] = vals[i, a]
                n_new += 1
        # merge phases alive in any neighbor
        for f in range(nf):
            j = nbr[i, f]
            for a in range(count[j]):
                if vals[j, a] <= 0.0:
                    continue
                g = ids[j, a]
                pos = n_new
                known = False
                for b in range(n_new):
                    if scratch_ids[b] == g:
                        known = True
                        break
                    if scratch_ids[b] > g:
                        pos = b
                        break
                if known:
                    continue
                if n_new >= cap:
                    return i
                for b in range(n_new, pos, -1):
                    scratch_ids[b] = scratch_ids[b - 1]
                    scratch_vals[b] = scratch_vals[b - 1]
                old = _slot_of(ids, count, i, g)
                scratch_ids[pos] = g
                scratch_vals[pos] = vals[i, old] if old >= 0 else 0.0
                n_new += 1
        if n_new == 0:
            # keep the largest stored entry; an empty cell cannot happen
            # for projected states but guards against misuse
            scratch_ids[0] = ids[i, 0]
            scratch_vals[0] = vals[i, 0]
            n_new = 1
        for a in range(cap):
            if a < n_new:
                ids[i, a] = scratch_ids[a]
                vals[i, a] = scratch_vals[a]
            else:
                ids[i, a] = -1
                vals[i, a] = 0.0
        count[i] = n_new
    return -1


@njit(**NJIT_OPTS)
def sommeijer_phase(band_count, u0, u1, f0, f1, dt, est):
    """Per-DoF error estimate with the out-of-[0,1] trial filter."""
    B, cap = est.shape
    c12 = 12.0 / 15.0
    c6 = 6.0 / 15.0
    half = 0.5 * dt
    for r in range(B):
        cnt = band_count[r]
        for a in range(cap):
            if a >= cnt:
                est[r, a] = 0.0
                continue
            trial = u0[r, a] + half * (f0[r, a] + f1[r, a])
            if trial < 0.0 or trial > 1.0:
                est[r, a] = 0.0
            else:
                est[r, a] = (c12 * (u1[r, a] - u0[r, a])
                             - c6 * dt * (f0[r, a] + f1[r, a]))


@njit(**NJIT_OPTS)
def weighted_norm_accumulate(band_count, est, u0, u1, rel, absol):
    """Band part of the weighted error norm.

    Returns (sum of squared weighted errors, nontrivial-entry DoF count,
    number of band cells with at least one nontrivial entry).
    """
    B = est.shape[0]
    ssq = 0.0
    ndof = 0
    ncells = 0
    for r in range(B):
        nt = 0
        for a in range(band_count[r]):
            e = est[r, a]
            if e == 0.0:
                continue
            um = u0[r, a] if u0[r, a] > u1[r, a] else u1[r, a]
            w = e / (rel * um + absol)
            ssq += w * w
            nt += 1
        if nt > 0:
            ndof += nt
            ncells += 1
    return ssq, ndof, ncells


@njit(**NJIT_OPTS)
def weighted_norm_dense(est, u0, u1, rel, absol):
    """Concentration part: every DoF counts."""
    ssq = 0.0
    for i in range(est.shape[0]):
        um = u0[i] if u0[i] > u1[i] else u1[i]
        w = est[i] / (rel * um + absol)
        ssq += w * w
    return ssq


@njit(**NJIT_OPTS)
def integrate_phase(ids, vals, count, g):
    acc = 0.0
    for i in range(ids.shape[0]):
        for a in range(count[i]):
            if ids[i, a] == g:
                acc += vals[i, a]
                break
    return acc


@njit(**NJIT_OPTS)
def phase_values_at(ids, vals, count, cells, g, out):
    for k in range(cells.shape[0]):
        i = cells[k]
        out[k] = 0.0
        for a in range(count[i]):
            if ids[i, a] == g:
                out[k] = vals[i, a]
                break


@njit(**NJIT_OPTS)
def energy_band(band_idx, ids, vals, count, nbr, Amat, Bmat, inv_2dx):
    """Gradient and obstacle contributions, summed over the band."""
    nf = nbr.shape[1]
    ndim = nf // 2
    acc = 0.0
    cap = ids.shape[1]
    grads = np.empty((cap, 3))
    for r in range(band_idx.shape[0]):
        i = band_idx[r]
        cnt = count[i]
        for a in range(cnt):
            g = ids[i, a]
            for ax in range(ndim):
                vm = 0.0
                vp = 0.0
                jm = nbr[i, 2 * ax]
                jp = nbr[i, 2 * ax + 1]
                sm = _slot_of(ids, count, jm, g)
                if sm >= 0:
                    vm = vals[jm, sm]
                sp = _slot_of(ids, count, jp, g)
                if sp >= 0:
                    vp = vals[jp, sp]
                grads[a, ax] = (vp - vm) * inv_2dx
        cell = 0.0
        for a in range(cnt):
            ga = ids[i, a]
            for b in range(a):
                gb = ids[i, b]
                dot = 0.0
                for ax in range(ndim):
                    dot += grads[a, ax] * grads[b, ax]
                cell += -Amat[ga, gb] * dot
                cell += Bmat[ga, gb] * vals[i, a] * vals[i, b]
        acc += cell
    return acc


@njit(**NJIT_OPTS)
def energy_chemical(ids, vals, count, mu, k_arr):
    """Sum of h_g * g_g(c_g) = sum of phi_g * mu^2 / (2 k_g)."""
    acc = 0.0
    for i in range(ids.shape[0]):
        m = mu[i]
        cell = 0.0
        for a in range(count[i]):
            cell += vals[i, a] * m * m / (2.0 * k_arr[ids[i, a]])
        acc += cell
    return acc


@njit(**NJIT_OPTS)
def max_conc_slope(ids, vals, count, k_arr):
    """max over cells of d c_g / d c = (1/k_g) / sum_h (h/k)."""
    best = 0.0
    for i in range(ids.shape[0]):
        s2 = 0.0
        kmin = 1e300
        for a in range(count[i]):
            g = ids[i, a]
            s2 += vals[i, a] / k_arr[g]
            if k_arr[g] < kmin:
                kmin = k_arr[g]
        val = (1.0 / kmin) / s2
        if val > best:
            best = val
    return best
