"""Numba kernels shared by the pipeline stages.

Complex data lives in float64 buffers with an explicit real/imag part axis.
Per-atom descriptor arrays (Ulisttot, Ylist) are addressed through five
integers ``(tile, s_tile, s_lane, s_idx, s_part)``::

    offset(atom, idx, part) = (atom // tile) * s_tile + (atom % tile) * s_lane
                              + idx * s_idx + part * s_part

which covers row-major, atom-fastest, split real/imag and AoSoA layouts with
one code path.  Per-element arithmetic never depends on the layout, so all
layouts give bitwise-identical values.

Level blocks are row-major ``[mb][ma]``; ``blk[j]`` is the offset of level
``j`` in a full block list and ``hblk[j]`` in a half block list.
"""

import math
import os

import numpy as np
from numba import config, njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # tbb is probed first by default and warns on older installs
    config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

PI = math.pi


# ---------------------------------------------------------------------------
# per-pair primitives
# ---------------------------------------------------------------------------


@njit(cache=True)
def switching(r, rcut, rmin0):
    if r <= rmin0:
        return 1.0, 0.0
    scale = PI / (rcut - rmin0)
    arg = (r - rmin0) * scale
    return 0.5 * (math.cos(arg) + 1.0), -0.5 * scale * math.sin(arg)


@njit(cache=True)
def cayley_klein(x, y, z, rcut, rmin0, rfac0, da, db):
    """Return ``(r, a_r, a_i, b_r, b_i)``; fills ``da``/``db`` with shape (3, 2)."""
    r = math.sqrt(x * x + y * y + z * z)
    rinv = 1.0 / r
    ux = x * rinv
    uy = y * rinv
    uz = z * rinv
    rscale0 = rfac0 * PI / (rcut - rmin0)
    theta0 = (r - rmin0) * rscale0
    cs = math.cos(theta0)
    sn = math.sin(theta0)
    # a = r0inv*(z0 - i z), b = r0inv*(y - i x) with r0inv = sin(theta0)/r
    snr = sn * rinv
    a_r = cs
    a_i = -z * snr
    b_r = y * snr
    b_i = -x * snr
    # d(sin(theta0)/r)/dr
    dsnr = (cs * rscale0 - snr) * rinv
    dsnr_x = dsnr * ux
    dsnr_y = dsnr * uy
    dsnr_z = dsnr * uz
    dcs = -sn * rscale0
    da[0, 0] = dcs * ux
    da[1, 0] = dcs * uy
    da[2, 0] = dcs * uz
    da[0, 1] = -z * dsnr_x
    da[1, 1] = -z * dsnr_y
    da[2, 1] = -z * dsnr_z - snr
    db[0, 0] = y * dsnr_x
    db[1, 0] = y * dsnr_y + snr
    db[2, 0] = y * dsnr_z
    db[0, 1] = -x * dsnr_x - snr
    db[1, 1] = -x * dsnr_y
    db[2, 1] = -x * dsnr_z
    return r, a_r, a_i, b_r, b_i


@njit(cache=True)
def rootpq_table(twojmax):
    n = twojmax + 2
    t = np.zeros((n, n))
    for p in range(1, n):
        for q in range(1, n):
            t[p, q] = math.sqrt(p / q)
    return t


@njit(cache=True)
def u_recursion(a_r, a_i, b_r, b_i, twojmax, blk, rootpq, ur, ui):
    """Fill full blocks of the Wigner matrices for one (a, b)."""
    ur[0] = 1.0
    ui[0] = 0.0
    for j in range(1, twojmax + 1):
        jju = blk[j]
        jjup = blk[j - 1]
        for mb in range(j // 2 + 1):
            for ma in range(j + 1):
                vr = 0.0
                vi = 0.0
                if ma > 0:
                    p = jjup + j * mb + ma - 1
                    rq = rootpq[ma, j - mb]
                    # -rq * conj(b) * u_prev[mb][ma-1]
                    vr = -rq * (b_r * ur[p] + b_i * ui[p])
                    vi = -rq * (b_r * ui[p] - b_i * ur[p])
                if ma < j:
                    p = jjup + j * mb + ma
                    rq = rootpq[j - ma, j - mb]
                    # +rq * conj(a) * u_prev[mb][ma]
                    vr += rq * (a_r * ur[p] + a_i * ui[p])
                    vi += rq * (a_r * ui[p] - a_i * ur[p])
                q = jju + (j + 1) * mb + ma
                ur[q] = vr
                ui[q] = vi
        _mirror(jju, j, ur, ui)


@njit(cache=True)
def _mirror(jju, j, ur, ui):
    # u[j-mb][j-ma] = (-1)^(ma-mb) conj(u[mb][ma])
    n = j + 1
    last = jju + n * n - 1
    mbpar = 1
    for mb in range(j // 2 + 1):
        mapar = mbpar
        for ma in range(n):
            src = jju + n * mb + ma
            dst = last - n * mb - ma
            if mapar == 1:
                ur[dst] = ur[src]
                ui[dst] = -ui[src]
            else:
                ur[dst] = -ur[src]
                ui[dst] = ui[src]
            mapar = -mapar
        mbpar = -mbpar


@njit(cache=True)
def du_recursion_dir(k, a_r, a_i, b_r, b_i, da, db, twojmax, blk, rootpq, ur, ui, dur, dui):
    """Derivative of the raw Wigner blocks along Cartesian direction ``k``."""
    dar = da[k, 0]
    dai = da[k, 1]
    dbr = db[k, 0]
    dbi = db[k, 1]
    dur[0] = 0.0
    dui[0] = 0.0
    for j in range(1, twojmax + 1):
        jju = blk[j]
        jjup = blk[j - 1]
        for mb in range(j // 2 + 1):
            for ma in range(j + 1):
                vr = 0.0
                vi = 0.0
                if ma > 0:
                    p = jjup + j * mb + ma - 1
                    rq = rootpq[ma, j - mb]
                    vr = -rq * (
                        (dbr * ur[p] + dbi * ui[p]) + (b_r * dur[p] + b_i * dui[p])
                    )
                    vi = -rq * (
                        (dbr * ui[p] - dbi * ur[p]) + (b_r * dui[p] - b_i * dur[p])
                    )
                if ma < j:
                    p = jjup + j * mb + ma
                    rq = rootpq[j - ma, j - mb]
                    vr += rq * (
                        (dar * ur[p] + dai * ui[p]) + (a_r * dur[p] + a_i * dui[p])
                    )
                    vi += rq * (
                        (dar * ui[p] - dai * ur[p]) + (a_r * dui[p] - a_i * dur[p])
                    )
                q = jju + (j + 1) * mb + ma
                dur[q] = vr
                dui[q] = vi
        _mirror(jju, j, dur, dui)


@njit(cache=True)
def weighted_du(k, r, x, y, z, w, fc, dfc, n, ur, ui, dur, dui, outr, outi):
    """``d(w*fc*u)/dx_k`` from the raw ``u`` and ``du``; first ``n`` elements."""
    if k == 0:
        uk = x / r
    elif k == 1:
        uk = y / r
    else:
        uk = z / r
    s = w * fc
    ds = w * dfc * uk
    for i in range(n):
        outr[i] = ds * ur[i] + s * dur[i]
        outi[i] = ds * ui[i] + s * dui[i]


# ---------------------------------------------------------------------------
# Clebsch-Gordan product of two level blocks (one output element)
# ---------------------------------------------------------------------------


@njit(cache=True)
def cg_element(j1, j2, j, ma, mb, cg, cgo, u, o1, o2, s_idx, s_part):
    """One element ``Z^j_{j1 j2}[mb][ma]`` of the Clebsch-Gordan product.

    ``o1``/``o2`` are the physical offsets of the level-``j1`` and level-``j2``
    blocks of one atom in ``u``; elements step by ``s_idx`` and the imaginary
    part sits ``s_part`` after the real part.
    """
    jsum = (j1 + j2 - j) // 2
    sa = ma + jsum
    sb = mb + jsum
    ma1min = max(0, sa - j2)
    ma1max = min(j1, sa)
    mb1min = max(0, sb - j2)
    mb1max = min(j1, sb)
    zr = 0.0
    zi = 0.0
    for mb1 in range(mb1min, mb1max + 1):
        mb2 = sb - mb1
        sr = 0.0
        si = 0.0
        row1 = o1 + ((j1 + 1) * mb1) * s_idx
        row2 = o2 + ((j2 + 1) * mb2) * s_idx
        for ma1 in range(ma1min, ma1max + 1):
            ma2 = sa - ma1
            c = cg[cgo + ma1 * (j2 + 1) + ma2]
            p1 = row1 + ma1 * s_idx
            p2 = row2 + ma2 * s_idx
            x1r = u[p1]
            x1i = u[p1 + s_part]
            x2r = u[p2]
            x2i = u[p2 + s_part]
            sr += c * (x1r * x2r - x1i * x2i)
            si += c * (x1r * x2i + x1i * x2r)
        cb = cg[cgo + mb1 * (j2 + 1) + mb2]
        zr += cb * sr
        zi += cb * si
    return zr, zi


# ---------------------------------------------------------------------------
# layout helpers
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def atom_base(atom, lay):
    t = lay[0]
    return (atom // t) * lay[1] + (atom % t) * lay[2]


@njit(cache=True, inline="always")
def pair_of(it, natoms, maxnb, order):
    # order 0: neighbor fastest, 1: atom fastest
    if order == 0:
        return it // maxnb, it % maxnb
    return it % natoms, it // natoms


@njit(cache=True, inline="always")
def pair_slot(atom, nb, natoms, maxnb, order):
    if order == 0:
        return atom * maxnb + nb
    return nb * natoms + atom


@njit(cache=True)
def n_stored(twojmax, half):
    n = 0
    for j in range(twojmax + 1):
        n += (j + 1) * (j // 2 + 1) if half else (j + 1) * (j + 1)
    return n


@njit(cache=True)
def init_self(tot, base, lay, twojmax, blk, hblk, half, wself, selfflag):
    """Zero one atom's totals, then put ``wself`` on every level diagonal."""
    s_idx = lay[3]
    s_part = lay[4]
    for j in range(twojmax + 1):
        nrow = j // 2 + 1 if half else j + 1
        o = hblk[j] if half else blk[j]
        for mb in range(nrow):
            for ma in range(j + 1):
                p = base + (o + mb * (j + 1) + ma) * s_idx
                tot[p] = wself if (selfflag and ma == mb) else 0.0
                tot[p + s_part] = 0.0


# ---------------------------------------------------------------------------
# compute_U variants
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def u_tot_atoms(disp, nnb, wts, rcut, rmin0, rfac0, wself, selfflag, twojmax, blk,
                hblk, rootpq, half, tot, lay, store, ulist, order):
    """One worker per atom; neighbors summed serially in list order."""
    natoms, maxnb = nnb.shape[0], disp.shape[1]
    nu = blk[twojmax + 1]
    s_idx = lay[3]
    s_part = lay[4]
    for i in prange(natoms):
        ur = np.empty(nu)
        ui = np.empty(nu)
        da = np.empty((3, 2))
        db = np.empty((3, 2))
        base = atom_base(i, lay)
        init_self(tot, base, lay, twojmax, blk, hblk, half, wself, selfflag)
        for nb in range(nnb[i]):
            x, y, z = disp[i, nb, 0], disp[i, nb, 1], disp[i, nb, 2]
            r, ar, ai, br, bi = cayley_klein(x, y, z, rcut, rmin0, rfac0, da, db)
            fc, dfc = switching(r, rcut, rmin0)
            sfac = wts[i, nb] * fc
            u_recursion(ar, ai, br, bi, twojmax, blk, rootpq, ur, ui)
            slot = pair_slot(i, nb, natoms, maxnb, order)
            for j in range(twojmax + 1):
                nel = (j + 1) * (j // 2 + 1) if half else (j + 1) * (j + 1)
                o = hblk[j] if half else blk[j]
                for e in range(nel):
                    vr = sfac * ur[blk[j] + e]
                    vi = sfac * ui[blk[j] + e]
                    if store:
                        ulist[slot, o + e, 0] = vr
                        ulist[slot, o + e, 1] = vi
                    p = base + (o + e) * s_idx
                    tot[p] += vr
                    tot[p + s_part] += vi


@njit(cache=True, parallel=True)
def u_pairs(disp, nnb, wts, rcut, rmin0, rfac0, twojmax, blk, hblk, rootpq, half,
            ulist, order):
    """Collapsed atom x neighbor loop writing ``w*fc*u`` per pair."""
    natoms, maxnb = nnb.shape[0], disp.shape[1]
    nu = blk[twojmax + 1]
    for it in prange(natoms * maxnb):
        i, nb = pair_of(it, natoms, maxnb, order)
        if nb >= nnb[i]:
            continue
        ur = np.empty(nu)
        ui = np.empty(nu)
        da = np.empty((3, 2))
        db = np.empty((3, 2))
        x, y, z = disp[i, nb, 0], disp[i, nb, 1], disp[i, nb, 2]
        r, ar, ai, br, bi = cayley_klein(x, y, z, rcut, rmin0, rfac0, da, db)
        fc, dfc = switching(r, rcut, rmin0)
        sfac = wts[i, nb] * fc
        u_recursion(ar, ai, br, bi, twojmax, blk, rootpq, ur, ui)
        for j in range(twojmax + 1):
            nel = (j + 1) * (j // 2 + 1) if half else (j + 1) * (j + 1)
            o = hblk[j] if half else blk[j]
            for e in range(nel):
                ulist[it, o + e, 0] = sfac * ur[blk[j] + e]
                ulist[it, o + e, 1] = sfac * ui[blk[j] + e]


@njit(cache=True, parallel=True)
def tot_from_ulist_serial(ulist, nnb, maxnb, wself, selfflag, twojmax, blk, hblk, half,
                          tot, lay, order):
    natoms = nnb.shape[0]
    n = ulist.shape[1]
    s_idx = lay[3]
    s_part = lay[4]
    for i in prange(natoms):
        base = atom_base(i, lay)
        init_self(tot, base, lay, twojmax, blk, hblk, half, wself, selfflag)
        for nb in range(nnb[i]):
            slot = pair_slot(i, nb, natoms, maxnb, order)
            for e in range(n):
                p = base + e * s_idx
                tot[p] += ulist[slot, e, 0]
                tot[p + s_part] += ulist[slot, e, 1]


@njit(cache=True, parallel=True)
def tot_from_ulist_private(ulist, nnb, maxnb, nworkers, partial, order):
    """Each logical worker sums a contiguous chunk of pairs into its own slab."""
    natoms = nnb.shape[0]
    n = ulist.shape[1]
    npairs = natoms * maxnb
    chunk = (npairs + nworkers - 1) // nworkers
    for w in prange(nworkers):
        partial[w, :, :, :] = 0.0
        lo = w * chunk
        hi = min(npairs, lo + chunk)
        for it in range(lo, hi):
            i, nb = pair_of(it, natoms, maxnb, order)
            if nb >= nnb[i]:
                continue
            for e in range(n):
                partial[w, i, e, 0] += ulist[it, e, 0]
                partial[w, i, e, 1] += ulist[it, e, 1]


@njit(cache=True, parallel=True)
def reduce_partials(partial, wself, selfflag, twojmax, blk, hblk, half, tot, lay):
    nworkers, natoms, n = partial.shape[0], partial.shape[1], partial.shape[2]
    s_idx = lay[3]
    s_part = lay[4]
    for i in prange(natoms):
        base = atom_base(i, lay)
        init_self(tot, base, lay, twojmax, blk, hblk, half, wself, selfflag)
        for w in range(nworkers):
            for e in range(n):
                p = base + e * s_idx
                tot[p] += partial[w, i, e, 0]
                tot[p + s_part] += partial[w, i, e, 1]


@njit(cache=True, nogil=True)
def add_pair_rmw(ulist, slot, atom, tot, lay):
    """Read-modify-write of one pair into its atom's totals (caller holds a lock)."""
    base = atom_base(atom, lay)
    s_idx = lay[3]
    s_part = lay[4]
    for e in range(ulist.shape[1]):
        p = base + e * s_idx
        tot[p] += ulist[slot, e, 0]
        tot[p + s_part] += ulist[slot, e, 1]


@njit(cache=True, nogil=True)
def init_self_all(natoms, tot, lay, twojmax, blk, hblk, half, wself, selfflag):
    for i in range(natoms):
        init_self(tot, atom_base(i, lay), lay, twojmax, blk, hblk, half, wself, selfflag)


# ---------------------------------------------------------------------------
# relayout
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def relayout(src, lay_s, half_s, dst, lay_d, half_d, natoms, twojmax, blk, hblk):
    """Copy per-atom blocks between layouts; half -> full expands by symmetry.

    full -> half keeps the stored prefix rows.
    """
    ss, sp = lay_s[3], lay_s[4]
    ds, dp = lay_d[3], lay_d[4]
    for i in prange(natoms):
        bs = atom_base(i, lay_s)
        bd = atom_base(i, lay_d)
        for j in range(twojmax + 1):
            n = j + 1
            os_ = hblk[j] if half_s else blk[j]
            od = hblk[j] if half_d else blk[j]
            nrow_s = j // 2 + 1 if half_s else n
            nrow_d = j // 2 + 1 if half_d else n
            for mb in range(nrow_d):
                for ma in range(n):
                    q = bd + (od + mb * n + ma) * ds
                    if mb < nrow_s:
                        p = bs + (os_ + mb * n + ma) * ss
                        dst[q] = src[p]
                        dst[q + dp] = src[p + sp]
                    else:
                        p = bs + (os_ + (j - mb) * n + (j - ma)) * ss
                        if (ma - mb) % 2 == 0:
                            dst[q] = src[p]
                            dst[q + dp] = -src[p + sp]
                        else:
                            dst[q] = -src[p]
                            dst[q + dp] = src[p + sp]


# ---------------------------------------------------------------------------
# Z and B (baseline)
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def z_full(tot, lay, cg, ctrip, cgo, zo, blk, zlist):
    """Full Z blocks for every coupling triple; ``zlist`` is (natoms, nz, 2)."""
    natoms = zlist.shape[0]
    s_idx, s_part = lay[3], lay[4]
    for i in prange(natoms):
        base = atom_base(i, lay)
        for t in range(ctrip.shape[0]):
            j1, j2, j = ctrip[t, 0], ctrip[t, 1], ctrip[t, 2]
            o1 = base + blk[j1] * s_idx
            o2 = base + blk[j2] * s_idx
            for mb in range(j + 1):
                for ma in range(j + 1):
                    zr, zi = cg_element(j1, j2, j, ma, mb, cg, cgo[t], tot, o1, o2, s_idx, s_part)
                    q = zo[t] + mb * (j + 1) + ma
                    zlist[i, q, 0] = zr
                    zlist[i, q, 1] = zi


@njit(cache=True, parallel=True)
def b_from_z(zlist, tot, lay, btrip, bz, blk, blist, resid):
    """``B = Z : conj(U)`` over full blocks; ``resid`` gets |imag| per atom."""
    natoms = zlist.shape[0]
    s_idx, s_part = lay[3], lay[4]
    for i in prange(natoms):
        base = atom_base(i, lay)
        worst = 0.0
        for l in range(btrip.shape[0]):
            j = btrip[l, 2]
            zb = bz[l]
            sr = 0.0
            si = 0.0
            for e in range((j + 1) * (j + 1)):
                p = base + (blk[j] + e) * s_idx
                ur = tot[p]
                ui = tot[p + s_part]
                zr = zlist[i, zb + e, 0]
                zi = zlist[i, zb + e, 1]
                sr += zr * ur + zi * ui
                si += zi * ur - zr * ui
            blist[i, l] = sr
            if abs(si) > worst:
                worst = abs(si)
        resid[i] = worst


@njit(cache=True, inline="always")
def re_dot_full(zlist, i, zoff, dur, dui, uoff, nel):
    s = 0.0
    for e in range(nel):
        s += zlist[i, zoff + e, 0] * dur[uoff + e] + zlist[i, zoff + e, 1] * dui[uoff + e]
    return s


@njit(cache=True)
def db_pair(zlist, i, btrip, dbt, zo, blk, dur, dui, out):
    """dB_l/dr_k for one pair from full weighted dU (3, nu); ``out`` is (nb, 3)."""
    for l in range(btrip.shape[0]):
        j1, j2, j = btrip[l, 0], btrip[l, 1], btrip[l, 2]
        f1 = (j + 1) / (j1 + 1.0)
        f2 = (j + 1) / (j2 + 1.0)
        for k in range(3):
            s = re_dot_full(zlist, i, zo[dbt[l, 0]], dur[k], dui[k], blk[j], (j + 1) * (j + 1))
            s1 = re_dot_full(zlist, i, zo[dbt[l, 1]], dur[k], dui[k], blk[j1], (j1 + 1) * (j1 + 1))
            s2 = re_dot_full(zlist, i, zo[dbt[l, 2]], dur[k], dui[k], blk[j2], (j2 + 1) * (j2 + 1))
            out[l, k] = s + f1 * s1 + f2 * s2


@njit(cache=True)
def pair_du_full(x, y, z, w, rcut, rmin0, rfac0, twojmax, blk, rootpq, ur, ui, tr, ti,
                 dur, dui, da, db):
    """Weighted dU for all three directions into ``dur``/``dui`` (3, nu)."""
    nu = blk[twojmax + 1]
    r, ar, ai, br, bi = cayley_klein(x, y, z, rcut, rmin0, rfac0, da, db)
    fc, dfc = switching(r, rcut, rmin0)
    u_recursion(ar, ai, br, bi, twojmax, blk, rootpq, ur, ui)
    for k in range(3):
        du_recursion_dir(k, ar, ai, br, bi, da, db, twojmax, blk, rootpq, ur, ui, tr, ti)
        weighted_du(k, r, x, y, z, w, fc, dfc, nu, ur, ui, tr, ti, dur[k], dui[k])


@njit(cache=True, parallel=True)
def baseline_monolithic(disp, nnb, wts, rcut, rmin0, rfac0, wself, selfflag, twojmax,
                        blk, hblk, rootpq, cg, ctrip, cgo, zo, btrip, bz, dbt, beta,
                        tot, lay, zlist, blist, resid, delist):
    """Per atom: U totals, Z, B, then per neighbor dU -> dB -> dE in one pass."""
    natoms = nnb.shape[0]
    nu = blk[twojmax + 1]
    nbis = btrip.shape[0]
    s_idx, s_part = lay[3], lay[4]
    for i in prange(natoms):
        ur = np.empty(nu)
        ui = np.empty(nu)
        tr = np.empty(nu)
        ti = np.empty(nu)
        dur = np.empty((3, nu))
        dui = np.empty((3, nu))
        da = np.empty((3, 2))
        db = np.empty((3, 2))
        dbl = np.empty((nbis, 3))
        base = atom_base(i, lay)
        # U
        init_self(tot, base, lay, twojmax, blk, hblk, False, wself, selfflag)
        for nb in range(nnb[i]):
            x, y, z = disp[i, nb, 0], disp[i, nb, 1], disp[i, nb, 2]
            r, ar, ai, br, bi = cayley_klein(x, y, z, rcut, rmin0, rfac0, da, db)
            fc, dfc = switching(r, rcut, rmin0)
            sfac = wts[i, nb] * fc
            u_recursion(ar, ai, br, bi, twojmax, blk, rootpq, ur, ui)
            for e in range(nu):
                p = base + e * s_idx
                tot[p] += sfac * ur[e]
                tot[p + s_part] += sfac * ui[e]
        # Z
        for t in range(ctrip.shape[0]):
            j1, j2, j = ctrip[t, 0], ctrip[t, 1], ctrip[t, 2]
            o1 = base + blk[j1] * s_idx
            o2 = base + blk[j2] * s_idx
            for mb in range(j + 1):
                for ma in range(j + 1):
                    zr, zi = cg_element(j1, j2, j, ma, mb, cg, cgo[t], tot, o1, o2, s_idx, s_part)
                    q = zo[t] + mb * (j + 1) + ma
                    zlist[i, q, 0] = zr
                    zlist[i, q, 1] = zi
        # B
        worst = 0.0
        for l in range(nbis):
            j = btrip[l, 2]
            sr = 0.0
            si = 0.0
            for e in range((j + 1) * (j + 1)):
                p = base + (blk[j] + e) * s_idx
                zr = zlist[i, bz[l] + e, 0]
                zi = zlist[i, bz[l] + e, 1]
                sr += zr * tot[p] + zi * tot[p + s_part]
                si += zi * tot[p] - zr * tot[p + s_part]
            blist[i, l] = sr
            if abs(si) > worst:
                worst = abs(si)
        resid[i] = worst
        # per neighbor dU -> dB -> dE
        for nb in range(nnb[i]):
            pair_du_full(disp[i, nb, 0], disp[i, nb, 1], disp[i, nb, 2], wts[i, nb], rcut,
                         rmin0, rfac0, twojmax, blk, rootpq, ur, ui, tr, ti, dur, dui, da, db)
            db_pair(zlist, i, btrip, dbt, zo, blk, dur, dui, dbl)
            for k in range(3):
                s = 0.0
                for l in range(nbis):
                    s += beta[l] * dbl[l, k]
                delist[i, nb, k] = s


# ---------------------------------------------------------------------------
# staged dU / dB / dE
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def du_pairs(disp, nnb, wts, rcut, rmin0, rfac0, twojmax, blk, hblk, rootpq, half,
             dulist, order):
    """``dulist`` is (npairs, 3, n, 2), slot by ``order``."""
    natoms, maxnb = nnb.shape[0], disp.shape[1]
    nu = blk[twojmax + 1]
    for it in prange(natoms * maxnb):
        i, nb = pair_of(it, natoms, maxnb, order)
        if nb >= nnb[i]:
            continue
        ur = np.empty(nu)
        ui = np.empty(nu)
        tr = np.empty(nu)
        ti = np.empty(nu)
        dur = np.empty((3, nu))
        dui = np.empty((3, nu))
        da = np.empty((3, 2))
        db = np.empty((3, 2))
        pair_du_full(disp[i, nb, 0], disp[i, nb, 1], disp[i, nb, 2], wts[i, nb], rcut,
                     rmin0, rfac0, twojmax, blk, rootpq, ur, ui, tr, ti, dur, dui, da, db)
        for k in range(3):
            for j in range(twojmax + 1):
                nel = (j + 1) * (j // 2 + 1) if half else (j + 1) * (j + 1)
                o = hblk[j] if half else blk[j]
                for e in range(nel):
                    dulist[it, k, o + e, 0] = dur[k, blk[j] + e]
                    dulist[it, k, o + e, 1] = dui[k, blk[j] + e]


@njit(cache=True, parallel=True)
def db_from_dulist(zlist, dulist, nnb, maxnb, btrip, dbt, zo, blk, dblist, order):
    """``dblist`` is (natoms, maxnb, nb, 3); ``dulist`` must hold full blocks."""
    natoms = nnb.shape[0]
    nu = dulist.shape[2]
    for it in prange(natoms * maxnb):
        i, nb = pair_of(it, natoms, maxnb, order)
        if nb >= nnb[i]:
            continue
        dur = np.empty((3, nu))
        dui = np.empty((3, nu))
        for k in range(3):
            for e in range(nu):
                dur[k, e] = dulist[it, k, e, 0]
                dui[k, e] = dulist[it, k, e, 1]
        db_pair(zlist, i, btrip, dbt, zo, blk, dur, dui, dblist[i, nb])


@njit(cache=True, parallel=True)
def de_from_db(dblist, nnb, beta, delist):
    natoms, maxnb = dblist.shape[0], dblist.shape[1]
    for i in prange(natoms):
        for nb in range(nnb[i]):
            for k in range(3):
                s = 0.0
                for l in range(beta.shape[0]):
                    s += beta[l] * dblist[i, nb, l, k]
                delist[i, nb, k] = s


@njit(cache=True)
def contract_y(y, base, s_idx, s_part, oy, dr, di, od, halfsum, twojmax):
    """``Re(Y : conj(dU))`` for one direction.

    ``oy``/``od`` are the level offset tables of Y and dU.  With ``halfsum``
    only the stored half rows are read: weight 2 on rows below the middle,
    and on the middle row of even levels weight 2 left of the centre and 1 on
    the centre.
    """
    s = 0.0
    for j in range(twojmax + 1):
        n = j + 1
        if halfsum:
            for mb in range((j + 1) // 2):
                for ma in range(n):
                    p = base + (oy[j] + mb * n + ma) * s_idx
                    q = od[j] + mb * n + ma
                    s += 2.0 * (y[p] * dr[q] + y[p + s_part] * di[q])
            if j % 2 == 0:
                mb = j // 2
                for ma in range(mb):
                    p = base + (oy[j] + mb * n + ma) * s_idx
                    q = od[j] + mb * n + ma
                    s += 2.0 * (y[p] * dr[q] + y[p + s_part] * di[q])
                p = base + (oy[j] + mb * n + mb) * s_idx
                q = od[j] + mb * n + mb
                s += y[p] * dr[q] + y[p + s_part] * di[q]
        else:
            for e in range(n * n):
                p = base + (oy[j] + e) * s_idx
                q = od[j] + e
                s += y[p] * dr[q] + y[p + s_part] * di[q]
    return s


@njit(cache=True, parallel=True)
def de_from_dulist(dulist, nnb, maxnb, y, lay, half_y, half_d, twojmax, blk, hblk,
                   delist, order):
    natoms = nnb.shape[0]
    s_idx, s_part = lay[3], lay[4]
    for it in prange(natoms * maxnb):
        i, nb = pair_of(it, natoms, maxnb, order)
        if nb >= nnb[i]:
            continue
        base = atom_base(i, lay)
        oy = hblk if half_y else blk
        od = hblk if half_d else blk
        for k in range(3):
            delist[i, nb, k] = contract_y(y, base, s_idx, s_part, oy, dulist[it, k, :, 0],
                                          dulist[it, k, :, 1], od, half_y or half_d, twojmax)


@njit(cache=True, parallel=True)
def fused_de(disp, nnb, wts, rcut, rmin0, rfac0, twojmax, blk, hblk, rootpq, y, lay,
             half_y, half_d, fission, delist, order):
    """Recompute u and du per pair and contract with Y; no dU storage.

    With ``fission`` each direction is a separate pass that recomputes u.
    """
    natoms, maxnb = nnb.shape[0], disp.shape[1]
    nu = blk[twojmax + 1]
    s_idx, s_part = lay[3], lay[4]
    npass = 3 if fission else 1
    for ps in range(npass):
        for it in prange(natoms * maxnb):
            i, nb = pair_of(it, natoms, maxnb, order)
            if nb >= nnb[i]:
                continue
            ur = np.empty(nu)
            ui = np.empty(nu)
            tr = np.empty(nu)
            ti = np.empty(nu)
            wr = np.empty(nu)
            wi = np.empty(nu)
            da = np.empty((3, 2))
            db = np.empty((3, 2))
            x, y_, z = disp[i, nb, 0], disp[i, nb, 1], disp[i, nb, 2]
            r, ar, ai, br, bi = cayley_klein(x, y_, z, rcut, rmin0, rfac0, da, db)
            fc, dfc = switching(r, rcut, rmin0)
            u_recursion(ar, ai, br, bi, twojmax, blk, rootpq, ur, ui)
            base = atom_base(i, lay)
            oy = hblk if half_y else blk
            klo = ps if fission else 0
            khi = ps + 1 if fission else 3
            for k in range(klo, khi):
                du_recursion_dir(k, ar, ai, br, bi, da, db, twojmax, blk, rootpq, ur, ui, tr, ti)
                weighted_du(k, r, x, y_, z, wts[i, nb], fc, dfc, nu, ur, ui, tr, ti, wr, wi)
                delist[i, nb, k] = contract_y(y, base, s_idx, s_part, oy, wr, wi, blk,
                                              half_y or half_d, twojmax)


@njit(cache=True)
def scatter_forces(delist, nnb, nbr, forces):
    """Fixed-order action/reaction accumulation: F_i += dE, F_k -= dE."""
    forces[:, :] = 0.0
    for i in range(nnb.shape[0]):
        for nb in range(nnb[i]):
            k = nbr[i, nb]
            for d in range(3):
                forces[i, d] += delist[i, nb, d]
                if k >= 0:
                    forces[k, d] -= delist[i, nb, d]


# ---------------------------------------------------------------------------
# Y (adjoint)
# ---------------------------------------------------------------------------


@njit(cache=True)
def y_triple_into(t, i, tot, lay_u, cg, ctrip, cgo, blk, bcoef, y, lay_y, oy):
    """Accumulate ``bcoef[t] * Z_t`` (stored half rows) into atom ``i``'s Y."""
    j1, j2, j = ctrip[t, 0], ctrip[t, 1], ctrip[t, 2]
    su, pu = lay_u[3], lay_u[4]
    sy, py = lay_y[3], lay_y[4]
    bu = atom_base(i, lay_u)
    by = atom_base(i, lay_y)
    o1 = bu + blk[j1] * su
    o2 = bu + blk[j2] * su
    oyj = oy[j]
    c = bcoef[t]
    for mb in range(j // 2 + 1):
        for ma in range(j + 1):
            zr, zi = cg_element(j1, j2, j, ma, mb, cg, cgo[t], tot, o1, o2, su, pu)
            q = by + (oyj + mb * (j + 1) + ma) * sy
            y[q] += c * zr
            y[q + py] += c * zi


@njit(cache=True)
def y_zero_atom(i, y, lay_y, ny):
    by = atom_base(i, lay_y)
    sy, py = lay_y[3], lay_y[4]
    for e in range(ny):
        y[by + e * sy] = 0.0
        y[by + e * sy + py] = 0.0


@njit(cache=True)
def y_mirror_atom(i, y, lay_y, twojmax, blk):
    by = atom_base(i, lay_y)
    sy, py = lay_y[3], lay_y[4]
    for j in range(twojmax + 1):
        n = j + 1
        for mb in range(j // 2 + 1):
            for ma in range(n):
                src = by + (blk[j] + mb * n + ma) * sy
                dst = by + (blk[j] + (j - mb) * n + (j - ma)) * sy
                if (ma - mb) % 2 == 0:
                    y[dst] = y[src]
                    y[dst + py] = -y[src + py]
                else:
                    y[dst] = -y[src]
                    y[dst + py] = y[src + py]


@njit(cache=True, parallel=True)
def y_atoms(tot, lay_u, cg, ctrip, cgo, blk, hblk, bcoef, y, lay_y, half_y, natoms, twojmax):
    """One worker per atom over all coupling triples."""
    ny = n_stored(twojmax, half_y)
    oy = hblk if half_y else blk
    for i in prange(natoms):
        y_zero_atom(i, y, lay_y, ny)
        for t in range(ctrip.shape[0]):
            y_triple_into(t, i, tot, lay_u, cg, ctrip, cgo, blk, bcoef, y, lay_y, oy)
        if not half_y:
            y_mirror_atom(i, y, lay_y, twojmax, blk)


@njit(cache=True, parallel=True)
def y_atom_level(tot, lay_u, cg, ctrip, cgo, blk, hblk, bcoef, y, lay_y, half_y, natoms,
                 twojmax, level_start, level_triples):
    """Work units are (atom, output level); triples of one level stay in order."""
    nlev = twojmax + 1
    oy = hblk if half_y else blk
    sy, py = lay_y[3], lay_y[4]
    for unit in prange(natoms * nlev):
        i = unit // nlev
        j = unit % nlev
        by = atom_base(i, lay_y)
        nrow = j // 2 + 1
        for e in range(nrow * (j + 1)):
            y[by + (oy[j] + e) * sy] = 0.0
            y[by + (oy[j] + e) * sy + py] = 0.0
        for q in range(level_start[j], level_start[j + 1]):
            y_triple_into(level_triples[q], i, tot, lay_u, cg, ctrip, cgo, blk, bcoef, y,
                          lay_y, oy)
    if not half_y:
        for i in prange(natoms):
            y_mirror_atom(i, y, lay_y, twojmax, blk)


@njit(cache=True, parallel=True)
def y_tiles(tot, lay_u, cg, ctrip, cgo, blk, hblk, bcoef, y, lay_y, half_y, natoms, twojmax):
    """AoSoA schedule: one worker per tile, lanes innermost for every element."""
    tile = lay_y[0]
    ntiles = (natoms + tile - 1) // tile
    ny = n_stored(twojmax, half_y)
    oy = hblk if half_y else blk
    su, pu = lay_u[3], lay_u[4]
    sy, py = lay_y[3], lay_y[4]
    for tt in prange(ntiles):
        lo = tt * tile
        hi = min(natoms, lo + tile)
        for i in range(lo, hi):
            y_zero_atom(i, y, lay_y, ny)
        for t in range(ctrip.shape[0]):
            j1, j2, j = ctrip[t, 0], ctrip[t, 1], ctrip[t, 2]
            c = bcoef[t]
            for mb in range(j // 2 + 1):
                for ma in range(j + 1):
                    for i in range(lo, hi):
                        bu = atom_base(i, lay_u)
                        zr, zi = cg_element(j1, j2, j, ma, mb, cg, cgo[t], tot,
                                            bu + blk[j1] * su, bu + blk[j2] * su, su, pu)
                        q = atom_base(i, lay_y) + (oy[j] + mb * (j + 1) + ma) * sy
                        y[q] += c * zr
                        y[q + py] += c * zi
        if not half_y:
            for i in range(lo, hi):
                y_mirror_atom(i, y, lay_y, twojmax, blk)
