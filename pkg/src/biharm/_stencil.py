"""Fused finite-difference sweeps over the sparse node arrays.

Nodes are addressed by their raveled bbox position ``flat_pos`` (sorted
ascending); ``index_map`` maps a raveled bbox position to the node id or
-1 for exterior.  The bbox carries a one-node pad on every side, so
``flat_pos[i] +- strides[a]`` is always a valid lookup.  Kernels gather
neighbors through the map directly, which keeps memory at one int32 per
bbox cell instead of 2n int32 per node.

Each sweep writes a per-node ``valid`` flag: 1 where the full +-h ring
exists, 0 otherwise; outputs at invalid nodes are zeroed, never NaN, so
downstream reductions can multiply by masks directly.

Kernels are compiled with numba when available (single-threaded, strict
IEEE ordering, so results are bit-reproducible).  A chunked numpy
fallback with identical semantics is selected automatically when numba
is missing or BIHARM_DISABLE_NUMBA=1 is set.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly by every sweep
    if os.environ.get("BIHARM_DISABLE_NUMBA"):
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


_CHUNK = 1 << 20  # nodes per numpy-fallback block


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _nb_ring_valid(flat_pos, index_map, strides, out):
    n = strides.shape[0]
    for i in range(flat_pos.shape[0]):
        base = flat_pos[i]
        ok = True
        for a in range(n):
            if index_map[base + strides[a]] < 0 or index_map[base - strides[a]] < 0:
                ok = False
                break
        out[i] = 1 if ok else 0


@njit(cache=True)
def _nb_laplacian(vals, flat_pos, index_map, strides, inv_h2, out, valid):
    n_nodes, comps = vals.shape
    n = strides.shape[0]
    for i in range(n_nodes):
        base = flat_pos[i]
        ok = True
        for a in range(n):
            if index_map[base + strides[a]] < 0 or index_map[base - strides[a]] < 0:
                ok = False
                break
        valid[i] = 1 if ok else 0
        if not ok:
            for c in range(comps):
                out[i, c] = 0.0
            continue
        for c in range(comps):
            acc = -2.0 * n * vals[i, c]
            for a in range(n):
                acc += vals[index_map[base + strides[a]], c]
                acc += vals[index_map[base - strides[a]], c]
            out[i, c] = acc * inv_h2


@njit(cache=True)
def _nb_laplacian_normsq(vals, flat_pos, index_map, strides, inv_h2, out,
                         valid):
    n_nodes, comps = vals.shape
    n = strides.shape[0]
    for i in range(n_nodes):
        base = flat_pos[i]
        ok = True
        for a in range(n):
            if index_map[base + strides[a]] < 0 or index_map[base - strides[a]] < 0:
                ok = False
                break
        valid[i] = 1 if ok else 0
        if not ok:
            out[i] = 0.0
            continue
        s = 0.0
        for c in range(comps):
            acc = -2.0 * n * vals[i, c]
            for a in range(n):
                acc += vals[index_map[base + strides[a]], c]
                acc += vals[index_map[base - strides[a]], c]
            acc *= inv_h2
            s += acc * acc
        out[i] = s


@njit(cache=True)
def _nb_gradient_normsq(vals, flat_pos, index_map, strides, inv_2h, out,
                        valid):
    n_nodes, comps = vals.shape
    n = strides.shape[0]
    for i in range(n_nodes):
        base = flat_pos[i]
        ok = True
        for a in range(n):
            if index_map[base + strides[a]] < 0 or index_map[base - strides[a]] < 0:
                ok = False
                break
        valid[i] = 1 if ok else 0
        if not ok:
            out[i] = 0.0
            continue
        s = 0.0
        for a in range(n):
            ip = index_map[base + strides[a]]
            im = index_map[base - strides[a]]
            for c in range(comps):
                g = (vals[ip, c] - vals[im, c]) * inv_2h
                s += g * g
        out[i] = s


@njit(cache=True)
def _nb_gradient_axis(vals, flat_pos, index_map, stride, inv_2h, out, valid):
    n_nodes, comps = vals.shape
    for i in range(n_nodes):
        base = flat_pos[i]
        ip = index_map[base + stride]
        im = index_map[base - stride]
        if ip < 0 or im < 0:
            valid[i] = 0
            for c in range(comps):
                out[i, c] = 0.0
            continue
        valid[i] = 1
        for c in range(comps):
            out[i, c] = (vals[ip, c] - vals[im, c]) * inv_2h


@njit(cache=True)
def _nb_adjoint_laplacian(src, flat_pos, index_map, strides, inv_h2, out):
    # out = stencil applied to the zero-extended source at every node
    n_nodes, comps = src.shape
    n = strides.shape[0]
    for i in range(n_nodes):
        base = flat_pos[i]
        for c in range(comps):
            acc = -2.0 * n * src[i, c]
            for a in range(n):
                jp = index_map[base + strides[a]]
                jm = index_map[base - strides[a]]
                if jp >= 0:
                    acc += src[jp, c]
                if jm >= 0:
                    acc += src[jm, c]
            out[i, c] = acc * inv_h2


@njit(cache=True)
def _nb_node_coord(flat, strides, extents, origin, offset, h, a):
    idx = (flat // strides[a]) % extents[a]
    return origin[a] + (idx + offset[a]) * h


@njit(cache=True)
def _nb_det4(m):
    # Laplace expansion along the first row
    d = 0.0
    sgn = 1.0
    for j in range(4):
        c0 = 0
        sub = np.empty((3, 3))
        for jj in range(4):
            if jj == j:
                continue
            sub[0, c0] = m[1, jj]
            sub[1, c0] = m[2, jj]
            sub[2, c0] = m[3, jj]
            c0 += 1
        d3 = (sub[0, 0] * (sub[1, 1] * sub[2, 2] - sub[1, 2] * sub[2, 1])
              - sub[0, 1] * (sub[1, 0] * sub[2, 2] - sub[1, 2] * sub[2, 0])
              + sub[0, 2] * (sub[1, 0] * sub[2, 1] - sub[1, 1] * sub[2, 0]))
        d += sgn * m[0, j] * d3
        sgn = -sgn
    return d


@njit(cache=True)
def _nb_det5(m):
    d = 0.0
    sgn = 1.0
    sub = np.empty((4, 4))
    for j in range(5):
        c0 = 0
        for jj in range(5):
            if jj == j:
                continue
            for r in range(4):
                sub[r, c0] = m[r + 1, jj]
            c0 += 1
        d += sgn * m[0, j] * _nb_det4(sub)
        sgn = -sgn
    return d


@njit(cache=True)
def _nb_gather_grads5(vals, index_map, base, strides, inv_2h, g):
    # g[a, c] = central difference along axis a; False if a neighbor is missing
    for a in range(5):
        ip = index_map[base + strides[a]]
        im = index_map[base - strides[a]]
        if ip < 0 or im < 0:
            return False
        for c in range(5):
            g[a, c] = (vals[ip, c] - vals[im, c]) * inv_2h
    return True


@njit(cache=True)
def _nb_dfield5(vals, flat_pos, index_map, strides, inv_2h, out, valid):
    n_nodes = vals.shape[0]
    g = np.empty((5, 5))
    m = np.empty((5, 5))
    for i in range(n_nodes):
        if not _nb_gather_grads5(vals, index_map, flat_pos[i], strides,
                                 inv_2h, g):
            valid[i] = 0
            for a in range(5):
                out[i, a] = 0.0
            continue
        valid[i] = 1
        for a in range(5):
            for c in range(5):
                m[c, 0] = vals[i, c]
            j = 1
            for b in range(5):
                if b == a:
                    continue
                for c in range(5):
                    m[c, j] = g[b, c]
                j += 1
            sgn = 1.0 if a % 2 == 0 else -1.0
            out[i, a] = sgn * _nb_det5(m)


@njit(cache=True)
def _nb_relaxed_value5(vals, xig, w, flat_pos, index_map, strides, inv_2h):
    n_nodes = vals.shape[0]
    g = np.empty((5, 5))
    m = np.empty((5, 5))
    total = 0.0
    for i in range(n_nodes):
        if w[i] == 0.0:
            continue
        if not _nb_gather_grads5(vals, index_map, flat_pos[i], strides,
                                 inv_2h, g):
            continue
        acc = 0.0
        for a in range(5):
            xa = xig[i, a]
            if xa == 0.0:
                continue
            for c in range(5):
                m[c, 0] = vals[i, c]
            j = 1
            for b in range(5):
                if b == a:
                    continue
                for c in range(5):
                    m[c, j] = g[b, c]
                j += 1
            sgn = 1.0 if a % 2 == 0 else -1.0
            acc += sgn * xa * _nb_det5(m)
        total += w[i] * acc
    return total


@njit(cache=True)
def _nb_cof5(m, cof):
    sub = np.empty((4, 4))
    for i in range(5):
        for j in range(5):
            r0 = 0
            for r in range(5):
                if r == i:
                    continue
                c0 = 0
                for c in range(5):
                    if c == j:
                        continue
                    sub[r0, c0] = m[r, c]
                    c0 += 1
                r0 += 1
            s = 1.0 if (i + j) % 2 == 0 else -1.0
            cof[i, j] = s * _nb_det4(sub)


@njit(cache=True)
def _nb_relaxed_grad5_pass_a(vals, xig, w, flat_pos, index_map, strides,
                             inv_2h, grad, colg):
    # grad gets the term through the node value; colg[i, b, :] collects the
    # sensitivity to the axis-b difference at node i for the neighbor pass
    n_nodes = vals.shape[0]
    g = np.empty((5, 5))
    m = np.empty((5, 5))
    cof = np.empty((5, 5))
    for i in range(n_nodes):
        for b in range(5):
            for c in range(5):
                colg[i, b, c] = 0.0
        if w[i] == 0.0:
            continue
        if not _nb_gather_grads5(vals, index_map, flat_pos[i], strides,
                                 inv_2h, g):
            continue
        for a in range(5):
            xa = xig[i, a]
            if xa == 0.0:
                continue
            for c in range(5):
                m[c, 0] = vals[i, c]
            j = 1
            for b in range(5):
                if b == a:
                    continue
                for c in range(5):
                    m[c, j] = g[b, c]
                j += 1
            sgn = 1.0 if a % 2 == 0 else -1.0
            s = w[i] * xa * sgn
            _nb_cof5(m, cof)
            for c in range(5):
                grad[i, c] += s * cof[c, 0]
            j = 1
            for b in range(5):
                if b == a:
                    continue
                for c in range(5):
                    colg[i, b, c] += s * cof[c, j]
                j += 1


@njit(cache=True)
def _nb_relaxed_grad5_pass_b(colg, flat_pos, index_map, strides, inv_2h,
                             grad):
    # the axis-b difference at p reads u(p +- e_b), so node q inherits
    # +colg from the minus-side neighbor and -colg from the plus side
    n_nodes = grad.shape[0]
    for i in range(n_nodes):
        base = flat_pos[i]
        for b in range(5):
            jm = index_map[base - strides[b]]
            jp = index_map[base + strides[b]]
            if jm >= 0:
                for c in range(5):
                    grad[i, c] += colg[jm, b, c] * inv_2h
            if jp >= 0:
                for c in range(5):
                    grad[i, c] -= colg[jp, b, c] * inv_2h


@njit(cache=True)
def _nb_radial_deriv_normsq(vals, flat_pos, index_map, strides, extents,
                            origin, offset, h, center, out, valid):
    # |sum_a rhat_a d_a u|^2, rhat the unit vector from center to the node
    n_nodes, comps = vals.shape
    n = strides.shape[0]
    inv_2h = 1.0 / (2.0 * h)
    for i in range(n_nodes):
        base = flat_pos[i]
        ok = True
        for a in range(n):
            if index_map[base + strides[a]] < 0 or index_map[base - strides[a]] < 0:
                ok = False
                break
        if not ok:
            valid[i] = 0
            out[i] = 0.0
            continue
        valid[i] = 1
        rho2 = 0.0
        for a in range(n):
            xa = _nb_node_coord(base, strides, extents, origin, offset, h, a) - center[a]
            rho2 += xa * xa
        if rho2 <= 0.0:
            out[i] = 0.0
            continue
        inv_rho = 1.0 / np.sqrt(rho2)
        s = 0.0
        for c in range(comps):
            acc = 0.0
            for a in range(n):
                xa = _nb_node_coord(base, strides, extents, origin, offset, h, a) - center[a]
                ip = index_map[base + strides[a]]
                im = index_map[base - strides[a]]
                acc += xa * inv_rho * (vals[ip, c] - vals[im, c]) * inv_2h
            s += acc * acc
        out[i] = s


@njit(cache=True)
def _nb_radial_scalar_deriv(vals, flat_pos, index_map, strides, extents,
                            origin, offset, h, center, out, valid):
    # rhat . grad f for scalar f
    n_nodes = vals.shape[0]
    n = strides.shape[0]
    inv_2h = 1.0 / (2.0 * h)
    for i in range(n_nodes):
        base = flat_pos[i]
        ok = True
        for a in range(n):
            if index_map[base + strides[a]] < 0 or index_map[base - strides[a]] < 0:
                ok = False
                break
        if not ok:
            valid[i] = 0
            out[i] = 0.0
            continue
        valid[i] = 1
        rho2 = 0.0
        for a in range(n):
            xa = _nb_node_coord(base, strides, extents, origin, offset, h, a) - center[a]
            rho2 += xa * xa
        if rho2 <= 0.0:
            out[i] = 0.0
            continue
        inv_rho = 1.0 / np.sqrt(rho2)
        acc = 0.0
        for a in range(n):
            xa = _nb_node_coord(base, strides, extents, origin, offset, h, a) - center[a]
            ip = index_map[base + strides[a]]
            im = index_map[base - strides[a]]
            acc += xa * inv_rho * (vals[ip] - vals[im]) * inv_2h
        out[i] = acc


@njit(cache=True)
def _nb_sigma_pass_a(vals, flat_pos, index_map, strides, extents, origin,
                     offset, h, volume, center, ball_radii, shell_radii,
                     g2_out, ball_sums, shell_g2, shell_rad2, shell_wsum):
    """One sweep accumulating everything sigma needs except the radial
    derivative of |grad u|^2:

      ball_sums[j]  += |Delta u|^2 * ball weight at ball_radii[j]
      shell_*[j]    += integrand * raw shell weight at shell_radii[j]
      g2_out        per-node |grad u|^2 (zero where the ring is missing)

    Weights follow ball_weights / shell_weights (the caller applies the
    area normalization to the shell sums).
    """
    n_nodes, comps = vals.shape
    n = strides.shape[0]
    inv_h2 = 1.0 / (h * h)
    inv_2h = 1.0 / (2.0 * h)
    nb = ball_radii.shape[0]
    ns = shell_radii.shape[0]
    for i in range(n_nodes):
        base = flat_pos[i]
        ok = True
        for a in range(n):
            if index_map[base + strides[a]] < 0 or index_map[base - strides[a]] < 0:
                ok = False
                break
        if not ok:
            g2_out[i] = 0.0
            continue
        rho2 = 0.0
        for a in range(n):
            xa = _nb_node_coord(base, strides, extents, origin, offset, h, a) - center[a]
            rho2 += xa * xa
        rho = np.sqrt(rho2)

        lapsq = 0.0
        g2 = 0.0
        rad2 = 0.0
        for c in range(comps):
            acc = -2.0 * n * vals[i, c]
            racc = 0.0
            for a in range(n):
                ip = index_map[base + strides[a]]
                im = index_map[base - strides[a]]
                acc += vals[ip, c] + vals[im, c]
                g = (vals[ip, c] - vals[im, c]) * inv_2h
                g2 += g * g
                if rho > 0.0:
                    xa = _nb_node_coord(base, strides, extents, origin,
                                        offset, h, a) - center[a]
                    racc += (xa / rho) * g
            acc *= inv_h2
            lapsq += acc * acc
            rad2 += racc * racc
        g2_out[i] = g2

        v = volume[i]
        for j in range(nb):
            w = 0.5 + (ball_radii[j] - rho) / h
            if w > 0.0:
                if w > 1.0:
                    w = 1.0
                ball_sums[j] += lapsq * v * w
        for j in range(ns):
            if shell_radii[j] - 0.5 * h <= rho < shell_radii[j] + 0.5 * h:
                w = v / h
                shell_g2[j] += g2 * w
                shell_rad2[j] += rad2 * w
                shell_wsum[j] += w


@njit(cache=True)
def _nb_sigma_pass_b(g2, flat_pos, index_map, strides, extents, origin,
                     offset, h, volume, center, shell_radii, shell_ddr):
    """Accumulate rhat . grad(|grad u|^2) over the shells."""
    n_nodes = g2.shape[0]
    n = strides.shape[0]
    inv_2h = 1.0 / (2.0 * h)
    ns = shell_radii.shape[0]
    for i in range(n_nodes):
        base = flat_pos[i]
        rho2 = 0.0
        for a in range(n):
            xa = _nb_node_coord(base, strides, extents, origin, offset, h, a) - center[a]
            rho2 += xa * xa
        rho = np.sqrt(rho2)
        hit = False
        for j in range(ns):
            if shell_radii[j] - 0.5 * h <= rho < shell_radii[j] + 0.5 * h:
                hit = True
                break
        if not hit or rho <= 0.0:
            continue
        ok = True
        for a in range(n):
            if index_map[base + strides[a]] < 0 or index_map[base - strides[a]] < 0:
                ok = False
                break
        if not ok:
            continue
        acc = 0.0
        for a in range(n):
            xa = _nb_node_coord(base, strides, extents, origin, offset, h, a) - center[a]
            ip = index_map[base + strides[a]]
            im = index_map[base - strides[a]]
            acc += (xa / rho) * (g2[ip] - g2[im]) * inv_2h
        w = volume[i] / h
        for j in range(ns):
            if shell_radii[j] - 0.5 * h <= rho < shell_radii[j] + 0.5 * h:
                shell_ddr[j] += acc * w
    return


# ---------------------------------------------------------------------------
# numpy fallbacks (identical semantics, chunked to bound temporaries)


def _np_gather(flat_pos, index_map, shift, lo, hi):
    return index_map[flat_pos[lo:hi] + shift]


def _np_coord(flat, strides, extents, origin, offset, h, a):
    idx = (flat // strides[a]) % extents[a]
    return origin[a] + (idx + offset[a]) * h


def _np_ring_valid(flat_pos, index_map, strides, out):
    n = strides.shape[0]
    for lo in range(0, flat_pos.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, flat_pos.shape[0])
        ok = np.ones(hi - lo, dtype=bool)
        for a in range(n):
            ok &= _np_gather(flat_pos, index_map, strides[a], lo, hi) >= 0
            ok &= _np_gather(flat_pos, index_map, -strides[a], lo, hi) >= 0
        out[lo:hi] = ok


def _np_laplacian(vals, flat_pos, index_map, strides, inv_h2, out, valid):
    n = strides.shape[0]
    for lo in range(0, vals.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, vals.shape[0])
        ok = np.ones(hi - lo, dtype=bool)
        acc = (-2.0 * n) * vals[lo:hi]
        for a in range(n):
            for s in (strides[a], -strides[a]):
                j = _np_gather(flat_pos, index_map, s, lo, hi)
                ok &= j >= 0
                acc = acc + vals[np.where(j >= 0, j, 0)]
        out[lo:hi] = np.where(ok[:, None], acc * inv_h2, 0.0)
        valid[lo:hi] = ok


def _np_laplacian_normsq(vals, flat_pos, index_map, strides, inv_h2, out,
                         valid):
    tmp = np.empty_like(vals)
    _np_laplacian(vals, flat_pos, index_map, strides, inv_h2, tmp, valid)
    np.einsum("ic,ic->i", tmp, tmp, out=out)
    out[~valid.astype(bool)] = 0.0


def _np_gradient_axis(vals, flat_pos, index_map, stride, inv_2h, out, valid):
    for lo in range(0, vals.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, vals.shape[0])
        jp = _np_gather(flat_pos, index_map, stride, lo, hi)
        jm = _np_gather(flat_pos, index_map, -stride, lo, hi)
        ok = (jp >= 0) & (jm >= 0)
        d = (vals[np.where(jp >= 0, jp, 0)] - vals[np.where(jm >= 0, jm, 0)]) * inv_2h
        if vals.ndim == 2:
            out[lo:hi] = np.where(ok[:, None], d, 0.0)
        else:
            out[lo:hi] = np.where(ok, d, 0.0)
        valid[lo:hi] = ok


def _np_gradient_normsq(vals, flat_pos, index_map, strides, inv_2h, out,
                        valid):
    n = strides.shape[0]
    out[:] = 0.0
    valid[:] = 1
    g = np.empty_like(vals)
    v = np.empty(vals.shape[0], dtype=np.uint8)
    for a in range(n):
        _np_gradient_axis(vals, flat_pos, index_map, strides[a], inv_2h, g, v)
        valid &= v
        out += np.einsum("ic,ic->i", g, g)
    out[~valid.astype(bool)] = 0.0


def _np_adjoint_laplacian(src, flat_pos, index_map, strides, inv_h2, out):
    n = strides.shape[0]
    for lo in range(0, src.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, src.shape[0])
        acc = (-2.0 * n) * src[lo:hi]
        for a in range(n):
            for s in (strides[a], -strides[a]):
                j = _np_gather(flat_pos, index_map, s, lo, hi)
                acc = acc + np.where((j >= 0)[:, None],
                                     src[np.where(j >= 0, j, 0)], 0.0)
        out[lo:hi] = acc * inv_h2


def _np_radial_unit(flat, strides, extents, origin, offset, h, center):
    n = strides.shape[0]
    rho2 = np.zeros(flat.shape[0])
    comps = []
    for a in range(n):
        xa = _np_coord(flat, strides, extents, origin, offset, h, a) - center[a]
        comps.append(xa)
        rho2 += xa * xa
    rho = np.sqrt(rho2)
    safe = np.maximum(rho, 1e-300)
    return [c / safe for c in comps], rho


def _np_radial_deriv_normsq(vals, flat_pos, index_map, strides, extents,
                            origin, offset, h, center, out, valid):
    n = strides.shape[0]
    inv_2h = 1.0 / (2.0 * h)
    for lo in range(0, vals.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, vals.shape[0])
        rhat, rho = _np_radial_unit(flat_pos[lo:hi], strides, extents, origin,
                                    offset, h, center)
        ok = np.ones(hi - lo, dtype=bool)
        acc = np.zeros((hi - lo, vals.shape[1]))
        for a in range(n):
            jp = _np_gather(flat_pos, index_map, strides[a], lo, hi)
            jm = _np_gather(flat_pos, index_map, -strides[a], lo, hi)
            ok &= (jp >= 0) & (jm >= 0)
            g = (vals[np.where(jp >= 0, jp, 0)] - vals[np.where(jm >= 0, jm, 0)]) * inv_2h
            acc += rhat[a][:, None] * g
        res = np.einsum("ic,ic->i", acc, acc)
        res[(~ok) | (rho <= 0)] = 0.0
        out[lo:hi] = res
        valid[lo:hi] = ok


def _np_radial_scalar_deriv(vals, flat_pos, index_map, strides, extents,
                            origin, offset, h, center, out, valid):
    n = strides.shape[0]
    inv_2h = 1.0 / (2.0 * h)
    for lo in range(0, vals.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, vals.shape[0])
        rhat, rho = _np_radial_unit(flat_pos[lo:hi], strides, extents, origin,
                                    offset, h, center)
        ok = np.ones(hi - lo, dtype=bool)
        acc = np.zeros(hi - lo)
        for a in range(n):
            jp = _np_gather(flat_pos, index_map, strides[a], lo, hi)
            jm = _np_gather(flat_pos, index_map, -strides[a], lo, hi)
            ok &= (jp >= 0) & (jm >= 0)
            acc += rhat[a] * (vals[np.where(jp >= 0, jp, 0)]
                              - vals[np.where(jm >= 0, jm, 0)]) * inv_2h
        acc[(~ok) | (rho <= 0)] = 0.0
        out[lo:hi] = acc
        valid[lo:hi] = ok


def _np_sigma_pass_a(vals, flat_pos, index_map, strides, extents, origin,
                     offset, h, volume, center, ball_radii, shell_radii,
                     g2_out, ball_sums, shell_g2, shell_rad2, shell_wsum):
    lapsq = np.empty(vals.shape[0])
    validu = np.empty(vals.shape[0], dtype=np.uint8)
    _np_laplacian_normsq(vals, flat_pos, index_map, strides, 1.0 / h ** 2,
                         lapsq, validu)
    _np_gradient_normsq(vals, flat_pos, index_map, strides, 1.0 / (2 * h),
                        g2_out, validu)
    rad2 = np.empty(vals.shape[0])
    _np_radial_deriv_normsq(vals, flat_pos, index_map, strides, extents,
                            origin, offset, h, center, rad2, validu)
    _, rho = _np_radial_unit(flat_pos, strides, extents, origin, offset, h,
                             center)
    for j, r in enumerate(ball_radii):
        w = np.clip(0.5 + (r - rho) / h, 0.0, 1.0)
        ball_sums[j] += float(np.dot(lapsq, volume * w))
    for j, r in enumerate(shell_radii):
        sel = (rho >= r - h / 2) & (rho < r + h / 2)
        w = volume[sel] / h
        shell_g2[j] += float(np.dot(g2_out[sel], w))
        shell_rad2[j] += float(np.dot(rad2[sel], w))
        shell_wsum[j] += float(w.sum())


def _np_sigma_pass_b(g2, flat_pos, index_map, strides, extents, origin,
                     offset, h, volume, center, shell_radii, shell_ddr):
    ddr = np.empty(g2.shape[0])
    validu = np.empty(g2.shape[0], dtype=np.uint8)
    _np_radial_scalar_deriv(g2, flat_pos, index_map, strides, extents, origin,
                            offset, h, center, ddr, validu)
    _, rho = _np_radial_unit(flat_pos, strides, extents, origin, offset, h,
                             center)
    for j, r in enumerate(shell_radii):
        sel = (rho >= r - h / 2) & (rho < r + h / 2)
        shell_ddr[j] += float(np.dot(ddr[sel], volume[sel] / h))


def _np_grad_stack(vals, flat_pos, index_map, strides, inv_2h):
    # (N, n_axes, comps) central differences and a per-node all-axes flag
    n = strides.shape[0]
    N, comps = vals.shape
    g = np.zeros((N, n, comps))
    ok = np.ones(N, dtype=bool)
    for a in range(n):
        out = np.empty((N, comps))
        valid = np.empty(N, dtype=np.uint8)
        _np_gradient_axis(vals, flat_pos, index_map, strides[a], inv_2h, out,
                          valid)
        g[:, a, :] = out
        ok &= valid.astype(bool)
    return g, ok


def _np_dfield5(vals, flat_pos, index_map, strides, inv_2h, out, valid):
    g, ok = _np_grad_stack(vals, flat_pos, index_map, strides, inv_2h)
    valid[:] = ok
    m = np.empty((vals.shape[0], 5, 5))
    m[:, :, 0] = vals
    for a in range(5):
        j = 1
        for b in range(5):
            if b == a:
                continue
            m[:, :, j] = g[:, b, :]
            j += 1
        sgn = 1.0 if a % 2 == 0 else -1.0
        out[:, a] = sgn * np.linalg.det(m)
    out[~ok] = 0.0


def _np_relaxed_value5(vals, xig, w, flat_pos, index_map, strides, inv_2h):
    D = np.empty((vals.shape[0], 5))
    valid = np.empty(vals.shape[0], dtype=np.uint8)
    _np_dfield5(vals, flat_pos, index_map, strides, inv_2h, D, valid)
    return float(np.einsum("i,ia,ia->", w, D, xig))


def _np_cof_batch(m):
    # cofactor matrices of a (N, 5, 5) stack via 4x4 minors
    N = m.shape[0]
    cof = np.empty_like(m)
    rows = np.arange(5)
    for i in range(5):
        ri = rows[rows != i]
        for j in range(5):
            cj = rows[rows != j]
            sub = m[:, ri[:, None], cj[None, :]]
            s = 1.0 if (i + j) % 2 == 0 else -1.0
            cof[:, i, j] = s * np.linalg.det(sub)
    return cof


def _np_relaxed_grad5(vals, xig, w, flat_pos, index_map, strides, inv_2h,
                      grad, colg):
    g, ok = _np_grad_stack(vals, flat_pos, index_map, strides, inv_2h)
    act = ok & (w != 0.0)
    m = np.empty((vals.shape[0], 5, 5))
    m[:, :, 0] = vals
    colg[:] = 0.0
    for a in range(5):
        j = 1
        for b in range(5):
            if b == a:
                continue
            m[:, :, j] = g[:, b, :]
            j += 1
        sgn = 1.0 if a % 2 == 0 else -1.0
        s = np.where(act, w * xig[:, a] * sgn, 0.0)
        cof = _np_cof_batch(m)
        grad += s[:, None] * cof[:, :, 0]
        j = 1
        for b in range(5):
            if b == a:
                continue
            colg[:, b, :] += s[:, None] * cof[:, :, j]
            j += 1
    N = vals.shape[0]
    for b in range(5):
        jm = index_map[flat_pos - strides[b]]
        jp = index_map[flat_pos + strides[b]]
        sel = jm >= 0
        grad[sel] += colg[jm[sel], b, :] * inv_2h
        sel = jp >= 0
        grad[sel] -= colg[jp[sel], b, :] * inv_2h


# ---------------------------------------------------------------------------
# public wrappers


def _args(domain):
    return domain.flat_pos, domain.index_map, domain.strides


def ring_valid(domain):
    out = np.empty(domain.n_nodes, dtype=np.uint8)
    if HAVE_NUMBA:
        _nb_ring_valid(*_args(domain), out)
    else:
        _np_ring_valid(*_args(domain), out)
    return out.astype(bool)


def laplacian(vals, domain):
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    out = np.empty_like(vals)
    valid = np.empty(vals.shape[0], dtype=np.uint8)
    fn = _nb_laplacian if HAVE_NUMBA else _np_laplacian
    fn(vals, *_args(domain), 1.0 / domain.h ** 2, out, valid)
    return out, valid.astype(bool)


def laplacian_normsq(vals, domain):
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    out = np.empty(vals.shape[0], dtype=np.float64)
    valid = np.empty(vals.shape[0], dtype=np.uint8)
    fn = _nb_laplacian_normsq if HAVE_NUMBA else _np_laplacian_normsq
    fn(vals, *_args(domain), 1.0 / domain.h ** 2, out, valid)
    return out, valid.astype(bool)


def gradient_normsq(vals, domain):
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    out = np.empty(vals.shape[0], dtype=np.float64)
    valid = np.empty(vals.shape[0], dtype=np.uint8)
    fn = _nb_gradient_normsq if HAVE_NUMBA else _np_gradient_normsq
    fn(vals, *_args(domain), 1.0 / (2 * domain.h), out, valid)
    return out, valid.astype(bool)


def gradient_axis(vals, domain, axis):
    """Central difference along one axis; valid where both neighbors exist."""
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    scalar = vals.ndim == 1
    v2 = vals[:, None] if scalar else vals
    out = np.empty_like(v2)
    valid = np.empty(v2.shape[0], dtype=np.uint8)
    fn = _nb_gradient_axis if HAVE_NUMBA else _np_gradient_axis
    fn(v2, domain.flat_pos, domain.index_map, domain.strides[axis],
       1.0 / (2 * domain.h), out, valid)
    return (out[:, 0] if scalar else out), valid.astype(bool)


def adjoint_laplacian(src, domain):
    """Apply the stencil to a zero-extended source field at every node."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    out = np.empty_like(src)
    fn = _nb_adjoint_laplacian if HAVE_NUMBA else _np_adjoint_laplacian
    fn(src, *_args(domain), 1.0 / domain.h ** 2, out)
    return out


def _geo_args(domain):
    return (domain.flat_pos, domain.index_map, domain.strides,
            domain.extents.astype(np.int64), domain.origin, domain.offset,
            domain.h)


def radial_deriv_normsq(vals, domain, center):
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    out = np.empty(vals.shape[0], dtype=np.float64)
    valid = np.empty(vals.shape[0], dtype=np.uint8)
    center = np.asarray(center, dtype=np.float64)
    fn = _nb_radial_deriv_normsq if HAVE_NUMBA else _np_radial_deriv_normsq
    fn(vals, *_geo_args(domain), center, out, valid)
    return out, valid.astype(bool)


def radial_scalar_deriv(vals, domain, center):
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    out = np.empty(vals.shape[0], dtype=np.float64)
    valid = np.empty(vals.shape[0], dtype=np.uint8)
    center = np.asarray(center, dtype=np.float64)
    fn = _nb_radial_scalar_deriv if HAVE_NUMBA else _np_radial_scalar_deriv
    fn(vals, *_geo_args(domain), center, out, valid)
    return out, valid.astype(bool)


def dfield5(vals, domain):
    """Jacobian-minor field for n=5, k=4; zero where any axis pair is cut."""
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    out = np.empty((vals.shape[0], 5))
    valid = np.empty(vals.shape[0], dtype=np.uint8)
    fn = _nb_dfield5 if HAVE_NUMBA else _np_dfield5
    fn(vals, *_args(domain), 1.0 / (2 * domain.h), out, valid)
    return out, valid.astype(bool)


def relaxed_value5(vals, xig, w, domain):
    """Weighted contraction sum_p w_p D(u)_p . xig_p for n=5."""
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    xig = np.ascontiguousarray(xig, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    fn = _nb_relaxed_value5 if HAVE_NUMBA else _np_relaxed_value5
    return float(fn(vals, xig, w, *_args(domain), 1.0 / (2 * domain.h)))


def relaxed_grad5(vals, xig, w, domain):
    """Exact gradient of relaxed_value5 with respect to the node values."""
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    xig = np.ascontiguousarray(xig, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    grad = np.zeros((vals.shape[0], 5))
    colg = np.zeros((vals.shape[0], 5, 5))
    if HAVE_NUMBA:
        _nb_relaxed_grad5_pass_a(vals, xig, w, *_args(domain),
                                 1.0 / (2 * domain.h), grad, colg)
        _nb_relaxed_grad5_pass_b(colg, *_args(domain), 1.0 / (2 * domain.h),
                                 grad)
    else:
        _np_relaxed_grad5(vals, xig, w, *_args(domain), 1.0 / (2 * domain.h),
                          grad, colg)
    return grad


def sigma_scan(vals, domain, center, ball_radii, shell_radii):
    """Two-pass fused accumulation for sigma_monotone at several radii.

    Returns (ball_sums, shell_g2, shell_rad2, shell_ddr, shell_wsum);
    shell sums carry raw weights volume/h (caller normalizes by area).
    Memory stays at one extra scalar field (|grad u|^2).
    """
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    ball_radii = np.asarray(ball_radii, dtype=np.float64)
    shell_radii = np.asarray(shell_radii, dtype=np.float64)
    g2 = np.empty(vals.shape[0], dtype=np.float64)
    ball_sums = np.zeros(ball_radii.shape[0])
    shell_g2 = np.zeros(shell_radii.shape[0])
    shell_rad2 = np.zeros(shell_radii.shape[0])
    shell_wsum = np.zeros(shell_radii.shape[0])
    shell_ddr = np.zeros(shell_radii.shape[0])
    fa = _nb_sigma_pass_a if HAVE_NUMBA else _np_sigma_pass_a
    fb = _nb_sigma_pass_b if HAVE_NUMBA else _np_sigma_pass_b
    fa(vals, *_geo_args(domain), domain.volume, center, ball_radii,
       shell_radii, g2, ball_sums, shell_g2, shell_rad2, shell_wsum)
    fb(g2, *_geo_args(domain), domain.volume, center, shell_radii, shell_ddr)
    return ball_sums, shell_g2, shell_rad2, shell_ddr, shell_wsum
