"""Topological diagnostics for sphere-valued lattice fields.

The D-field packs the signed Jacobian minors of u into a vector field
whose divergence concentrates on point defects; its flux through a
closed surface counts enclosed degree.  On top of it this module builds
degree recovery, defect detection, and the connection length between
oppositely charged defects, computed two independent ways: a min-cost
matching over graph geodesics, and the dual linear program over
edge-Lipschitz node potentials.  The two agree to solver precision on
balanced sets because both live on the same grid graph.
"""

from __future__ import annotations

import collections
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix

from . import _stencil
from .energy import theta_density
from .errors import (AmbiguousDegree, DimensionMismatch,
                     RegionEscapesDomain, UnbalancedDegrees)
from .fields import SphereField, sphere_area
from .lattice import GridGraph, _whole_graph, pairwise_geodesic, shell_weights

DEGREE_RESIDUAL_MAX = 0.25   # beyond this a flux refuses to round
DUALITY_ATOL = 1e-6

_GAUSS = {
    2: (np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)]),
        np.array([0.5, 0.5])),
    3: (np.array([0.5 - 0.5 * math.sqrt(0.6), 0.5, 0.5 + 0.5 * math.sqrt(0.6)]),
        np.array([5.0, 8.0, 5.0]) / 18.0),
}


def d_field(u: SphereField, *, with_mask=False):
    """Vector of signed n-1 x n-1 Jacobian minors against the node value.

    Component a carries sign (-1)^a (zero-based) so that the outward flux
    of the field through a sphere around a degree +1 defect is +sigma_{n-1}.
    Invalid nodes (any cut axis) are zeroed.
    """
    dom = u.domain
    n = dom.n
    if u.k != n - 1:
        raise DimensionMismatch("D-field needs target dimension k = n - 1")
    if n == 5:
        D, ok = _stencil.dfield5(u.values, dom)
        return (D, ok) if with_mask else D
    vals = u.values
    grads = []
    ok = np.ones(dom.n_nodes, dtype=bool)
    for a in range(n):
        ga, va = _stencil.gradient_axis(vals, dom, a)
        grads.append(ga)
        ok &= va
    D = np.zeros((dom.n_nodes, n))
    chunk = 1 << 20
    for a in range(n):
        cols = [vals] + [grads[b] for b in range(n) if b != a]
        sgn = 1.0 if a % 2 == 0 else -1.0
        for s in range(0, dom.n_nodes, chunk):
            e = min(s + chunk, dom.n_nodes)
            M = np.stack([c[s:e] for c in cols], axis=2)
            D[s:e, a] = sgn * np.linalg.det(M)
    D[~ok] = 0.0
    return (D, ok) if with_mask else D


def d_divergence(u: SphereField, *, d=None):
    """Central-difference divergence of the D-field; zero where cut."""
    dom = u.domain
    if d is None:
        d = d_field(u)
    div = np.zeros(dom.n_nodes)
    for a in range(dom.n):
        da, va = _stencil.gradient_axis(d[:, a], dom, a)
        div += np.where(va, da, 0.0)
    return div


def flux_degree(u: SphereField, center, r, *, d=None):
    """Degree of u around center from the D-flux through the r-sphere.

    Returns (degree, residual) where residual is the distance of the raw
    normalized flux from the returned integer.  Shells too close to a
    defect alias the flux; the residual quantifies how badly.
    """
    dom = u.domain
    center = np.asarray(center, dtype=np.float64)
    if d is None:
        d = d_field(u)
    w = shell_weights(dom, center, r)
    ids = np.flatnonzero(w > 0)
    X = dom.coords(ids) - center
    rho = np.maximum(np.linalg.norm(X, axis=1), 1e-300)
    rad = np.einsum("ic,ic->i", d[ids], X) / rho
    flux = float(np.dot(w[ids], rad)) / sphere_area(dom.n - 1)
    deg = int(np.rint(flux))
    residual = abs(flux - deg)
    if residual > DEGREE_RESIDUAL_MAX:
        raise AmbiguousDegree(
            f"normalized flux {flux:.4f} is {residual:.3f} from an integer")
    return deg, residual


# ---------------------------------------------------------------------------
# multilinear-interpolant quadrature
#
# Charges and slice coverage are measured on the renormalized multilinear
# interpolant of the node values rather than on raw finite differences:
# the interpolant is a genuine continuous sphere-valued competitor, so its
# |Jacobian| integrals obey the same degree bounds as the smooth theory,
# and steep cores that alias central differences are still counted.


def _cell_corner_stack(V):
    """Stack the corner values of every all-finite cell of a dense grid.

    V has shape (s_1, ..., s_m, comps) with NaN marking missing nodes.
    Corner index bit a of the output addresses parameter axis a.
    """
    m = V.ndim - 1
    finite = np.ones(tuple(s - 1 for s in V.shape[:m]), dtype=bool)
    pieces = []
    for ci in range(1 << m):
        sls = tuple(slice(1, None) if (ci >> a) & 1 else slice(0, -1)
                    for a in range(m))
        blk = V[sls]
        finite &= np.isfinite(blk[..., 0])
        pieces.append(blk.reshape(-1, V.shape[-1]))
    keep = finite.reshape(-1)
    if not keep.any():
        return np.empty((0, 1 << m, V.shape[-1]))
    return np.stack([p[keep] for p in pieces], axis=1)


def _cell_jacobian_quad(corners, order=2, absolute=True):
    """Per-cell quadrature of det[P/|P|, dP_1, ..., dP_m] / |P|^m.

    P is the multilinear interpolant of the corner vectors on the unit
    m-cube.  Renormalizing only the first column is exact: the tangential
    projector inside the derivative columns dies against it, and the
    |P|^-m factor accounts for the remaining column norms.  The result is
    the (signed or absolute) spherical Jacobian integral of the cell in
    units where a full wrap totals sigma_m.
    """
    N, nc, n = corners.shape
    m = nc.bit_length() - 1
    pts, wts = _GAUSS[order]
    out = np.zeros(N)
    if N == 0:
        return out
    for gidx in itertools.product(range(len(pts)), repeat=m):
        xi = pts[list(gidx)]
        wq = float(np.prod(wts[list(gidx)]))
        P = np.zeros((N, n))
        dP = np.zeros((N, n, m))
        for ci in range(nc):
            bits = [(ci >> a) & 1 for a in range(m)]
            w_ax = [xi[a] if bits[a] else 1.0 - xi[a] for a in range(m)]
            wprod = float(np.prod(w_ax))
            Uc = corners[:, ci]
            P += wprod * Uc
            for a in range(m):
                rest = float(np.prod([w_ax[b] for b in range(m) if b != a]))
                dP[:, :, a] += (rest if bits[a] else -rest) * Uc
        nP = np.linalg.norm(P, axis=1)
        safe = np.maximum(nP, 1e-300)
        M = np.empty((N, n, n))
        M[:, :, 0] = P / safe[:, None]
        M[:, :, 1:] = dP
        dets = np.linalg.det(M) / safe ** m
        if absolute:
            dets = np.abs(dets)
        out += wq * np.where(nP > 1e-12, dets, 0.0)
    return out


def _dense_plane(u, axis, plane_index):
    """One constant-index plane of u as a dense grid, NaN outside."""
    dom = u.domain
    other = [a for a in range(dom.n) if a != axis]
    grids = np.meshgrid(*[np.arange(dom.extents[a]) for a in other],
                        indexing="ij")
    flat = plane_index * dom.strides[axis]
    for g, a in zip(grids, other):
        flat = flat + g * dom.strides[a]
    ids = dom.index_map[flat]
    out = np.full(tuple(dom.extents[a] for a in other) + (u.k + 1,), np.nan)
    ok = ids >= 0
    out[ok] = u.values[ids[ok]]
    return out


def slice_coverage(u: SphereField, *, axis=None, coords=None, order=2):
    """Total |Jacobian| of the interpolant on cross-sections of the domain.

    Returns {slice coordinate: integral}; a slice whose restriction wraps
    the target sphere d times integrates to at least |d| * sigma_{n-1}
    minus quadrature error.  ``coords`` filters slices by coordinate along
    the slicing axis (default: every populated plane).
    """
    dom = u.domain
    if axis is None:
        axis = dom.n - 1
    idx = dom.axis_index(axis)
    cvals = dom.coords(axis=axis)
    out = {}
    for plane in np.unique(idx):
        c = float(cvals[idx == plane][0])
        if coords is not None and not any(abs(c - t) < 1e-12 for t in coords):
            continue
        corners = _cell_corner_stack(_dense_plane(u, axis, plane))
        out[c] = float(_cell_jacobian_quad(corners, order=order,
                                           absolute=True).sum())
    return out


def _node_multi_index(dom, node_id):
    return dom.multi_idx[node_id].astype(np.int64)


def box_flux(u: SphereField, center, half_cells, *, order=3):
    """Signed interpolant flux through an axis-aligned lattice box.

    The box spans ``half_cells`` lattice steps on each side of the node
    nearest ``center``.  Returns the flux normalized by sphere area, or
    None when any face loses a node to the exterior (the estimate would
    silently leak flux there, so the caller should shrink the box).
    """
    dom = u.domain
    n = dom.n
    k = int(half_cells)
    c_mi = _node_multi_index(dom, dom.nearest_node(center))
    total = 0.0
    for ax in range(n):
        other = [b for b in range(n) if b != ax]
        if np.any(c_mi[other] - k < 0) or \
           np.any(c_mi[other] + k >= dom.extents[other]):
            return None
        for side in (-1, 1):
            plane = c_mi[ax] + side * k
            if plane < 0 or plane >= dom.extents[ax]:
                return None
            grids = np.meshgrid(*[np.arange(c_mi[b] - k, c_mi[b] + k + 1)
                                  for b in other], indexing="ij")
            flat = plane * dom.strides[ax]
            for g, b in zip(grids, other):
                flat = flat + g * dom.strides[b]
            ids = dom.index_map[flat]
            if np.any(ids < 0):
                return None
            vals = u.values[ids]
            corners = _cell_corner_stack(vals)
            s = float(_cell_jacobian_quad(corners, order=order,
                                          absolute=False).sum())
            sgn = float(side) * (1.0 if ax % 2 == 0 else -1.0)
            total += sgn * s
    return total / sphere_area(n - 1)


# ---------------------------------------------------------------------------
# defect detection


@dataclass
class DetectionThresholds:
    """Knobs for detect_singularities; defaults suit unit-scale domains."""

    hot_fraction: float = 0.25    # node is hot above this times max |div|
    keep_flux: float = 0.5        # clusters below half a charge are noise
    box_width: float = 0.4        # probe box half-width in length units
    min_box_cells: int = 3        # and never below this many lattice steps
    theta_radius_cells: int = 4   # density cross-report ball radius
    max_clusters: int = 64


@dataclass
class Singularity:
    position: np.ndarray
    degree: int
    residual: float
    theta: float | None = None

    def to_dict(self):
        return {"position": [float(x) for x in self.position],
                "degree": int(self.degree),
                "residual": float(self.residual),
                "theta": None if self.theta is None else float(self.theta)}


@dataclass
class SingularitySet:
    points: list = field(default_factory=list)

    @property
    def total_degree(self):
        return int(sum(p.degree for p in self.points))

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def charges(self):
        """Unit charges with multiplicity, split by sign."""
        pos, neg = [], []
        for p in self.points:
            bucket = pos if p.degree > 0 else neg
            for _ in range(abs(p.degree)):
                bucket.append(np.asarray(p.position, dtype=np.float64))
        return pos, neg

    def to_dict(self):
        return {"total_degree": self.total_degree,
                "points": [p.to_dict() for p in self.points]}


def _refine_core(dom, D, pos0, rad):
    """Sharpen a defect position by intersecting the D-field rays.

    Around a point defect the leading profile is a radial pullback, so
    D points along rays through the core; the weighted least-squares
    intersection point of those rays recovers the core well below the
    divergence cluster's own width.  Nodes within 2h are skipped (their
    directions alias) and flux-level weights favor the resolved shell.
    """
    h = dom.h
    pos = np.asarray(pos0, dtype=np.float64).copy()
    for _ in range(3):
        d2 = np.zeros(dom.n_nodes)
        for a in range(dom.n):
            xa = dom.coords(axis=a) - pos[a]
            d2 += xa * xa
        sel = np.flatnonzero((d2 <= rad * rad) & (d2 >= (2 * h) ** 2))
        if sel.size < 4 * dom.n:
            return pos
        Dn = np.linalg.norm(D[sel], axis=1)
        keep = Dn > 0.02 * float(Dn.max())
        sel, Dn = sel[keep], Dn[keep]
        dhat = D[sel] / Dn[:, None]
        Xs = dom.coords(sel)
        w = Dn * d2[sel]
        A = w.sum() * np.eye(dom.n) - np.einsum("i,ia,ib->ab", w, dhat, dhat)
        b = w @ Xs - np.einsum("i,ia,ib,ib->a", w, dhat, dhat, Xs)
        try:
            new = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            return pos
        if not np.all(np.isfinite(new)) or np.linalg.norm(new - pos) > rad:
            return pos
        pos = new
    return pos


def _hot_clusters(dom, q, hot_fraction):
    aq = np.abs(q)
    mx = float(aq.max()) if aq.size else 0.0
    if mx <= 0.0:
        return []
    hot = np.flatnonzero(aq > hot_fraction * mx)
    hotset = set(hot.tolist())
    nbr = dom.nbr
    seen = set()
    clusters = []
    for start in hot:
        if int(start) in seen:
            continue
        comp = []
        dq = collections.deque([int(start)])
        seen.add(int(start))
        while dq:
            v = dq.popleft()
            comp.append(v)
            for a in range(2 * dom.n):
                w = int(nbr[a, v])
                if w >= 0 and w in hotset and w not in seen:
                    seen.add(w)
                    dq.append(w)
        clusters.append(np.array(comp))
    return clusters


def detect_singularities(u: SphereField, thresholds=None) -> SingularitySet:
    """Locate point defects and measure their degrees.

    Positions come from |div D| clusters (divergence concentrates on
    cores even when its integral aliases); charges from the interpolant
    flux through a probe box grown to ``box_width`` and shrunk when it
    would leave the domain.  Clusters whose flux stays below half a
    charge are discarded, so smooth fields yield an empty set.
    """
    dom = u.domain
    th = thresholds or DetectionThresholds()
    D, _ = d_field(u, with_mask=True)
    div = d_divergence(u, d=D)
    q = div * dom.h ** dom.n / sphere_area(dom.n - 1)
    clusters = _hot_clusters(dom, q, th.hot_fraction)
    if not clusters:
        return SingularitySet()
    if len(clusters) > th.max_clusters:
        clusters.sort(key=lambda c: -float(np.abs(q[c]).sum()))
        clusters = clusters[:th.max_clusters]
    X = dom.coords()
    cents = []
    for comp in clusters:
        wq = np.abs(q[comp])
        cents.append((wq[:, None] * X[comp]).sum(axis=0) / wq.sum())
    # merge clusters that one probe box would cover twice
    k0 = max(th.min_box_cells, int(math.ceil(th.box_width / dom.h)))
    merged: list[list[int]] = []
    for i in range(len(clusters)):
        placed = False
        for grp in merged:
            if any(np.max(np.abs(cents[i] - cents[j])) < 2.0 * k0 * dom.h
                   for j in grp):
                grp.append(i)
                placed = True
                break
        if not placed:
            merged.append([i])
    out = SingularitySet()
    for grp in merged:
        comp = np.concatenate([clusters[i] for i in grp])
        wq = np.abs(q[comp])
        cen = (wq[:, None] * X[comp]).sum(axis=0) / wq.sum()
        # degree from the box around the divergence mass; the probe
        # shrinks if a face would leave the domain
        k = k0
        flux = None
        while k >= 1:
            flux = box_flux(u, cen, k)
            if flux is not None:
                break
            k -= 1
        if flux is None or abs(flux) < th.keep_flux:
            continue
        deg = int(np.rint(flux))
        residual = abs(flux - deg)
        pos = _refine_core(dom, D, cen, k0 * dom.h)
        theta = None
        try:
            theta = theta_density(u, pos, th.theta_radius_cells * dom.h)
        except RegionEscapesDomain:
            pass
        out.points.append(Singularity(pos, deg, residual, theta))
    return out


# ---------------------------------------------------------------------------
# connection length, primal and dual


def _as_set(s, domain):
    if isinstance(s, SphereField):
        return detect_singularities(s), s.domain
    return s, domain


def minimal_connection(s, domain=None):
    """Min-cost pairing of unit charges under the graph geodesic metric.

    Accepts a SingularitySet (with ``domain``) or a SphereField.  Returns
    (length, pairing) where pairing lists (positive point, negative
    point, geodesic cost) triples.  The matching is solved exactly.
    """
    s, domain = _as_set(s, domain)
    pos, neg = s.charges()
    if len(pos) != len(neg):
        raise UnbalancedDegrees(
            f"{len(pos)} positive vs {len(neg)} negative unit charges")
    if not pos:
        return 0.0, []
    pts = np.array(pos + neg)
    Dm = pairwise_geodesic(domain, pts)
    m = len(pos)
    C = Dm[:m, m:]
    ri, ci = linear_sum_assignment(C)
    pairing = [(pos[i], neg[j], float(C[i, j])) for i, j in zip(ri, ci)]
    return float(C[ri, ci].sum()), pairing


def _charge_nodes(s, domain):
    """Snap charges to nodes, accumulating net charge per node."""
    acc: dict[int, int] = {}
    for p in s.points:
        nid = int(domain.nearest_node(np.asarray(p.position)))
        acc[nid] = acc.get(nid, 0) + int(p.degree)
    nodes = [n for n, c in acc.items() if c != 0]
    charges = [acc[n] for n in nodes]
    return nodes, charges


def _dual_graph(domain, nodes):
    gg = _whole_graph(domain)
    if gg is not None:
        return gg
    # restrict to a tube wide enough to contain every competitive path
    P = domain.coords(np.array(nodes))
    dist = np.full(domain.n_nodes, np.inf)
    for p in P:
        np.minimum(dist, domain.dist_to(p), out=dist)
    diam = float(np.max(np.linalg.norm(P[:, None, :] - P[None, :, :],
                                       axis=2)))
    keep = np.flatnonzero(dist <= diam + 4 * domain.h)
    return GridGraph(domain, keep)


def _extend_potential(domain, gg, nodes, xi_charge):
    """McShane extension of charge-node potential values to every node.

    xi(x) = min_j (xi_j + d(node_j, x)) is the tightest edge-Lipschitz
    function matching the given values, and matches them exactly when
    they are metric-feasible.  Nodes outside the graph (or cut off from
    every charge) fall back to the Euclidean envelope, which is also
    edge-Lipschitz because edge weights are Euclidean step lengths.
    """
    dist = gg.distances(np.array(nodes))
    ext = np.min(xi_charge[:, None] + dist, axis=0)
    env = np.full(domain.n_nodes, np.inf)
    P = domain.coords(np.array(nodes))
    for xj, p in zip(xi_charge, P):
        np.minimum(env, xj + domain.dist_to(p), out=env)
    xi = env
    ok = np.isfinite(ext)
    ids = gg.node_ids[ok]
    if gg.node_ids.size == domain.n_nodes:
        xi[ids] = ext[ok]
    else:
        # tube-restricted: stay under the envelope across the tube rim
        xi[ids] = np.minimum(ext[ok], xi[ids])
    return xi


def relaxed_L_dual(s, domain=None, *, method="auto"):
    """Connection length as the optimum of the dual potential problem.

    Maximizes sum(charge * xi) over node potentials that change by at
    most the step length across every graph edge.  ``method`` "edges"
    solves the full per-edge linear program; "metric" solves the
    equivalent program on the charge nodes under the geodesic metric and
    extends the optimizer; "auto" picks by graph size.  Returns
    (length, potential); by strong duality the length equals the
    minimal connection of the same charges.
    """
    s, domain = _as_set(s, domain)
    if s.total_degree != 0:
        raise UnbalancedDegrees(f"total degree {s.total_degree} != 0")
    nodes, charges = _charge_nodes(s, domain)
    if not nodes:
        return 0.0, np.zeros(domain.n_nodes)
    if method == "auto":
        # the per-edge LP has (3^n - 1) rows per node; route big graphs
        # to the metric-closure form, which is exact on the same metric
        est_edges = domain.n_nodes * (3 ** domain.n - 1) // 2
        method = "edges" if est_edges <= 200_000 else "metric"
    if method == "edges":
        return _dual_lp_edges(domain, nodes, charges)
    if method == "metric":
        return _dual_lp_metric(domain, nodes, charges)
    raise ValueError(f"unknown dual method {method!r}")


def _dual_lp_edges(domain, nodes, charges):
    gg = _dual_graph(domain, nodes)
    G = coo_matrix(gg.graph)
    r, c, w = G.row, G.col, G.data
    m = gg.node_ids.size
    ne = r.size
    rows = np.concatenate([np.arange(ne), np.arange(ne),
                           np.arange(ne, 2 * ne), np.arange(ne, 2 * ne)])
    cols = np.concatenate([r, c, c, r])
    vals = np.concatenate([np.ones(ne), -np.ones(ne),
                           np.ones(ne), -np.ones(ne)])
    A = coo_matrix((vals, (rows, cols)), shape=(2 * ne, m)).tocsr()
    b = np.concatenate([w, w])
    local = gg.local_index(np.array(nodes))
    cvec = np.zeros(m)
    for lj, qj in zip(local, charges):
        cvec[lj] -= float(qj)
    res = linprog(cvec, A_ub=A, b_ub=b, bounds=(None, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"dual LP failed: {res.message}")
    xi_charge = res.x[local] - res.x[local[0]]
    xi = _extend_potential(domain, gg, nodes, xi_charge)
    return float(-res.fun), xi


def _dual_lp_metric(domain, nodes, charges):
    gg = _dual_graph(domain, nodes)
    local = gg.local_index(np.array(nodes))
    pair = gg.distances(np.array(nodes))[:, local]
    m = len(nodes)
    rows, cols, vals, b = [], [], [], []
    rix = 0
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            rows += [rix, rix]
            cols += [i, j]
            vals += [1.0, -1.0]
            b.append(pair[i, j])
            rix += 1
    A = coo_matrix((vals, (rows, cols)), shape=(rix, m)).tocsr()
    cvec = -np.asarray(charges, dtype=np.float64)
    res = linprog(cvec, A_ub=A, b_ub=np.array(b), bounds=(None, None),
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"dual LP failed: {res.message}")
    xi_charge = res.x - res.x[0]
    xi = _extend_potential(domain, gg, nodes, xi_charge)
    return float(-res.fun), xi


def relative_L(u: SphereField, u0: SphereField):
    """Connection length of the defects of u measured against those of u0.

    Merges the singularities of u with the negated singularities of u0
    and returns the minimal connection of the combined set; zero when
    both fields carry the same defects.
    """
    if u.domain is not u0.domain and u.domain.n_nodes != u0.domain.n_nodes:
        raise DimensionMismatch("fields must share a domain")
    su = detect_singularities(u)
    s0 = detect_singularities(u0)
    merged = SingularitySet(list(su.points) +
                            [Singularity(p.position, -p.degree, p.residual,
                                         p.theta) for p in s0.points])
    # cancel opposite charges snapped to the same node before matching
    nodes, charges = _charge_nodes(merged, u.domain)
    if not nodes:
        return 0.0
    clean = SingularitySet([Singularity(u.domain.coords(np.array([n]))[0],
                                        c, 0.0) for n, c in zip(nodes, charges)])
    val, _ = minimal_connection(clean, u.domain)
    return val
