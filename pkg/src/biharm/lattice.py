"""Lattice domains: shapes, node classification, quadrature, geodesics.

A domain is sampled on the grid x = origin + (idx + offset) * h.  Nodes
are kept sparse: ``flat_pos`` holds each node's raveled position inside
the padded bounding box (ascending), and ``index_map`` maps a raveled
position back to the node id, -1 outside.  Stencil sweeps gather
neighbors as ``index_map[flat_pos +- stride]``; the one-node pad
guarantees those lookups never wrap.  Per-node integer coordinates and
the (2n, N) neighbor table are derived lazily since the largest domains
cannot afford them.

Classification by signed distance d to the complement (d >= 0 is a
member, boundary nodes included):

    interior   d >= 2h
    collar     h <= d < 2h   (outer ring of the clamp band)
    rim        0 <= d < h    (nodes adjacent to the boundary)

The clamp band used by minimizers is rim + collar: fixing both rings
pins the trace and its normal derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from . import _stencil
from .errors import (DimensionMismatch, Disconnected, EmptyInterior,
                     RegionEscapesDomain, StencilOutOfDomain)

INTERIOR, COLLAR, RIM = 0, 1, 2

_DIST_TOL = 1e-9  # relative slack (in units of h) for >= comparisons


# ---------------------------------------------------------------------------
# domain shapes


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    @property
    def dim(self):
        return len(self.center)

    def signed_distance(self, x):
        return self.radius - np.linalg.norm(x - np.asarray(self.center), axis=-1)

    def boundary_normal(self, x):
        v = x - np.asarray(self.center, dtype=np.float64)
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        return v / np.maximum(n, 1e-300)

    def aabb(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Annulus:
    center: tuple
    r_inner: float
    r_outer: float

    def __post_init__(self):
        if not 0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")

    @property
    def dim(self):
        return len(self.center)

    def signed_distance(self, x):
        rho = np.linalg.norm(x - np.asarray(self.center), axis=-1)
        return np.minimum(self.r_outer - rho, rho - self.r_inner)

    def boundary_normal(self, x):
        v = x - np.asarray(self.center, dtype=np.float64)
        rho = np.linalg.norm(v, axis=-1, keepdims=True)
        rhat = v / np.maximum(rho, 1e-300)
        outer_nearer = (self.r_outer - rho) < (rho - self.r_inner)
        return np.where(outer_nearer, rhat, -rhat)

    def aabb(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.r_outer, c + self.r_outer


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise DimensionMismatch("lo and hi lengths differ")
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError("need lo < hi componentwise")

    @property
    def dim(self):
        return len(self.lo)

    def signed_distance(self, x):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        return np.minimum((x - lo).min(axis=-1), (hi - x).min(axis=-1))

    def cell_fraction(self, x, h):
        # exact box/cell overlap, one axis at a time
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        a = np.minimum(x + h / 2, hi) - np.maximum(x - h / 2, lo)
        return np.prod(np.clip(a / h, 0.0, 1.0), axis=-1)

    def aabb(self):
        return (np.asarray(self.lo, dtype=np.float64),
                np.asarray(self.hi, dtype=np.float64))


@dataclass(frozen=True)
class Dumbbell:
    """Capsule in R^5: unit-radius balls at (0,..,0,+-L) joined by the tube.

    Equals the set of points within cap_radius of the axis segment
    {x' = 0, |x5| <= L}, so the signed distance is the capsule distance.
    """

    cap_radius: float = 1.0
    neck_half_length: float = 2.0

    @property
    def dim(self):
        return 5

    def signed_distance(self, x):
        x = np.asarray(x, dtype=np.float64)
        ax = np.clip(x[..., -1], -self.neck_half_length, self.neck_half_length)
        d2 = np.einsum("...a,...a->...", x[..., :-1], x[..., :-1])
        d2 = d2 + (x[..., -1] - ax) ** 2
        return self.cap_radius - np.sqrt(d2)

    def boundary_normal(self, x):
        x = np.asarray(x, dtype=np.float64)
        ax = np.clip(x[..., -1], -self.neck_half_length, self.neck_half_length)
        v = x.copy()
        v[..., -1] -= ax
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        return v / np.maximum(n, 1e-300)

    def aabb(self):
        r, half = self.cap_radius, self.neck_half_length
        lo = np.array([-r] * 4 + [-half - r])
        hi = np.array([r] * 4 + [half + r])
        return lo, hi


DomainSpec = Union[Ball, Annulus, Box, Dumbbell]

_SHAPE_TAGS = {"ball": Ball, "annulus": Annulus, "box": Box,
               "dumbbell": Dumbbell}


def spec_to_dict(spec):
    d = {"shape": type(spec).__name__.lower()}
    for name in spec.__dataclass_fields__:
        v = getattr(spec, name)
        d[name] = list(v) if isinstance(v, (tuple, list)) else v
    return d


def spec_from_dict(d):
    cls = _SHAPE_TAGS[d["shape"]]
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in d.items() if k != "shape"}
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# boundary cell volumes


def _halfspace_fraction(nu, dist):
    """Fraction of an axis cube of side 1 centered at the origin lying in
    the half-space {y : nu . y <= dist}, nu a unit outward normal.

    Sign flips map the cube to [0,1]^n with all coefficients positive;
    the fraction is then the corner-sum (box spline) formula on the axes
    with nonnegligible coefficients.  Exact for planar boundaries.
    """
    from itertools import combinations
    from math import factorial

    nu = np.atleast_2d(np.asarray(nu, dtype=np.float64))
    dist = np.atleast_1d(np.asarray(dist, dtype=np.float64))
    a_all = np.abs(nu)
    b = dist + 0.5 * a_all.sum(axis=1)
    coef = np.sort(a_all, axis=1)[:, ::-1]  # descending: actives first
    m_count = (a_all > 1e-9).sum(axis=1)
    out = np.zeros(nu.shape[0])
    for m in np.unique(m_count):
        sel = np.flatnonzero(m_count == m)
        if m == 0:
            out[sel] = (b[sel] >= 0).astype(float)
            continue
        cc = coef[sel, :m]
        bb = b[sel]
        acc = np.zeros(sel.size)
        for size in range(m + 1):
            for S in combinations(range(m), size):
                shift = cc[:, S].sum(axis=1) if S else 0.0
                acc += (-1) ** size * np.maximum(bb - shift, 0.0) ** m
        out[sel] = acc / (factorial(m) * cc.prod(axis=1))
    return np.clip(out, 0.0, 1.0)


def _boundary_cell_fraction(spec, x, h):
    """In-domain volume fraction of the cells centered at points x."""
    if hasattr(spec, "cell_fraction"):
        return spec.cell_fraction(x, h)
    d = spec.signed_distance(x)
    if hasattr(spec, "boundary_normal"):
        nu = spec.boundary_normal(x)
    else:  # finite-difference the distance field (grad d points inward)
        n = x.shape[-1]
        nu = np.empty_like(x)
        eps = 1e-4 * h
        for a in range(n):
            e = np.zeros(n)
            e[a] = eps
            nu[:, a] = spec.signed_distance(x - e) - spec.signed_distance(x + e)
        nu /= np.maximum(np.linalg.norm(nu, axis=-1, keepdims=True), 1e-300)
    return _halfspace_fraction(nu, d / h)


# ---------------------------------------------------------------------------
# lattice construction


@dataclass
class LatticeDomain:
    spec: DomainSpec
    h: float
    origin: np.ndarray          # (n,) coordinate of bbox index 0
    offset: np.ndarray          # (n,) per-axis fractional shift in units of h
    extents: np.ndarray         # (n,) bbox node counts incl. 1-node pad
    strides: np.ndarray         # (n,) int64 raveling strides of the bbox
    flat_pos: np.ndarray        # (N,) int64 raveled bbox positions, ascending
    node_class: np.ndarray      # (N,) int8
    volume: np.ndarray          # (N,) float64 cell volumes (h^n * fraction)
    index_map: np.ndarray       # (prod extents,) int32 node id, -1 exterior
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return int(self.extents.shape[0])

    @property
    def n_nodes(self):
        return int(self.flat_pos.shape[0])

    @property
    def interior(self):
        return self.node_class == INTERIOR

    @property
    def clamp_band(self):
        return self.node_class != INTERIOR

    @property
    def multi_idx(self):
        """(N, n) int16 bbox indices, derived on first use."""
        if "multi_idx" not in self._cache:
            mi = np.array(np.unravel_index(self.flat_pos, self.extents),
                          dtype=np.int16).T.copy()
            self._cache["multi_idx"] = mi
        return self._cache["multi_idx"]

    @property
    def nbr(self):
        """(2n, N) int32 neighbor ids (axis a at rows 2a: +h, 2a+1: -h)."""
        if "nbr" not in self._cache:
            nbr = np.empty((2 * self.n, self.n_nodes), dtype=np.int32)
            for a in range(self.n):
                nbr[2 * a] = self.index_map[self.flat_pos + self.strides[a]]
                nbr[2 * a + 1] = self.index_map[self.flat_pos - self.strides[a]]
            self._cache["nbr"] = nbr
        return self._cache["nbr"]

    def ring1_valid(self):
        """Nodes whose full +-h ring is non-exterior."""
        if "ring1" not in self._cache:
            self._cache["ring1"] = _stencil.ring_valid(self)
        return self._cache["ring1"]

    def axis_index(self, axis, ids=None):
        flat = self.flat_pos if ids is None else self.flat_pos[ids]
        return (flat // self.strides[axis]) % self.extents[axis]

    def coords(self, ids=None, axis=None):
        if axis is not None:
            return (self.origin[axis]
                    + (self.axis_index(axis, ids) + self.offset[axis]) * self.h)
        if np.isscalar(ids):
            return np.array([self.coords(ids, axis=a) for a in range(self.n)])
        out = np.empty(((self.n_nodes if ids is None else len(ids)), self.n))
        for a in range(self.n):
            out[:, a] = self.coords(ids, axis=a)
        return out

    def dist_to(self, center, ids=None):
        """|x - center| per node, accumulated per axis to bound temporaries."""
        c = np.asarray(center, dtype=np.float64)
        acc = 0.0
        for a in range(self.n):
            xa = self.coords(ids, axis=a) - c[a]
            acc = acc + xa * xa
        return np.sqrt(acc)

    def nearest_node(self, point):
        point = np.asarray(point, dtype=np.float64)
        if point.shape != (self.n,):
            raise DimensionMismatch("point dimension != lattice dimension")
        idx = np.rint((point - self.origin) / self.h - self.offset).astype(np.int64)
        # probe a small index window around the rounded position
        span = 2
        lo = np.maximum(idx - span, 0)
        hi = np.minimum(idx + span, self.extents - 1)
        if np.all(lo <= hi):
            grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)],
                                indexing="ij")
            flat = np.zeros(grids[0].size, dtype=np.int64)
            for a in range(self.n):
                flat += grids[a].ravel() * self.strides[a]
            cand = self.index_map[flat]
            cand = cand[cand >= 0].astype(np.int64)
            if cand.size:
                d = self.dist_to(point, ids=cand)
                return int(cand[int(np.argmin(d))])
        # fall back to a full scan (point far from the lattice)
        return int(np.argmin(self.dist_to(point)))

    def flat_index(self, multi_idx):
        return np.asarray(multi_idx, dtype=np.int64) @ self.strides


def build_domain(spec: DomainSpec, h: float,
                 offset: Union[float, Sequence[float]] = 0.0) -> LatticeDomain:
    """Sample a shape on the grid origin + (idx + offset) h and classify.

    offset is the per-axis fractional node shift in units of h (scalar or
    length-n); 0.5 keeps shape centers off the lattice.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    n = spec.dim
    if n < 2:
        raise DimensionMismatch("lattice dimension must be >= 2")
    offset = np.broadcast_to(np.asarray(offset, dtype=np.float64), (n,)).copy()
    offset -= np.floor(offset)
    lo, hi = spec.aabb()

    # index range covering the aabb, plus one pad node per side so flat
    # neighbor arithmetic never wraps
    idx_lo = np.floor(lo / h - offset).astype(np.int64) - 1
    idx_hi = np.ceil(hi / h - offset).astype(np.int64) + 1
    origin = idx_lo * h
    extents = (idx_hi - idx_lo + 1).astype(np.int64)
    if np.any(extents > 2000):
        raise ValueError("bbox exceeds 2000 nodes per axis; refine the shape")
    bbox_size = int(np.prod(extents))
    if bbox_size > np.iinfo(np.int32).max:
        raise ValueError("bbox exceeds int32 addressing; refine the shape")

    tol = _DIST_TOL * h
    half_diag = 0.5 * np.sqrt(n) * h

    # pass 1: membership, classification, and boundary-cell distances,
    # streamed over the raveled bbox so only node-sized arrays persist
    chunk = 1 << 20
    flat_ids, classes, cut_ids = [], [], []
    count = 0
    for start in range(0, bbox_size, chunk):
        stop = min(start + chunk, bbox_size)
        mi = np.array(np.unravel_index(np.arange(start, stop), extents)).T
        x = origin + (mi + offset) * h
        d = spec.signed_distance(x)
        keep = d >= -tol
        if not np.any(keep):
            continue
        dk = d[keep]
        flat_ids.append(np.arange(start, stop)[keep])
        cls = np.full(dk.size, RIM, dtype=np.int8)
        cls[dk >= h - tol] = COLLAR
        cls[dk >= 2 * h - tol] = INTERIOR
        classes.append(cls)
        cut = np.flatnonzero(dk < half_diag)
        if cut.size:
            cut_ids.append(cut + count)
        count += dk.size
    if not flat_ids:
        raise EmptyInterior("no node lies inside the shape at this h")
    flat_pos = np.concatenate(flat_ids)
    del flat_ids
    node_class = np.concatenate(classes)
    del classes
    n_nodes = flat_pos.size
    if not np.any(node_class == INTERIOR):
        raise EmptyInterior("clamp band swallows every node; h too coarse")

    index_map = np.full(bbox_size, -1, dtype=np.int32)
    index_map[flat_pos] = np.arange(n_nodes, dtype=np.int32)

    strides = np.empty(n, dtype=np.int64)
    strides[-1] = 1
    for a in range(n - 2, -1, -1):
        strides[a] = strides[a + 1] * extents[a + 1]

    cut_ids = (np.concatenate(cut_ids) if cut_ids
               else np.array([], dtype=np.int64))
    rim_ids = np.flatnonzero(node_class == RIM)
    volume = _node_volumes(spec, h, origin, offset, extents, index_map,
                           flat_pos, strides, cut_ids, rim_ids)

    return LatticeDomain(spec=spec, h=h, origin=origin.astype(np.float64),
                         offset=offset, extents=extents, strides=strides,
                         flat_pos=flat_pos, node_class=node_class,
                         volume=volume, index_map=index_map)


def _node_volumes(spec, h, origin, offset, extents, index_map, flat_pos,
                  strides, cut_ids, rim_ids):
    """Cut-cell quadrature weights.

    Member cells crossed by the boundary (cut_ids) get their in-domain
    fraction (exact for boxes, half-space model otherwise).  Cells of
    just-outside nodes still dip into the domain; their in-domain volume
    is split among the adjacent member nodes so no measure is lost.
    Only rim nodes can miss a face neighbor, so the scan stays small.
    """
    n = len(extents)
    n_nodes = flat_pos.shape[0]
    half_diag = 0.5 * np.sqrt(n) * h
    volume = np.full(n_nodes, h ** n)

    def fractions_at(flat):
        # blockwise: the corner-sum formula allocates ~10 temporaries
        out = np.empty(flat.shape[0])
        block = 1 << 19
        for lo in range(0, flat.shape[0], block):
            sl = slice(lo, min(lo + block, flat.shape[0]))
            mi = np.array(np.unravel_index(flat[sl], extents)).T
            x = origin + (mi + offset) * h
            out[sl] = _boundary_cell_fraction(spec, x, h)
        return out

    if cut_ids.size:
        volume[cut_ids] = h ** n * fractions_at(flat_pos[cut_ids])

    src, flat_out = [], []
    rim_flat = flat_pos[rim_ids]
    for a in range(n):
        for side in (1, -1):
            out = rim_flat + side * strides[a]
            miss = np.flatnonzero(index_map[out] < 0)
            if miss.size:
                src.append(rim_ids[miss])
                flat_out.append(out[miss])
    if src:
        src = np.concatenate(src)
        flat_out = np.concatenate(flat_out)
        uniq, inv = np.unique(flat_out, return_inverse=True)
        mult = np.bincount(inv).astype(np.float64)
        frac = fractions_at(uniq)
        share = h ** n * frac / mult
        np.add.at(volume, src, share[inv])
    return volume


# ---------------------------------------------------------------------------
# pointwise finite differences (strict: raise if the stencil leaves Omega)


def _ring_ids(domain, at):
    base = domain.flat_pos[at]
    ip = domain.index_map[base + domain.strides]
    im = domain.index_map[base - domain.strides]
    if np.any(ip < 0) or np.any(im < 0):
        raise StencilOutOfDomain(f"node {at} misses part of its +-h ring")
    return ip, im


def gradient_fd(domain, values, at):
    """Central-difference gradient at one node; (n,) or (n, C)."""
    ip, im = _ring_ids(domain, at)
    return (values[ip] - values[im]) / (2 * domain.h)


def laplacian_fd(domain, values, at):
    ip, im = _ring_ids(domain, at)
    return (values[ip].sum(axis=0) + values[im].sum(axis=0)
            - 2 * domain.n * values[at]) / domain.h ** 2


# ---------------------------------------------------------------------------
# quadrature


def ball_weights(domain, center, radius, *, require_inside=True):
    """Per-node quadrature weights for a ball region (fractional at its rim).

    Weight = cell volume times clip(1/2 + (radius - rho)/h, 0, 1).
    """
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (domain.n,):
        raise DimensionMismatch("center dimension != lattice dimension")
    if require_inside:
        d = float(domain.spec.signed_distance(center))
        if d + _DIST_TOL * domain.h < radius:
            raise RegionEscapesDomain(
                f"ball radius {radius} exceeds distance {d:.6g} to the boundary")
    rho = domain.dist_to(center)
    frac = np.clip(0.5 + (radius - rho) / domain.h, 0.0, 1.0)
    return domain.volume * frac


def integrate(domain, f, *, region=None, weights=None):
    """Lattice integral of a per-node scalar.

    region: None for all non-exterior nodes, or ("ball", center, radius).
    weights overrides the quadrature weights entirely.
    """
    if weights is None:
        if region is None:
            weights = domain.volume
        else:
            kind, center, radius = region
            if kind != "ball":
                raise ValueError(f"unknown region kind {kind!r}")
            weights = ball_weights(domain, center, radius)
    return float(np.dot(weights, f))


def shell_weights(domain, center, radius):
    """Surface-measure weights for the shell rho in [r - h/2, r + h/2).

    Weights are normalized so they sum to the exact sphere area: the
    shell integral is then the node average times the true area, which
    removes the shell-population error that dominates at small r/h.
    """
    from .fields import sphere_area

    center = np.asarray(center, dtype=np.float64)
    if radius < domain.h:
        raise RegionEscapesDomain("shell radius below one lattice spacing")
    d = float(domain.spec.signed_distance(center))
    if d + _DIST_TOL * domain.h < radius + domain.h / 2:
        raise RegionEscapesDomain(
            f"shell at radius {radius} leaves the domain (boundary at {d:.6g})")
    rho = domain.dist_to(center)
    w = np.zeros(domain.n_nodes)
    sel = (rho >= radius - domain.h / 2) & (rho < radius + domain.h / 2)
    w[sel] = domain.volume[sel] / domain.h
    total = w.sum()
    if total <= 0:
        raise RegionEscapesDomain("shell contains no lattice nodes")
    area = sphere_area(domain.n - 1) * radius ** (domain.n - 1)
    return w * (area / total)


def shell_integrate(domain, f, center, radius):
    return float(np.dot(shell_weights(domain, center, radius), f))


# ---------------------------------------------------------------------------
# lattice geodesics


def edge_offsets(n):
    """Half-set of step offsets: all of {-1,0,1}^n for n <= 3, axis steps
    plus two-coordinate diagonals for n >= 4 (full diagonals are too many)."""
    if n <= 3:
        grids = np.meshgrid(*([np.array([-1, 0, 1])] * n), indexing="ij")
        offs = np.stack([g.ravel() for g in grids], axis=1)
        offs = offs[np.any(offs != 0, axis=1)]
        # keep one of each antipodal pair: first nonzero component positive
        keep = []
        for o in offs:
            nz = o[o != 0]
            if nz[0] > 0:
                keep.append(o)
        return np.array(keep, dtype=np.int64)
    offs = []
    for a in range(n):
        e = np.zeros(n, dtype=np.int64)
        e[a] = 1
        offs.append(e.copy())
        for b in range(a + 1, n):
            for sb in (1, -1):
                e2 = np.zeros(n, dtype=np.int64)
                e2[a] = 1
                e2[b] = sb
                offs.append(e2)
    return np.array(offs, dtype=np.int64)


def anisotropy_factor(n):
    """Worst-case ratio of graph distance to Euclidean distance for the
    offset set of edge_offsets(n), in the dense-lattice limit.

    Computed by linear programming over a direction sample: for direction v,
    the graph cost is min sum t_i |o_i| h s.t. sum t_i o_i = v, t >= 0.
    """
    from scipy.optimize import linprog

    offs = edge_offsets(n)
    offs = np.vstack([offs, -offs]).astype(np.float64)
    costs = np.linalg.norm(offs, axis=1)
    rng = np.random.default_rng(20240711)
    dirs = rng.standard_normal((256, n))
    corners = np.array(np.meshgrid(*([[0.0, 1.0]] * n), indexing="ij"))
    corners = corners.reshape(n, -1).T
    dirs = np.vstack([dirs, corners[np.any(corners != 0, axis=1)]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    worst = 1.0
    for v in dirs:
        res = linprog(costs, A_eq=offs.T, b_eq=v, bounds=(0, None),
                      method="highs")
        if res.status == 0:
            worst = max(worst, res.fun)
    return float(worst)


class GridGraph:
    """Weighted graph on a subset of lattice nodes with diagonal steps.

    Edge weights are Euclidean step lengths, so dijkstra distances
    overestimate Euclidean geodesics by at most the anisotropy factor.
    """

    def __init__(self, domain, node_ids=None):
        self.domain = domain
        if node_ids is None:
            node_ids = np.arange(domain.n_nodes, dtype=np.int64)
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self._build()

    def _build(self):
        dom = self.domain
        n = dom.n
        mi = np.array(np.unravel_index(dom.flat_pos[self.node_ids],
                                       dom.extents)).T
        lo = mi.min(axis=0) - 1
        ext = mi.max(axis=0) - lo + 2
        if int(np.prod(ext)) > 300_000_000:
            raise MemoryError("geodesic sub-bbox too large")
        local = np.full(int(np.prod(ext)), -1, dtype=np.int32)
        strides = np.empty(n, dtype=np.int64)
        strides[-1] = 1
        for a in range(n - 2, -1, -1):
            strides[a] = strides[a + 1] * ext[a + 1]
        flat = (mi - lo) @ strides
        local[flat] = np.arange(self.node_ids.size, dtype=np.int32)

        offs = edge_offsets(n)
        rows, cols, wts = [], [], []
        for o in offs:
            shift = int(o @ strides)
            tgt = local[flat + shift]
            ok = tgt >= 0
            rows.append(np.flatnonzero(ok))
            cols.append(tgt[ok])
            wts.append(np.full(int(ok.sum()),
                               float(np.linalg.norm(o)) * dom.h))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        wts = np.concatenate(wts)
        m = self.node_ids.size
        self.graph = csr_matrix((wts, (rows, cols)), shape=(m, m))
        self._local_of_global = None

    def local_index(self, global_ids):
        if self._local_of_global is None:
            lut = {}
            for j, g in enumerate(self.node_ids):
                lut[int(g)] = j
            self._local_of_global = lut
        return np.array([self._local_of_global[int(g)] for g in global_ids])

    def distances(self, source_global_ids):
        src = self.local_index(np.atleast_1d(source_global_ids))
        d = dijkstra(self.graph, directed=False, indices=src)
        return d

    def connected(self):
        ncomp, _ = connected_components(self.graph, directed=False)
        return ncomp == 1


def geodesic_distance(domain, a, b):
    """Graph-geodesic distance between two points snapped to nodes."""
    ia, ib = domain.nearest_node(a), domain.nearest_node(b)
    if ia == ib:
        return 0.0
    gg = _whole_graph(domain)
    if gg is not None:
        d = gg.distances([ia])[0]
        val = d[gg.local_index([ib])[0]]
        if not np.isfinite(val):
            raise Disconnected("no lattice path between the points")
        return float(val)
    return float(pairwise_geodesic(domain, np.array([domain.coords(ia),
                                                     domain.coords(ib)]))[0, 1])


def _whole_graph(domain, max_nodes=600_000):
    if domain.n_nodes > max_nodes:
        return None
    if "whole_graph" not in domain._cache:
        domain._cache["whole_graph"] = GridGraph(domain)
    return domain._cache["whole_graph"]


def pairwise_geodesic(domain, points, *, tube_margin=None):
    """All-pairs graph distances between points (snapped to nodes).

    Large domains are handled by restricting to a tube around the point
    set and widening until every pair connects at a stable distance.
    """
    points = np.asarray(points, dtype=np.float64)
    ids = np.array([domain.nearest_node(p) for p in points])
    m = ids.size
    if m == 0:
        return np.zeros((0, 0))
    gg = _whole_graph(domain)
    if gg is not None:
        uniq, inv = np.unique(ids, return_inverse=True)
        d = gg.distances(uniq)
        sub = d[:, gg.local_index(uniq)]
        out = sub[inv][:, inv]
        if not np.all(np.isfinite(out)):
            raise Disconnected("point set spans disconnected components")
        np.fill_diagonal(out, 0.0)
        return out

    # tube restriction with widening
    if tube_margin is None:
        tube_margin = 4 * domain.h
    margin = tube_margin
    prev = None
    for _ in range(8):
        sel = _tube_mask(domain, points, margin)
        sel[ids] = True
        gg = GridGraph(domain, np.flatnonzero(sel))
        uniq, inv = np.unique(ids, return_inverse=True)
        d = gg.distances(uniq)
        sub = d[:, gg.local_index(uniq)]
        out = sub[inv][:, inv]
        if np.all(np.isfinite(out)):
            np.fill_diagonal(out, 0.0)
            if prev is not None and np.allclose(out, prev, rtol=1e-12):
                return out
            prev = out.copy()
        margin *= 2.0
    if prev is None:
        raise Disconnected("point set spans disconnected components")
    return prev


def _tube_mask(domain, points, margin):
    """Nodes within `margin` of any segment between consecutive point pairs
    (a simple spanning path through the point set)."""
    sel = np.zeros(domain.n_nodes, dtype=bool)
    order = np.argsort(points[:, -1], kind="stable")
    pts = points[order]
    for i in range(len(pts)):
        seg_a = pts[i]
        seg_b = pts[(i + 1) % len(pts)] if len(pts) > 1 else pts[i]
        sel |= _near_segment(domain, seg_a, seg_b, margin)
    return sel


def _near_segment(domain, a, b, margin):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    acc_t = np.zeros(domain.n_nodes)
    if denom > 0:
        for ax in range(domain.n):
            xa = domain.coords(axis=ax) - a[ax]
            acc_t += xa * ab[ax]
        t = np.clip(acc_t / denom, 0.0, 1.0)
    else:
        t = acc_t
    acc = np.zeros(domain.n_nodes)
    for ax in range(domain.n):
        xa = domain.coords(axis=ax) - (a[ax] + t * ab[ax])
        acc += xa * xa
    return acc <= margin * margin
