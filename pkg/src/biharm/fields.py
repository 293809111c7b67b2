"""Sphere-valued fields on lattice domains and canonical constructions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (CenterOnNode, DimensionMismatch, NearZeroVector)

UNIT_ATOL = 1e-12         # |u| - 1 tolerance for stored sphere fields
RENORM_MIN_NORM = 1e-8    # guard below which renormalize refuses


def sphere_area(k):
    """Surface measure of the unit k-sphere in R^{k+1}."""
    return 2.0 * math.pi ** ((k + 1) / 2) / math.gamma((k + 1) / 2)


SIGMA4 = sphere_area(4)  # 8 pi^2 / 3


def ball_volume(n, r=1.0):
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * r ** n


@dataclass
class SphereField:
    """Unit vectors in R^{k+1} sampled at every non-exterior node."""

    domain: object
    values: np.ndarray           # (N, k+1) float64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.domain.n_nodes:
            raise DimensionMismatch("values must be (n_nodes, k+1)")

    @property
    def k(self):
        return self.values.shape[1] - 1

    def unit_defect(self):
        norms = np.linalg.norm(self.values, axis=1)
        return float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0

    def check_unit(self, atol=UNIT_ATOL):
        d = self.unit_defect()
        if d > atol:
            raise NearZeroVector(f"field leaves the sphere by {d:.3e}")

    def copy(self):
        return SphereField(self.domain, self.values.copy(), dict(self.meta))


def renormalize(values, min_norm=RENORM_MIN_NORM):
    """Project rows of an (N, C) array back to the unit sphere."""
    norms = np.linalg.norm(values, axis=1)
    worst = float(norms.min()) if norms.size else 1.0
    if worst < min_norm:
        raise NearZeroVector(
            f"renormalize hit norm {worst:.3e} < {min_norm:.1e}")
    return values / norms[:, None]


def normalize_field(f: SphereField) -> SphereField:
    return SphereField(f.domain, renormalize(f.values), dict(f.meta))


def radial_map(domain, center=None) -> SphereField:
    """u(x) = (x - c)/|x - c| with target dimension k = n - 1.

    The center must not coincide with a lattice node.
    """
    if center is None:
        center = np.zeros(domain.n)
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (domain.n,):
        raise DimensionMismatch("center dimension != lattice dimension")
    vals = np.empty((domain.n_nodes, domain.n))
    min_rho = np.inf
    chunk = 1 << 22  # blockwise so the coordinate temporaries stay small
    for lo in range(0, domain.n_nodes, chunk):
        ids = np.arange(lo, min(lo + chunk, domain.n_nodes))
        block = vals[lo:lo + ids.size]
        for a in range(domain.n):
            block[:, a] = domain.coords(ids, axis=a) - center[a]
        rho = np.sqrt(np.einsum("ic,ic->i", block, block))
        min_rho = min(min_rho, float(rho.min()))
        if min_rho < 1e-9 * domain.h:
            raise CenterOnNode("radial map center sits on a lattice node")
        block /= rho[:, None]
    return SphereField(domain, vals, {"kind": "radial", "center": center.tolist()})


def constant_map(domain, direction) -> SphereField:
    direction = np.asarray(direction, dtype=np.float64)
    nrm = np.linalg.norm(direction)
    if nrm < RENORM_MIN_NORM:
        raise NearZeroVector("constant direction has near-zero norm")
    vals = np.tile(direction / nrm, (domain.n_nodes, 1))
    return SphereField(domain, vals, {"kind": "constant"})


def wedge(*vectors):
    """Generalized cross product of n-1 vectors in R^n.

    Component i equals det(e_i, p_1, ..., p_{n-1}); multilinear and
    alternating, and orthogonal to every argument.  Accepts stacked
    inputs with the vectors along the last axis.
    """
    vecs = [np.asarray(p, dtype=np.float64) for p in vectors]
    n = vecs[0].shape[-1]
    if len(vecs) != n - 1 or any(v.shape[-1] != n for v in vecs):
        raise DimensionMismatch("wedge needs n-1 vectors of dimension n")
    stacked = np.stack(np.broadcast_arrays(*vecs), axis=-2)  # (..., n-1, n)
    out = np.empty(stacked.shape[:-2] + (n,))
    cols = np.arange(n)
    for i in range(n):
        minor = stacked[..., :, cols[cols != i]]
        out[..., i] = (1.0 if i % 2 == 0 else -1.0) * np.linalg.det(minor)
    return out


def smoothstep(t):
    """C-infinity ramp: exactly 0 for t <= 0, exactly 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    out = np.zeros_like(t)
    mid = (t > 0) & (t < 1)
    a = np.exp(-1.0 / np.maximum(t[mid], 1e-300))
    b = np.exp(-1.0 / np.maximum(1.0 - t[mid], 1e-300))
    out[mid] = a / (a + b)
    out[t >= 1] = 1.0
    return out


# ---------------------------------------------------------------------------
# dumbbell data: a degree-one cap bubble, its dipole pullback, and a
# smooth competitor that unwinds the dipole through the neck

CAP_ALPHA0 = 1.45     # polar angle beyond which the cap map is constant
CAP_MOBIUS_P = 1.25   # profile steepening exponent
CAP_MOBIUS_LAM = 3.0  # profile Mobius gain
GENTLE_MARGIN = 0.18  # flat-end fraction of the near-linear wrap


def _cap_profile(alpha):
    """Latitude profile of the cap bubble: 0 at the pole, pi beyond
    CAP_ALPHA0, exactly constant on the plateau so every derivative
    vanishes toward the equator."""
    t = np.clip(alpha / CAP_ALPHA0, 0.0, 1.0)
    q = 2.0 * np.arctan(
        CAP_MOBIUS_LAM * np.tan(np.pi * np.minimum(t, 0.999999) / 2.0)
        ** CAP_MOBIUS_P)
    env = smoothstep((1.0 - t) / 0.2)
    return np.where(t >= 1.0, np.pi, np.pi + (q - np.pi) * env)


def _gentle_profile(alpha):
    """Near-linear wrap with cosine-rounded flat ends; C2 everywhere."""
    m = GENTLE_MARGIN
    t = np.clip(alpha / CAP_ALPHA0, 0.0, 1.0)

    def ramp(s):
        return s / 2.0 - (m / (2.0 * np.pi)) * np.sin(np.pi * s / m)

    lo = ramp(np.minimum(t, m))
    mid = np.clip(t - m, 0.0, 1.0 - 2.0 * m)
    hi = ramp(m) - ramp(np.clip(1.0 - t, 0.0, m))
    return (np.pi / (1.0 - m)) * (lo + mid + hi)


def _assemble_sphere(y, theta):
    """Map (y, latitude) to S^4 keeping the S^3 direction of y', then
    rotate the pair (e_1, e_5) by pi so the plateau lands on (0',1).

    The rotation has determinant +1, so degrees and every energy are
    those of the unrotated bubble.
    """
    rp = np.linalg.norm(y[:, :4], axis=1)
    s = np.sin(theta)
    safe = np.maximum(rp, 1e-300)
    out = np.empty((y.shape[0], 5))
    out[:, :4] = (s / safe)[:, None] * y[:, :4]
    out[:, 4] = np.cos(theta)
    flat = (theta >= np.pi - 1e-14) | (np.linalg.norm(y, axis=1) < 1e-14)
    out[flat, :4] = 0.0
    out[flat, 4] = -1.0
    out[:, 0] *= -1.0
    out[:, 4] *= -1.0
    return out


def _cap_bubble(y):
    alpha = np.arctan2(np.linalg.norm(y[:, :4], axis=1), y[:, 4])
    return _assemble_sphere(y, _cap_profile(alpha))


def dumbbell_boundary_data(domain):
    """Boundary trace psi and singular competitor Psi on a dumbbell.

    Psi pulls the cap bubble back radially from both cap centers
    (0', +-L), giving exactly two point defects there with degrees +1
    at +L and -1 at -L; psi is its boundary trace, constant (0', 1)
    along the neck wall, total degree zero.  Returns (psi, Psi).
    """
    X = domain.coords()
    L = float(domain.spec.neck_half_length)
    y = np.empty_like(X)
    y[:, :4] = X[:, :4]
    top = X[:, 4] >= 0
    y[:, 4] = np.where(top, X[:, 4] - L, -(X[:, 4] + L))
    vals = _cap_bubble(y)
    psi = SphereField(domain, vals.copy(),
                      {"kind": "dumbbell-boundary", "L": L})
    Psi = SphereField(domain, vals, {"kind": "dumbbell-dipole", "L": L})
    return psi, Psi


DB_NECK_SCALE = 0.84     # level-set radius where the competitor unwinds
DB_CAP_MARGIN = 0.25     # cap blend starts this far inside the cap center
DB_BLEND_WIDTH = 0.32


def dumbbell_competitor(domain):
    """Smooth field sharing the dumbbell clamp but free of defects.

    Interpolates between the two radial cap pullbacks and a neck map
    that wraps each cross-section once through the gentle profile; the
    blend windows sit where both sides are on the constant plateau, so
    the result agrees with the dipole everywhere on the clamp band.
    """
    X = domain.coords()
    L = float(domain.spec.neck_half_length)
    x5 = X[:, 4]
    r2 = np.einsum("ic,ic->i", X[:, :4], X[:, :4])
    fp = smoothstep((x5 - (L - DB_CAP_MARGIN)) / DB_BLEND_WIDTH)
    fm = smoothstep((-x5 - (L - DB_CAP_MARGIN)) / DB_BLEND_WIDTH)
    fn = 1.0 - fp - fm
    nu = fn * (1.0 - r2 / DB_NECK_SCALE ** 2) \
        + fp * (x5 - L) + fm * (-(x5 + L))
    y = np.empty_like(X)
    y[:, :4] = X[:, :4]
    y[:, 4] = nu
    alpha = np.arctan2(np.linalg.norm(y[:, :4], axis=1), y[:, 4])
    gam = fp + fm
    theta = (1.0 - gam) * _gentle_profile(alpha) + gam * _cap_profile(alpha)
    vals = _assemble_sphere(y, theta)
    return SphereField(domain, vals, {"kind": "dumbbell-competitor", "L": L})


def perturb_tangent(u: SphereField, amplitude, seed=0) -> SphereField:
    """Add a seeded smooth tangent bump field of the given sup amplitude.

    Ten windowed cosine carriers with random wavevectors are projected
    onto the tangent space of u, zeroed on the clamp band and wherever
    the field is too steep for the lattice to resolve the bump, then
    scaled so the largest nodewise displacement equals ``amplitude``.
    The result is renormalized; clamp values are restored exactly.
    """
    dom = u.domain
    if amplitude < 0:
        raise ValueError("amplitude must be nonnegative")
    if amplitude == 0:
        return u.copy()
    from . import _stencil
    rng = np.random.default_rng(seed)
    X = dom.coords()
    d_bdry = dom.spec.signed_distance(X)
    g2, _ = _stencil.gradient_normsq(u.values, dom)
    steep = dom.h * np.sqrt(g2)
    w_win = smoothstep((d_bdry - 2 * dom.h) / (2 * dom.h)) \
        * smoothstep((0.8 - steep) / 0.3)
    comps = u.values.shape[1]
    p = np.zeros((dom.n_nodes, comps))
    for _ in range(10):
        kdir = rng.standard_normal(dom.n)
        kdir /= np.linalg.norm(kdir)
        kvec = kdir * (rng.uniform(1.0, 1.6) / dom.h)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        e = rng.standard_normal(comps)
        e /= np.linalg.norm(e)
        p += (rng.standard_normal()
              * np.cos(X @ kvec + phase))[:, None] * e
    p *= w_win[:, None]
    p -= np.einsum("ic,ic->i", p, u.values)[:, None] * u.values
    p[dom.clamp_band] = 0.0
    peak = float(np.linalg.norm(p, axis=1).max())
    if peak == 0.0:
        return u.copy()
    p *= amplitude / peak
    vals = renormalize(u.values + p)
    vals[dom.clamp_band] = u.values[dom.clamp_band]
    meta = dict(u.meta)
    meta["perturbed"] = {"amplitude": float(amplitude), "seed": int(seed)}
    return SphereField(dom, vals, meta)
