"""Hessian energy, related integrands, and regularity diagnostics.

Energies integrate over every non-exterior node with fractional cell
volumes at the boundary.  The centered Laplacian only exists where the
full +-h ring does, which misses a thin sliver of rim nodes; their
integrand is completed by extrapolation from the two inward colinear
nodes (geometric when the integrand decays monotonically, linear as a
fallback).  Near point singularities the integrand is not summable to
quadrature accuracy, so callers can excise a small ball and add back an
estimate scaled from the surrounding shell, where for a degree-one core
the energy grows linearly in the radius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _stencil
from .errors import (AllCentersDegenerate, DimensionMismatch, InvalidCenter,
                     RegionEscapesDomain, StencilOutOfDomain)
from .fields import UNIT_ATOL, SphereField, renormalize, sphere_area
from .lattice import ball_weights, shell_weights


def _values(u):
    return u.values if isinstance(u, SphereField) else np.asanyarray(u)


def erode_valid(domain, valid):
    """Nodes that are valid and whose whole +-h ring is valid."""
    out = valid.copy()
    for j in range(2 * domain.n):
        nb = domain.nbr[j]
        out &= (nb >= 0) & valid[np.where(nb >= 0, nb, 0)]
    return out


def complete_integrand(domain, f, valid, *, nonneg=True, max_ratio=8.0):
    """Fill f at ring-invalid nodes by colinear extrapolation.

    For each invalid node and each direction with two valid inward
    samples f1, f2 the estimate is f1^2/f2 (log-linear, matching the
    power-law decay of |D^m u|^2 toward a boundary) when both are
    safely positive, else the linear 2 f1 - f2.  Estimates from all
    usable directions are averaged; one-sample directions are the
    fallback, then zero.
    """
    filled = np.where(valid, f, 0.0)
    unc = np.flatnonzero(~valid)
    if unc.size == 0:
        return filled, unc
    two_sum = np.zeros(unc.size)
    two_cnt = np.zeros(unc.size)
    one_sum = np.zeros(unc.size)
    one_cnt = np.zeros(unc.size)
    floor = 1e-300
    for j in range(2 * domain.n):
        s1 = domain.nbr[j, unc]
        ok1 = (s1 >= 0) & valid[np.where(s1 >= 0, s1, 0)]
        s1c = np.where(ok1, s1, 0)
        s2 = domain.nbr[j, s1c]
        ok2 = ok1 & (s2 >= 0) & valid[np.where(s2 >= 0, s2, 0)]
        s2c = np.where(ok2, s2, 0)
        f1 = f[s1c]
        f2 = f[s2c]
        if nonneg:
            pos = ok2 & (f1 > floor) & (f2 > floor)
            ratio = np.clip(np.where(pos, f1 / np.where(pos, f2, 1.0), 1.0),
                            1.0 / max_ratio, max_ratio)
            est_geo = f1 * ratio
            est_lin = np.maximum(2.0 * f1 - f2, 0.0)
            est = np.where(pos, est_geo, est_lin)
        else:
            est = 2.0 * f1 - f2
        two_sum += np.where(ok2, est, 0.0)
        two_cnt += ok2
        one_sum += np.where(ok1, f1, 0.0)
        one_cnt += ok1
    have2 = two_cnt > 0
    have1 = ~have2 & (one_cnt > 0)
    vals = np.zeros(unc.size)
    vals[have2] = two_sum[have2] / two_cnt[have2]
    vals[have1] = one_sum[have1] / one_cnt[have1]
    filled[unc] = vals
    return filled, unc


def exclusion_weights(domain, exclusions):
    """Multiplier in [0, 1] that removes balls around excluded points."""
    m = np.ones(domain.n_nodes)
    for center, r_excl in exclusions:
        rho = domain.dist_to(center)
        m *= 1.0 - np.clip(0.5 + (r_excl - rho) / domain.h, 0.0, 1.0)
    return m


def excised_integral(domain, f, weights, exclusions, shell_factor=2.0):
    """Integrate f * weights, excising exclusion balls and adding back a
    shell-scaled estimate of each core.

    The add-back assumes the integrand behaves like a degree-one core,
    whose ball integral grows linearly in the radius: the measured shell
    [r, shell_factor r] then extrapolates inward as A * r / (r_s - r).
    Returns (value, per-exclusion add-backs).
    """
    if not exclusions:
        return float(np.dot(weights, f)), []
    m = exclusion_weights(domain, exclusions)
    total = float(np.dot(weights * m, f))
    addbacks = []
    for center, r_excl in exclusions:
        rho = domain.dist_to(center)
        r_s = shell_factor * r_excl
        frac_out = np.clip(0.5 + (r_s - rho) / domain.h, 0.0, 1.0)
        frac_in = np.clip(0.5 + (r_excl - rho) / domain.h, 0.0, 1.0)
        shell = float(np.dot(domain.volume * (frac_out - frac_in), f))
        add = shell * r_excl / (r_s - r_excl)
        addbacks.append(add)
        total += add
    return total, addbacks


@dataclass
class IntegralReport:
    value: float
    raw_covered: float
    completed: float
    n_uncovered: int
    addbacks: list


def _energy_from_integrand(domain, f, valid, exclusions, completion,
                           weights=None):
    if weights is None:
        weights = domain.volume
    if completion:
        filled, unc = complete_integrand(domain, f, valid)
    else:
        filled = np.where(valid, f, 0.0)
        unc = np.array([], dtype=np.int64)
    raw = float(np.dot(weights, np.where(valid, f, 0.0)))
    value, addbacks = excised_integral(domain, filled, weights, exclusions)
    return IntegralReport(value=value, raw_covered=raw,
                        completed=value - raw - sum(addbacks),
                        n_uncovered=int(unc.size), addbacks=addbacks)


def hessian_energy(u, *, exclusions=(), completion=True, report=False):
    """H(u) = integral of |Delta u|^2 over the domain."""
    dom = u.domain
    lapsq, valid = _stencil.laplacian_normsq(_values(u), dom)
    rep = _energy_from_integrand(dom, lapsq, valid, exclusions, completion)
    return rep if report else rep.value


def grad4_energy(u, *, exclusions=(), completion=True, report=False):
    """Integral of |grad u|^4 (Frobenius norm to the fourth)."""
    dom = u.domain
    g2, valid = _stencil.gradient_normsq(_values(u), dom)
    rep = _energy_from_integrand(dom, g2 * g2, valid, exclusions, completion)
    return rep if report else rep.value


def dirichlet_energy(u, *, exclusions=(), completion=True, report=False):
    """Integral of |grad u|^2."""
    dom = u.domain
    g2, valid = _stencil.gradient_normsq(_values(u), dom)
    rep = _energy_from_integrand(dom, g2, valid, exclusions, completion)
    return rep if report else rep.value


# ---------------------------------------------------------------------------
# monotonicity quantities


def theta_density(u, center, r, *, exclusions=(), lapsq=None, valid=None):
    """Theta(u, x, r) = r^{4-n} * integral of |Delta u|^2 over B_r(x)."""
    dom = u.domain
    if lapsq is None:
        lapsq, valid = _stencil.laplacian_normsq(_values(u), dom)
    w = ball_weights(dom, center, r)
    if not np.all(valid[w > 0]):
        raise StencilOutOfDomain("theta ball touches ring-invalid nodes")
    val, _ = excised_integral(dom, lapsq, w, exclusions)
    return r ** (4 - dom.n) * val


@dataclass
class SigmaParts:
    sigma: float
    theta_term: float
    boundary_term: float
    shell_grad2: float
    shell_radial2: float
    shell_ddr_grad2: float


def sigma_monotone(u, center, r, *, exclusions=(), parts=False,
                   _precomp=None):
    """The almost-monotone frequency-type quantity

        sigma(r) = r^{4-n} int_{B_r} |Delta u|^2
                 + r^{3-n} int_{dB_r} (4|grad u|^2 - 4|du/drho|^2
                                       + r * d/drho |grad u|^2)

    The last shell term differentiates the pointwise field |grad u|^2
    along the radial direction (rhat . grad of it), evaluated on the
    shell by centered differences.
    """
    dom = u.domain
    n = dom.n
    center = np.asarray(center, dtype=np.float64)
    if _precomp is None:
        _precomp = sigma_precompute(u, center)
    lapsq, valid_l, g2, valid_g, rad2, ddr_g2, valid_dd = _precomp

    w_ball = ball_weights(dom, center, r)
    if not np.all(valid_l[w_ball > 0] | (exclusion_weights(
            dom, exclusions)[w_ball > 0] < 1.0)):
        raise StencilOutOfDomain("sigma ball touches ring-invalid nodes")
    theta_int, _ = excised_integral(dom, lapsq, w_ball, exclusions)
    theta_term = r ** (4 - n) * theta_int

    w_shell = shell_weights(dom, center, r)
    sel = w_shell > 0
    if not np.all(valid_g[sel] & valid_dd[sel]):
        raise StencilOutOfDomain("sigma shell touches ring-invalid nodes")
    s_g2 = float(np.dot(w_shell, g2))
    s_rad2 = float(np.dot(w_shell, rad2))
    s_ddr = float(np.dot(w_shell, ddr_g2))
    boundary_term = r ** (3 - n) * (4.0 * s_g2 - 4.0 * s_rad2 + r * s_ddr)

    out = SigmaParts(sigma=theta_term + boundary_term, theta_term=theta_term,
                     boundary_term=boundary_term, shell_grad2=s_g2,
                     shell_radial2=s_rad2, shell_ddr_grad2=s_ddr)
    return out if parts else out.sigma


def sigma_precompute(u, center):
    """Shared fields for sigma at several radii about one center."""
    dom = u.domain
    vals = _values(u)
    center = np.asarray(center, dtype=np.float64)
    lapsq, valid_l = _stencil.laplacian_normsq(vals, dom)
    g2, valid_g = _stencil.gradient_normsq(vals, dom)
    rad2, _ = _stencil.radial_deriv_normsq(vals, dom, center)
    ddr_g2, _ = _stencil.radial_scalar_deriv(g2, dom, center)
    valid_dd = erode_valid(dom, valid_g)
    return lapsq, valid_l, g2, valid_g, rad2, ddr_g2, valid_dd


def sigma_profile(u, center, radii, *, exclusions=(), shell_factor=2.0,
                  parts=False):
    """sigma at several radii in two fused sweeps and O(1) extra memory.

    Matches sigma_monotone up to summation order, but never materializes
    the per-node integrand fields, which matters on the largest domains.
    Restrictions: exclusions must share the sigma center, and every
    shell plus its +-h ring must stay inside the domain (enforced by a
    distance precondition on max(radii)).
    """
    dom = u.domain
    n = dom.n
    center = np.asarray(center, dtype=np.float64)
    radii = [float(r) for r in np.atleast_1d(radii)]
    for c_e, _ in exclusions:
        if float(np.linalg.norm(np.asarray(c_e, dtype=np.float64) - center)) > 1e-12:
            raise ValueError("sigma_profile exclusions must share the center")
    d_bdry = float(dom.spec.signed_distance(center))
    if d_bdry + _stencil_tol(dom) < max(radii) + 1.5 * dom.h:
        raise StencilOutOfDomain(
            "sigma shells plus their stencil ring leave the domain")

    ball_radii = list(radii)
    for _, r_e in exclusions:
        ball_radii += [r_e, shell_factor * r_e]
    ball_sums, s_g2, s_rad2, s_ddr, s_w = _stencil.sigma_scan(
        _values(u), dom, center, np.array(ball_radii), np.array(radii))
    if np.any(s_w <= 0):
        raise RegionEscapesDomain("sigma shell contains no lattice nodes")

    from .fields import sphere_area

    out = []
    nr = len(radii)
    for j, r in enumerate(radii):
        theta_int = ball_sums[j]
        for e, (_, r_e) in enumerate(exclusions):
            s_in = ball_sums[nr + 2 * e]
            s_out = ball_sums[nr + 2 * e + 1]
            theta_int -= s_in
            theta_int += (s_out - s_in) * r_e / (shell_factor * r_e - r_e)
        theta_term = r ** (4 - n) * theta_int
        area = sphere_area(n - 1) * r ** (n - 1)
        scale = area / s_w[j]
        g2_j, rad2_j, ddr_j = (s_g2[j] * scale, s_rad2[j] * scale,
                               s_ddr[j] * scale)
        boundary = r ** (3 - n) * (4.0 * g2_j - 4.0 * rad2_j + r * ddr_j)
        out.append(SigmaParts(sigma=theta_term + boundary,
                              theta_term=theta_term, boundary_term=boundary,
                              shell_grad2=g2_j, shell_radial2=rad2_j,
                              shell_ddr_grad2=ddr_j))
    return out if parts else [p.sigma for p in out]


def _stencil_tol(dom):
    return 1e-9 * dom.h


def caccioppoli_ratio(u, center, R):
    """Ratio of int_{B_{R/2}} |Delta u|^2 to R^-4 int_{B_R} (|u - ubar|^2
    + |u - ubar|^4); 0/0 collapses to 0."""
    dom = u.domain
    vals = _values(u)
    w_outer = ball_weights(dom, center, R)
    V = float(w_outer.sum())
    ubar = (w_outer @ vals) / V
    dev = vals - ubar
    g2 = np.einsum("ic,ic->i", dev, dev)
    rhs_raw = float(np.dot(w_outer, g2 + g2 * g2))
    lapsq, valid = _stencil.laplacian_normsq(vals, dom)
    w_inner = ball_weights(dom, center, R / 2)
    if not np.all(valid[w_inner > 0]):
        raise StencilOutOfDomain("caccioppoli inner ball touches rim")
    lhs = float(np.dot(w_inner, lapsq))
    rhs = rhs_raw / R ** 4
    if lhs < 1e-14 and rhs < 1e-14:
        return 0.0
    return lhs / rhs


# ---------------------------------------------------------------------------
# Euler-Lagrange residual


def el_residual(u, *, region_weights=None):
    """Residual of the discretized Euler-Lagrange system

        R = Delta^2 u + (|Delta u|^2 + 2 div(grad u . Delta u)
            - Delta |grad u|^2) u

    computed wherever the doubled stencil fits, plus the L^2 norm of its
    tangential part (optionally over region_weights).
    Returns (residual (N, k+1), tangential_norm, valid mask).
    """
    dom = u.domain
    vals = _values(u)
    Lu, valid1 = _stencil.laplacian(vals, dom)
    lapsq = np.einsum("ic,ic->i", Lu, Lu)
    L2u, _ = _stencil.laplacian(Lu, dom)
    valid2 = erode_valid(dom, valid1)

    # div(grad u . Delta u): z_a = sum_c d_a u_c Lu_c, then sum_a d_a z_a
    div_z = np.zeros(dom.n_nodes)
    for a in range(dom.n):
        ga, _ = _stencil.gradient_axis(vals, dom, a)
        za = np.einsum("ic,ic->i", ga, Lu)
        dza, _ = _stencil.gradient_axis(za, dom, a)
        div_z += dza

    g2, _ = _stencil.gradient_normsq(vals, dom)
    lap_g2_2d, _ = _stencil.laplacian(g2[:, None], dom)
    lap_g2 = lap_g2_2d[:, 0]

    lam = lapsq + 2.0 * div_z - lap_g2
    R = L2u + lam[:, None] * vals
    R[~valid2] = 0.0

    Rt = R - np.einsum("ic,ic->i", R, vals)[:, None] * vals
    Rt[~valid2] = 0.0
    w = dom.volume if region_weights is None else region_weights
    norm = float(np.sqrt(np.dot(w, np.einsum("ic,ic->i", Rt, Rt))))
    return R, norm, valid2


@dataclass
class EnergyReport:
    """Headline numbers for one field, ready for a JSON run report."""

    hessian: float
    grad4: float
    el_residual_tangential: float
    lam: float = 0.0
    relaxed_L: float | None = None
    h_lambda: float | None = None

    @property
    def q_factor(self):
        return (1.0 + self.lam) / (1.0 - self.lam)

    def to_dict(self):
        return {
            "hessian": self.hessian,
            "grad4": self.grad4,
            "el_residual_tangential": self.el_residual_tangential,
            "lambda": self.lam,
            "q_factor": self.q_factor,
            "relaxed_L": self.relaxed_L,
            "h_lambda": self.h_lambda,
        }


def energy_report(u, *, lam=0.0, relaxed_L=None, exclusions=()):
    """Assemble the standard energy summary for a field.

    relaxed_L is taken as given (the dual solver lives elsewhere); when
    present, h_lambda = hessian + 16 lam sigma_4 relaxed_L.
    """
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda = {lam} outside [0, 1)")
    H = hessian_energy(u, exclusions=exclusions)
    g4 = grad4_energy(u, exclusions=exclusions)
    _, el_norm, _ = el_residual(u)
    hl = None
    if relaxed_L is not None:
        hl = H + 16.0 * lam * sphere_area(4) * relaxed_L
    return EnergyReport(hessian=H, grad4=g4,
                        el_residual_tangential=el_norm, lam=lam,
                        relaxed_L=relaxed_L, h_lambda=hl)


# ---------------------------------------------------------------------------
# sphere projections and the extension operator


@dataclass
class ThresholdConfig:
    """Density thresholds for regularity scans.

    eps0 is calibrated so the radial map's point defect is flagged at
    every tested radius while computed smooth minimizers stay below;
    radii is the default scan schedule.
    """

    eps0: float = 0.8
    radii: tuple = (0.25, 0.375, 0.5)


def _check_center(a, k):
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (k + 1,):
        raise DimensionMismatch("center dimension != target dimension + 1")
    if np.linalg.norm(a) > 0.5 + 1e-12:
        raise InvalidCenter(f"|a| = {np.linalg.norm(a):.4f} > 1/2")
    return a


def project_pi(a, xi):
    """Radial projection from the interior point a back to the sphere:
    Pi_a(xi) = (xi - a)/|xi - a|.  Rows of xi along the last axis."""
    xi = np.asarray(xi, dtype=np.float64)
    a = _check_center(a, xi.shape[-1] - 1)
    d = xi - a
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project_pi_inverse(a, eta):
    """Inverse of project_pi on the sphere.

    Solves |a + t eta| = 1 for the positive root
    t = -(a.eta) + sqrt((a.eta)^2 + 1 - |a|^2), giving the unique point
    of the ray a + t eta on the sphere; composed with project_pi it is
    the identity for |a| <= 1/2.
    """
    eta = np.asarray(eta, dtype=np.float64)
    a = _check_center(a, eta.shape[-1] - 1)
    ae = eta @ a
    t = -ae + np.sqrt(ae * ae + 1.0 - float(a @ a))
    return a + t[..., None] * eta


def extension_centers(k, m):
    """m low-discrepancy projection centers in the ball of radius 1/2.

    Halton points in the cube are rejected to the ball, so the sequence
    is deterministic for fixed (k, m).
    """
    from scipy.stats import qmc
    eng = qmc.Halton(d=k + 1, scramble=False)
    out = []
    while len(out) < m:
        block = eng.random(4 * m) - 0.5
        r = np.linalg.norm(block, axis=1)
        for row in block[r <= 0.5]:
            out.append(row.copy())
            if len(out) == m:
                break
    return np.array(out)


@dataclass
class ExtensionReport:
    ratio: float
    denominator: float
    constant: float
    centers: np.ndarray
    center_energies: np.ndarray
    skipped: np.ndarray


def extend_to_sphere(v, num_centers=64, *, centers=None):
    """Push a non-unit field onto the sphere with controlled energy.

    Samples projection centers a in the half ball, skips any center the
    field passes within 1e-3 of (the projection would blow up), picks
    the a0 whose renormalized shift (v - a0)/|v - a0| has the least
    Hessian energy, and returns w = Pi_{a0}^{-1}(Pi_{a0}(v)): unit-norm
    everywhere and equal to v wherever v was already unit, boundary
    layers included.  Returns (w, a0, report) where report carries the
    measured ratio H(w) / (H(v) + grad4(v)) and per-center energies.
    """
    dom = v.domain
    vals = np.ascontiguousarray(v.values, dtype=np.float64)
    k = vals.shape[1] - 1
    if centers is None:
        centers = extension_centers(k, num_centers)
    else:
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    lapsq, valid_l = _stencil.laplacian_normsq(vals, dom)
    g2, valid_g = _stencil.gradient_normsq(vals, dom)
    den_rep = _energy_from_integrand(dom, lapsq + g2 * g2,
                                     valid_l & valid_g, (), True)
    denominator = den_rep.value

    energies = np.full(len(centers), np.nan)
    skipped = np.zeros(len(centers), dtype=bool)
    best = None
    for j, a in enumerate(centers):
        a = _check_center(a, k)
        dist = np.linalg.norm(vals - a, axis=1)
        if float(dist.min()) < 1e-3:
            skipped[j] = True
            continue
        shifted = (vals - a) / dist[:, None]
        lap_s, val_s = _stencil.laplacian_normsq(shifted, dom)
        e = _energy_from_integrand(dom, lap_s, val_s, (), True).value
        energies[j] = e
        if best is None or e < energies[best]:
            best = j
    if best is None:
        raise AllCentersDegenerate(
            f"the field passes within 1e-3 of all {len(centers)} centers")
    a0 = centers[best]
    unit = np.abs(np.linalg.norm(vals, axis=1) - 1.0) <= UNIT_ATOL
    w_vals = project_pi_inverse(a0, project_pi(a0, vals))
    w_vals = renormalize(w_vals)
    w_vals[unit] = vals[unit]
    w = SphereField(dom, w_vals, {"kind": "extension",
                                  "center": a0.tolist()})
    lap_w, val_w = _stencil.laplacian_normsq(w_vals, dom)
    hw = _energy_from_integrand(dom, lap_w, val_w, (), True).value
    ratio = hw / denominator if denominator > 0 else 0.0
    norms = np.linalg.norm(vals, axis=1)
    if float(norms.min()) >= 1.0 - UNIT_ATOL:
        cases = ("outer",)
    elif float(norms.max()) <= 1.0 + UNIT_ATOL:
        cases = ("inner",)
    else:
        cases = ("outer", "inner")
    try:
        const = max(extension_constant(k, c) for c in cases)
    except ValueError:
        const = float("nan")    # no stated bound covers this case
    rep = ExtensionReport(ratio=ratio, denominator=denominator,
                          constant=const, centers=centers,
                          center_energies=energies, skipped=skipped)
    return w, a0, rep


def extension_constant(k, case):
    """Averaging constant of the extension argument.

    case "outer" applies when |v| >= 1 pointwise, "inner" when
    |v| <= 1; mixed fields are covered by the larger of the two.
    """
    sk = sphere_area(k)
    if case == "outer":
        return (16.0 / 9.0) * sk / (k + 1)
    if case == "inner":
        if k <= 3:
            raise ValueError("inner-case constant needs k > 3")
        return (1.5) ** (k - 3) * sk / (k - 3)
    raise ValueError(f"unknown case {case!r}")
