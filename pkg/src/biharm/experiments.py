"""Experiment drivers behind the command-line subcommands.

Each run_* function builds its domain and fields from a validated
configuration dict, runs the checks for that experiment, optionally
persists fields, traces, and figures to an output directory, and
returns a JSON-ready report.  A report's checks carry one of four
statuses: pass, fail, unresolved (the configuration cannot decide the
check, e.g. resolution too coarse), and flagged (a soft expectation
failed; listed but not fatal).  The run as a whole fails only on fail.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .config import TOLERANCES
from .energy import (ThresholdConfig, caccioppoli_ratio, grad4_energy,
                     hessian_energy, sigma_monotone, sigma_precompute,
                     sigma_profile, theta_density)
from .errors import (AmbiguousDegree, CenterOnNode, RegionEscapesDomain,
                     StencilOutOfDomain)
from .fieldfile import _atomic_write, read_field, write_field
from .fields import (SphereField, dumbbell_boundary_data,
                     dumbbell_competitor, perturb_tangent, radial_map,
                     renormalize, sphere_area, wedge)
from .lattice import Annulus, Ball, Box, Dumbbell, build_domain, spec_from_dict
from .optimize import MinimizeOptions, energy_trace_audit, minimize_relaxed
from .topology import (Singularity, SingularitySet, d_field,
                       detect_singularities, flux_degree, minimal_connection,
                       relaxed_L_dual, slice_coverage)

SIGMA4 = sphere_area(4)


def _rel_err(value, target):
    return abs(value - target) / abs(target)


def _check(name, ok, *, value=None, target=None, tol=None, note=""):
    row = {"name": name, "status": "pass" if ok else "fail"}
    if value is not None:
        row["value"] = value
    if target is not None:
        row["target"] = target
    if tol is not None:
        row["tol"] = tol
    if note:
        row["note"] = note
    return row


def _unresolved(name, note):
    return {"name": name, "status": "unresolved", "note": note}


def _flagged(name, **kw):
    return {"name": name, "status": "flagged", **kw}


def _report(cfg, t0, checks, **extra):
    status = "fail" if any(c["status"] == "fail" for c in checks) else "pass"
    rep = {"experiment": cfg["experiment"], "config": cfg,
           "version": __version__, "tolerances_version": TOLERANCES["version"],
           "seed": cfg.get("seed", 0), "h": cfg.get("h"),
           "wall_time": round(time.time() - t0, 3),
           "status": status, "checks": checks}
    rep.update(extra)
    return rep


def write_report(report, out_dir, name="report.json"):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    body = json.dumps(report, indent=2, sort_keys=False, default=float)
    _atomic_write(path, lambda fh: fh.write(body.encode("utf-8")))
    return path


def _build_shape(cfg, default_spec):
    spec = spec_from_dict(cfg["shape"]) if "shape" in cfg else default_spec
    return build_domain(spec, cfg["h"], offset=cfg.get("offset", 0.0))


def _figpath(out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


# ---------------------------------------------------------------------------
# validate


def _wedge_trials(seed, count=100_000, dim=5, batch=20_000):
    """Count violations of |a^b^c^d| <= (1/16)(sum of squares)^2."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    bad = 0
    done = 0
    while done < count:
        m = min(batch, count - done)
        vs = rng.standard_normal((4, m, dim))
        lhs = np.linalg.norm(wedge(*vs), axis=-1)
        rhs = np.sum(vs * vs, axis=(0, 2)) ** 2 / 16.0
        ratio = lhs / np.maximum(rhs, 1e-300)
        worst = max(worst, float(ratio.max()))
        bad += int(np.sum(lhs > rhs * (1.0 + 1e-12)))
        done += m
    return bad, worst


def _dfield_bound_trials(seed, n_fields, h):
    """Nodewise |D(u)| <= (1/16)|grad u|^4 over random smooth unit fields."""
    rng = np.random.default_rng(seed)
    dom = build_domain(Ball((0.0,) * 5, 1.0), h, offset=0.5)
    x = dom.coords()
    from . import _stencil
    bad = 0
    worst = 0.0
    for _ in range(n_fields):
        vals = np.zeros((dom.n_nodes, 5))
        vals[:, 4] = 2.0            # bias keeps norms away from zero
        for _ in range(6):
            kvec = rng.standard_normal(5) * rng.uniform(0.5, 2.0)
            e = rng.standard_normal(5)
            vals += np.cos(x @ kvec + rng.uniform(0, 2 * np.pi))[:, None] * e
        u = SphereField(dom, renormalize(vals))
        D, dval = d_field(u, with_mask=True)
        g2, gval = _stencil.gradient_normsq(u.values, dom)
        m = dval & gval
        lhs = np.linalg.norm(D[m], axis=1)
        rhs = g2[m] ** 2 / 16.0
        bad += int(np.sum(lhs > rhs * (1.0 + 1e-9) + 1e-15))
        r = lhs / np.maximum(rhs, 1e-300)
        worst = max(worst, float(r.max()))
    return bad, worst


def _duality_trials(seed, sets=3):
    """Matching length vs dual LP value on seeded balanced point sets."""
    rng = np.random.default_rng(seed)
    dom = build_domain(Box((-0.5,) * 3, (0.5,) * 3), 1 / 8)
    worst = 0.0
    for _ in range(sets):
        npairs = int(rng.integers(1, 4))
        pts = []
        for j in range(2 * npairs):
            node = int(rng.integers(0, dom.n_nodes))
            pts.append((dom.coords(np.array([node]))[0], 1 if j % 2 else -1))
        s = SingularitySet([Singularity(position=p, degree=d, residual=0.0)
                            for p, d in pts])
        if s.total_degree != 0:
            continue
        lc, _ = minimal_connection(s, dom)
        ld, _ = relaxed_L_dual(s, dom)
        worst = max(worst, abs(lc - ld))
    return worst


def run_validate(cfg, out=None):
    """Analytic-oracle suite: radial-map energies, density and
    monotonicity oracles, algebraic inequalities, duality equality."""
    t0 = time.time()
    h = cfg["h"]
    checks = []
    tol = TOLERANCES

    # radial map on the half annulus: H = 8 sigma4 and H = grad4
    if h <= 1 / 12 + 1e-12:
        dom = build_domain(Annulus((0.0,) * 5, 0.5, 1.0), h)
        u = radial_map(dom)
        H = hessian_energy(u)
        g4 = grad4_energy(u)
        checks.append(_check(
            "annulus_hessian_8sigma4",
            _rel_err(H, 8 * SIGMA4) <= tol["annulus_energy_rel"],
            value=H, target=8 * SIGMA4, tol=tol["annulus_energy_rel"]))
        checks.append(_check(
            "annulus_grad4_equality",
            abs(H - g4) / H <= tol["hessian_grad4_rel"],
            value=g4, target=H, tol=tol["hessian_grad4_rel"]))
        del dom, u
    else:
        note = f"h = {h:g} too coarse for the annulus oracle (needs <= 1/12)"
        checks.append(_unresolved("annulus_hessian_8sigma4", note))
        checks.append(_unresolved("annulus_grad4_equality", note))

    # radial map on the ball: excised core, density, monotonicity
    h_ball = max(h, 1 / 12)
    dom = build_domain(Ball((0.0,) * 5, 1.0), h_ball, offset=0.5)
    u = radial_map(dom)
    center = (0.0,) * 5
    if h_ball <= 1 / 10 + 1e-12:
        ex = [(center, 2 * h_ball)]
        Hb = hessian_energy(u, exclusions=ex)
        checks.append(_check(
            "ball_hessian_16sigma4",
            _rel_err(Hb, 16 * SIGMA4) <= tol["annulus_energy_rel"],
            value=Hb, target=16 * SIGMA4, tol=tol["annulus_energy_rel"],
            note=f"core ball of radius 2h excised and added back (h={h_ball:g})"))

        thetas = {r: theta_density(u, center, r, exclusions=ex)
                  for r in (0.25, 0.5)}
        ok = all(_rel_err(v, 16 * SIGMA4) <= 0.08 for v in thetas.values())
        checks.append(_check("theta_radial_16sigma4", ok,
                             value=thetas, target=16 * SIGMA4, tol=0.08))

        radii = [0.3, 0.5, 0.7]
        sig = [float(s) for s in sigma_profile(u, center, radii, exclusions=ex)]
        ok = all(_rel_err(s, 24 * SIGMA4) <= tol["sigma_value_rel"]
                 for s in sig)
        spread = (max(sig) - min(sig)) / min(sig)
        checks.append(_check(
            "sigma_radial_24sigma4", ok,
            value=sig, target=24 * SIGMA4, tol=tol["sigma_value_rel"]))
        checks.append(_check(
            "sigma_radial_spread", spread <= tol["sigma_spread_rel"],
            value=spread, tol=tol["sigma_spread_rel"]))
        if out is not None and cfg.get("figures", True):
            from .figures import sigma_figure
            sigma_figure([{"center": list(center), "radii": radii,
                           "sigma": list(sig)}],
                         _figpath(out, "sigma_radial.png"))

        cacc = {R: caccioppoli_ratio(u, center, R) for R in (0.5, 0.25)}
        checks.append(_check(
            "caccioppoli_radial_finite",
            all(np.isfinite(v) and v > 0 for v in cacc.values()),
            value=cacc, note="ratio recorded; no universal constant asserted"))
    else:
        note = f"h = {h_ball:g} too coarse for ball oracles (needs <= 1/10)"
        for name in ("ball_hessian_16sigma4", "theta_radial_16sigma4",
                     "sigma_radial_24sigma4", "sigma_radial_spread",
                     "caccioppoli_radial_finite"):
            checks.append(_unresolved(name, note))
    del dom, u

    # pointwise stencil order: discrete Laplacian of sin(k.x) vs -|k|^2 sin
    if h <= 1 / 8 + 1e-12:
        from . import _stencil
        kvec = np.array([1.0, 1.7, 0.6])
        errs = []
        for hh in (h, h / 2):
            d3 = build_domain(Box((-1.0,) * 3, (1.0,) * 3), hh)
            phase = d3.coords() @ kvec
            vals = np.stack([np.sin(phase), np.cos(phase)], axis=1)
            lap, valid = _stencil.laplacian(vals, d3)
            exact = -float(kvec @ kvec) * vals
            errs.append(float(np.abs((lap - exact)[valid]).max()))
            del d3
        order = float(np.log2(errs[0] / errs[1])) if errs[1] > 0 else np.inf
        checks.append(_check("laplacian_convergence_order", order >= 1.9,
                             value=order, target=2.0,
                             note=f"max errors {errs[0]:.3e} -> {errs[1]:.3e}"))
    else:
        checks.append(_unresolved(
            "laplacian_convergence_order",
            f"h = {h:g} too coarse to estimate an order (needs <= 1/8)"))

    # algebraic inequalities and duality, resolution-independent
    bad, worst = _wedge_trials(cfg.get("seed", 0))
    checks.append(_check("wedge_inequality_trials", bad == 0,
                         value={"violations": bad, "worst_ratio": worst},
                         note="10^5 random quadruples"))
    bad, worst = _dfield_bound_trials(cfg.get("seed", 0), 3, 1 / 6)
    checks.append(_check("dfield_bound_trials", bad == 0,
                         value={"violations": bad, "worst_ratio": worst},
                         note="3 random smooth unit fields, h=1/6"))
    gap = _duality_trials(cfg.get("seed", 0))
    checks.append(_check("duality_gap", gap <= tol["duality_gap_abs"],
                         value=gap, tol=tol["duality_gap_abs"]))

    return _report(cfg, t0, checks)


# ---------------------------------------------------------------------------
# minimize


def _boundary_field(cfg, dom):
    kind = cfg.get("boundary", "radial")
    if kind == "radial":
        return radial_map(dom)
    psi, Psi = dumbbell_boundary_data(dom)
    return Psi


def _minimize_options(cfg):
    opts = dict(cfg.get("minimize", {}))
    opts["lam"] = cfg.get("lambda", 0.0)
    opts["seed"] = cfg.get("seed", 0)
    return MinimizeOptions(**opts)


def run_minimize(cfg, out=None):
    """Descend from the configured start field and report the run."""
    t0 = time.time()
    dom = _build_shape(cfg, Ball((0.0,) * 5, 1.0))
    u0 = _boundary_field(cfg, dom)
    amp = cfg.get("amplitude", 0.0)
    if amp > 0:
        u0 = perturb_tangent(u0, amp, seed=cfg.get("seed", 0))
    opts = _minimize_options(cfg)
    u, run = minimize_relaxed(u0, opts)

    checks = [_check("descent_trace_audit", energy_trace_audit(run),
                     note="monotone segments, positive steps")]
    if run.line_search_failed:
        checks.append(_flagged("line_search", note="stopped on step underflow"))

    thr = ThresholdConfig(**cfg.get("thresholds", {}))
    theta = {}
    center = getattr(dom.spec, "center", (0.0,) * dom.n)
    for r in thr.radii:
        try:
            theta[r] = theta_density(u, center, r)
        except (StencilOutOfDomain, CenterOnNode, RegionEscapesDomain):
            theta[r] = None
    flags = {str(r): (None if v is None else bool(v >= thr.eps0 ** 2))
             for r, v in theta.items()}
    checks.append({"name": "theta_vs_eps0", "status": "pass",
                   "value": {str(r): v for r, v in theta.items()},
                   "target": thr.eps0 ** 2, "flags": flags,
                   "note": "density flags reported, not asserted"})

    sweep = None
    if cfg.get("lambda_sweep"):
        sweep = []
        for lam in cfg["lambda_sweep"]:
            o = replace(_minimize_options(cfg), lam=lam)
            _, r = minimize_relaxed(u0, o)
            sweep.append({"lambda": lam,
                          "L": r.final_energy.relaxed_L,
                          "H": r.final_energy.hessian,
                          "h_lambda": r.final_energy.h_lambda})
        Ls = [s["L"] for s in sweep if s["L"] is not None]
        if len(Ls) == len(sweep) and any(b > a + 1e-9 for a, b in
                                         zip(Ls, Ls[1:])):
            checks.append(_flagged("lambda_sweep_L_monotone", value=Ls,
                                   note="L(u_lambda) increased along the sweep"))
        else:
            checks.append(_check("lambda_sweep_L_monotone", True, value=Ls))

    if out is not None:
        os.makedirs(out, exist_ok=True)
        write_field(os.path.join(out, "final.bhf"), u)
        run.trace_csv(os.path.join(out, "trace.csv"))
        if cfg.get("figures", True):
            from .figures import field_slice_figure, trace_figure
            if run.trace:
                trace_figure(run.trace, _figpath(out, "trace.png"))
            field_slice_figure(u, _figpath(out, "final_slice.png"))

    extra = {"run": run.to_dict()}
    if sweep is not None:
        extra["lambda_sweep"] = sweep
    return _report(cfg, t0, checks, **extra)


# ---------------------------------------------------------------------------
# topology


def run_topology(cfg, out=None):
    """Detect singularities and compare both connection-length routes."""
    t0 = time.time()
    if cfg.get("field"):
        u = read_field(cfg["field"])
        dom = u.domain
    else:
        dom = _build_shape(cfg, Dumbbell())
        _, u = dumbbell_boundary_data(dom)

    sing = detect_singularities(u)
    checks = [_check("total_degree_zero", sing.total_degree == 0,
                     value=sing.total_degree)]
    gap = None
    L_match = None
    L_dual = None
    pairing = []
    if sing.total_degree == 0 and len(sing) > 0:
        L_match, pairing = minimal_connection(sing, dom)
        L_dual, _ = relaxed_L_dual(sing, dom)
        gap = abs(L_match - L_dual)
        checks.append(_check("duality_gap", gap <= TOLERANCES["duality_gap_abs"],
                             value=gap, tol=TOLERANCES["duality_gap_abs"]))
    if isinstance(dom.spec, Dumbbell) and not cfg.get("field"):
        L_neck = dom.spec.neck_half_length
        degs = sorted(p.degree for p in sing)
        checks.append(_check("dipole_detected", degs == [-1, 1], value=degs))
        if degs == [-1, 1]:
            pos_err = max(
                float(np.linalg.norm(np.asarray(p.position)
                                     - np.sign(p.degree) * L_neck
                                     * np.eye(5)[4])) for p in sing)
            checks.append(_check("cores_near_cap_centers", pos_err <= 0.3,
                                 value=pos_err, tol=0.3))
        if L_match is not None:
            # one dipole: the matching length is the geodesic between the
            # cores, axial here, so it tracks their euclidean separation
            pts = sorted(sing, key=lambda p: p.degree)
            euclid = float(np.linalg.norm(
                np.asarray(pts[0].position) - np.asarray(pts[1].position)))
            checks.append(_check(
                "connection_is_neck_geodesic",
                L_match >= 2 * L_neck - 2 * dom.h
                and abs(L_match - euclid) <= 3 * dom.h,
                value=L_match, target=euclid, tol=3 * dom.h))
        dcache = d_field(u)
        fluxes = {}
        unresolved_cores = 0
        for p in sing:
            row = None
            for rr in (0.7, 0.5):
                try:
                    dflux, res = flux_degree(u, p.position, rr, d=dcache)
                    row = {"deg": dflux, "residual": res, "r": rr}
                    break
                except AmbiguousDegree:
                    continue
            if row is None:
                unresolved_cores += 1
            else:
                fluxes[f"{p.degree:+d}"] = row
        mismatch = any(v["deg"] != int(k) for k, v in fluxes.items())
        if mismatch:
            checks.append(_check("flux_degree_consistent", False,
                                 value=fluxes))
        elif unresolved_cores:
            checks.append(_flagged(
                "flux_degree_consistent", value=fluxes,
                note=f"{unresolved_cores} cores aliased at every test radius"))
        else:
            checks.append(_check("flux_degree_consistent", True,
                                 value=fluxes))

    if out is not None and cfg.get("figures", True) and len(sing) > 0:
        from .figures import field_slice_figure, positions_figure
        positions_figure(list(sing), _figpath(out, "singularities.png"),
                         axes=(dom.n - 1, 0), pairing=pairing)
        field_slice_figure(u, _figpath(out, "field_slice.png"))

    return _report(cfg, t0, checks,
                   singularities=sing.to_dict(),
                   connection={"matching": L_match, "dual": L_dual,
                               "gap": gap})


# ---------------------------------------------------------------------------
# monotonicity


def run_monotonicity(cfg, out=None):
    """sigma(x, r) profiles at seeded centers with a monotonicity verdict."""
    t0 = time.time()
    if cfg.get("field"):
        u = read_field(cfg["field"])
        dom = u.domain
    else:
        dom = _build_shape(cfg, Ball((0.0,) * 5, 1.0))
        u = _boundary_field(cfg, dom)
    if "thresholds" in cfg and "radii" in cfg["thresholds"]:
        radii = sorted(float(r) for r in cfg["thresholds"]["radii"])
    else:
        radii = [0.3, 0.5, 0.7]
    # a sigma ball narrower than 4 cells is all excision and add-back
    dropped = [r for r in radii if r < 4 * dom.h]
    radii = [r for r in radii if r >= 4 * dom.h]
    rng = np.random.default_rng(cfg.get("seed", 0))

    center0 = np.asarray(getattr(dom.spec, "center", (0.0,) * dom.n),
                         dtype=np.float64)
    centers = [center0]
    for _ in range(int(cfg.get("centers", 5)) - 1):
        v = rng.standard_normal(dom.n)
        v *= rng.uniform(0.0, 0.15) / np.linalg.norm(v)
        centers.append(center0 + v)

    # singular fields need their core excised from every ball integral
    excl = []
    if u.meta.get("kind") == "radial":
        excl = [(tuple(center0), 2 * dom.h)]

    slack = TOLERANCES["monotone_slack_rel"] * max(1.0, 16.0 * dom.h)
    profiles = []
    worst_drop = 0.0
    for c in centers:
        try:
            pre = sigma_precompute(u, c)
            sig = [float(sigma_monotone(u, c, r, exclusions=excl,
                                        _precomp=pre))
                   for r in radii]
        except (StencilOutOfDomain, RegionEscapesDomain, CenterOnNode):
            continue
        profiles.append({"center": [float(x) for x in c],
                         "radii": radii, "sigma": sig})
        for a, b in zip(sig, sig[1:]):
            if a > 0:
                worst_drop = max(worst_drop, (a - b) / abs(a))
    note = f"{len(profiles)} centers, radii {radii}"
    if dropped:
        note += f"; dropped {dropped} (< 4h)"
    if len(radii) < 2:
        checks = [_unresolved(
            "sigma_nondecreasing",
            f"fewer than two radii resolvable at h = {dom.h:g}")]
    else:
        checks = [_check("sigma_nondecreasing", worst_drop <= slack,
                         value=worst_drop, tol=slack, note=note)]

    if out is not None and cfg.get("figures", True) and profiles:
        from .figures import sigma_figure
        sigma_figure(profiles, _figpath(out, "sigma_profiles.png"))

    return _report(cfg, t0, checks, profiles=profiles)


# ---------------------------------------------------------------------------
# dumbbell


def run_dumbbell(cfg, out=None):
    """Neck-length independence, slice inequality, and the gap verdict."""
    t0 = time.time()
    h = cfg["h"]
    necks = [float(L) for L in cfg.get("neck_lengths", [2.0, 4.0])]
    checks = []
    sections = {}
    energies = {}
    for L in necks:
        dom = build_domain(Dumbbell(neck_half_length=L), h)
        psi, Psi = dumbbell_boundary_data(dom)
        cores = [tuple(0.0 if a < 4 else s * L for a in range(5))
                 for s in (1.0, -1.0)]
        ex = [(c, 2 * h) for c in cores]
        H = hessian_energy(Psi, exclusions=ex)
        energies[L] = H
        bound = 32.0 * SIGMA4 * L
        sec = {"H_psi": H, "bound_32_sigma4_L": bound,
               "gap_established": bool(bound > H)}

        sing = detect_singularities(Psi)
        degs = sorted(p.degree for p in sing)
        checks.append(_check(f"detection_L{L:g}", degs == [-1, 1],
                             value=degs))
        if degs == [-1, 1]:
            Lc, pairing = minimal_connection(sing, dom)
            sec["connection"] = Lc
            checks.append(_check(f"connection_spans_neck_L{L:g}",
                                 Lc >= 2 * L - 1e-9, value=Lc, target=2 * L))

        w = dumbbell_competitor(dom)
        sec["H_competitor"] = hessian_energy(w)
        cov = slice_coverage(w, axis=4)
        inner = {c: v for c, v in cov.items() if abs(c) <= L - 2 * h}
        low = min(inner.values()) / SIGMA4 if inner else 0.0
        sec["slice_min_over_sigma4"] = low
        checks.append(_check(
            f"slice_inequality_L{L:g}",
            low >= TOLERANCES["slice_coverage_min"],
            value=low, tol=TOLERANCES["slice_coverage_min"],
            note=f"{len(inner)} interior slices"))
        sections[f"L={L:g}"] = sec

        if out is not None and cfg.get("figures", True):
            from .figures import (coverage_figure, field_slice_figure,
                                  positions_figure)
            coverage_figure(inner, _figpath(out, f"slices_L{L:g}.png"))
            field_slice_figure(Psi, _figpath(out, f"dipole_L{L:g}.png"))
            if degs == [-1, 1]:
                positions_figure(list(sing),
                                 _figpath(out, f"cores_L{L:g}.png"),
                                 pairing=pairing)
        del dom, psi, Psi, w
    if len(necks) >= 2:
        vals = [energies[L] for L in necks]
        spread = (max(vals) - min(vals)) / min(vals)
        checks.append(_check(
            "psi_energy_neck_independent",
            spread <= TOLERANCES["dumbbell_energy_rel"],
            value=spread, tol=TOLERANCES["dumbbell_energy_rel"]))
    L_star = min(energies.values()) / (32.0 * SIGMA4)
    return _report(cfg, t0, checks, sections=sections,
                   gap_threshold_L=L_star)
