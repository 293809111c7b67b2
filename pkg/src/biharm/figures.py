"""Figure rendering for run reports.

Every renderer takes the data it plots plus an output path, writes one
PNG, and returns the path.  All figures use the Agg backend so runs
work headless.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .fields import sphere_area

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
FIG_W = 6.4
DPI = 150


def _new_axes(width=FIG_W):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    return fig, ax


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def trace_figure(trace, path):
    """Energy columns of a descent trace against iteration count."""
    fig, ax = _new_axes()
    if trace:
        its = [row["iter"] for row in trace]
        ax.plot(its, [row["H"] for row in trace], label="H", lw=1.5)
        ax.plot(its, [row["surrogate"] for row in trace],
                label="surrogate", lw=1.0, ls="--")
        if "h_lambda" in trace[0]:
            ax.plot(its, [row["h_lambda"] for row in trace],
                    label="H_lambda", lw=1.0)
        lo = min(row["H"] for row in trace)
        if lo > 0:
            ax.set_yscale("log")
        ax.legend(frameon=False)
    ax.set_xlabel("iteration")
    ax.set_ylabel("energy")
    return _finish(fig, path)


def sigma_figure(profiles, path):
    """sigma(r) in units of sigma_4, one line per center."""
    s4 = sphere_area(4)
    fig, ax = _new_axes()
    for prof in profiles:
        r = np.asarray(prof["radii"])
        ax.plot(r, np.asarray(prof["sigma"]) / s4, marker=".",
                label=str(np.round(prof["center"], 3)))
    ax.axhline(24.0, color="k", lw=0.8, ls=":")
    ax.set_xlabel("r")
    ax.set_ylabel("sigma / sigma_4")
    if len(profiles) <= 6:
        ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def coverage_figure(coverage, path):
    """Per-slice Jacobian mass against the single-bubble value."""
    s4 = sphere_area(4)
    fig, ax = _new_axes()
    c = sorted(coverage)
    ax.plot(c, [coverage[x] / s4 for x in c], marker=".")
    ax.axhline(1.0, color="k", lw=0.8, ls=":")
    ax.set_xlabel("slice coordinate")
    ax.set_ylabel("slice integral / sigma_4")
    return _finish(fig, path)


def _plane_grid(field, axes, fixed=None):
    """Gather one 2-axis plane of node values as a dense masked grid."""
    dom = field.domain
    a, b = axes
    ext = np.asarray(dom.extents, dtype=np.int64)
    if fixed is None:
        fixed = ext // 2
    ia = np.arange(ext[a])
    ib = np.arange(ext[b])
    multi = np.tile(np.asarray(fixed, dtype=np.int64), (ia.size, ib.size, 1))
    multi[..., a] = ia[:, None]
    multi[..., b] = ib[None, :]
    flat = multi.reshape(-1, dom.n) @ dom.strides
    node = dom.index_map[flat].reshape(ia.size, ib.size)
    xa = dom.origin[a] + (ia + dom.offset[a]) * dom.h
    xb = dom.origin[b] + (ib + dom.offset[b]) * dom.h
    return node, xa, xb


def field_slice_figure(field, path, *, axes=None, component=-1):
    """Heatmap of one component on the central plane of two axes."""
    dom = field.domain
    if axes is None:
        axes = (dom.n - 1, 0)
    node, xa, xb = _plane_grid(field, axes)
    vals = np.where(node >= 0,
                    field.values[np.maximum(node, 0), component], np.nan)
    fig, ax = _new_axes()
    pm = ax.pcolormesh(xa, xb, vals.T, shading="nearest",
                       cmap="RdBu_r", vmin=-1, vmax=1)
    fig.colorbar(pm, ax=ax, label=f"u[{component}]")
    ax.set_xlabel(f"x{axes[0] + 1}")
    ax.set_ylabel(f"x{axes[1] + 1}")
    ax.set_aspect("equal")
    return _finish(fig, path)


def positions_figure(points, path, *, axes=(4, 0), pairing=None):
    """Detected singularities in a coordinate plane, signed by degree."""
    fig, ax = _new_axes()
    a, b = axes
    if pairing:
        for p, q, _ in pairing:
            ax.plot([p[a], q[a]], [p[b], q[b]], color="0.7", lw=1.0)
    for pt in points:
        pos = np.asarray(pt.position)
        ax.scatter(pos[a], pos[b],
                   s=60, marker="o" if pt.degree > 0 else "s",
                   color="C3" if pt.degree > 0 else "C0", zorder=3)
        ax.annotate(f"{pt.degree:+d}", (pos[a], pos[b]),
                    textcoords="offset points", xytext=(6, 4), fontsize=8)
    ax.set_xlabel(f"x{a + 1}")
    ax.set_ylabel(f"x{b + 1}")
    return _finish(fig, path)
