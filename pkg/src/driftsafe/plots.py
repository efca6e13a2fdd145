"""SVG figures derived from command outputs.

Figures are written with a fixed hash salt and no date so the same data
always produces the same bytes.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle, Ellipse  # noqa: E402

plt.rcParams["svg.hashsalt"] = "driftsafe"


def _svg(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue()


def _ellipse(mean, P, c, **kw) -> Ellipse:
    # position block in (along-track, radial) plot axes
    S = np.asarray(P, dtype=float)[np.ix_([1, 0], [1, 0])]
    w, V = np.linalg.eigh(S)
    w = np.clip(w, 0.0, None)
    ang = np.degrees(np.arctan2(V[1, 1], V[0, 1]))
    return Ellipse((mean[1], mean[0]), 2 * c * np.sqrt(w[1]), 2 * c * np.sqrt(w[0]), angle=ang, **kw)


def trajectory_figure(
    path_xy,
    burns,
    r_kos: float,
    tube=None,
    c: float = 3.0,
    drift=None,
    title: str = "",
) -> bytes:
    """Along-track (horizontal) vs radial (vertical) view.

    Args:
        path_xy: ``(T, 2)`` nominal positions (x radial, y along-track) [m].
        burns: iterable of ``(position, dv, label)``; arrows are scaled for visibility.
        r_kos: keep-out radius [m].
        tube: optional iterable of ``(mean, P)`` dispersion records drawn as c-sigma outlines.
        drift: optional ``(K, T, 2)`` free-drift paths drawn dashed.
    """
    path_xy = np.asarray(path_xy, dtype=float)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    if tube is not None:
        for mean, P in tube:
            ax.add_patch(_ellipse(mean, P, c, fill=False, lw=0.4, color="tab:orange", alpha=0.6))
    if drift is not None:
        for d in np.asarray(drift, dtype=float):
            ax.plot(d[:, 1], d[:, 0], "--", lw=0.7, color="0.5")
    ax.plot(path_xy[:, 1], path_xy[:, 0], "-", lw=1.4, color="tab:blue", label="nominal")
    span = max(np.ptp(path_xy[:, 1]), np.ptp(path_xy[:, 0]), 1.0)
    burns = list(burns)
    dv_max = max([np.linalg.norm(dv) for _, dv, _ in burns] + [1e-12])
    for pos, dv, label in burns:
        s = 0.08 * span / dv_max
        ax.annotate(
            "",
            xy=(pos[1] + s * dv[1], pos[0] + s * dv[0]),
            xytext=(pos[1], pos[0]),
            arrowprops={"arrowstyle": "->", "color": "tab:red", "lw": 1.2},
        )
        ax.text(pos[1], pos[0], f" {label}", fontsize=7, va="bottom")
    ax.add_patch(Circle((0.0, 0.0), r_kos, fill=False, color="k", lw=1.0, label=f"KOS {r_kos:g} m"))
    ax.set_xlabel("along-track y [m]")
    ax.set_ylabel("radial x [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True, lw=0.3)
    ax.legend(loc="best", fontsize=7)
    if title:
        ax.set_title(title)
    return _svg(fig)


def dv_histogram_figure(samples, bins: int = 40, title: str = "Total ΔV") -> bytes:
    samples = np.asarray(samples, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(samples, bins=bins, color="tab:blue", alpha=0.8)
    ax.axvline(samples.mean(), color="k", lw=1.0, label=f"mean {samples.mean():.4f} m/s")
    ax.axvline(np.percentile(samples, 99), color="tab:red", lw=1.0, ls="--", label="p99")
    ax.set_xlabel("ΔV [m/s]")
    ax.set_ylabel("count")
    ax.legend(fontsize=7)
    ax.set_title(title)
    return _svg(fig)


def dv_gaussian_figure(mean: float, std: float, title: str = "Total ΔV (LinCov)") -> bytes:
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.linspace(mean - 4 * std, mean + 4 * std, 400) if std > 0 else np.array([mean - 1e-3, mean, mean + 1e-3])
    pdf = np.exp(-0.5 * ((x - mean) / std) ** 2) / (std * np.sqrt(2 * np.pi)) if std > 0 else np.array([0.0, 1.0, 0.0])
    ax.plot(x, pdf, color="tab:blue")
    ax.axvline(mean, color="k", lw=1.0, label=f"mean {mean:.4f} m/s")
    ax.set_xlabel("ΔV [m/s]")
    ax.set_ylabel("density")
    ax.legend(fontsize=7)
    ax.set_title(title)
    return _svg(fig)


def clearance_figure(taus, clearance, title: str = "Free-drift clearance") -> bytes:
    """Clearance [m] per drift node versus drift time."""
    taus = np.asarray(taus, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, row in enumerate(np.asarray(clearance, dtype=float)):
        ax.plot(taus / 60.0, row, lw=1.0, label=f"node {k}")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("drift time [min]")
    ax.set_ylabel("clearance [m]")
    ax.legend(fontsize=7)
    ax.set_title(title)
    return _svg(fig)
