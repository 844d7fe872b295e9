"""Figures written next to the CLI's tables (Agg backend, PNG files)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def bench_figure(rows, fit, path):
    """Seconds against the varied quantity, with the least-squares line."""
    axis = rows[0]["axis"] if rows else "active_bins"
    key = "pixels" if axis == "pixels" else "active_bins"
    x = np.array([r[key] for r in rows], float)
    y = np.array([r["seconds"] for r in rows], float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(x, y, "o", color="C0", label="measured")
        if len(x) > 1:
            xs = np.linspace(x.min(), x.max(), 50)
            ax.plot(xs, fit["slope"] * xs + fit["intercept"], "-", color="C1",
                    label=f"fit, R$^2$ = {fit['r2']:.3f}")
        ax.set_xlabel("pixels" if axis == "pixels" else "active bins")
        ax.set_ylabel("reconstruction time (s)")
        ax.legend(frameon=False)
        return _save(fig, path)


def sweep_figure(rows, path, value="recall"):
    """Heat map of ``value`` over photons per pixel and SBR."""
    ppp = sorted({r["photons_per_pixel"] for r in rows})
    sbr = sorted({r["sbr"] for r in rows})
    grid = np.full((len(sbr), len(ppp)), np.nan)
    for r in rows:
        grid[sbr.index(r["sbr"]), ppp.index(r["photons_per_pixel"])] = r[value]
    with plt.rc_context(STYLE | {"axes.grid": False}):
        fig, ax = plt.subplots()
        im = ax.imshow(grid, origin="lower", vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(ppp)), [f"{v:g}" for v in ppp])
        ax.set_yticks(range(len(sbr)), [f"{v:g}" for v in sbr])
        ax.set_xlabel("photons per pixel")
        ax.set_ylabel("SBR")
        for (i, j), v in np.ndenumerate(grid):
            if np.isfinite(v):
                ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="w", fontsize=7)
        fig.colorbar(im, ax=ax, label=value)
        return _save(fig, path)


def depth_figure(cloud, sensor, path):
    """Nearest-surface depth per fine pixel and the nll history if given."""
    nf_r, nf_c = sensor.fine_shape
    depth = np.full((nf_r, nf_c), np.nan)
    if len(cloud):
        fi, fj = sensor.fine_index(cloud.positions, check=False)
        ok = (fi >= 0) & (fi < nf_r) & (fj >= 0) & (fj < nf_c)
        z = cloud.positions[ok, 2]
        order = np.argsort(-z, kind="stable")       # nearest written last
        depth[fi[ok][order], fj[ok][order]] = z[order]
    with plt.rc_context(STYLE | {"axes.grid": False}):
        fig, ax = plt.subplots()
        im = ax.imshow(depth, cmap="turbo")
        ax.set_xlabel("column")
        ax.set_ylabel("row")
        fig.colorbar(im, ax=ax, label="depth (m)")
        return _save(fig, path)
