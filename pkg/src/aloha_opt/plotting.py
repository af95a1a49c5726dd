"""PNG figures rendered from the CSV rows the harness writes."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.8),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}


def _col(rows, name, ok_only=True):
    keep = [r for r in rows if not ok_only or str(r.get("status", "optimal")) in ("optimal", "converged")]
    out = []
    for r in keep:
        try:
            out.append(float(r[name]))
        except (TypeError, ValueError):
            out.append(np.nan)
    return np.array(out)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_mindc(series: dict, path) -> Path:
    """``series``: label -> rows of a network_size sweep."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rows in series.items():
            ax.plot(_col(rows, "value"), _col(rows, "min_delay_constraint"), "o-", label=label)
        ax.set_xlabel("number of nodes")
        ax.set_ylabel("minimum link delay constraint [slots]")
        ax.legend()
        return _save(fig, path)


def plot_tradeoff(series: dict, path) -> Path:
    """Energy against rate utility for each labelled lambda sweep."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rows in series.items():
            style = "s--" if "suboptimal" in label else "o-"
            ax.plot(_col(rows, "rate_utility"), _col(rows, "energy"), style, label=label, ms=4)
        ax.set_xlabel("rate utility  sum log r")
        ax.set_ylabel("energy per slot")
        ax.legend()
        return _save(fig, path)


def plot_ladder(rows, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogx(_col(rows, "value"), _col(rows, "objective"), "o-")
        ax.set_xlabel("end-to-end delay limit Ds [slots]")
        ax.set_ylabel("objective")
        return _save(fig, path)


def plot_trace(rows, path, columns=("objective_err_pct", "p_err_pct", "r_err_pct"), by=None) -> Path:
    """Relative errors (log scale) against iteration; ``by`` splits rows into series."""
    groups = {"": rows} if by is None else {}
    if by is not None:
        for r in rows:
            groups.setdefault(r[by], []).append(r)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for g, grows in groups.items():
            it = _col(grows, "iteration", ok_only=False)
            for c in columns:
                y = _col(grows, c, ok_only=False)
                ax.semilogy(it, np.maximum(y, 1e-6), label=f"{g} {c}".strip(), lw=1)
        ax.axhline(1.0, color="k", lw=0.6, ls=":")
        ax.set_xlabel("iteration")
        ax.set_ylabel("error [%]")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_validation(rows, path) -> Path:
    """Analytic against simulated link delays, dummies on and off."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        lim = 0.0
        for mode, marker in (("dummy_on", "o"), ("dummy_off", "x")):
            sel = [r for r in rows if r["mode"] == mode and r["scope"] == "link" and r["metric"] == "delay"]
            a = _col(sel, "analytic", ok_only=False)
            e = _col(sel, "empirical", ok_only=False)
            if len(a):
                ax.plot(a, e, marker, label=mode.replace("_", " "))
                lim = max(lim, np.nanmax(a), np.nanmax(e))
        ax.plot([0, lim], [0, lim], "k:", lw=0.8)
        ax.set_xlabel("analytic link delay [slots]")
        ax.set_ylabel("simulated link delay [slots]")
        ax.legend()
        return _save(fig, path)


def plot_preset(name: str, preset: dict, csv_paths: dict, out_dir) -> dict:
    """Render the figure(s) of a preset next to its CSV files."""
    from .harness import read_rows

    out_dir = Path(out_dir)
    rows = {k: read_rows(p) for k, p in csv_paths.items()}
    figs = {}
    target = out_dir / f"{name}.png"
    if name == "fig2":
        figs["figure"] = plot_mindc(rows, target)
    elif name == "fig3":
        figs["figure"] = plot_tradeoff(rows, target)
    elif name == "fig4":
        figs["figure"] = plot_trace(rows["trace"], target)
    elif name == "fig5":
        figs["figure"] = plot_tradeoff({k: v for k, v in rows.items() if k != "ds_ladder"}, target)
        figs["ladder"] = plot_ladder(rows["ds_ladder"], out_dir / f"{name}_ladder.png")
    elif name == "fig6":
        figs["figure"] = plot_trace(rows["trace"], target, ("y1_err_pct", "p_err_pct", "utility_err_pct"),
                                    by="method")
    elif name == "fig7":
        figs["figure"] = plot_validation(rows["validate"], target)
    return figs
