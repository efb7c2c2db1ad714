"""Static report figures (Agg backend, files only)."""
import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileio import atomic_write  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
}
COLORS = {"letac": "C0", "pd": "C1", "mpc": "C2", "openloop": "C3"}


def _save(fig, path):
    buf = io.BytesIO()
    # no timestamp or version metadata, so repeated runs give identical files
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    return atomic_write(path, buf.getvalue())


def curves_figure(curves_by_ctrl, path, title=""):
    """Width, force and slip traces for one scenario and seed.

    ``curves_by_ctrl`` maps controller name to a curves dict as produced by
    ``scenarios.run``.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(4, 1, figsize=(7, 8), sharex=True)
        for name, c in curves_by_ctrl.items():
            col = COLORS.get(name)
            ax[0].plot(c["t"], c["p"], color=col, label=name)
            ax[1].plot(c["t"], c["F_normal"], color=col, label=name)
            ax[2].plot(c["t"], c["slip_total"], color=col, label=name)
            ax[3].plot(c["t"], c["c_thresholded"], color=col, label=name)
        first = next(iter(curves_by_ctrl.values()), None)
        if first is not None:
            ax[0].plot(first["t"], first["p_slip_oracle"], "k--", lw=0.8, label="oracle p_slip")
            ax[1].plot(first["t"], first["F_ext"], "k:", lw=0.8, label="tangential load")
        ax[0].set_ylabel("width [mm]")
        ax[1].set_ylabel("force [N]")
        ax[2].set_ylabel("slip [mm]")
        ax[3].set_ylabel("contact area [px]")
        ax[3].set_xlabel("time [s]")
        ax[0].legend(ncol=3, fontsize=8)
        ax[1].legend(ncol=3, fontsize=8)
        if title:
            ax[0].set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def loss_figure(history, path):
    ep = np.array([h["epoch"] for h in history], float)
    tr = np.array([h["train_loss"] for h in history], float)
    va = np.array([h["val_loss"] for h in history], float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ok = np.isfinite(tr)
        ax.semilogy(ep[ok], tr[ok], label="train")
        if np.isfinite(va).any():
            ax.semilogy(ep, va, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("sequence loss")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def regression_figure(trials, fits, path):
    """Label width against tangential load per material, with the OLS line.

    ``trials`` is a list of (trial_id, material, F_ext, p_slip, slipped).
    """
    names = sorted(fits)
    with plt.rc_context(STYLE):
        fig, axs = plt.subplots(1, len(names), figsize=(3 * len(names), 3), squeeze=False)
        for ax, name in zip(axs[0], names):
            rows = [r for r in trials if r[1] == name]
            F = np.array([r[2] for r in rows], float)
            p = np.array([r[3] for r in rows], float)
            s = np.array([bool(r[4]) for r in rows])
            ax.plot(F[s], p[s], "o", ms=3, label="slipped")
            ax.plot(F[~s], p[~s], "x", ms=4, label="fitted")
            fit = fits[name]
            fx = np.linspace(0, max(F.max(initial=0.0), 1e-3), 20)
            ax.plot(fx, fit["intercept"] + fit["slope"] * fx, "k-", lw=0.8)
            ax.set_title(f"{name}  R2={fit['r2']:.3f}")
            ax.set_xlabel("tangential load [N]")
        axs[0][0].set_ylabel("p_slip [mm]")
        axs[0][0].legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def drops_figure(aggregates, path):
    """Drops out of runs per (scenario, controller)."""
    scen = sorted({a["scenario"] for a in aggregates})
    ctrls = [c for c in COLORS if any(a["controller"] == c for a in aggregates)]
    x = np.arange(len(scen))
    w = 0.8 / max(len(ctrls), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(scen), 3))
        for j, c in enumerate(ctrls):
            h = [next((a["drops"] for a in aggregates if a["scenario"] == s and a["controller"] == c), 0)
                 for s in scen]
            ax.bar(x + (j - (len(ctrls) - 1) / 2) * w, h, w, color=COLORS[c], label=c)
        ax.set_xticks(x, scen)
        ax.set_ylabel("drops")
        ax.legend(fontsize=8)
        fig.tight_layout()
        return _save(fig, path)
