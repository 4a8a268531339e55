"""Optional figures for CLI runs (``--plot``).

Everything renders off-screen with the Agg backend and writes PNG files;
nothing here is needed by the library itself.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history, path, title="training"):
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(epochs, [h["train_mse"] for h in history], label="train")
    ax.semilogy(epochs, [h["val_mse"] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (normalized)")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_closed_loop(results, path, P=None, c=None, thresholds=(0.1, 3.0)):
    """State trajectories over time and in the phase plane.

    ``results`` maps a label to a :class:`~iclrnn.mpc.ClosedLoopResult`.
    With ``P`` and ``c`` the stability-region boundary is drawn.
    """
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    for label, r in results.items():
        axes[0].plot(r.times, r.states[:, 0], label=label)
        axes[1].plot(r.times, r.states[:, 1], label=label)
        axes[2].plot(r.states[:, 0], r.states[:, 1], marker=".", ms=3, label=label)
    for ax, th, name in ((axes[0], thresholds[0], "x1 (kmol/m^3)"), (axes[1], thresholds[1], "x2 (K)")):
        ax.axhspan(-th, th, color="0.9")
        ax.set_xlabel("time (h)")
        ax.set_ylabel(name)
    if P is not None and c is not None:
        th = np.linspace(0, 2 * np.pi, 400)
        w, v = np.linalg.eigh(np.asarray(P, dtype=np.float64))
        pts = v @ (np.sqrt(c / w)[:, None] * np.vstack([np.cos(th), np.sin(th)]))
        axes[2].plot(pts[0], pts[1], "k--", lw=1, label="stability region")
    axes[2].set_xlabel("x1")
    axes[2].set_ylabel("x2")
    axes[2].legend(fontsize=7)
    return _save(fig, path)


def plot_noise_sweep(result, path, label=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(result.sigmas, result.mean_mse, yerr=result.std_mse, marker="o", capsize=3, label=label)
    ax.set_xlabel("input noise std (normalized units)")
    ax.set_ylabel("test MSE")
    if label:
        ax.legend()
    return _save(fig, path)


def plot_forecast(times, actual, predicted, persistence, path, max_points=1440):
    times, actual = times[-max_points:], actual[-max_points:]
    predicted, persistence = predicted[-max_points:], persistence[-max_points:]
    fig, ax = plt.subplots(figsize=(9, 3.5))
    ax.plot(times, actual, lw=1, label="measured")
    ax.plot(times, persistence, lw=1, alpha=0.7, label="persistence")
    ax.plot(times, predicted, lw=1, label="model")
    ax.set_ylabel("irradiance (W/m^2)")
    ax.legend()
    fig.autofmt_xdate()
    return _save(fig, path)
