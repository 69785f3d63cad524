"""Figure rendering for the CLI report paths.

Every subcommand that writes delimited output can render a matching figure
next to it: schedule curves, the training loss curve, and per-image metric
charts. Rendering is headless (Agg) and deterministic for fixed inputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .schedule import NoiseSchedule  # noqa: E402


def save_schedule_figure(sched: NoiseSchedule, path) -> None:
    ts = range(1, sched.T + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(ts, sched.betas, lw=1.2)
    ax1.set_xlabel("t")
    ax1.set_ylabel(r"$\beta_t$")
    ax1.set_title("noise schedule")
    ax2.plot(ts, sched.alpha_bars, lw=1.2, label=r"$\bar\alpha_t$")
    ax2.plot(ts, sched.sqrt_one_minus_alpha_bars, lw=1.2, ls="--",
             label=r"$\sqrt{1-\bar\alpha_t}$")
    ax2.set_xlabel("t")
    ax2.set_title("signal / noise fractions")
    ax2.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_figure(steps, losses, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("L1 noise-prediction loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metrics_figure(names, reports, path) -> None:
    """Bar charts of the per-image metric values in `reports`
    (:class:`~diffrestore.metrics.MetricReport` instances)."""
    fig, axes = plt.subplots(2, 2, figsize=(10, 6))
    x = range(len(names))
    panels = [
        ("PSNR (dB)", [r.psnr for r in reports]),
        ("SSIM", [r.ssim for r in reports]),
        ("UIQM", [r.uiqm for r in reports]),
        ("UCIQE", [r.uciqe for r in reports]),
    ]
    for ax, (label, values) in zip(axes.ravel(), panels):
        finite = [min(v, 99.0) if v == float("inf") else v for v in values]
        ax.bar(x, finite, color="#3a6ea5")
        ax.set_ylabel(label)
        ax.set_xticks(list(x))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
