"""Text/TSV reports and matplotlib figures for training runs and evaluations."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402


def format_kv(values: dict[str, float]) -> str:
    return "key\tvalue\n" + "".join(f"{k}\t{v:.6f}\n" for k, v in values.items())


def format_text(report: EvalReport, title: str = "evaluation") -> str:
    lines = [title]
    if report.map_per_threshold:
        lines.append("tIoU   " + "  ".join(f"{t:>6.1f}" for t in report.thresholds) + "     avg")
        lines.append(
            "mAP    "
            + "  ".join(f"{100 * report.map_per_threshold[t]:6.2f}" for t in report.thresholds)
            + f"  {100 * report.average_map:6.2f}"
        )
    for (k, t), v in sorted(report.recall_at_kx.items()):
        lines.append(f"Recall@{k}x (tIoU={t:.1f}): {100 * v:.2f}")
    for (k, t), v in sorted(report.r_at_k.items()):
        lines.append(f"R@{k} (tIoU={t:.1f}): {100 * v:.2f}")
    return "\n".join(lines) + "\n"


def format_pr_curves(report: EvalReport) -> str:
    rows = ["class\trank\trecall\tprecision"]
    for c, (rec, prec) in sorted(report.pr_curves.items()):
        rows.extend(f"{c}\t{i + 1}\t{r:.6f}\t{p:.6f}" for i, (r, p) in enumerate(zip(rec, prec)))
    return "\n".join(rows) + "\n"


def plot_pr_curves(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for c, (rec, prec) in sorted(report.pr_curves.items()):
        ax.plot(rec, prec, label=f"class {c}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title("PR curves at tIoU 0.5")
    if report.pr_curves:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_map_vs_tiou(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    t = list(report.thresholds)
    ax.plot(t, [report.map_per_threshold[x] for x in t], marker="o")
    ax.axhline(report.average_map, ls="--", color="gray", label=f"average {report.average_map:.3f}")
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("mAP")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_eval_report(report: EvalReport, out_dir, config_text: str, figures: bool = True, title: str = "evaluation") -> list[Path]:
    """Write report.txt, report.tsv, pr_curves.tsv, config.txt and (optionally) PNGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = out / name
        p.write_text(text)
        written.append(p)

    put("report.txt", format_text(report, title))
    put("report.tsv", format_kv(report.as_dict()))
    put("config.txt", config_text)
    if report.pr_curves:
        put("pr_curves.tsv", format_pr_curves(report))
    if figures:
        if report.pr_curves:
            plot_pr_curves(report, out / "pr_curves.png")
            written.append(out / "pr_curves.png")
        if report.map_per_threshold:
            plot_map_vs_tiou(report, out / "map_vs_tiou.png")
            written.append(out / "map_vs_tiou.png")
    return written


def plot_training(history, out_dir) -> list[Path]:
    """Loss curves and the final learned Gaussians (one curve per class)."""
    out = Path(out_dir)
    if not history:
        return []
    ep = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(5, 4))
    for key in ("loss", "cls", "loc", "nce"):
        vals = [getattr(r, key) for r in history]
        if any(vals):
            ax.plot(ep, vals, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    loss_png = out / "loss_curves.png"
    fig.savefig(loss_png, dpi=100)
    plt.close(fig)

    last = history[-1]
    u = np.linspace(0.0, 1.0, 201)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    for ax, task, mus, sigmas in (
        (axes[0], "cls", last.mu_cls, last.sigma_cls),
        (axes[1], "loc", last.mu_loc, last.sigma_loc),
    ):
        for c, (m, s) in enumerate(zip(mus, sigmas)):
            w = np.exp(-((u - m) ** 2) / (2 * s * s))
            ax.plot(u, w / w.mean(), label=f"class {c}")
        ax.set_title(f"learned {task} sensitivity")
        ax.set_xlabel("normalized position in instance")
    axes[0].set_ylabel("relative weight")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    sens_png = out / "sensitivity.png"
    fig.savefig(sens_png, dpi=100)
    plt.close(fig)
    return [loss_png, sens_png]
