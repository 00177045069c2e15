"""Report figures (PNG) for the train / eval / bench subcommands.

Uses the non-interactive Agg backend so figures render on headless machines.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (5 ** 0.5 - 1) / 2
WIDTH = 6.4

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 3,
    "savefig.dpi": 120,
}

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes independent of the matplotlib build date
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def training_curves(history: Sequence[dict], path: PathLike, title: Optional[str] = None) -> Path:
    """Loss curves (left) and dev decoding metrics (right) per epoch.

    ``history`` holds the per-epoch records written to ``train_log.jsonl``.
    """
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(WIDTH * 1.4, WIDTH * GOLDEN))
        names = sorted({k for r in history for k in r.get("losses", {})})
        for name in names:
            ax_l.plot(epochs, [r["losses"].get(name, float("nan")) for r in history], marker="o", label=name)
        if any(r.get("dev_loss") is not None for r in history):
            ax_l.plot(epochs, [r.get("dev_loss") or float("nan") for r in history], "k--", label="dev loss")
        ax_l.set_yscale("log")
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("loss")
        ax_l.legend(frameon=False)
        for key, label in (("dev_wer", "WER"), ("dev_ic_acc", "IC acc"), ("dev_slu_f1", "SLU-F1")):
            if any(key in r for r in history):
                ax_m.plot(epochs, [r.get(key, float("nan")) for r in history], marker="o", label=label)
        ax_m.set_ylim(bottom=0)
        ax_m.set_xlabel("epoch")
        ax_m.set_ylabel("dev metric (%)")
        ax_m.legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def eval_figure(report: dict, path: PathLike, iterations: Optional[Sequence[int]] = None,
                title: Optional[str] = None) -> Path:
    """Bar chart of the percentage metrics, plus an iteration histogram when available."""
    cols = [("WER", "wer"), ("IC acc", "ic_acc"), ("SLU-F1", "slu_f1"), ("word-F1", "word_f1"),
            ("char-F1", "char_f1")]
    with plt.rc_context(STYLE):
        n = 2 if iterations else 1
        fig, axes = plt.subplots(1, n, figsize=(WIDTH * (0.7 * n + 0.3), WIDTH * GOLDEN), squeeze=False)
        ax = axes[0, 0]
        vals = [report[k] for _, k in cols]
        bars = ax.bar([c for c, _ in cols], vals, color=["#c0504d"] + ["#4f81bd"] * 4)
        for bar, v in zip(bars, vals):
            ax.annotate(f"{v:.1f}", (bar.get_x() + bar.get_width() / 2, v), ha="center", va="bottom",
                        fontsize=8)
        ax.set_ylim(0, max(105.0, max(vals) * 1.08))
        ax.set_ylabel("%")
        if iterations:
            ax_i = axes[0, 1]
            top = max(iterations)
            ax_i.hist(iterations, bins=[b - 0.5 for b in range(top + 2)], color="#9bbb59", rwidth=0.85)
            mean = sum(iterations) / len(iterations)
            ax_i.axvline(mean, color="k", ls="--", label=f"mean {mean:.2f}")
            ax_i.set_xlabel("refinement iterations")
            ax_i.set_ylabel("utterances")
            ax_i.legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def rtf_figure(results: dict, path: PathLike, title: Optional[str] = None) -> Path:
    """Bar chart of RTF per system; ``results`` maps system name to RTF."""
    names = list(results)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH * 0.7, WIDTH * GOLDEN))
        bars = ax.bar(names, [results[k] for k in names], color="#4f81bd")
        for bar, k in zip(bars, names):
            ax.annotate(f"{results[k]:.4f}", (bar.get_x() + bar.get_width() / 2, results[k]), ha="center",
                        va="bottom", fontsize=8)
        ax.set_ylabel("real-time factor")
        if len(names) == 2 and results[names[1]] > 0:
            ax.set_title(title or f"speedup {results[names[0]] / results[names[1]]:.2f}x")
        elif title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
