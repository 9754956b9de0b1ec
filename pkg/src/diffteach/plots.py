"""Matplotlib artifacts for run directories (all Agg, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def loss_curve(history, path):
    steps = [h["step"] for h in history]
    losses = [h["loss"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses)
    ax.set_xlabel("step")
    ax.set_ylabel("noise-prediction MSE")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def map_curve(metrics, path, split="target_val"):
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for role, style in (
        ("student", "-"),
        ("mean_teacher", "--"),
        ("diffusion_teacher", ":"),
    ):
        pts = [(m["step"], m["mAP"]) for m in metrics if m["role"] == role and m["split"] == split]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, [y * 100 for y in ys], style, label=role)
    ax.set_xlabel("step")
    ax.set_ylabel(f"mAP on {split} (%)")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def pr_curves(det_list, dataset, path, iou_thr=0.5):
    from .evaluation import match_class

    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    for cid, name in dataset.categories:
        total_gt = sum(int((g.labels == cid).sum()) for g in dataset.annotations)
        if total_gt == 0:
            continue
        recs = []
        for dets, gts in zip(det_list, dataset.annotations):
            det_idx, tp, _ = match_class(dets, gts, cid, iou_thr)
            for j, d in enumerate(det_idx):
                recs.append((float(dets.scores[d]), bool(tp[j])))
        if not recs:
            continue
        recs.sort(key=lambda r: -r[0])
        tp = np.cumsum([r[1] for r in recs])
        fp = np.cumsum([not r[1] for r in recs])
        ax.plot(tp / total_gt, tp / np.maximum(tp + fp, 1e-12), label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
