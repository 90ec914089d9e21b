"""Metrics, multi-seed aggregation, saliency maps, and report rendering.

Reports are written twice: as delimited text (CSV plus a line-oriented
key=value record) and as matplotlib figures next to them. Saliency
heatmaps (CAM, Grad-CAM, the transformer's soft mask) are exported as
binary PGM, originals and montages as PPM.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .imageio import write_pgm, write_ppm
from .layers import bilinear_upsample
from . import tensor as T
from .tensor import Tensor


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"prediction/label shapes differ: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ContractError("accuracy of an empty batch is undefined")
    return float(np.mean(preds == labels))


@dataclass
class RunReport:
    seed: int
    config_fingerprint: str
    train_acc: float
    id_val_acc: float
    ood_test_acc: float

    METRICS = ("train_acc", "id_val_acc", "ood_test_acc")


@dataclass
class SeedAggregate:
    count: int
    mean: dict[str, float]
    std: dict[str, float]

    @property
    def single_run(self) -> bool:
        return self.count == 1


def aggregate(runs: list[RunReport]) -> SeedAggregate:
    """Mean and sample standard deviation (n-1) per metric; std is reported
    as 0 for a single run."""
    if not runs:
        raise ContractError("aggregate needs at least one run")
    mean, std = {}, {}
    for metric in RunReport.METRICS:
        values = np.array([getattr(r, metric) for r in runs], dtype=np.float64)
        mean[metric] = float(values.mean())
        std[metric] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return SeedAggregate(count=len(runs), mean=mean, std=std)


# ---------------------------------------------------------------------------
# saliency


def _normalize_heatmap(hm: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max to [0, 1]; an all-constant map comes back as zeros + warning."""
    lo, hi = float(hm.min()), float(hm.max())
    if hi - lo <= 0.0:
        return np.zeros_like(hm), True
    return (hm - lo) / (hi - lo), False


def grad_cam(cnn, image: np.ndarray, target_class: int) -> tuple[np.ndarray, bool]:
    """Gradient-weighted activation map over the feature extractor's output.

    Channel weights are the spatial means of d logit[target] / d activation;
    the heatmap is relu of the weighted channel sum, min-max normalized.
    Returns (heatmap [H', W'], warned) where warned marks an all-zero map.
    """
    x = Tensor(image[None])
    feats = cnn.features(x)
    feats.requires_grad = True  # ensure grads are retained even for frozen nets
    logits = cnn.head(feats)
    if not 0 <= target_class < logits.shape[1]:
        raise ContractError(f"target class {target_class} out of range")
    picked = T.gather_labels(logits, np.array([target_class]))
    T.backward(T.tsum(picked))
    weights = feats.grad[0].mean(axis=(1, 2))
    hm = np.maximum((weights[:, None, None] * feats.data[0]).sum(axis=0), 0.0)
    return _normalize_heatmap(hm)


def cam(cnn, image: np.ndarray, target_class: int) -> tuple[np.ndarray, bool]:
    """Class activation map straight from the GAP head's weights."""
    x = Tensor(image[None])
    feats = cnn.features(x)
    w = cnn.head_linear.weight.data
    if not 0 <= target_class < w.shape[0]:
        raise ContractError(f"target class {target_class} out of range")
    hm = np.maximum((w[target_class][:, None, None] * feats.data[0]).sum(axis=0), 0.0)
    return _normalize_heatmap(hm)


def upsample_heatmap(hm: np.ndarray, size: int) -> np.ndarray:
    return bilinear_upsample(Tensor(hm[None].astype(np.float32)), size, size).data[0]


def export_saliency(original: np.ndarray, cam_map: np.ndarray, gradcam_map: np.ndarray,
                    vit_mask: np.ndarray, prefix: str) -> list[str]:
    """Write original (PPM), each map (PGM), and a side-by-side montage (PPM).

    `original` is [3, H, W] in [0, 1]; maps are [H, W] in [0, 1].
    """
    size = original.shape[1]
    files = []
    rgb = original.transpose(1, 2, 0)
    write_ppm(f"{prefix}_original.ppm", rgb)
    files.append(f"{prefix}_original.ppm")
    panels = [rgb]
    for name, hm in (("cam", cam_map), ("gradcam", gradcam_map), ("vitmask", vit_mask)):
        if hm.shape[0] != size:
            hm = upsample_heatmap(hm, size)
        write_pgm(f"{prefix}_{name}.pgm", hm)
        files.append(f"{prefix}_{name}.pgm")
        panels.append(np.repeat(hm[:, :, None], 3, axis=2))
    gap = np.ones((size, 2, 3), dtype=np.float64)
    montage = np.concatenate([p for pair in zip(panels, [gap] * len(panels)) for p in pair][:-1], axis=1)
    write_ppm(f"{prefix}_montage.ppm", montage)
    files.append(f"{prefix}_montage.ppm")
    return files


# ---------------------------------------------------------------------------
# delimited output


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def write_trace_csv(trace, path) -> None:
    from .train import EpochStats

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EpochStats.FIELDS)
        for row in trace:
            writer.writerow([_fmt(v) for v in row.row()])


def write_report_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "config_fingerprint", *RunReport.METRICS])
        writer.writerow([report.seed, report.config_fingerprint,
                         *[_fmt(getattr(report, m)) for m in RunReport.METRICS]])


def write_report_record(report: RunReport, path) -> None:
    lines = [f"seed={report.seed}", f"config_fingerprint={report.config_fingerprint}"]
    lines += [f"{m}={_fmt(getattr(report, m))}" for m in RunReport.METRICS]
    Path(path).write_text("\n".join(lines) + "\n")


def write_aggregate_csv(agg: SeedAggregate, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std", "n"])
        for metric in RunReport.METRICS:
            writer.writerow([metric, _fmt(agg.mean[metric]), _fmt(agg.std[metric]), agg.count])


# ---------------------------------------------------------------------------
# figures


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curves(trace, path) -> None:
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    epochs = [row.epoch for row in trace]
    for key in ("l_total", "l_orig", "l_vit", "l_adv"):
        ax1.plot(epochs, [getattr(row, key) for row in trace], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [row.id_val_acc for row in trace], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("ID val accuracy")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_aggregate(agg: SeedAggregate, path, title: str = "") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = list(RunReport.METRICS)
    means = [agg.mean[m] for m in names]
    stds = [agg.std[m] for m in names]
    ax.bar(names, means, yerr=stds, capsize=4, color=["#888", "#4c72b0", "#c44e52"])
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_grid(rows: list[dict], path) -> None:
    """Bar chart of the objective grid: one group per objective, with and
    without the perturbation module, ID and OOD accuracy."""
    plt = _plt()
    objectives = sorted({r["objective"] for r in rows})
    x = np.arange(len(objectives))
    fig, ax = plt.subplots(figsize=(8, 3.6))
    width = 0.2
    for i, (cgp_on, metric) in enumerate([(False, "ood"), (True, "ood"), (False, "id"), (True, "id")]):
        vals, errs = [], []
        for obj in objectives:
            match = [r for r in rows if r["objective"] == obj and r["cgp"] == cgp_on]
            vals.append(match[0][f"{metric}_mean"] if match else 0.0)
            errs.append(match[0][f"{metric}_std"] if match else 0.0)
        label = f"{metric.upper()} {'+perturb' if cgp_on else 'plain'}"
        ax.bar(x + (i - 1.5) * width, vals, width, yerr=errs, capsize=3, label=label)
    ax.set_xticks(x, objectives)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
