"""Orchestrates seeded experiments: build, train, checkpoint, evaluate, report.

A run directory is self-describing: the resolved configuration and a code
fingerprint are written before any work starts, then per-seed traces,
checkpoints, reports and figures, and finally the cross-seed aggregate.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_params, restore_params, save_params
from .cnn import CnnConfig, SmallCnn
from .config import ExperimentConfig, fingerprint, write_resolved
from .data import ID_DOMAIN, OOD_DOMAIN, TRAIN_DOMAINS, Dataset, normalize, read_dataset
from .errors import CheckpointError, ContractError
from .objectives import ObjectiveState
from .report import (RunReport, SeedAggregate, aggregate, plot_aggregate, plot_loss_curves,
                     write_aggregate_csv, write_report_csv, write_report_record, write_trace_csv)
from .rng import RunStreams
from .train import CgpModels, fine_tune_stage2, train_stage1
from .vit import MaskViT, ViTConfig, vit_call_count


def build_models(cfg: ExperimentConfig, streams: RunStreams) -> CgpModels:
    cnn = SmallCnn(cfg.cnn_config(), streams.init)
    vit = MaskViT(cfg.vit_config(), streams.init) if cfg.cgp else None
    return CgpModels(cnn=cnn, vit=vit)


def make_objective(cfg: ExperimentConfig) -> ObjectiveState:
    return ObjectiveState(kind=cfg.objective, irm_weight=cfg.irm_weight,
                          irm_anneal_epochs=cfg.irm_anneal_epochs,
                          vrex_weight=cfg.vrex_weight, groupdro_eta=cfg.groupdro_eta)


def evaluate_split_accuracies(cnn: SmallCnn, dataset: Dataset) -> dict[str, float]:
    """Accuracies on the train / ID-validation / OOD-test splits.

    The transformer must never run during evaluation; the call counter is
    checked around the whole pass.
    """
    before = vit_call_count()
    out = {}
    splits = {
        "train_acc": dataset.domains_in(TRAIN_DOMAINS),
        "id_val_acc": dataset.domain(ID_DOMAIN),
        "ood_test_acc": dataset.domain(OOD_DOMAIN),
    }
    for name, split in splits.items():
        if len(split) == 0:
            out[name] = float("nan")
            continue
        preds = cnn.predict(normalize(split.images))
        out[name] = float(np.mean(preds == split.labels))
    if vit_call_count() != before:
        raise ContractError("evaluation invoked the transformer; deployment must be ViT-free")
    return out


def run_seed(cfg: ExperimentConfig, seed: int, dataset: Dataset, seed_dir: Path) -> RunReport:
    seed_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, seed_dir / "resolved_config.txt")
    streams = RunStreams(seed)
    models = build_models(cfg, streams)
    objective = make_objective(cfg)
    hyper = cfg.hyper(seed)

    trace1 = train_stage1(models, dataset, hyper, objective, streams, use_cgp=cfg.cgp)
    write_trace_csv(trace1, seed_dir / "trace_stage1.csv")
    if trace1:
        plot_loss_curves(trace1, seed_dir / "loss_curves.png")
    if cfg.cgp:
        trace2 = fine_tune_stage2(models, dataset, hyper, streams)
        write_trace_csv(trace2, seed_dir / "trace_stage2.csv")

    save_params(models.cnn.params(), seed_dir / "model.cgpw")
    if models.vit is not None:
        save_params(models.vit.params(), seed_dir / "vit.cgpw")

    accs = evaluate_split_accuracies(models.cnn, dataset)
    report = RunReport(seed=seed, config_fingerprint=fingerprint(cfg), **accs)
    write_report_csv(report, seed_dir / "report.csv")
    write_report_record(report, seed_dir / "report.txt")
    return report


def run_training(cfg: ExperimentConfig) -> tuple[list[RunReport], SeedAggregate]:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_info.txt").write_text(
        f"package_version={__version__}\nconfig_fingerprint={fingerprint(cfg)}\n")
    write_resolved(cfg, out_dir / "resolved_config.txt")
    dataset = read_dataset(cfg.dataset)
    reports = []
    for seed in sorted(cfg.seeds):
        reports.append(run_seed(cfg, seed, dataset, out_dir / f"seed_{seed}"))
    agg = aggregate(reports)
    write_aggregate_csv(agg, out_dir / "aggregate.csv")
    plot_aggregate(agg, out_dir / "aggregate.png",
                   title=f"{cfg.objective}{' + perturbation' if cfg.cgp else ''}")
    return reports, agg


# ---------------------------------------------------------------------------
# model reconstruction from checkpoints


def load_cnn(path, image_size: int = 32) -> SmallCnn:
    stored = load_params(path)
    channels = []
    i = 0
    while f"cnn.conv{i}.kernel" in stored:
        channels.append(stored[f"cnn.conv{i}.kernel"].shape[0])
        i += 1
    if not channels or "cnn.head.weight" not in stored:
        raise CheckpointError(f"{path}: not a classifier checkpoint (parameters: {sorted(stored)})")
    kernel = stored["cnn.conv0.kernel"].shape[2]
    num_classes = stored["cnn.head.weight"].shape[0]
    cfg = CnnConfig(channels=tuple(channels), kernel=kernel, num_classes=num_classes,
                    image_size=image_size)
    cnn = SmallCnn(cfg, np.random.default_rng(0))
    restore_params(cnn.params(), stored)
    return cnn


def load_vit(path) -> MaskViT:
    stored = load_params(path)
    if "vit.embed.weight" not in stored or "vit.meta" not in stored:
        raise CheckpointError(f"{path}: not a transformer checkpoint (parameters: {sorted(stored)})")
    d, in_dim = stored["vit.embed.weight"].shape
    patch = int(round(np.sqrt(in_dim / 3)))
    grid = int(round(np.sqrt(stored["vit.pos"].shape[0])))
    depth = 0
    while f"vit.block{depth}.q.weight" in stored:
        depth += 1
    heads, mlp_ratio = (int(v) for v in stored["vit.meta"])
    cfg = ViTConfig(image_size=grid * patch, patch_size=patch, embed_dim=d, depth=depth,
                    heads=heads, mlp_ratio=mlp_ratio,
                    num_classes=stored["vit.cls_head.weight"].shape[0])
    vit = MaskViT(cfg, np.random.default_rng(0))
    restore_params(vit.params(), stored)
    return vit
