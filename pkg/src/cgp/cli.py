"""Command-line entry point.

Subcommands: generate-data, train, evaluate, visualize, gradcheck.
Exit codes: 0 success, 1 usage/configuration error, 2 runtime or numeric
failure. The output root may be set via the CGP_OUT_ROOT environment
variable; explicit --out-dir flags win.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config_file, resolve
from .data import (Dataset, default_domain_specs, generate, normalize, read_dataset,
                   write_dataset, ID_DOMAIN, OOD_DOMAIN, TRAIN_DOMAINS)
from .errors import CgpError, ConfigError
from .gradchecks import run_checks
from .report import accuracy, cam, export_saliency, grad_cam
from .runner import load_cnn, load_vit, run_training
from .tensor import Tensor
from .vit import vit_call_count


def _out_path(path_str: str) -> Path:
    root = os.environ.get("CGP_OUT_ROOT")
    path = Path(path_str)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def cmd_generate_data(args) -> int:
    specs = default_domain_specs(per_domain=args.per_domain, rho_train=args.rho_train,
                                 rho_ood=args.rho_ood, image_size=args.image_size)
    ds = generate(specs, args.seed)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    print(f"wrote {len(ds)} samples over {len(specs)} domains to {out}")
    return 0


def cmd_train(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {
        "dataset": args.dataset,
        "out_dir": args.out_dir,
        "objective": args.objective,
        "cgp": args.cgp,
        "seeds": tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None,
        "sigma_noise": args.sigma_noise,
        "lambda_vit": args.lambda_vit,
        "stage1_epochs": args.stage1_epochs,
        "stage2_epochs": args.stage2_epochs,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
    }
    cfg = resolve(file_values, flags)
    if not cfg.dataset:
        raise ConfigError("a dataset path is required (--dataset or config file)")
    cfg.out_dir = str(_out_path(cfg.out_dir))
    reports, agg = run_training(cfg)
    for rep in reports:
        print(f"seed {rep.seed}: train {rep.train_acc:.4f}  id {rep.id_val_acc:.4f}  "
              f"ood {rep.ood_test_acc:.4f}")
    note = " (n=1, std undefined)" if agg.single_run else ""
    print(f"aggregate over {agg.count} seed(s){note}: "
          f"id {agg.mean['id_val_acc']:.4f} ± {agg.std['id_val_acc']:.4f}  "
          f"ood {agg.mean['ood_test_acc']:.4f} ± {agg.std['ood_test_acc']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    ds = read_dataset(args.dataset)
    image_size = ds.images.shape[2] if len(ds) else 32
    cnn = load_cnn(args.checkpoint, image_size=image_size)
    before = vit_call_count()
    lines = []
    for name, split in (("id", ds.domain(ID_DOMAIN)), ("ood", ds.domain(OOD_DOMAIN))):
        if len(split) == 0:
            lines.append(f"{name}_acc=nan")
            continue
        preds = cnn.predict(normalize(split.images))
        lines.append(f"{name}_acc={accuracy(preds, split.labels):.6f}")
    if vit_call_count() != before:
        raise CgpError("evaluation must not invoke the transformer")
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = _out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return 0


def cmd_visualize(args) -> int:
    ds = read_dataset(args.dataset)
    image_size = ds.images.shape[2] if len(ds) else 32
    cnn = load_cnn(args.checkpoint, image_size=image_size)
    vit = load_vit(args.vit_checkpoint)
    out_dir = _out_path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = (("train", ds.domains_in(TRAIN_DOMAINS)), ("id", ds.domain(ID_DOMAIN)),
              ("ood", ds.domain(OOD_DOMAIN)))
    written = 0
    for split_name, split in splits:
        for i in range(min(args.n, len(split))):
            raw = split.images[i]
            x = normalize(raw[None])
            pred = int(cnn.predict(x)[0])
            cam_map, _ = cam(cnn, x[0], pred)
            gradcam_map, _ = grad_cam(cnn, x[0], pred)
            mask, _, _ = vit.mask_for(Tensor(x))
            prefix = out_dir / f"{split_name}_{i:03d}"
            files = export_saliency(raw, cam_map, gradcam_map, mask.data[0, 0], str(prefix))
            written += len(files)
    print(f"wrote {written} saliency files to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_checks(scope=args.scope)
    failed = 0
    for res in results:
        status = "pass" if res.passed else "FAIL"
        print(f"{status}  {res.name:<20} max_rel_err={res.max_err:.3e}  tol={res.tolerance:.0e}")
        failed += 0 if res.passed else 1
    if failed:
        print(f"{failed} gradient check(s) exceeded tolerance")
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write a synthetic multi-domain dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--per-domain", type=int, default=500)
    gen.add_argument("--rho-train", type=float, default=0.9)
    gen.add_argument("--rho-ood", type=float, default=0.1)
    gen.add_argument("--image-size", type=int, default=32)
    gen.set_defaults(func=cmd_generate_data)

    tr = sub.add_parser("train", help="train per seed and aggregate")
    tr.add_argument("--config", default=None, help="key = value configuration file")
    tr.add_argument("--dataset", default=None)
    tr.add_argument("--out-dir", default=None)
    tr.add_argument("--objective", default=None,
                    choices=["erm", "irm", "vrex", "irmx", "groupdro"])
    tr.add_argument("--cgp", default=None, choices=["on", "off"])
    tr.add_argument("--seeds", default=None, help="comma-separated list, e.g. 0,1,2")
    tr.add_argument("--sigma-noise", type=float, default=None)
    tr.add_argument("--lambda-vit", type=float, default=None)
    tr.add_argument("--stage1-epochs", type=int, default=None)
    tr.add_argument("--stage2-epochs", type=int, default=None)
    tr.add_argument("--learning-rate", type=float, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="ID/OOD accuracy of a trained classifier")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_evaluate)

    vis = sub.add_parser("visualize", help="export CAM/Grad-CAM/mask montages")
    vis.add_argument("--checkpoint", required=True)
    vis.add_argument("--vit-checkpoint", required=True)
    vis.add_argument("--dataset", required=True)
    vis.add_argument("--n", type=int, default=1)
    vis.add_argument("--out-dir", default="saliency")
    vis.set_defaults(func=cmd_visualize)

    gc = sub.add_parser("gradcheck", help="finite-difference verification suite")
    gc.add_argument("--scope", default="all", choices=["all", "layers", "vit", "eq3", "eq4"])
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    if getattr(args, "cgp", None) is not None:
        args.cgp = args.cgp == "on"
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CgpError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
