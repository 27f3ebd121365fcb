"""Command-line entry point.

Subcommands: phantom, simulate, train, evaluate, ablate, report, gradcheck.
Run `dabseg <subcommand> --help` for the flags of each.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluate import evaluate_checkpoint, report_curves, run_ablation, write_report
from .gradcheck import check_module_gradients, run_op_suite
from .metrics import EvalReport
from .motion import S2_PRESET, SeverityPreset, degrade_dataset, read_preset_file
from .network import DabsegNet, DamiConfig, FdmdsConfig
from .phantom import PhantomConfig, generate_phantom
from .training import TrainConfig, train
from .volume_io import discover_cases, save_case


def _parse_size(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"size must be D,H,W or a single int, got {text!r}")
    return tuple(parts)


def cmd_phantom(args) -> int:
    cfg = PhantomConfig(noise_sigma=args.noise)
    for i in range(args.count):
        volume, labels = generate_phantom(args.seed + i, args.size, cfg)
        case_id = f"phantom_{args.seed + i:04d}"
        save_case(args.out, case_id, volume.data, labels, spacing=volume.voxel_spacing)
        print(f"wrote {case_id} ({args.size[0]}x{args.size[1]}x{args.size[2]})")
    return 0


def _load_preset(spec: str) -> SeverityPreset:
    if Path(spec).exists():
        return read_preset_file(spec)
    if spec == S2_PRESET.name:
        return S2_PRESET
    raise SystemExit(f"unknown preset {spec!r}: pass 'S2' or a preset file path")


def cmd_simulate(args) -> int:
    cases = discover_cases(args.in_dir)
    if not cases:
        raise SystemExit(f"no cases found under {args.in_dir}")
    preset = _load_preset(args.preset)
    degraded = degrade_dataset(
        cases, preset, args.seed, out_dir=args.out, per_modality_motion=args.per_modality_motion
    )
    print(f"degraded {len(degraded)} cases with preset {preset.name!r} (seed {args.seed})")
    return 0


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    for key in ("data_dir", "out_dir", "seed", "epochs", "precision", "patch_size", "max_steps"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.resolved()


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = train(cfg, resume_from=args.resume)
    last = result.history[-1]
    print(
        f"trained {len(result.history)} epochs; final loss {last['loss']:.4f} "
        f"(seg {last['l_seg']:.4f}, rec {last['l_rec']:.4f}); "
        f"soft dice et/tc/wt = {last['dice_et']:.3f}/{last['dice_tc']:.3f}/{last['dice_wt']:.3f}"
    )
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_eval_config(args)
    report = evaluate_checkpoint(args.ckpt, cfg, bucket=args.bucket)
    csv_path, json_path = write_report(report, args.out)
    agg = report.aggregate()
    for region in ("wt", "tc", "et"):
        mean, std = agg["dice"][region]
        print(f"{region.upper()}: dice {mean:.4f} +/- {std:.4f}, hd95 {agg['hd95'][region][0]:.3f}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _resolve_eval_config(args) -> TrainConfig:
    config_path = args.config
    if config_path is None:
        sibling = Path(args.ckpt).parent / "resolved_config.json"
        if not sibling.exists():
            raise SystemExit("pass --config or keep resolved_config.json next to the checkpoint")
        config_path = sibling
    payload = json.loads(Path(config_path).read_text())
    cfg = TrainConfig.from_dict(payload["config"] if "config" in payload else payload)
    if args.data_dir:
        cfg = replace(cfg, data_dir=args.data_dir)
    return cfg


def cmd_ablate(args) -> int:
    base = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.data_dir:
        base = replace(base, data_dir=args.data_dir)
    base = replace(base, out_dir=str(Path(args.out) / "runs")).resolved()
    rows = run_ablation(base, args.out)
    width = max(len(r["variant"]) for r in rows)
    for row in rows:
        print(
            f"{row['variant']:<{width}}  dice et/tc/wt = "
            f"{row['dice_et']:.4f}/{row['dice_tc']:.4f}/{row['dice_wt']:.4f}  "
            f"hd95 = {row['hd95_et']:.2f}/{row['hd95_tc']:.2f}/{row['hd95_wt']:.2f}"
        )
    print(f"wrote {Path(args.out) / 'ablation.csv'}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.report)
    report = EvalReport.from_json(path) if path.suffix == ".json" else EvalReport.from_csv(path)
    paths = report_curves(report, args.out)
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_op_suite(seed=args.seed, tolerance=args.tolerance)
    failures = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.op:<20s} case {r.case}  max rel err {r.max_rel_err:.3e}")
        failures += 0 if r.passed else 1
    # ps=1 keeps the deepest fused scale at 2^3; instance norm over a single
    # voxel is constant in its input and would null that branch's gradients
    cfg = DamiConfig(embed_dim=8, patch_stride=1, encoder_depths=(1, 1, 1), stage_channels=(8, 16, 32))
    net = DabsegNet(dami=cfg, fdmds=FdmdsConfig(c_mid=6), seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(4, 8, 8, 8))
    target = (rng.normal(size=(3, 8, 8, 8)) > 0).astype(np.float64)

    def loss_fn():
        out = net(x)
        p = out.prediction.probs
        return ((p - target) * (p - target)).mean() + (out.deblurred * out.deblurred).mean() * 0.1

    worst, _ = check_module_gradients(net, loss_fn, max_coords=2, seed=args.seed)
    net_ok = worst < 1e-3
    print(f"{'ok' if net_ok else 'FAIL':4s} full network (4x8^3, width 8)  max rel err {worst:.3e}")
    failures += 0 if net_ok else 1
    print(f"{len(results) + 1} checks, {failures} failures")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dabseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic multimodal cases")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--size", type=_parse_size, default=(48, 48, 48))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.04)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("simulate", help="write motion-degraded copies of a dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", default=None, help="defaults to the input directory")
    p.add_argument("--preset", default="S2", help="preset name or preset file path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-modality-motion", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", default=None)
    p.add_argument("--data", dest="data_dir", default=None)
    p.add_argument("--out", dest="out_dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset bucket")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None, help="defaults to resolved_config.json next to the checkpoint")
    p.add_argument("--data", dest="data_dir", default=None)
    p.add_argument("--bucket", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    p.add_argument("--config", default=None)
    p.add_argument("--data", dest="data_dir", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="emit sorted-Dice and CDF curve CSVs from a report")
    p.add_argument("--report", required=True, help="report.json or report.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    if args.command == "simulate" and args.out is None:
        args.out = args.in_dir
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
