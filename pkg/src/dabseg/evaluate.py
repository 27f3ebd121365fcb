"""Full-volume inference, evaluation reports, distribution curves, ablations."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .metrics import REGIONS, CaseMetrics, EvalReport, dice_metric, hd95
from .network import DabsegNet
from .training import LoadedCase, TrainConfig, load_bucket, load_checkpoint, train


def predict_probs(net: DabsegNet, volume: np.ndarray, patch: int, dtype=np.float32) -> np.ndarray:
    """Non-overlapping tiled inference at the training patch size.

    Edge tiles are zero-padded and the stitched prediction is cropped back,
    so a volume of exactly one patch equals direct single-patch inference.
    """
    volume = np.asarray(volume)
    if volume.ndim != 4 or volume.shape[0] != 4:
        raise ValueError(f"expected [4,D,H,W] input, got {volume.shape}")
    dims = volume.shape[1:]
    padded = tuple(-(-d // patch) * patch for d in dims)
    vol = np.zeros((4,) + padded, dtype=dtype)
    vol[:, : dims[0], : dims[1], : dims[2]] = volume
    probs = np.zeros((3,) + padded, dtype=np.float64)
    with no_grad():
        for i in range(0, padded[0], patch):
            for j in range(0, padded[1], patch):
                for k in range(0, padded[2], patch):
                    tile = vol[:, i : i + patch, j : j + patch, k : k + patch]
                    out = net(tile)
                    probs[:, i : i + patch, j : j + patch, k : k + patch] = out.prediction.probs.data
    return probs[:, : dims[0], : dims[1], : dims[2]]


def evaluate_cases(
    net: DabsegNet,
    cases: list[LoadedCase],
    patch: int,
    threshold: float = 0.5,
    dtype=np.float32,
    metadata: dict | None = None,
) -> EvalReport:
    report = EvalReport(metadata=metadata or {})
    for case in cases:
        probs = predict_probs(net, case.inputs, patch, dtype=dtype)
        pred = probs > threshold
        gt = case.regions > 0.5
        dice = {r: dice_metric(pred[i], gt[i]) for i, r in enumerate(REGIONS)}
        dists = {r: hd95(pred[i], gt[i], case.spacing) for i, r in enumerate(REGIONS)}
        report.cases.append(CaseMetrics(case_id=case.case_id, dice=dice, hd95=dists))
    return report


def evaluate_checkpoint(ckpt_path, cfg: TrainConfig, bucket: str = "test",
                        cases: list[LoadedCase] | None = None) -> EvalReport:
    net, _, _, _, _ = load_checkpoint(ckpt_path, cfg)
    if cases is None:
        cases = load_bucket(cfg, bucket)
    return evaluate_cases(
        net,
        cases,
        cfg.patch_size,
        dtype=cfg.dtype,
        metadata={"checkpoint": str(ckpt_path), "bucket": bucket,
                  "seed": cfg.seed, "config_hash": cfg.config_hash()},
    )


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"
    report.to_csv(csv_path)
    report.to_json(json_path)
    return csv_path, json_path


def report_curves(report: EvalReport, out_dir) -> list[Path]:
    """Per-region `curves_<region>.csv`: Dice sorted ascending with rank and
    the empirical CDF point (value, fraction of cases <= value)."""
    if not report.cases:
        raise ValueError("cannot emit curves for an empty report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    n = len(report.cases)
    for region in REGIONS:
        values = np.sort(np.array([c.dice[region] for c in report.cases], dtype=np.float64))
        path = out_dir / f"curves_{region}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "dice", "cdf"])
            for rank, value in enumerate(values):
                writer.writerow([rank, value, (rank + 1) / n])
        paths.append(path)
    return paths


# -- ablation grid -----------------------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    name: str
    use_fdmds: bool
    lambda_rec: float
    et_weight: bool

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return replace(
            cfg,
            use_fdmds=self.use_fdmds,
            lambda_rec=self.lambda_rec,
            et_weight=self.et_weight,
            out_dir=str(Path(cfg.out_dir) / self.slug),
        )

    @property
    def slug(self) -> str:
        return (
            self.name.replace("+", "_")
            .replace("(", "_")
            .replace(")", "")
            .replace("=", "")
            .replace(".", "p")
        )


ABLATION_VARIANTS: tuple[AblationVariant, ...] = (
    AblationVariant("DAMI", use_fdmds=False, lambda_rec=0.0, et_weight=False),
    AblationVariant("DAMI+FDMDS(lambda_rec=0.2)", use_fdmds=True, lambda_rec=0.2, et_weight=False),
    AblationVariant("DAMI+FDMDS(lambda_rec=0.1)", use_fdmds=True, lambda_rec=0.1, et_weight=False),
    AblationVariant("DAMI+FDMDS+ET_weight(lambda_rec=0.1)", use_fdmds=True, lambda_rec=0.1, et_weight=True),
)


def run_ablation(
    base_cfg: TrainConfig,
    out_dir,
    variants: tuple[AblationVariant, ...] = ABLATION_VARIANTS,
    train_cases: list[LoadedCase] | None = None,
    test_cases: list[LoadedCase] | None = None,
) -> list[dict]:
    """Train and evaluate every variant on identical data and seed; returns
    rows of per-region mean Dice/HD95 and writes `ablation.csv`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        cfg = variant.apply(base_cfg)
        needs_clean = cfg.needs_clean_reference()
        variant_train = train_cases
        if variant_train is not None and not needs_clean:
            # keep the no-reconstruction variants blind to clean volumes
            variant_train = [
                LoadedCase(c.case_id, c.inputs, None, c.regions, c.spacing) for c in train_cases
            ]
        result = train(cfg, cases=variant_train)
        report = evaluate_checkpoint(result.final_checkpoint, cfg, cases=test_cases)
        write_report(report, Path(cfg.out_dir) / "eval")
        agg = report.aggregate()
        row = {"variant": variant.name}
        for region in REGIONS:
            row[f"dice_{region}"] = agg["dice"][region][0]
            row[f"hd95_{region}"] = agg["hd95"][region][0]
        rows.append(row)
    header = ["variant"] + [f"dice_{r}" for r in REGIONS] + [f"hd95_{r}" for r in REGIONS]
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    return rows
