"""Training loop: configuration, Adam, cosine LR, patch sampling, checkpoints.

Every run is a pure function of (config, seed): case order, crop corners and
parameter initialization all derive from one generator whose state is carried
in checkpoints, so a save/reload mid-run reproduces the uninterrupted
trajectory exactly at 64-bit precision.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .autodiff import Tensor
from .losses import (
    ClassWeights,
    JointLossConfig,
    MissingCleanReferenceError,
    joint_loss,
    recon_loss,
    soft_dice_batch,
    weighted_dice_loss,
)
from .network import DabsegNet, DamiConfig, FdmdsConfig
from .volume_io import (
    CaseRecord,
    DatasetSplit,
    apply_split_manifest,
    discover_cases,
    labels_to_regions,
    load_case_volume,
    load_labels,
    read_split_manifest,
    split_dataset,
    znorm_channels,
)

SEED_ENV_VAR = "DABSEG_SEED"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the diagnostic context."""

    def __init__(self, epoch, step, lr, terms):
        self.epoch, self.step, self.lr, self.terms = epoch, step, lr, terms
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step}, lr {lr:.3e}: {terms}"
        )


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults. The reference full-scale settings are 250 epochs,
    128^3 patches, embed_dim 32 and lr0 1e-4 with all else equal; they are
    not desk-runnable and are kept here for documentation only."""

    data_dir: str = "."
    out_dir: str = "runs/run0"
    degraded_suffix: str = "S2"  # "" trains on clean volumes
    split_manifest: str | None = None
    split_ratios: tuple[float, float, float] = (8.0, 1.0, 1.0)
    split_seed: int = 0

    epochs: int = 60
    max_steps: int | None = None
    lr0: float = 1e-4
    lr_min: float = 0.0
    batch_size: int = 1
    patch_size: int = 32
    seed: int = 0
    precision: int = 32  # 32 or 64

    # variant switches
    use_fdmds: bool = True
    lambda_rec: float = 0.1
    et_weight: bool = False
    literal_eq3: bool = False
    mix_clean: bool = False
    rec_l1: bool = False

    # architecture
    embed_dim: int = 16
    patch_stride: int = 4
    encoder_depths: tuple[int, ...] = (2, 2, 2)
    c_mid: int = 16
    heads: int = 1
    ffn_ratio: int = 4
    upsample: str = "nearest"

    # losses / weighting
    dice_eps: float = 1e-5
    class_weights: tuple[float, float, float] = (2.0, 1.0, 1.0)  # (ET, TC, WT)
    weight_activation_frac: float = 0.5

    checkpoint_every: int = 20

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        need = self.patch_stride * 2 ** (len(self.encoder_depths) - 1)
        if self.patch_size % need:
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by patch_stride * 2^(stages-1) = {need}"
            )
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * 2**i for i in range(len(self.encoder_depths)))

    @property
    def activation_epoch(self) -> int:
        return math.ceil(self.weight_activation_frac * self.epochs)

    def dami_config(self) -> DamiConfig:
        return DamiConfig(
            embed_dim=self.embed_dim,
            patch_stride=self.patch_stride,
            encoder_depths=tuple(self.encoder_depths),
            stage_channels=self.stage_channels,
            heads=self.heads,
            ffn_ratio=self.ffn_ratio,
            upsample=self.upsample,
        )

    def build_network(self) -> DabsegNet:
        return DabsegNet(
            dami=self.dami_config(),
            fdmds=FdmdsConfig(c_mid=self.c_mid, literal_eq3=self.literal_eq3),
            use_fdmds=self.use_fdmds,
            seed=self.seed,
            dtype=self.dtype,
        )

    def needs_clean_reference(self) -> bool:
        return bool(self.use_fdmds and self.lambda_rec > 0 and self.degraded_suffix)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("split_ratios", "encoder_depths", "class_weights"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("split_ratios", "encoder_depths", "class_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def resolved(self) -> "TrainConfig":
        """Apply environment overrides (DABSEG_SEED)."""
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            return replace(self, seed=int(env_seed))
        return self

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def write_snapshot(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = {"config": self.to_dict(), "config_hash": self.config_hash()}
        (directory / "resolved_config.json").write_text(json.dumps(payload, indent=2) + "\n")


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi t / total)) / 2, clamped past total."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if t < 0:
        raise ValueError("step must be nonnegative")
    if t > total:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def random_crop_corner(rng: np.random.Generator, vol_shape, patch: int) -> tuple[int, int, int]:
    """Uniform corner of an aligned cubic window; identity when sizes match."""
    if any(patch > s for s in vol_shape):
        raise ValueError(f"patch {patch} exceeds volume dims {vol_shape}")
    return tuple(int(rng.integers(0, s - patch + 1)) for s in vol_shape)


def crop(volume: np.ndarray, corner, patch: int) -> np.ndarray:
    sl = tuple(slice(c, c + patch) for c in corner)
    return volume[(Ellipsis,) + sl]


class Adam:
    """Adam with per-parameter moment buffers keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


# -- data loading ----------------------------------------------------------

@dataclass
class LoadedCase:
    case_id: str
    inputs: np.ndarray  # [4, D, H, W] normalized network input
    clean: np.ndarray | None  # normalized clean reference, None if unavailable
    regions: np.ndarray  # [3, D, H, W] float (ET, TC, WT)
    spacing: tuple[float, float, float]


def load_training_case(record: CaseRecord, clean_record: CaseRecord | None) -> LoadedCase:
    vol = load_case_volume(record)
    inputs = znorm_channels(vol.data)
    clean = None
    if clean_record is not None:
        clean = znorm_channels(load_case_volume(clean_record).data)
    regions = labels_to_regions(load_labels(record.label_path)).stacked()
    return LoadedCase(
        case_id=record.case_id,
        inputs=inputs,
        clean=clean,
        regions=regions,
        spacing=vol.voxel_spacing,
    )


def dataset_split(cfg: TrainConfig) -> DatasetSplit:
    records = discover_cases(cfg.data_dir, suffix=cfg.degraded_suffix)
    if not records:
        raise FileNotFoundError(
            f"no cases with suffix {cfg.degraded_suffix!r} under {cfg.data_dir}"
        )
    if cfg.split_manifest:
        return apply_split_manifest(records, read_split_manifest(cfg.split_manifest))
    return split_dataset(records, cfg.split_ratios, cfg.split_seed)


def load_bucket(cfg: TrainConfig, bucket: str) -> list[LoadedCase]:
    split = dataset_split(cfg)
    records = split.bucket(bucket)
    clean_records = {r.case_id: r for r in discover_cases(cfg.data_dir)} if cfg.needs_clean_reference() else {}
    loaded = []
    for rec in records:
        clean_rec = clean_records.get(rec.case_id)
        if cfg.needs_clean_reference() and clean_rec is None:
            raise MissingCleanReferenceError(
                f"case {rec.case_id!r}: clean reference volumes required for joint training"
            )
        loaded.append(load_training_case(rec, clean_rec))
    return loaded


# -- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"DBCK"
_CKPT_VERSION = 1


def save_checkpoint(path, net: DabsegNet, opt: Adam, epoch: int, step: int,
                    rng: np.random.Generator, cfg: TrainConfig):
    """Container: run position, rng state, parameter blob, Adam moment blobs."""
    rng_state = json.dumps(rng.bit_generator.state).encode("utf-8")
    cfg_hash = bytes.fromhex(cfg.config_hash())
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        fh.write(cfg_hash)
        fh.write(struct.pack("<IQQ", epoch, step, opt.t))
        fh.write(struct.pack("<I", len(rng_state)))
        fh.write(rng_state)
        params = net.named_parameters()
        nn.write_param_blob(fh, params, dtype=cfg.dtype)
        nn.write_param_blob(fh, opt.m, dtype=cfg.dtype)
        nn.write_param_blob(fh, opt.v, dtype=cfg.dtype)


def load_checkpoint(path, cfg: TrainConfig):
    """Rebuild (net, opt, epoch, step, rng) from a checkpoint written under
    the same configuration; a hash mismatch is a config error."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a training checkpoint")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        cfg_hash = fh.read(32).hex()
        if cfg_hash != cfg.config_hash():
            raise ValueError(
                f"{path}: checkpoint was written under a different configuration "
                f"({cfg_hash[:12]}... vs {cfg.config_hash()[:12]}...)"
            )
        epoch, step, adam_t = struct.unpack("<IQQ", fh.read(20))
        (rng_len,) = struct.unpack("<I", fh.read(4))
        rng_state = json.loads(fh.read(rng_len).decode("utf-8"))
        params = nn.read_param_blob(fh)
        m = nn.read_param_blob(fh)
        v = nn.read_param_blob(fh)
    net = cfg.build_network()
    try:
        nn.assign_params(net, params)
    except ValueError as exc:
        raise ValueError(f"{path}: checkpoint incompatible with configured network: {exc}") from exc
    opt = Adam(net.named_parameters())
    opt.t = adam_t
    opt.m = {k: m[k].astype(cfg.dtype) for k in opt.m}
    opt.v = {k: v[k].astype(cfg.dtype) for k in opt.v}
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return net, opt, epoch, step, rng


# -- the loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    config: TrainConfig
    history: list[dict]
    final_checkpoint: str
    checkpoints: list[str] = field(default_factory=list)


def train(cfg: TrainConfig, resume_from: str | None = None,
          cases: list[LoadedCase] | None = None) -> TrainResult:
    """Run (or resume) training; returns per-epoch history and checkpoints.

    `cases` short-circuits dataset discovery for callers that already hold
    loaded volumes (the harness and tests).
    """
    cfg = cfg.resolved()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out_dir)

    if cases is None:
        cases = load_bucket(cfg, "train")
    if not cases:
        raise ValueError("training bucket is empty")
    if cfg.needs_clean_reference() and any(c.clean is None for c in cases):
        raise MissingCleanReferenceError("clean reference volumes required for joint training")

    if resume_from:
        net, opt, start_epoch, global_step, rng = load_checkpoint(resume_from, cfg)
    else:
        net = cfg.build_network()
        opt = Adam(net.named_parameters())
        start_epoch, global_step = 0, 0
        rng = np.random.default_rng(cfg.seed)

    loss_cfg = JointLossConfig(
        lambda_rec=cfg.lambda_rec if cfg.use_fdmds else 0.0,
        dice_smooth_eps=cfg.dice_eps,
        rec_l1=cfg.rec_l1,
    )
    uniform = ClassWeights.uniform()
    boosted = ClassWeights(*cfg.class_weights, activation_epoch=cfg.activation_epoch)

    history: list[dict] = []
    checkpoints: list[str] = []
    dtype = cfg.dtype
    stop = False

    for epoch in range(start_epoch, cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
        weights = boosted if (cfg.et_weight and epoch >= cfg.activation_epoch) else uniform
        order = rng.permutation(len(cases))
        stats = {"loss": 0.0, "l_seg": 0.0, "l_rec": 0.0,
                 "dice_et": 0.0, "dice_tc": 0.0, "dice_wt": 0.0}
        n_steps = 0
        for idx in order:
            case = cases[idx]
            corner = random_crop_corner(rng, case.inputs.shape[1:], cfg.patch_size)
            source = case.inputs
            if cfg.mix_clean and case.clean is not None and bool(rng.integers(0, 2)):
                source = case.clean
            x = crop(source, corner, cfg.patch_size).astype(dtype)
            g = crop(case.regions, corner, cfg.patch_size)
            out = net(x)
            probs = out.prediction.probs
            l_seg = weighted_dice_loss(
                probs.reshape((1,) + probs.shape), g[None], weights, eps=cfg.dice_eps
            )
            if cfg.use_fdmds and loss_cfg.lambda_rec > 0:
                if case.clean is None:
                    raise MissingCleanReferenceError(
                        f"case {case.case_id!r} has no clean reference"
                    )
                target = crop(case.clean, corner, cfg.patch_size).astype(dtype)
                l_rec = recon_loss(out.deblurred, target, l1=cfg.rec_l1)
            else:
                l_rec = Tensor(np.zeros((), dtype=dtype))
            loss = joint_loss(l_seg, l_rec, loss_cfg)

            terms = {
                "loss": float(loss.data),
                "l_seg": float(l_seg.data),
                "l_rec": float(l_rec.data),
            }
            if not all(np.isfinite(v) for v in terms.values()):
                raise TrainingDiverged(epoch, global_step, lr, terms)

            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            global_step += 1
            n_steps += 1

            dice_now = soft_dice_batch(probs.detach().reshape((1,) + probs.shape), g[None]).data
            stats["loss"] += terms["loss"]
            stats["l_seg"] += terms["l_seg"]
            stats["l_rec"] += terms["l_rec"]
            stats["dice_et"] += float(dice_now[0])
            stats["dice_tc"] += float(dice_now[1])
            stats["dice_wt"] += float(dice_now[2])
            if cfg.max_steps is not None and global_step >= cfg.max_steps:
                stop = True
                break

        record = {"epoch": epoch, "lr": lr, "steps": n_steps,
                  **{k: v / max(n_steps, 1) for k, v in stats.items()}}
        history.append(record)

        finished = epoch + 1
        if finished % cfg.checkpoint_every == 0 and not stop and finished < cfg.epochs:
            ck = out_dir / f"ckpt_{finished:04d}.bin"
            save_checkpoint(ck, net, opt, finished, global_step, rng, cfg)
            checkpoints.append(str(ck))
        if stop:
            break

    final = out_dir / "ckpt_final.bin"
    save_checkpoint(final, net, opt, len(history) + start_epoch, global_step, rng, cfg)
    checkpoints.append(str(final))
    (out_dir / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    return TrainResult(config=cfg, history=history, final_checkpoint=str(final), checkpoints=checkpoints)
