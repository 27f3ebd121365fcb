"""Joint deblurring-segmentation network.

Three parts: a residual convolutional deblurring stem operating in the
voxel feature domain, a multi-scale cross-modal attention encoder with
per-scale fusion, and an upsampling decoder with residual skips feeding a
three-channel sigmoid prediction head (ET, TC, WT probabilities).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class FdmdsConfig:
    c_mid: int = 16
    # The printed second-stage equation convolves the raw input again; the
    # surrounding description stacks the blocks (5^3 effective receptive
    # field). literal_eq3=True reproduces the printed form.
    literal_eq3: bool = False


class Fdmds(nn.Module):
    """Residual deblurring stem: expand, refine, compress, residual add.

    Spatial dims are preserved end to end; output channel count equals the
    input's four modalities.
    """

    def __init__(self, cfg: FdmdsConfig, rng, dtype=np.float64):
        self.literal_eq3 = cfg.literal_eq3
        in2 = 4 if cfg.literal_eq3 else cfg.c_mid
        self.block1 = nn.ConvBlock3d(4, cfg.c_mid, 3, rng, dtype=dtype)
        self.block2 = nn.ConvBlock3d(in2, cfg.c_mid, 3, rng, dtype=dtype)
        self.conv3 = nn.Conv3d(cfg.c_mid, 4, 3, rng, pad=1, dtype=dtype)

    def __call__(self, v_blur: Tensor) -> Tensor:
        if v_blur.ndim != 5 or v_blur.shape[1] != 4:
            raise ShapeError(f"deblurring stem expects [1,4,D,H,W], got {v_blur.shape}")
        h1 = self.block1(v_blur)
        h2 = self.block2(v_blur if self.literal_eq3 else h1)
        residual = self.conv3(h2)
        return ad.leaky_relu(residual + v_blur)


@dataclass(frozen=True)
class DamiConfig:
    embed_dim: int = 32
    patch_stride: int = 4
    encoder_depths: tuple[int, ...] = (2, 2, 2)
    stage_channels: tuple[int, ...] = (32, 64, 128)
    attn_dims: tuple[int, ...] | None = None  # defaults to stage_channels
    heads: int = 1
    ffn_ratio: int = 4
    per_modality_qkv: bool = False
    upsample: str = "nearest"  # or "trilinear"

    def __post_init__(self):
        if len(self.encoder_depths) != len(self.stage_channels):
            raise ValueError("encoder_depths and stage_channels must have equal length")
        ps = self.patch_stride
        if ps < 1 or (ps & (ps - 1)) != 0:
            raise ValueError(f"patch_stride must be a power of two, got {ps}")
        for d in self.resolved_attn_dims:
            if d % self.heads:
                raise ValueError(f"attention dim {d} not divisible by {self.heads} heads")
        if self.upsample not in ("nearest", "trilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")

    @property
    def resolved_attn_dims(self) -> tuple[int, ...]:
        return self.attn_dims if self.attn_dims is not None else self.stage_channels

    @property
    def num_stages(self) -> int:
        return len(self.encoder_depths)

    @property
    def total_downsample(self) -> int:
        return self.patch_stride * 2 ** (self.num_stages - 1)

    @property
    def decoder_stages(self) -> int:
        # x2 upsampling blocks back through the encoder scales plus the
        # full-resolution refinement block. 5 for the default config.
        return (self.num_stages - 1) + int(math.log2(self.patch_stride)) + 1


def _upsample2x(x: Tensor, mode: str) -> Tensor:
    if mode == "trilinear":
        return ad_upsample_trilinear2x(x)
    return ad.upsample_nearest2x(x)


def ad_upsample_trilinear2x(x: Tensor) -> Tensor:
    """Separable trilinear x2 upsampling (half-voxel aligned, edge clamped)."""
    out = x
    for axis in (2, 3, 4):
        out = _linear_up_axis(out, axis)
    return out


def _linear_up_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0 = np.clip(np.floor(src).astype(int), 0, n - 1)
    i1 = np.clip(i0 + 1, 0, n - 1)
    w = np.clip(src - np.floor(src), 0.0, 1.0)
    w = np.where(src < 0, 0.0, np.where(src > n - 1, 0.0, w))
    xt = x
    data = xt.data
    shape = [1] * data.ndim
    shape[axis] = 2 * n
    w1 = w.reshape(shape)
    out_data = np.take(data, i0, axis=axis) * (1.0 - w1) + np.take(data, i1, axis=axis) * w1
    out_data = out_data.astype(data.dtype)

    def backward(g):
        gx = np.zeros_like(data)
        np.add.at(gx, _axis_index(data.ndim, axis, i0), (g * (1.0 - w1)).astype(data.dtype))
        np.add.at(gx, _axis_index(data.ndim, axis, i1), (g * w1).astype(data.dtype))
        ad._accumulate(xt, gx)

    return ad._node(out_data, (xt,), backward)


def _axis_index(ndim, axis, idx):
    sl: list = [slice(None)] * ndim
    sl[axis] = idx
    return tuple(sl)


class CrossModalBlock(nn.Module):
    """One interaction layer: every modality queries the keys/values of all
    modalities (itself included) and sums the four attention readouts, then
    residual output projection and a pre-norm feed-forward network.

    Projections are shared across modalities by default, which makes the
    block exactly permutation-equivariant over modality order.
    """

    def __init__(self, channels, attn_dim, rng, heads=1, ffn_ratio=4, per_modality_qkv=False, dtype=np.float64):
        self.heads = heads
        self.attn_dim = attn_dim
        self.ln_attn = nn.LayerNorm(channels, dtype=dtype)
        n_proj = 4 if per_modality_qkv else 1
        self.wq = [nn.Linear(channels, attn_dim, rng, bias=False, dtype=dtype) for _ in range(n_proj)]
        self.wk = [nn.Linear(channels, attn_dim, rng, bias=False, dtype=dtype) for _ in range(n_proj)]
        self.wv = [nn.Linear(channels, attn_dim, rng, bias=False, dtype=dtype) for _ in range(n_proj)]
        self.out = nn.Linear(attn_dim, channels, rng, dtype=dtype)
        self.ln_ffn = nn.LayerNorm(channels, dtype=dtype)
        self.ffn_in = nn.Linear(channels, ffn_ratio * channels, rng, dtype=dtype)
        self.ffn_out = nn.Linear(ffn_ratio * channels, channels, rng, dtype=dtype)
        self.per_modality_qkv = per_modality_qkv

    def _split_heads(self, t: Tensor) -> Tensor:
        n, d = t.shape
        h = self.heads
        return ad.permute(ad.reshape(t, (n, h, d // h)), (1, 0, 2))

    def _merge_heads(self, t: Tensor) -> Tensor:
        h, n, dh = t.shape
        return ad.reshape(ad.permute(t, (1, 0, 2)), (n, h * dh))

    def _proj(self, ws, m: int, x: Tensor) -> Tensor:
        return ws[m](x) if self.per_modality_qkv else ws[0](x)

    def __call__(self, xs: list[Tensor]) -> list[Tensor]:
        if len(xs) != 4:
            raise ValueError(f"cross-modal block expects 4 modalities, got {len(xs)}")
        normed = [self.ln_attn(x) for x in xs]
        qs = [self._split_heads(self._proj(self.wq, m, x)) for m, x in enumerate(normed)]
        ks = [self._split_heads(self._proj(self.wk, m, x)) for m, x in enumerate(normed)]
        vs = [self._split_heads(self._proj(self.wv, m, x)) for m, x in enumerate(normed)]
        out = []
        for m in range(4):
            y = None
            for mp in range(4):
                a = nn.attention(qs[m], ks[mp], vs[mp])
                y = a if y is None else y + a
            x = xs[m] + self.out(self._merge_heads(y))
            x = x + self.ffn_out(ad.leaky_relu(self.ffn_in(self.ln_ffn(x))))
            out.append(x)
        return out


class DamiEncoder(nn.Module):
    """Per-modality token embedding, stacked cross-modal blocks per scale,
    concat + 1^3-conv fusion at each scale, and x2 downsampling of every
    modality stream between scales. Also emits a full-resolution shallow
    skip of the stem output for the decoder."""

    def __init__(self, cfg: DamiConfig, rng, dtype=np.float64):
        self.cfg = cfg
        ch = cfg.stage_channels
        dims = cfg.resolved_attn_dims
        self.embeds = [nn.BlockLinear3d(1, cfg.embed_dim, cfg.patch_stride, rng, dtype=dtype) for _ in range(4)]
        self.stages = [
            [
                CrossModalBlock(
                    ch[l], dims[l], rng,
                    heads=cfg.heads, ffn_ratio=cfg.ffn_ratio,
                    per_modality_qkv=cfg.per_modality_qkv, dtype=dtype,
                )
                for _ in range(cfg.encoder_depths[l])
            ]
            for l in range(cfg.num_stages)
        ]
        self.fuses = [nn.ConvBlock3d(4 * ch[l], ch[l], 1, rng, dtype=dtype) for l in range(cfg.num_stages)]
        self.downs = [
            [nn.BlockLinear3d(ch[l], ch[l + 1], 2, rng, dtype=dtype) for _ in range(4)]
            for l in range(cfg.num_stages - 1)
        ]
        self.shallow = nn.ConvBlock3d(4, cfg.embed_dim // 2, 3, rng, dtype=dtype)

    def __call__(self, v: Tensor) -> tuple[list[Tensor], Tensor]:
        cfg = self.cfg
        _, c, d, h, w = v.shape
        if c != 4:
            raise ShapeError(f"encoder expects 4 modalities, got {c}")
        ps = cfg.patch_stride
        if d % ps or h % ps or w % ps:
            raise ShapeError(f"input dims {(d, h, w)} not divisible by patch stride {ps}")
        need = cfg.total_downsample
        if d % need or h % need or w % need:
            raise ShapeError(f"input dims {(d, h, w)} not divisible by total downsample {need}")

        toks = [self.embeds[m](v[:, m : m + 1]) for m in range(4)]
        dims = (d // ps, h // ps, w // ps)
        fused: list[Tensor] = []
        for l in range(cfg.num_stages):
            for block in self.stages[l]:
                toks = block(toks)
            maps = [nn.tokens_to_map(t, dims) for t in toks]
            fused.append(self.fuses[l](ad.concat(maps, axis=1)))
            if l < cfg.num_stages - 1:
                toks = [self.downs[l][m](maps[m]) for m in range(4)]
                dims = (dims[0] // 2, dims[1] // 2, dims[2] // 2)
        return fused, self.shallow(v)


class DamiDecoder(nn.Module):
    """Top-down x2 upsampling with concat skips at every encoder scale,
    continued to voxel resolution where the shallow skip joins, then a final
    refinement block."""

    def __init__(self, cfg: DamiConfig, rng, dtype=np.float64):
        self.cfg = cfg
        ch = cfg.stage_channels
        c0 = ch[0]
        self.skip_blocks = [
            nn.ConvBlock3d(ch[l + 1] + ch[l], ch[l], 3, rng, dtype=dtype)
            for l in range(cfg.num_stages - 2, -1, -1)
        ]
        n_extra = int(math.log2(cfg.patch_stride))
        self.mids = [nn.ConvBlock3d(c0, c0, 3, rng, dtype=dtype) for _ in range(max(0, n_extra - 1))]
        self.final_up = n_extra >= 1
        self.final = nn.ConvBlock3d(c0 + cfg.embed_dim // 2, c0, 3, rng, dtype=dtype)
        self.refine = nn.ConvBlock3d(c0, c0, 3, rng, dtype=dtype)

    def __call__(self, fused: list[Tensor], shallow: Tensor, zero_skips: bool = False) -> Tensor:
        mode = self.cfg.upsample
        dec = fused[-1]
        for i, l in enumerate(range(self.cfg.num_stages - 2, -1, -1)):
            up = _upsample2x(dec, mode)
            skip = fused[l] * 0.0 if zero_skips else fused[l]
            if up.shape[2:] != skip.shape[2:]:
                raise ShapeError(f"decoder scale mismatch: {up.shape} vs skip {skip.shape}")
            dec = self.skip_blocks[i](ad.concat([up, skip], axis=1))
        for mid in self.mids:
            dec = mid(_upsample2x(dec, mode))
        if self.final_up:
            dec = _upsample2x(dec, mode)
        sk = shallow * 0.0 if zero_skips else shallow
        if dec.shape[2:] != sk.shape[2:]:
            raise ShapeError(f"decoder/shallow mismatch: {dec.shape} vs {sk.shape}")
        dec = self.final(ad.concat([dec, sk], axis=1))
        return self.refine(dec)


@dataclass
class Prediction:
    """Per-region tumor probabilities, channel order (ET, TC, WT)."""

    probs: Tensor  # [3, D, H, W], values in (0, 1)
    logits: Tensor

    BINARIZE_THRESHOLD = 0.5

    def masks(self) -> np.ndarray:
        return self.probs.data > self.BINARIZE_THRESHOLD


@dataclass
class NetOutput:
    deblurred: Tensor | None  # [4, D, H, W] stem output, None when bypassed
    prediction: Prediction


class PredictionHead(nn.Module):
    def __init__(self, cin, rng, dtype=np.float64):
        self.conv = nn.Conv3d(cin, 3, 1, rng, dtype=dtype)

    def __call__(self, f_out: Tensor) -> Prediction:
        logits5 = self.conv(f_out)
        _, _, d, h, w = logits5.shape
        logits = ad.reshape(logits5, (3, d, h, w))
        return Prediction(probs=ad.sigmoid(logits), logits=logits)


class DabsegNet(nn.Module):
    """Full pipeline: optional deblurring stem, encoder, decoder, head."""

    def __init__(
        self,
        dami: DamiConfig | None = None,
        fdmds: FdmdsConfig | None = FdmdsConfig(),
        use_fdmds: bool = True,
        seed: int = 0,
        dtype=np.float64,
    ):
        self.dami_cfg = dami if dami is not None else DamiConfig()
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.fdmds = Fdmds(fdmds if fdmds is not None else FdmdsConfig(), rng, dtype) if use_fdmds else None
        self.encoder = DamiEncoder(self.dami_cfg, rng, dtype)
        self.decoder = DamiDecoder(self.dami_cfg, rng, dtype)
        self.head = PredictionHead(self.dami_cfg.stage_channels[0], rng, dtype)

    def __call__(self, x, zero_skips: bool = False) -> NetOutput:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if t.ndim != 4 or t.shape[0] != 4:
            raise ShapeError(f"network input must be [4,D,H,W], got {t.shape}")
        xb = ad.reshape(t, (1,) + t.shape)
        if self.fdmds is not None:
            v = self.fdmds(xb)
            deblurred = ad.reshape(v, t.shape)
        else:
            v = xb
            deblurred = None
        fused, shallow = self.encoder(v)
        f_out = self.decoder(fused, shallow, zero_skips=zero_skips)
        return NetOutput(deblurred=deblurred, prediction=self.head(f_out))
