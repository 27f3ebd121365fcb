"""Synthetic multimodal brain phantoms with nested tumor regions.

A smooth ellipsoidal brain carries three concentric deformed ellipsoids
labelled edema (2), necrotic (1) and enhancing (4) from the outside in, so
the derived region masks nest by construction and the expected voxel count
of each region is the analytic ellipsoid volume. Deformation is a
volume-preserving per-axis stretch plus a random rigid rotation of the
tumor axes, shared by all three surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume_io import MultiModalVolume, validate_labels


class PhantomConfigError(ValueError):
    """Phantom geometry or contrast configuration is unusable."""


@dataclass(frozen=True)
class ModalityContrast:
    brain: float
    edema: float
    necrotic: float
    enhancing: float


#: Relative tissue intensities per modality. Enhancing tissue is bright only
#: in the contrast-enhanced channel; edema stands out in T2/FLAIR.
DEFAULT_CONTRASTS: dict[str, ModalityContrast] = {
    "t1": ModalityContrast(brain=1.00, edema=0.75, necrotic=0.55, enhancing=0.90),
    "t1ce": ModalityContrast(brain=1.00, edema=0.80, necrotic=0.45, enhancing=1.90),
    "t2": ModalityContrast(brain=0.85, edema=1.60, necrotic=1.25, enhancing=0.95),
    "flair": ModalityContrast(brain=0.90, edema=1.75, necrotic=1.05, enhancing=1.00),
}


@dataclass(frozen=True)
class PhantomConfig:
    tumor_radii: tuple[float, float, float] | None = None  # (r_wt, r_tc, r_et) voxels
    brain_radius_frac: float = 0.42
    deform: float = 0.06  # per-axis stretch amplitude, volume preserving
    center_jitter: float = 1.5  # tumor center offset scale, voxels
    noise_sigma: float = 0.04
    edge_smooth_sigma: float = 0.8
    contrasts: dict = field(default_factory=lambda: dict(DEFAULT_CONTRASTS))

    def resolved_radii(self, size) -> tuple[float, float, float]:
        if self.tumor_radii is not None:
            return self.tumor_radii
        m = min(size)
        return (0.21 * m, 0.13 * m, 0.07 * m)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def generate_phantom(
    seed: int, size=(48, 48, 48), config: PhantomConfig | None = None
) -> tuple[MultiModalVolume, np.ndarray]:
    """Deterministic (seed, size, config) -> (volume, labels)."""
    cfg = config or PhantomConfig()
    size = tuple(int(s) for s in size)
    if any(s < 8 for s in size):
        raise PhantomConfigError(f"phantom size must be >= 8 per axis, got {size}")
    r_wt, r_tc, r_et = cfg.resolved_radii(size)
    if not (r_et < r_tc < r_wt):
        raise PhantomConfigError(f"tumor radii must nest strictly, got {(r_wt, r_tc, r_et)}")

    rng = np.random.default_rng(seed)
    center = (np.asarray(size, dtype=np.float64) - 1.0) / 2.0
    brain_radii = cfg.brain_radius_frac * np.asarray(size, dtype=np.float64)
    if r_wt >= brain_radii.min():
        raise PhantomConfigError(
            f"whole-tumor radius {r_wt} exceeds brain radius {brain_radii.min():.1f}"
        )

    # volume-preserving stretch shared by all three surfaces keeps them nested
    stretch = rng.uniform(1.0 - cfg.deform, 1.0 + cfg.deform, size=3)
    stretch /= np.cbrt(stretch.prod())
    rotation = _random_rotation(rng)
    tumor_center = center + rng.uniform(-1.0, 1.0, size=3) * cfg.center_jitter

    reach = r_wt * stretch.max() + np.abs(tumor_center - center).max()
    if reach >= 0.95 * brain_radii.min():
        raise PhantomConfigError("deformed tumor does not fit inside the brain")

    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing="ij"))
    rel = grid - center.reshape(3, 1, 1, 1)
    brain_q = ((rel / brain_radii.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
    brain_mask = brain_q <= 1.0

    trel = grid - tumor_center.reshape(3, 1, 1, 1)
    local = np.einsum("ij,jdhw->idhw", rotation, trel)

    def inside(radius: float) -> np.ndarray:
        axes = (radius * stretch).reshape(3, 1, 1, 1)
        return ((local / axes) ** 2).sum(axis=0) <= 1.0

    labels = np.zeros(size, dtype=np.int16)
    labels[inside(r_wt)] = 2
    labels[inside(r_tc)] = 1
    labels[inside(r_et)] = 4
    validate_labels(labels)

    noise = rng.normal(0.0, cfg.noise_sigma, size=(4,) + size)
    channels = []
    for i, tag in enumerate(("t1", "t1ce", "t2", "flair")):
        contrast = cfg.contrasts[tag]
        vol = contrast.brain * (1.05 - 0.25 * np.minimum(brain_q, 1.0))
        vol[labels == 2] = contrast.edema
        vol[labels == 1] = contrast.necrotic
        vol[labels == 4] = contrast.enhancing
        if cfg.edge_smooth_sigma > 0:
            vol = gaussian_filter(vol, sigma=cfg.edge_smooth_sigma)
        vol = np.where(brain_mask, vol + noise[i], 0.0)
        channels.append(np.maximum(vol, 0.0))

    volume = MultiModalVolume(
        data=np.stack(channels), voxel_spacing=(1.0, 1.0, 1.0), case_id=f"phantom_{seed:04d}"
    )
    return volume, labels
