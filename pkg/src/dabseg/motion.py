"""Rigid-motion k-space artifact simulation.

A motion timeline assigns one rigid state to each contiguous block of
k-space planes along a phase-encode axis. The degraded volume is the
magnitude of the inverse transform of a composite spectrum whose blocks
come from rigidly transformed copies of the source volume, i.e. a
piecewise-constant motion trajectory sampled over the acquisition.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .volume_io import CaseRecord, MODALITIES, load_volume, save_nifti, volume_filename

MAX_ROTATION_DEG = 15.0
MAX_TRANSLATION_VOX = 5.0


@dataclass(frozen=True)
class RigidMotionState:
    """Rotation (degrees, about the volume center) and translation (voxels)."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(float(r) for r in self.rotation))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        if max(abs(r) for r in self.rotation) > MAX_ROTATION_DEG:
            raise ValueError(f"rotation {self.rotation} exceeds +/-{MAX_ROTATION_DEG} deg")
        if max(abs(t) for t in self.translation) > MAX_TRANSLATION_VOX:
            raise ValueError(f"translation {self.translation} exceeds +/-{MAX_TRANSLATION_VOX} vox")

    @property
    def is_identity(self) -> bool:
        return all(r == 0 for r in self.rotation) and all(t == 0 for t in self.translation)


@dataclass(frozen=True)
class MotionTimeline:
    """Ordered (fraction, state) acquisition segments along one axis."""

    segments: tuple[tuple[float, RigidMotionState], ...]
    axis: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "segments", tuple((float(f), s) for f, s in self.segments)
        )
        if not self.segments:
            raise ValueError("timeline must contain at least one segment")
        if any(f <= 0 for f, _ in self.segments):
            raise ValueError("segment fractions must be positive")
        total = sum(f for f, _ in self.segments)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"segment fractions sum to {total}, expected 1")
        if self.axis not in (0, 1, 2):
            raise ValueError(f"phase-encode axis must be 0, 1 or 2, got {self.axis}")


@dataclass(frozen=True)
class SeverityPreset:
    name: str = "S2"
    k_segments: tuple[int, int] = (2, 4)  # inclusive range
    max_rotation_deg: float = 5.0
    max_translation_vox: float = 2.0

    def __post_init__(self):
        lo, hi = self.k_segments
        if not (1 <= lo <= hi):
            raise ValueError(f"bad segment count range {self.k_segments}")
        if not (0 <= self.max_rotation_deg <= MAX_ROTATION_DEG):
            raise ValueError(f"max rotation {self.max_rotation_deg} outside [0, {MAX_ROTATION_DEG}]")
        if not (0 <= self.max_translation_vox <= MAX_TRANSLATION_VOX):
            raise ValueError(
                f"max translation {self.max_translation_vox} outside [0, {MAX_TRANSLATION_VOX}]"
            )


S2_PRESET = SeverityPreset()


def write_preset_file(path, preset: SeverityPreset):
    Path(path).write_text(
        f"name={preset.name}\n"
        f"k_segments={preset.k_segments[0]}..{preset.k_segments[1]}\n"
        f"max_rot_deg={preset.max_rotation_deg:g}\n"
        f"max_trans_vox={preset.max_translation_vox:g}\n"
    )


def read_preset_file(path) -> SeverityPreset:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    try:
        lo, hi = values["k_segments"].split("..")
        return SeverityPreset(
            name=values.get("name", Path(path).stem),
            k_segments=(int(lo), int(hi)),
            max_rotation_deg=float(values["max_rot_deg"]),
            max_translation_vox=float(values["max_trans_vox"]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing preset key {exc}") from exc


# -- spectra ------------------------------------------------------------------

def fft3(volume: np.ndarray) -> np.ndarray:
    """Unnormalized forward 3D transform."""
    if volume.ndim != 3:
        raise ValueError(f"fft3 expects a 3D volume, got {volume.shape}")
    return np.fft.fftn(volume)


def ifft3(spectrum: np.ndarray) -> np.ndarray:
    """Inverse with the 1/(D*H*W) normalization."""
    if spectrum.ndim != 3:
        raise ValueError(f"ifft3 expects a 3D spectrum, got {spectrum.shape}")
    return np.fft.ifftn(spectrum)


# -- rigid resampling ------------------------------------------------------

def rotation_matrix(rotation_deg) -> np.ndarray:
    """Rotations about the array axes 0, 1, 2, applied in that order."""
    rx, ry, rz = (np.deg2rad(a) for a in rotation_deg)
    c, s = np.cos(rx), np.sin(rx)
    m0 = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    c, s = np.cos(ry), np.sin(ry)
    m1 = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    c, s = np.cos(rz), np.sin(rz)
    m2 = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return m2 @ m1 @ m0


def resample_rigid(volume: np.ndarray, rotation_deg, translation_vox) -> np.ndarray:
    """Trilinear resampling of a rigid transform about the volume center.

    Geometric core without the simulator's sanity bounds (used by the
    verification oracles, e.g. lattice-preserving 90-degree rotations).
    Out-of-bounds samples read as zero.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ValueError(f"rigid resampling expects a 3D volume, got {volume.shape}")
    if not np.isfinite(volume).all():
        raise ValueError("rigid resampling requires finite input")
    if all(r == 0 for r in rotation_deg) and all(t == 0 for t in translation_vox):
        return volume.copy()
    center = (np.asarray(volume.shape, dtype=np.float64) - 1.0) / 2.0
    rot = rotation_matrix(rotation_deg)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in volume.shape], indexing="ij"))
    rel = grid - (center + np.asarray(translation_vox, dtype=np.float64)).reshape(3, 1, 1, 1)
    src = np.einsum("ij,jdhw->idhw", rot.T, rel) + center.reshape(3, 1, 1, 1)
    return map_coordinates(volume, src, order=1, mode="constant", cval=0.0)


def apply_rigid(volume: np.ndarray, state: RigidMotionState) -> np.ndarray:
    """Rigid resampling for a validated motion state (sanity-bounded)."""
    return resample_rigid(volume, state.rotation, state.translation)


# -- k-space composition -------------------------------------------------

def plane_blocks(n_planes: int, fractions) -> list[tuple[int, int]]:
    """Contiguous [lo, hi) plane ranges sized by cumulative rounding."""
    bounds = np.rint(np.cumsum(fractions) * n_planes).astype(int)
    bounds[-1] = n_planes
    blocks = []
    lo = 0
    for hi in bounds:
        hi = max(lo, int(hi))
        blocks.append((lo, hi))
        lo = hi
    return blocks


def simulate_motion(volume: np.ndarray, timeline: MotionTimeline) -> np.ndarray:
    """Compose per-segment spectra over k-space plane blocks; return magnitude."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ValueError(f"simulate_motion expects a 3D volume, got {volume.shape}")
    n_planes = volume.shape[timeline.axis]
    blocks = plane_blocks(n_planes, [f for f, _ in timeline.segments])
    composite = np.zeros(volume.shape, dtype=np.complex128)
    for (lo, hi), (_, state) in zip(blocks, timeline.segments):
        if lo == hi:
            continue
        spectrum = fft3(apply_rigid(volume, state))
        sl: list = [slice(None)] * 3
        sl[timeline.axis] = slice(lo, hi)
        composite[tuple(sl)] = spectrum[tuple(sl)]
    return np.abs(ifft3(composite))


# -- dataset degradation -------------------------------------------------

def _derived_rng(seed: int, case_id: str, modality: str | None = None) -> np.random.Generator:
    digest = hashlib.sha256(case_id.encode("utf-8")).digest()
    keys = [int(seed) & 0xFFFFFFFF, int.from_bytes(digest[:8], "little")]
    if modality is not None:
        keys.append(int.from_bytes(hashlib.sha256(modality.encode()).digest()[:4], "little"))
    return np.random.default_rng(keys)


def sample_timeline(rng: np.random.Generator, preset: SeverityPreset) -> MotionTimeline:
    """First segment holds the reference (identity) position; later segments
    draw uniform rotations/translations within the preset bounds."""
    k = int(rng.integers(preset.k_segments[0], preset.k_segments[1] + 1))
    axis = int(rng.integers(0, 3))
    fractions = rng.uniform(0.5, 1.5, size=k)
    fractions /= fractions.sum()
    segments = []
    for i in range(k):
        if i == 0:
            state = RigidMotionState()
        else:
            state = RigidMotionState(
                rotation=tuple(rng.uniform(-preset.max_rotation_deg, preset.max_rotation_deg, 3)),
                translation=tuple(
                    rng.uniform(-preset.max_translation_vox, preset.max_translation_vox, 3)
                ),
            )
        segments.append((float(fractions[i]), state))
    return MotionTimeline(segments=tuple(segments), axis=axis)


def degrade_case(
    record: CaseRecord,
    preset: SeverityPreset,
    seed: int,
    out_dir=None,
    per_modality_motion: bool = False,
) -> CaseRecord:
    """Degrade all four modalities of one case; pure function of
    (case volumes, preset, seed). All modalities share one timeline unless
    per-modality motion is requested."""
    out_dir = Path(out_dir) if out_dir is not None else Path(next(iter(record.volume_paths.values()))).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    shared = None if per_modality_motion else sample_timeline(_derived_rng(seed, record.case_id), preset)
    new_paths: dict[str, Path] = {}
    for m in MODALITIES:
        src = record.volume_paths[m.value]
        try:
            data, spacing = load_volume(src)
            timeline = shared or sample_timeline(_derived_rng(seed, record.case_id, m.value), preset)
            degraded = simulate_motion(data, timeline)
            dst = out_dir / volume_filename(record.case_id, m, preset.name)
            save_nifti(dst, degraded, spacing=spacing)
        except Exception as exc:
            raise RuntimeError(f"degrading case {record.case_id!r} modality {m.value}: {exc}") from exc
        new_paths[m.value] = dst
    return CaseRecord(case_id=record.case_id, volume_paths=new_paths, label_path=record.label_path)


def degrade_dataset(
    cases: list[CaseRecord],
    preset: SeverityPreset,
    seed: int,
    out_dir=None,
    per_modality_motion: bool = False,
) -> list[CaseRecord]:
    return [degrade_case(rec, preset, seed, out_dir, per_modality_motion) for rec in cases]
