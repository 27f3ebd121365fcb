"""Volume and label I/O, normalization, region mapping, dataset splits.

File formats:
  - Uncompressed single-file NIfTI-1 (348-byte little-endian header, data at
    vox_offset; datatypes int16, float32, float64). Scale factors, extensions
    and compressed variants are out of scope.
  - Raw pairs: `<name>.raw` little-endian float64 + `<name>.meta` text
    sidecar (`dims=D,H,W`, `spacing=x,y,z`, `modality=<tag>`).
  - Split manifests: one `case_id<TAB>bucket` line per case.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class VolumeIOError(Exception):
    """Base class for volume reading/writing failures."""


class FormatError(VolumeIOError):
    """Header is malformed or not a supported container."""


class UnsupportedFormatError(VolumeIOError):
    """Recognized container with an unsupported datatype or layout."""


class CorruptVolumeError(VolumeIOError):
    """Body does not match the header (truncation, size mismatch, non-finite)."""


class InvalidLabelError(ValueError):
    """Label volume contains codes outside {0, 1, 2, 4}."""


class SplitSizeError(ValueError):
    """Too few cases for the requested split."""


class Modality(Enum):
    T1 = "t1"
    T1CE = "t1ce"
    T2 = "t2"
    FLAIR = "flair"


#: Fixed channel order of MultiModalVolume.
MODALITIES: tuple[Modality, ...] = (Modality.T1, Modality.T1CE, Modality.T2, Modality.FLAIR)

VALID_LABEL_CODES = (0, 1, 2, 4)  # background, necrotic, edema, enhancing


@dataclass
class MultiModalVolume:
    """Four-channel volume in the fixed (T1, T1ce, T2, FLAIR) order."""

    data: np.ndarray  # [4, D, H, W]
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] != 4:
            raise ValueError(f"multimodal data must be [4,D,H,W], got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError(f"non-finite values in volume {self.case_id!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class RegionMasks:
    """Nested binary tumor regions: et within tc within wt."""

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def __post_init__(self):
        for name in ("et", "tc", "wt"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        if self.et.shape != self.tc.shape or self.tc.shape != self.wt.shape:
            raise ValueError("region masks must share a shape")
        if np.any(self.et & ~self.tc) or np.any(self.tc & ~self.wt):
            raise ValueError("region nesting violated: expected et <= tc <= wt")

    def stacked(self) -> np.ndarray:
        """[3, D, H, W] float array in (et, tc, wt) channel order."""
        return np.stack([self.et, self.tc, self.wt]).astype(np.float64)


@dataclass
class CaseRecord:
    case_id: str
    volume_paths: dict[str, Path]  # modality tag -> path
    label_path: Path | None = None


@dataclass
class DatasetSplit:
    train: list[CaseRecord] = field(default_factory=list)
    val: list[CaseRecord] = field(default_factory=list)
    test: list[CaseRecord] = field(default_factory=list)

    def bucket(self, name: str) -> list[CaseRecord]:
        return getattr(self, name)


# -- NIfTI-1 -----------------------------------------------------------------

_NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {4: np.int16, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(np.int16): 4, np.dtype(np.float32): 16, np.dtype(np.float64): 64}


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    raw = path.read_bytes()
    if len(raw) < _NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad NIfTI magic {magic!r}")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: sizeof_hdr={sizeof_hdr}, expected {_NIFTI_HEADER_SIZE}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise FormatError(f"{path}: expected 3 spatial dims, header declares {dim[0]}")
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: non-positive dims {shape}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset) if vox_offset >= _NIFTI_HEADER_SIZE else _NIFTI_HEADER_SIZE + 4
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    n = int(np.prod(shape))
    need = offset + n * dt.itemsize
    if len(raw) < need:
        raise CorruptVolumeError(
            f"{path}: body truncated, need {need} bytes for dims {shape}, have {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dt, count=n, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    if not np.isfinite(data).all():
        raise CorruptVolumeError(f"{path}: non-finite voxel values")
    return data, spacing


def save_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), dtype=np.float64):
    """Write an uncompressed single-file NIfTI-1 volume (data at offset 352)."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"save_nifti expects a 3D array, got {data.shape}")
    dt = np.dtype(dtype)
    if dt not in _NIFTI_CODES:
        raise UnsupportedFormatError(f"cannot write dtype {dt}")
    header = bytearray(_NIFTI_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _NIFTI_CODES[dt])
    struct.pack_into("<h", header, 72, dt.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, float(_NIFTI_HEADER_SIZE + 4))
    header[344:348] = b"n+1\x00"
    body = np.asarray(data, dtype=dt.newbyteorder("<")).tobytes(order="F")
    path.write_bytes(bytes(header) + b"\x00" * 4 + body)


# -- raw + sidecar ---------------------------------------------------------

def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    meta_path = path.with_suffix(".meta")
    if not meta_path.exists():
        raise FormatError(f"{path}: missing sidecar {meta_path.name}")
    meta = {}
    for line in meta_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{meta_path}: bad line {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    try:
        shape = tuple(int(v) for v in meta["dims"].split(","))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{meta_path}: missing or bad dims") from exc
    if len(shape) != 3 or any(d < 1 for d in shape):
        raise FormatError(f"{meta_path}: dims must be three positive integers")
    spacing = (1.0, 1.0, 1.0)
    if "spacing" in meta:
        parts = meta["spacing"].split(",")
        if len(parts) != 3:
            raise FormatError(f"{meta_path}: spacing must have three components")
        spacing = tuple(float(v) for v in parts)
    raw = path.read_bytes()
    n = int(np.prod(shape))
    if len(raw) < n * 8:
        raise CorruptVolumeError(f"{path}: need {n * 8} bytes for dims {shape}, have {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", count=n).reshape(shape)
    if not np.isfinite(data).all():
        raise CorruptVolumeError(f"{path}: non-finite voxel values")
    return data.astype(np.float64), spacing


def save_raw(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), modality: str = ""):
    path = Path(path)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"save_raw expects a 3D array, got {data.shape}")
    path.write_bytes(data.astype("<f8").tobytes())
    lines = [
        "dims=" + ",".join(str(d) for d in data.shape),
        "spacing=" + ",".join(f"{s:g}" for s in spacing),
    ]
    if modality:
        lines.append(f"modality={modality}")
    path.with_suffix(".meta").write_text("\n".join(lines) + "\n")


def load_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Load one scalar 3D volume; returns (float64 [D,H,W], voxel spacing)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".raw":
        return _read_raw(path)
    return _read_nifti(path)


def load_labels(path) -> np.ndarray:
    """Load an integer label volume and validate its codes."""
    data, _ = load_volume(path)
    labels = np.rint(data).astype(np.int16)
    if np.abs(data - labels).max() > 1e-6:
        raise InvalidLabelError(f"{path}: non-integer label values")
    validate_labels(labels)
    return labels


def validate_labels(labels: np.ndarray):
    present = np.unique(labels)
    bad = sorted(set(int(v) for v in present) - set(VALID_LABEL_CODES))
    if bad:
        raise InvalidLabelError(f"unknown label codes {bad}; expected subset of {VALID_LABEL_CODES}")


# -- region mapping and normalization --------------------------------------

def labels_to_regions(labels: np.ndarray) -> RegionMasks:
    """BraTS code mapping: ET={4}, TC={1,4}, WT={1,2,4}."""
    labels = np.asarray(labels)
    validate_labels(labels)
    et = labels == 4
    tc = et | (labels == 1)
    wt = tc | (labels == 2)
    return RegionMasks(et=et, tc=tc, wt=wt)


def znorm_channels(data: np.ndarray) -> np.ndarray:
    """Per-channel z-score over the nonzero support; zero voxels stay zero.

    A constant support region normalizes to zeros (guarded denominator).
    """
    data = np.asarray(data, dtype=np.float64)
    out = np.zeros_like(data)
    for c in range(data.shape[0]):
        channel = data[c]
        support = channel != 0
        if not support.any():
            continue
        vals = channel[support]
        mu = vals.mean()
        var = vals.var()
        out[c][support] = (vals - mu) / np.sqrt(var + 1e-12)
    return out


def znorm(volume: MultiModalVolume) -> MultiModalVolume:
    return MultiModalVolume(
        data=znorm_channels(volume.data),
        voxel_spacing=volume.voxel_spacing,
        case_id=volume.case_id,
    )


# -- dataset splits ------------------------------------------------------

def split_dataset(cases: list[CaseRecord], ratios=(8.0, 1.0, 1.0), seed: int = 0) -> DatasetSplit:
    """Deterministic shuffled split with largest-remainder bucket sizing.

    369 cases at 8:1:1 give 295/37/37.
    """
    if not cases:
        raise SplitSizeError("cannot split an empty case list")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    n = len(cases)
    nonzero = sum(1 for r in ratios if r > 0)
    if n < nonzero:
        raise SplitSizeError(f"{n} cases cannot fill {nonzero} split buckets")
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    remainder = n - sum(sizes)
    by_fraction = sorted(range(3), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in by_fraction[:remainder]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [cases[i] for i in order]
    train = shuffled[: sizes[0]]
    val = shuffled[sizes[0] : sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1] :]
    return DatasetSplit(train=train, val=val, test=test)


def write_split_manifest(path, split: DatasetSplit):
    lines = []
    for bucket in ("train", "val", "test"):
        for rec in split.bucket(bucket):
            lines.append(f"{rec.case_id}\t{bucket}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_split_manifest(path) -> dict[str, str]:
    assignment: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "val", "test"):
            raise FormatError(f"{path}:{lineno}: expected 'case_id<TAB>bucket', got {line!r}")
        assignment[parts[0]] = parts[1]
    return assignment


def apply_split_manifest(cases: list[CaseRecord], assignment: dict[str, str]) -> DatasetSplit:
    split = DatasetSplit()
    for rec in cases:
        bucket = assignment.get(rec.case_id)
        if bucket is not None:
            split.bucket(bucket).append(rec)
    return split


# -- on-disk case layout ----------------------------------------------------

def volume_filename(case_id: str, modality: Modality, suffix: str = "") -> str:
    tail = f"_{suffix}" if suffix else ""
    return f"{case_id}_{modality.value}{tail}.nii"


def label_filename(case_id: str) -> str:
    return f"{case_id}_seg.nii"


def discover_cases(directory, suffix: str = "") -> list[CaseRecord]:
    """Enumerate cases in a directory by their `<case>_seg.nii` label files."""
    directory = Path(directory)
    records = []
    for seg in sorted(directory.glob("*_seg.nii")):
        case_id = seg.name[: -len("_seg.nii")]
        paths = {m.value: directory / volume_filename(case_id, m, suffix) for m in MODALITIES}
        records.append(CaseRecord(case_id=case_id, volume_paths=paths, label_path=seg))
    return records


def load_case_volume(record: CaseRecord) -> MultiModalVolume:
    channels = []
    spacing = None
    for m in MODALITIES:
        data, sp = load_volume(record.volume_paths[m.value])
        if spacing is None:
            spacing = sp
        if channels and channels[0].shape != data.shape:
            raise CorruptVolumeError(
                f"{record.case_id}: modality {m.value} shape {data.shape} differs from {channels[0].shape}"
            )
        channels.append(data)
    return MultiModalVolume(np.stack(channels), voxel_spacing=spacing, case_id=record.case_id)


def save_case(directory, case_id: str, volume: np.ndarray, labels: np.ndarray | None = None,
              spacing=(1.0, 1.0, 1.0), suffix: str = ""):
    """Write a 4-channel volume (and optional labels) as per-modality NIfTI files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    volume = np.asarray(volume)
    if volume.ndim != 4 or volume.shape[0] != 4:
        raise ValueError(f"expected [4,D,H,W] volume, got {volume.shape}")
    for i, m in enumerate(MODALITIES):
        save_nifti(directory / volume_filename(case_id, m, suffix), volume[i], spacing=spacing)
    if labels is not None:
        save_nifti(directory / label_filename(case_id), np.asarray(labels), spacing=spacing, dtype=np.int16)
