"""Feature-volume files, manifests, splits and the synthetic volume generator.

Volume file layout (all little-endian)::

    b"FVOL" | version u32 | l u32 | d u32 | l*d float32, row-major

Manifest: UTF-8 CSV with header ``patient_id,path,label,split``. Relative
paths are resolved against the manifest's directory.
"""

import csv
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError, EmptyVolumeError, LabelError, ManifestError, NonFiniteError, ShapeError,
    VersionMismatchError, VolumeBadMagicError, VolumeFormatError, VolumeSizeMismatchError,
    VolumeTruncatedError,
)

FEATURE_DIM = 2048
VOLUME_MAGIC = b"FVOL"
VOLUME_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["patient_id", "path", "label", "split"]


class Diagnosis(IntEnum):
    COVID = 0
    CAP = 1
    NORMAL = 2

    @classmethod
    def parse(cls, text):
        try:
            return cls[str(text).strip().upper()]
        except KeyError:
            raise LabelError(f"unknown diagnosis label {text!r}") from None


@dataclass
class FeatureVolume:
    patient_id: str
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2:
            raise ShapeError(f"features must be 2-D (l, d), got shape {f.shape}")
        if f.shape[0] < 1:
            raise EmptyVolumeError(f"volume {self.patient_id!r} has zero slices")
        if not np.all(np.isfinite(f)):
            raise NonFiniteError(f"volume {self.patient_id!r} contains NaN or Inf")
        self.features = f

    @property
    def n_slices(self):
        return self.features.shape[0]


class _VolumeVersionError(VolumeFormatError, VersionMismatchError):
    pass


def write_volume(volume, path):
    f = np.ascontiguousarray(volume.features, dtype="<f4")
    l, d = f.shape
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC + struct.pack("<III", VOLUME_VERSION, l, d))
        fh.write(f.tobytes())


def read_volume(path, patient_id=None):
    """Load a volume file; ``patient_id`` defaults to the file stem."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) >= 4 and buf[:4] != VOLUME_MAGIC:
        raise VolumeBadMagicError(f"{path}: not a feature volume (magic {buf[:4]!r})")
    if len(buf) < 16:
        raise VolumeTruncatedError(f"{path}: header is {len(buf)} bytes, need 16")
    version, l, d = struct.unpack_from("<III", buf, 4)
    if version != VOLUME_VERSION:
        raise _VolumeVersionError(f"{path}: volume version {version}, expected {VOLUME_VERSION}")
    if l == 0 or d == 0:
        raise VolumeSizeMismatchError(f"{path}: header declares empty shape ({l}, {d})")
    expected = 4 * l * d
    payload = len(buf) - 16
    if payload < expected:
        raise VolumeTruncatedError(f"{path}: payload has {payload} of {expected} bytes")
    if payload > expected:
        raise VolumeSizeMismatchError(
            f"{path}: header ({l}, {d}) implies {expected} payload bytes, found {payload}")
    features = np.frombuffer(buf, dtype="<f4", offset=16).reshape(l, d).astype(np.float32)
    if not np.all(np.isfinite(features)):
        raise NonFiniteError(f"{path}: contains NaN or Inf")
    return FeatureVolume(patient_id if patient_id is not None else path.stem, features)


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    path: Path
    label: Diagnosis
    split: str

    def load(self):
        return read_volume(self.path, self.patient_id)


def load_manifest(path):
    path = Path(path)
    root = path.parent
    entries, seen = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            pid, vol_path, label, split = (c.strip() for c in row)
            if pid in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate patient_id {pid!r} (first on line {seen[pid]})")
            try:
                diagnosis = Diagnosis.parse(label)
            except LabelError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            split = split.lower()
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split {split!r} not in {SPLITS}")
            full = Path(vol_path) if Path(vol_path).is_absolute() else root / vol_path
            if not full.is_file():
                raise ManifestError(f"{path}:{lineno}: volume file for {pid!r} not found: {full}")
            seen[pid] = lineno
            entries.append(ManifestEntry(pid, full, diagnosis, split))
    return entries


def write_manifest(entries, path):
    """Write ``entries`` with paths relative to the manifest directory when possible."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            p = Path(e.path)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([e.patient_id, p.as_posix(), Diagnosis(e.label).name, e.split])


@dataclass(frozen=True)
class SynthConfig:
    patients_per_class: tuple = (40, 40, 40)
    slice_range: tuple = (100, 200)
    noise_sigma: float = 0.1
    signal_strength: float = 2.0
    infected_band_fraction: tuple = (0.3, 0.15, 0.0)
    seed: int = 0
    feature_dim: int = FEATURE_DIM

    def validate(self):
        lo, hi = self.slice_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"slice_range must satisfy 1 <= min <= max, got {self.slice_range}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.patients_per_class) != len(Diagnosis) or min(self.patients_per_class) < 0:
            raise ConfigError(f"patients_per_class must be 3 non-negative counts")
        if len(self.infected_band_fraction) != len(Diagnosis) or not all(
                0.0 <= f <= 1.0 for f in self.infected_band_fraction):
            raise ConfigError("infected_band_fraction must be 3 values in [0, 1]")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")


def band_length(fraction, n_slices):
    # round before ceil so 0.3 * 100 gives 30, not 31
    return min(n_slices, math.ceil(round(fraction * n_slices, 9)))


def generate_synthetic(config):
    """Seeded labelled volumes standing in for backbone features.

    Every slice is ``base + noise``; a class with a non-zero band fraction
    also gets its own fixed direction (norm ``signal_strength``) added on one
    contiguous run of slices at a random offset.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.feature_dim
    base = rng.normal(size=d)
    directions = rng.normal(size=(len(Diagnosis), d))
    directions *= config.signal_strength / np.linalg.norm(directions, axis=1, keepdims=True)
    lo, hi = config.slice_range
    out = []
    for label in Diagnosis:
        frac = config.infected_band_fraction[label]
        for i in range(config.patients_per_class[label]):
            l = int(rng.integers(lo, hi + 1))
            x = base + config.noise_sigma * rng.normal(size=(l, d))
            band = band_length(frac, l)
            if band:
                start = int(rng.integers(0, l - band + 1))
                x[start:start + band] += directions[label]
            out.append((FeatureVolume(f"{label.name.lower()}_{i:04d}", x.astype(np.float32)), label))
    return out


def _label_of(entry):
    return entry.label if hasattr(entry, "label") else entry[1]


def stratified_val_counts(class_counts, val_fraction):
    """Per-class validation sizes: floor of the exact share, then the remaining
    slots (to reach ``round(val_fraction * N)``) go to the largest remainders."""
    counts = np.asarray(class_counts)
    exact = np.round(val_fraction * counts, 9)
    val = np.floor(exact).astype(int)
    target = int(math.floor(round(val_fraction * counts.sum(), 9) + 0.5))
    order = sorted(range(len(counts)), key=lambda c: (-(exact[c] - val[c]), c))
    for c in order:
        if val.sum() >= target:
            break
        if val[c] < counts[c] - 1:
            val[c] += 1
    return val


def split_dataset(entries, val_fraction=0.3, seed=0):
    """Stratified patient-level split into ``(train, val)``, order preserved."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    entries = list(entries)
    labels = np.array([int(_label_of(e)) for e in entries], dtype=int)
    counts = np.bincount(labels, minlength=len(Diagnosis)) if len(labels) else np.zeros(3, int)
    for c, n in enumerate(counts):
        if n == 1:
            raise ConfigError(f"class {Diagnosis(c).name} has a single patient; cannot stratify")
    val_counts = stratified_val_counts(counts, val_fraction)
    rng = np.random.default_rng(seed)
    in_val = np.zeros(len(entries), dtype=bool)
    for c in range(len(counts)):
        idx = np.flatnonzero(labels == c)
        if idx.size:
            in_val[rng.permutation(idx)[:val_counts[c]]] = True
    train = [e for e, v in zip(entries, in_val) if not v]
    val = [e for e, v in zip(entries, in_val) if v]
    return train, val
