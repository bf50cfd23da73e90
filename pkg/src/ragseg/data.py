"""Slice-based dataset model: on-disk format, patient-level splits, phantom generator.

A dataset is a flat collection of 2-D short-axis slices, each tagged with a
patient id, a cardiac phase (ED or ES) and a slice index. On disk a dataset is
a ``manifest.json`` plus one headerless binary blob per slice image
(row-major little-endian float32) and per mask (row-major uint8); all
dimensions live in the manifest only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PHASES = ("ED", "ES")
MANIFEST_VERSION = 1
IMAGE_SUFFIX = ".img"
MASK_SUFFIX = ".msk"


class DatasetError(Exception):
    """Base class for dataset problems."""


class LoadError(DatasetError):
    """A slice file is missing, truncated, or unreadable."""


class ValidationError(DatasetError):
    """Dataset contents violate the format contract."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SliceRecord:
    """One 2-D slice: image intensities plus the integer label mask."""

    patient_id: str
    phase: str
    slice_index: int
    image: np.ndarray  # (H, W) float32
    mask: np.ndarray   # (H, W) uint8

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValidationError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.slice_index < 0:
            raise ValidationError(f"slice_index must be non-negative, got {self.slice_index}")
        if self.image.shape != self.mask.shape:
            raise ValidationError(
                f"slice {self.key}: image shape {self.image.shape} != mask shape {self.mask.shape}"
            )

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.patient_id, self.phase, self.slice_index)


class Dataset:
    """Immutable, deterministically ordered collection of slices.

    Slices are kept sorted by (patient_id, phase, slice_index) so that two
    iterations over the same dataset always yield the same sequence.
    """

    def __init__(self, slices, num_classes: int):
        if num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
        slices = sorted(slices, key=lambda s: s.key)
        if not slices:
            raise ValidationError("dataset is empty")
        h, w = slices[0].image.shape
        seen = set()
        for s in slices:
            if s.image.shape != (h, w):
                raise ValidationError(f"slice {s.key}: shape {s.image.shape} != dataset shape {(h, w)}")
            if int(s.mask.max()) >= num_classes:
                raise ValidationError(
                    f"slice {s.key}: mask value {int(s.mask.max())} >= num_classes {num_classes}"
                )
            if s.key in seen:
                raise ValidationError(f"duplicate slice {s.key}")
            seen.add(s.key)
        self.slices: tuple[SliceRecord, ...] = tuple(slices)
        self.num_classes = num_classes
        self.height = h
        self.width = w

    def __len__(self) -> int:
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)

    def __getitem__(self, i: int) -> SliceRecord:
        return self.slices[i]

    def patient_ids(self) -> list[str]:
        return sorted({s.patient_id for s in self.slices})

    def subset(self, patient_ids) -> "Dataset":
        wanted = set(patient_ids)
        kept = [s for s in self.slices if s.patient_id in wanted]
        if not kept:
            raise ValidationError("patient subset is empty")
        return Dataset(kept, self.num_classes)

    def find(self, patient_id: str, phase: str, slice_index: int) -> SliceRecord:
        for s in self.slices:
            if s.key == (patient_id, phase, slice_index):
                return s
        raise KeyError(f"no slice {(patient_id, phase, slice_index)} in dataset")


@dataclass(frozen=True)
class SplitSpec:
    """Patient-level train/validation split parameters."""

    train_fraction: float
    seed: int


def normalize_slice(image: np.ndarray) -> np.ndarray:
    """Min-max normalize one slice to [0, 1]; a constant slice maps to zeros."""
    image = image.astype(np.float32, copy=True)
    lo = float(image.min())
    hi = float(image.max())
    if hi == lo:
        return np.zeros_like(image)
    return (image - np.float32(lo)) / (np.float32(hi) - np.float32(lo))


def slice_filenames(patient_id: str, phase: str, slice_index: int) -> tuple[str, str]:
    stem = f"{patient_id}_{phase}_{slice_index}"
    return stem + IMAGE_SUFFIX, stem + MASK_SUFFIX


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest.json plus per-slice image/mask blobs. Returns the manifest path."""
    out_dir = Path(out_dir)
    slices_dir = out_dir / "slices"
    slices_dir.mkdir(parents=True, exist_ok=True)

    counts: dict[str, dict[str, int]] = {}
    for s in dataset:
        counts.setdefault(s.patient_id, {p: 0 for p in PHASES})
        counts[s.patient_id][s.phase] += 1
        img_name, msk_name = slice_filenames(*s.key)
        s.image.astype("<f4").tofile(slices_dir / img_name)
        s.mask.astype(np.uint8).tofile(slices_dir / msk_name)

    manifest = {
        "version": MANIFEST_VERSION,
        "height": dataset.height,
        "width": dataset.width,
        "num_classes": dataset.num_classes,
        "patients": [
            {"id": pid, "phases": counts[pid]} for pid in sorted(counts)
        ],
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def _read_manifest(manifest_path: Path) -> dict:
    if not manifest_path.is_file():
        raise LoadError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise LoadError(f"manifest is not valid JSON: {manifest_path}: {e}") from e

    for key in ("version", "height", "width", "num_classes", "patients"):
        if key not in manifest:
            raise ValidationError(f"manifest missing key {key!r}")
    if manifest["version"] != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {manifest['version']}")
    for key in ("height", "width"):
        if not isinstance(manifest[key], int) or manifest[key] < 1:
            raise ValidationError(f"manifest {key} must be a positive integer")
    if not isinstance(manifest["num_classes"], int) or manifest["num_classes"] < 2:
        raise ValidationError("manifest num_classes must be an integer >= 2")
    if not isinstance(manifest["patients"], list) or not manifest["patients"]:
        raise ValidationError("manifest patients must be a non-empty list")
    seen_ids = set()
    for entry in manifest["patients"]:
        if not isinstance(entry, dict) or "id" not in entry or "phases" not in entry:
            raise ValidationError("each patient entry needs 'id' and 'phases'")
        if entry["id"] in seen_ids:
            raise ValidationError(f"duplicate patient id {entry['id']!r}")
        seen_ids.add(entry["id"])
        for phase, count in entry["phases"].items():
            if phase not in PHASES:
                raise ValidationError(f"patient {entry['id']}: unknown phase {phase!r}")
            if not isinstance(count, int) or count < 0:
                raise ValidationError(f"patient {entry['id']}: bad slice count for {phase}")
    return manifest


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset from its manifest, validating files, shapes and labels.

    Images are min-max normalized to [0, 1] per slice at load time; data written
    by this package is already normalized, so the round trip is bit-exact.
    """
    manifest_path = Path(manifest_path)
    manifest = _read_manifest(manifest_path)
    h, w = manifest["height"], manifest["width"]
    num_classes = manifest["num_classes"]
    slices_dir = manifest_path.parent / "slices"

    records = []
    for entry in manifest["patients"]:
        pid = entry["id"]
        for phase, count in entry["phases"].items():
            for idx in range(count):
                img_name, msk_name = slice_filenames(pid, phase, idx)
                img_path = slices_dir / img_name
                msk_path = slices_dir / msk_name
                for path, nbytes in ((img_path, h * w * 4), (msk_path, h * w)):
                    if not path.is_file():
                        raise LoadError(f"slice {(pid, phase, idx)}: missing file {path}")
                    if path.stat().st_size != nbytes:
                        raise LoadError(
                            f"slice {(pid, phase, idx)}: {path.name} has "
                            f"{path.stat().st_size} bytes, expected {nbytes}"
                        )
                image = np.fromfile(img_path, dtype="<f4").reshape(h, w)
                mask = np.fromfile(msk_path, dtype=np.uint8).reshape(h, w)
                if not np.isfinite(image).all():
                    raise LoadError(f"slice {(pid, phase, idx)}: non-finite image values")
                if int(mask.max()) >= num_classes:
                    raise ValidationError(
                        f"slice {(pid, phase, idx)}: mask value {int(mask.max())} "
                        f">= num_classes {num_classes}"
                    )
                records.append(
                    SliceRecord(pid, phase, idx, _freeze(normalize_slice(image)), _freeze(mask))
                )
    return Dataset(records, num_classes)


def split_by_patient(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Split a dataset into train/validation by patient, never by slice."""
    if not 0.0 < spec.train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {spec.train_fraction}")
    patients = dataset.patient_ids()
    if len(patients) < 2:
        raise ValueError("splitting requires at least 2 patients")
    n_train = int(math.floor(spec.train_fraction * len(patients) + 0.5))
    if n_train < 1 or n_train >= len(patients):
        raise ValueError(
            f"train_fraction {spec.train_fraction} leaves an empty split for "
            f"{len(patients)} patients"
        )
    order = np.random.default_rng(spec.seed).permutation(len(patients))
    train_ids = {patients[i] for i in order[:n_train]}
    val_ids = set(patients) - train_ids
    return dataset.subset(train_ids), dataset.subset(val_ids)


def _box_blur3(img: np.ndarray) -> np.ndarray:
    # 3x3 mean filter with edge replication, cheap smoothing for phantom texture
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0


def _render_phantom(height, width, cx, cy, r_lv, r_myo, r_rv, ang0, ang_span,
                    levels, noise):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dist = np.hypot(yy - cx, xx - cy)
    ang = np.degrees(np.arctan2(yy - cx, xx - cy)) % 360.0

    lv = dist < r_lv
    myo = (dist >= r_lv) & (dist < r_myo)
    in_sector = ((ang - ang0) % 360.0) <= ang_span
    rv = (dist >= r_myo) & (dist < r_rv) & in_sector

    mask = np.zeros((height, width), dtype=np.uint8)
    mask[rv] = 1
    mask[myo] = 2
    mask[lv] = 3

    image = levels[mask] + noise
    image = _box_blur3(image)
    return normalize_slice(image.astype(np.float32)), mask


def generate_toy_dataset(num_patients: int, slices_per_phase: int, height: int,
                         width: int, seed: int, prefix: str = "P") -> Dataset:
    """Generate a deterministic 4-class phantom dataset.

    Each slice shows a bright inner disk (label 3), a darker ring around it
    (label 2) and a crescent-shaped sector hugging the ring (label 1) on a
    noisy background (label 0). Geometry drifts smoothly with slice index so
    consecutive slices within a patient/phase look alike, and the second
    phase is a contracted version of the first.

    Args:
        num_patients: number of synthetic patients, at least 2.
        slices_per_phase: slices per patient per phase, at least 1.
        height, width: slice size, both at least 16.
        seed: RNG seed; identical arguments always produce identical data.
        prefix: patient id prefix, useful to keep ids distinct across datasets.
    """
    if num_patients < 2:
        raise ValueError("num_patients must be >= 2 so retrieval can exclude the query patient")
    if slices_per_phase < 1:
        raise ValueError("slices_per_phase must be >= 1")
    if height < 16 or width < 16:
        raise ValueError("height and width must both be >= 16")

    rng = np.random.default_rng(seed)
    s = float(min(height, width))
    records = []
    for p in range(num_patients):
        pid = f"{prefix}{p:03d}"
        cx0 = height / 2.0 + rng.uniform(-0.03, 0.03) * s
        cy0 = width / 2.0 + rng.uniform(-0.03, 0.03) * s
        r_lv0 = max(2.2, rng.uniform(0.10, 0.14) * s)
        t_myo0 = max(2.2, rng.uniform(0.055, 0.08) * s)
        w_rv0 = max(2.6, rng.uniform(0.065, 0.09) * s)
        ang0 = rng.uniform(100.0, 150.0)
        ang_span = rng.uniform(140.0, 175.0)
        drift = rng.uniform(-0.010, 0.010, size=2) * s
        shrink = rng.uniform(0.02, 0.045)
        # per-patient intensity character
        levels = np.array([
            rng.uniform(0.18, 0.28),  # background
            rng.uniform(0.62, 0.72),  # crescent
            rng.uniform(0.34, 0.44),  # ring
            rng.uniform(0.80, 0.90),  # inner disk
        ])
        for phase in PHASES:
            scale = 1.0 if phase == "ED" else 0.80
            for z in range(slices_per_phase):
                f = max(0.55, 1.0 - shrink * z)
                r_lv = max(2.0, r_lv0 * scale * f)
                r_myo = r_lv + max(2.0, t_myo0 * scale * f)
                r_rv = r_myo + max(2.2, w_rv0 * scale * f)
                cx = cx0 + drift[0] * z
                cy = cy0 + drift[1] * z
                noise = rng.normal(0.0, 0.045, size=(height, width))
                image, mask = _render_phantom(
                    height, width, cx, cy, r_lv, r_myo, r_rv, ang0, ang_span,
                    levels, noise,
                )
                records.append(SliceRecord(pid, phase, z, _freeze(image), _freeze(mask)))
    return Dataset(records, num_classes=4)
