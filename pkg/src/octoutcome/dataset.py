"""Patient records, outcome labels, splits and the CSV manifest."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .weights import atomic_write_bytes

SPLITS = ("train", "val", "test")
GAIN_THRESHOLD = 15
DEFAULT_FRACTIONS = (0.69, 0.17, 0.14)
MANIFEST_COLUMNS = ("patient_id", "oct_h_path", "oct_v_path", "age", "mh_duration",
                    "elevated_edge", "pseudophakic", "baseline_va", "va_6mo", "split")
CLINICAL_NAMES = ("age", "mh_duration", "elevated_edge", "pseudophakic", "baseline_va")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClinicalFeatures:
    age: float
    mh_duration: float
    elevated_edge: bool
    pseudophakic: bool
    baseline_va: int

    def __post_init__(self):
        if not self.age > 0:
            raise ValueError(f"age must be positive, got {self.age}")
        if not self.mh_duration >= 0:
            raise ValueError(f"mh_duration must be non-negative, got {self.mh_duration}")
        if not 0 <= self.baseline_va <= 100:
            raise ValueError(f"baseline_va must be in [0, 100], got {self.baseline_va}")

    def as_vector(self) -> np.ndarray:
        return np.array([self.age, self.mh_duration, float(self.elevated_edge),
                         float(self.pseudophakic), float(self.baseline_va)])


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    oct_h: str
    oct_v: str
    clinical: ClinicalFeatures
    va_6mo: int
    split: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.va_6mo <= 100:
            raise ValueError(f"{self.patient_id}: va_6mo must be in [0, 100], got {self.va_6mo}")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"{self.patient_id}: unknown split {self.split!r}")

    @property
    def label(self) -> bool:
        return derive_label(self)


@dataclass
class DatasetManifest:
    records: List[PatientRecord]
    provenance: str = "external"
    root: str = "."  # directory image paths are relative to

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.patient_id in seen:
                raise ManifestError(f"duplicate patient_id {r.patient_id!r}")
            seen.add(r.patient_id)

    def split(self, name: str) -> List[PatientRecord]:
        return [r for r in self.records if r.split == name]

    def image_path(self, ref: str) -> str:
        return ref if os.path.isabs(ref) else os.path.join(self.root, ref)


def derive_label(record: PatientRecord) -> bool:
    """Clinically significant improvement: a gain of at least 15 letters."""
    return record.va_6mo - record.clinical.baseline_va >= GAIN_THRESHOLD


def split_sizes(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Tuple[int, int, int]:
    """Validation and test get round-half-up(n * f); train takes the remainder."""
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    if min(fractions) < 0:
        raise ValueError(f"fractions must be non-negative, got {fractions}")
    n_val = int(np.floor(n * fractions[1] + 0.5))
    n_test = int(np.floor(n * fractions[2] + 0.5))
    return n - n_val - n_test, n_val, n_test


def split_dataset(records: Sequence[PatientRecord], fractions: Sequence[float] = DEFAULT_FRACTIONS,
                  seed: int = 0) -> List[PatientRecord]:
    """Shuffle by ``seed`` and assign contiguous train / val / test blocks (not stratified)."""
    n_train, n_val, _ = split_sizes(len(records), fractions)
    order = np.random.default_rng(seed).permutation(len(records))
    out = list(records)
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        out[idx] = replace(records[idx], split=split)
    return out


@dataclass(frozen=True)
class TrainingSample:
    image: str
    label: bool
    patient_id: str
    view: str  # "h" or "v"


def duplicate_per_oct(records: Iterable[PatientRecord]) -> List[TrainingSample]:
    """One sample per OCT scan, so each record contributes two samples."""
    samples = []
    for r in records:
        y = derive_label(r)
        samples.append(TrainingSample(r.oct_h, y, r.patient_id, "h"))
        samples.append(TrainingSample(r.oct_v, y, r.patient_id, "v"))
    return samples


def clinical_matrix(records: Sequence[PatientRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, len(CLINICAL_NAMES)))
    return np.stack([r.clinical.as_vector() for r in records])


def labels(records: Sequence[PatientRecord]) -> np.ndarray:
    return np.array([derive_label(r) for r in records], dtype=np.int64)


def _fmt(value: float) -> str:
    return repr(float(value))


def manifest_to_csv(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        c = r.clinical
        w.writerow([r.patient_id, r.oct_h, r.oct_v, _fmt(c.age), _fmt(c.mh_duration),
                    int(c.elevated_edge), int(c.pseudophakic), int(c.baseline_va),
                    int(r.va_6mo), r.split or ""])
    return buf.getvalue()


def _parse_bool(text: str, column: str, line: int) -> bool:
    if text not in ("0", "1"):
        raise ManifestError(f"line {line}: {column} must be 0 or 1, got {text!r}")
    return text == "1"


def manifest_from_csv(text: str, root: str = ".", provenance: str = "external") -> DatasetManifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("empty manifest (no header)") from None
    if tuple(header) != MANIFEST_COLUMNS:
        raise ManifestError(f"unexpected manifest header {header}")
    records = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"line {line}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
        f = dict(zip(MANIFEST_COLUMNS, row))
        try:
            clinical = ClinicalFeatures(float(f["age"]), float(f["mh_duration"]),
                                        _parse_bool(f["elevated_edge"], "elevated_edge", line),
                                        _parse_bool(f["pseudophakic"], "pseudophakic", line),
                                        int(f["baseline_va"]))
            records.append(PatientRecord(f["patient_id"], f["oct_h_path"], f["oct_v_path"], clinical,
                                         int(f["va_6mo"]), f["split"] or None))
        except ManifestError:
            raise
        except ValueError as exc:
            raise ManifestError(f"line {line}: {exc}") from exc
    return DatasetManifest(records, provenance, root)


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    atomic_write_bytes(path, manifest_to_csv(manifest).encode("utf-8"))


def read_manifest(path: str, provenance: Optional[str] = None) -> DatasetManifest:
    """Read a manifest; image paths resolve relative to its directory.

    Provenance comes from a ``provenance.txt`` beside the manifest when present.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    root = os.path.dirname(os.path.abspath(path))
    if provenance is None:
        prov_file = os.path.join(root, "provenance.txt")
        provenance = "external"
        if os.path.exists(prov_file):
            with open(prov_file, encoding="utf-8") as fh:
                provenance = fh.read().strip() or "external"
    return manifest_from_csv(text, root, provenance)


__all__ = [
    "CLINICAL_NAMES", "ClinicalFeatures", "DatasetManifest", "ManifestError", "PatientRecord",
    "TrainingSample", "clinical_matrix", "derive_label", "duplicate_per_oct", "labels",
    "manifest_from_csv", "manifest_to_csv", "read_manifest", "split_dataset", "split_sizes",
    "write_manifest",
]
