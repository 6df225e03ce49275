"""On-disk raster format, dataset indexing and subject-level folds.

Layout of a dataset root::

    root/<subject_id>/<slice_id>_mr.f32        + <slice_id>_mr.json
    root/<subject_id>/<slice_id>_ct.f32        + <slice_id>_ct.json
    root/<subject_id>/<slice_id>_label_mr.u8   + <slice_id>_label_mr.json
    root/<subject_id>/<slice_id>_label_ct.u8   + <slice_id>_label_ct.json

Images are little-endian float32, labels uint8, both row-major. Each raster
has a JSON sidecar ``{"h": int, "w": int, "modality": "MR"|"CT"}``; image
sidecars also carry ``"units"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phantom import ImageSlice, LabelMap, Modality
from .seeding import numpy_rng


class DatasetError(ValueError):
    pass


def _sidecar(raster: Path) -> Path:
    return raster.with_suffix(".json")


def write_image(path: Path, img: ImageSlice) -> None:
    path = Path(path)
    h, w = img.shape
    path.write_bytes(img.pixels.astype("<f4").tobytes(order="C"))
    header = {"h": h, "w": w, "modality": img.modality.value, "units": img.units}
    _sidecar(path).write_text(json.dumps(header))


def read_image(path: Path) -> ImageSlice:
    path = Path(path)
    header = json.loads(_sidecar(path).read_text())
    data = np.fromfile(path, dtype="<f4")
    h, w = int(header["h"]), int(header["w"])
    if data.size != h * w:
        raise DatasetError(f"{path}: expected {h * w} pixels, found {data.size}")
    return ImageSlice(data.reshape(h, w), Modality(header["modality"]))


def write_label(path: Path, lab: LabelMap) -> None:
    path = Path(path)
    h, w = lab.shape
    path.write_bytes(lab.classes.astype(np.uint8).tobytes(order="C"))
    _sidecar(path).write_text(json.dumps({"h": h, "w": w, "modality": lab.source_modality.value}))


def read_label(path: Path) -> LabelMap:
    path = Path(path)
    header = json.loads(_sidecar(path).read_text())
    data = np.fromfile(path, dtype=np.uint8)
    h, w = int(header["h"]), int(header["w"])
    if data.size != h * w:
        raise DatasetError(f"{path}: expected {h * w} labels, found {data.size}")
    return LabelMap(data.reshape(h, w), Modality(header["modality"]))


@dataclass(frozen=True)
class Record:
    subject_id: str
    slice_id: str
    mr_path: Path
    ct_path: Path
    label_mr_path: Path
    label_ct_path: Path

    def load(self):
        """Return ``(mr, ct, label_mr, label_ct)``."""
        return (read_image(self.mr_path), read_image(self.ct_path),
                read_label(self.label_mr_path), read_label(self.label_ct_path))


def record_paths(root: Path, subject_id: str, slice_id: str) -> Record:
    d = Path(root) / subject_id
    return Record(subject_id, slice_id, d / f"{slice_id}_mr.f32", d / f"{slice_id}_ct.f32",
                  d / f"{slice_id}_label_mr.u8", d / f"{slice_id}_label_ct.u8")


def write_record(root: Path, subject_id: str, slice_id: str, pair) -> Record:
    rec = record_paths(root, subject_id, slice_id)
    rec.mr_path.parent.mkdir(parents=True, exist_ok=True)
    mr, ct, label_mr, label_ct = pair
    write_image(rec.mr_path, mr)
    write_image(rec.ct_path, ct)
    write_label(rec.label_mr_path, label_mr)
    write_label(rec.label_ct_path, label_ct)
    return rec


@dataclass
class DatasetIndex:
    root: Path
    records: list[Record]
    folds: list[list[str]]
    seed: int = 0
    subjects: list[str] = field(init=False)

    def __post_init__(self):
        self.subjects = sorted({r.subject_id for r in self.records})

    def fold_of(self, subject_id: str) -> int:
        for k, fold in enumerate(self.folds):
            if subject_id in fold:
                return k
        raise KeyError(subject_id)

    def split(self, fold: int) -> tuple[list[Record], list[Record]]:
        """Return ``(train, test)`` records, holding out the subjects of ``fold``."""
        held = set(self.folds[fold])
        train = [r for r in self.records if r.subject_id not in held]
        test = [r for r in self.records if r.subject_id in held]
        return train, test


def load_dataset(root, folds: int = 5, seed: int = 0) -> DatasetIndex:
    """Scan ``root``, validate every record and assign subjects to folds.

    Subjects are shuffled with ``seed`` and dealt into ``folds`` groups whose
    sizes differ by at most one, so slices of one subject never straddle a
    train/test boundary.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if folds < 1:
        raise DatasetError("folds must be >= 1")

    records = []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        slice_ids = sorted(p.name[: -len("_mr.f32")] for p in subject_dir.glob("*_mr.f32"))
        for slice_id in slice_ids:
            rec = record_paths(root, subject_dir.name, slice_id)
            _validate(rec)
            records.append(rec)
    if not records:
        raise DatasetError(f"no records found under {root}")

    subjects = sorted({r.subject_id for r in records})
    if folds > len(subjects):
        raise DatasetError(f"{folds} folds requested but only {len(subjects)} subjects")
    order = numpy_rng(seed, 0xF01D).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    fold_lists = [sorted(part.tolist()) for part in np.array_split(np.array(shuffled, dtype=object), folds)]
    return DatasetIndex(root, records, fold_lists, seed)


def _validate(rec: Record) -> None:
    where = f"subject {rec.subject_id} slice {rec.slice_id}"
    for p in (rec.mr_path, rec.ct_path, rec.label_mr_path, rec.label_ct_path):
        if not p.exists() or not _sidecar(p).exists():
            raise DatasetError(f"{where}: missing file {p.name}")
    try:
        mr, ct, lmr, lct = rec.load()
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"{where}: {exc}") from exc
    if mr.modality is not Modality.MR or ct.modality is not Modality.CT:
        raise DatasetError(f"{where}: modality tags do not match file roles")
    shapes = {mr.shape, ct.shape, lmr.shape, lct.shape}
    if len(shapes) != 1:
        raise DatasetError(f"{where}: dimension mismatch {sorted(shapes)}")
