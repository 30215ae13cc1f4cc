"""On-disk datasets: CSV manifest plus per-frame sidecar files.

Manifest columns are ``path, subject_id, frame_index, labels`` where
``labels`` holds N semicolon-separated values (binary, or 0..5 intensities
when the config declares an intensity threshold) or is empty for unlabeled
images. Next to every image ``<stem>.png`` the loader expects

* ``<stem>.txt``: K rows of ``x y`` landmarks in raw-image pixels,
* ``<stem>.flo`` (optional): precomputed flow from this frame to the frame
  ``flow_step`` later, at aligned resolution.

Relative image paths resolve under ``$RTATL_DATA_ROOT`` when it is set and
the file exists there, and against the manifest's directory otherwise.
"""
from __future__ import annotations

import csv
import os
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import cv2
import numpy as np

from ..config import AUSpec, HyperParams, binarize_intensity
from .align import align_face
from .flow import FlowProvider, prepare_flow_target, write_flo
from .types import DataError, Sample

MANIFEST_COLUMNS = ("path", "subject_id", "frame_index", "labels")
DATA_ROOT_ENV = "RTATL_DATA_ROOT"


@dataclass(frozen=True)
class ManifestRow:
    path: Path
    subject_id: str
    frame_index: int
    labels: Optional[np.ndarray]


def resolve_path(raw: str, manifest_dir: Path) -> Path:
    p = Path(raw)
    if p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root and (Path(root) / p).exists():
        return Path(root) / p
    return manifest_dir / p


def parse_labels(text: str, spec: AUSpec, where: str = "") -> Optional[np.ndarray]:
    text = text.strip()
    if not text:
        return None
    try:
        values = [int(v) for v in text.split(";")]
    except ValueError as exc:
        raise DataError(f"{where}: labels {text!r} are not integers") from exc
    if len(values) != spec.N:
        raise DataError(f"{where}: expected {spec.N} labels, got {len(values)}")
    if spec.positive_intensity_threshold is not None:
        try:
            values = [binarize_intensity(v, spec) for v in values]
        except ValueError as exc:
            raise DataError(f"{where}: {exc}") from exc
    elif any(v not in (0, 1) for v in values):
        raise DataError(f"{where}: labels must be 0 or 1")
    return np.asarray(values, dtype=np.int64)


def read_manifest(path, spec: AUSpec) -> list[ManifestRow]:
    """Parse a manifest; raises FileNotFoundError if it does not exist."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} not found")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        for line, rec in enumerate(reader, start=2):
            where = f"{path}:{line}"
            try:
                frame = int(rec["frame_index"])
            except ValueError as exc:
                raise DataError(f"{where}: bad frame_index {rec['frame_index']!r}") from exc
            rows.append(ManifestRow(
                path=resolve_path(rec["path"], path.parent),
                subject_id=rec["subject_id"].strip(),
                frame_index=frame,
                labels=parse_labels(rec["labels"] or "", spec, where),
            ))
    return rows


def write_manifest(path, rows: Iterable[tuple[str, str, int, Optional[Sequence[int]]]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for rel, subject, frame, labels in rows:
            w.writerow([rel, subject, frame, "" if labels is None else ";".join(str(int(v)) for v in labels)])


def landmark_path(image_path: Path) -> Path:
    return image_path.with_suffix(".txt")


def flow_path(image_path: Path) -> Path:
    return image_path.with_suffix(".flo")


def read_landmarks(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"landmark file {path} not found")
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 2:
        raise DataError(f"{path}: landmark rows must be 'x y'")
    return pts


def write_landmarks(path, landmarks: np.ndarray) -> None:
    np.savetxt(path, np.asarray(landmarks, dtype=np.float64), fmt="%.4f")


def read_image(path) -> np.ndarray:
    """8-bit RGB file -> H x W x 3 float32 in [0, 1]."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)):
        raise DataError(f"cannot write image {path}")


class ManifestDataset(Sequence):
    """Lazily aligned Samples backed by a manifest.

    A frame gets a flow target when the manifest also lists the frame
    ``flow_step`` later from the same subject and directory; the flow comes
    from the ``.flo`` sidecar or, failing that, from ``provider``.
    """

    def __init__(self, rows: Sequence[ManifestRow], spec: AUSpec, hp: HyperParams,
                 provider: Optional[FlowProvider] = None, with_flow: bool = True):
        self.rows = list(rows)
        self.spec, self.hp = spec, hp
        self.provider = provider
        self.with_flow = with_flow
        self._by_frame = {(r.subject_id, r.path.parent, r.frame_index): i for i, r in enumerate(self.rows)}

    @classmethod
    def from_file(cls, path, spec: AUSpec, hp: HyperParams, **kw) -> "ManifestDataset":
        return cls(read_manifest(path, spec), spec, hp, **kw)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.rows})

    def subset(self, subjects: Iterable[str]) -> "ManifestDataset":
        keep = set(subjects)
        return ManifestDataset([r for r in self.rows if r.subject_id in keep], self.spec, self.hp,
                               self.provider, self.with_flow)

    def partner(self, i: int) -> Optional[int]:
        r = self.rows[i]
        return self._by_frame.get((r.subject_id, r.path.parent, r.frame_index + self.hp.flow_step))

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        row = self.rows[i]
        raw = read_image(row.path)
        landmarks = read_landmarks(landmark_path(row.path))
        layout = self.spec.layout
        image, transform, aligned = align_face(raw, landmarks, self.hp.aligned_size,
                                               layout["left_eye"], layout["right_eye"])
        flow = None
        j = self.partner(i) if self.with_flow else None
        if j is not None:
            nxt = self.rows[j]
            flo = flow_path(row.path)
            later = None if flo.is_file() else read_image(nxt.path)
            pair = prepare_flow_target(raw, later if later is not None else raw, transform,
                                       self.hp.aligned_size, flow_path=flo, provider=self.provider,
                                       pair_name=f"{row.path.name} -> {nxt.path.name}")
            flow = pair.flow.astype(np.float32)
        return Sample(image=image.astype(np.float32), subject_id=row.subject_id, labels=row.labels,
                      landmarks=aligned, flow_target=flow, frame_index=row.frame_index)


def export_samples(samples: Sequence[Sample], out_dir, manifest_name: str = "manifest.csv") -> Path:
    """Write samples as PNG + sidecars + manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, s in enumerate(samples):
        frame = k if s.frame_index is None else s.frame_index
        stem = f"{s.subject_id}_{frame:05d}"
        write_image(out_dir / f"{stem}.png", s.image)
        if s.landmarks is not None:
            write_landmarks(out_dir / f"{stem}.txt", s.landmarks)
        if s.flow_target is not None:
            write_flo(out_dir / f"{stem}.flo", s.flow_target)
        rows.append((f"{stem}.png", s.subject_id, frame, s.labels))
    manifest = out_dir / manifest_name
    write_manifest(manifest, rows)
    return manifest
