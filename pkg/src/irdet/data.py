"""Dataset ingestion for the on-disk sequence layout.

Layout: ``<root>/<sequence_id>/<frame_id>.png`` plus per-sequence
``quantities.csv`` (rows ``frame_id,K``) and, for evaluation only,
``boxes.csv`` (rows ``frame_id,x_l,y_l,x_r,y_r``).
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image

from .core import Box, FrameClip, IrdetError


class DatasetError(IrdetError):
    pass


def read_frame(path: str | Path) -> np.ndarray:
    """Read a grayscale PNG and normalize intensities to [0,1] by bit depth."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:  # RGB(A) source, collapse to luminance
        arr = arr[..., :3].mean(axis=2)
    if arr.dtype == np.uint8:
        return (arr / 255.0).astype(np.float32)
    if arr.dtype in (np.uint16, np.int32, np.uint32):  # PIL mode I reads 16-bit as int32
        return (arr / 65535.0).astype(np.float32)
    arr = arr.astype(np.float32)
    return np.clip(arr, 0.0, 1.0)


def write_frame(path: str | Path, frame: np.ndarray) -> None:
    """Write a [0,1] float frame as 16-bit grayscale PNG."""
    scaled = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    data = np.round(scaled * 65535.0).astype(np.uint16)
    Image.fromarray(data, mode="I;16").save(path, format="PNG")


def read_quantities(path: str | Path) -> Dict[int, int]:
    quantities: Dict[int, int] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("frame_id"):
                continue
            quantities[int(row[0])] = int(row[1])
    return quantities


def write_quantities(path: str | Path, quantities: Dict[int, int]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "K"])
        for frame_id in sorted(quantities):
            writer.writerow([frame_id, quantities[frame_id]])


def read_boxes(path: str | Path, with_scores: bool = False):
    """Read per-frame boxes; returns {frame_id: [Box, ...]} or with (Box, score)."""
    boxes: Dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("frame_id"):
                continue
            frame_id = int(row[0])
            box = Box(float(row[1]), float(row[2]), float(row[3]), float(row[4]))
            entry = (box, float(row[5])) if with_scores else box
            boxes.setdefault(frame_id, []).append(entry)
    return boxes


def write_boxes(path: str | Path, boxes: Dict[int, list], scores: bool = False) -> None:
    header = ["frame_id", "x_l", "y_l", "x_r", "y_r"] + (["score"] if scores else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for frame_id in sorted(boxes):
            for entry in boxes[frame_id]:
                if scores:
                    box, score = entry
                    writer.writerow([frame_id, *(f"{v:.4f}" for v in box.as_tuple()),
                                     f"{score:.6f}"])
                else:
                    writer.writerow([frame_id, *(f"{v:.4f}" for v in entry.as_tuple())])


class Sequence:
    """One on-disk sequence: ordered frames plus its annotation tables."""

    def __init__(self, root: str | Path, sequence_id: str):
        self.sequence_id = sequence_id
        self.dir = Path(root) / sequence_id
        if not self.dir.is_dir():
            raise DatasetError(f"sequence directory not found: {self.dir}")
        self.frame_paths = sorted(self.dir.glob("*.png"), key=lambda p: int(p.stem))
        if not self.frame_paths:
            raise DatasetError(f"no frames in {self.dir}")
        self.frame_ids = [int(p.stem) for p in self.frame_paths]
        qpath = self.dir / "quantities.csv"
        self.quantities = read_quantities(qpath) if qpath.exists() else {}
        bpath = self.dir / "boxes.csv"
        self.truth_boxes = read_boxes(bpath) if bpath.exists() else {}
        self._cache: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.frame_paths)

    def frame(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = read_frame(self.frame_paths[index])
        return self._cache[index]

    def clip(self, keyframe_pos: int, T: int) -> FrameClip:
        """Causal window ending at `keyframe_pos`; repeats the first frame when short."""
        indices = [max(0, keyframe_pos - offset) for offset in range(T - 1, -1, -1)]
        frames = [self.frame(i) for i in indices]
        ids = [self.frame_ids[i] for i in indices]
        return FrameClip(frames, self.sequence_id, ids)

    def quantity(self, keyframe_pos: int) -> Optional[int]:
        return self.quantities.get(self.frame_ids[keyframe_pos])


def list_sequences(root: str | Path) -> List[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def iter_training_clips(root: str | Path, T: int) -> Iterator[Tuple[FrameClip, int]]:
    """Yield (clip, K) for every annotated frame of every sequence."""
    for seq_id in list_sequences(root):
        seq = Sequence(root, seq_id)
        for pos in range(len(seq)):
            k = seq.quantity(pos)
            if k is None:
                continue
            yield seq.clip(pos, T), k
