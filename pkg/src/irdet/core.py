"""Shared data model: frame clips, boxes, quantity prompts, configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np


class IrdetError(Exception):
    """Base class for package errors."""


class NoForegroundError(IrdetError):
    """Raised when a mask has no set pixels; the caller drops the candidate."""


class NonFiniteLossError(IrdetError):
    """Raised when a training loss component is NaN or infinite."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, half-open pixel convention [x_l, x_r) x [y_l, y_r)."""

    x_l: float
    y_l: float
    x_r: float
    y_r: float

    def __post_init__(self) -> None:
        if not (self.x_l < self.x_r and self.y_l < self.y_r):
            raise ValueError(f"degenerate box ({self.x_l},{self.y_l},{self.x_r},{self.y_r})")

    @classmethod
    def clipped(cls, x_l: float, y_l: float, x_r: float, y_r: float,
                width: int, height: int) -> "Box":
        """Construct a box clamped to image bounds [0,width) x [0,height)."""
        return cls(
            x_l=min(max(x_l, 0.0), width - 1.0),
            y_l=min(max(y_l, 0.0), height - 1.0),
            x_r=min(max(x_r, 1.0), float(width)),
            y_r=min(max(y_r, 1.0), float(height)),
        )

    @property
    def width(self) -> float:
        return self.x_r - self.x_l

    @property
    def height(self) -> float:
        return self.y_r - self.y_l

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x_l + self.x_r), 0.5 * (self.y_l + self.y_r))

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_l, self.y_l, self.x_r, self.y_r)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 for disjoint boxes."""
    ix = min(a.x_r, b.x_r) - max(a.x_l, b.x_l)
    iy = min(a.y_r, b.y_r) - max(a.y_l, b.y_l)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def mask_to_box(mask: np.ndarray) -> Box:
    """Tight bounding box of the set pixels of a binary H x W mask.

    Raises NoForegroundError on an all-zero mask.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise NoForegroundError("mask has no foreground pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(x_l=float(cols[0]), y_l=float(rows[0]),
               x_r=float(cols[-1] + 1), y_r=float(rows[-1] + 1))


def box_to_mask(box: Box, shape: Tuple[int, int]) -> np.ndarray:
    """Rasterize an integer-aligned box into a binary mask of the given (H, W)."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    y0, y1 = int(round(box.y_l)), int(round(box.y_r))
    x0, x1 = int(round(box.x_l)), int(round(box.x_r))
    mask[max(y0, 0):min(y1, h), max(x0, 0):min(x1, w)] = True
    return mask


@dataclass(frozen=True)
class QuantityPrompt:
    """Per-keyframe target count, the only training-time annotation."""

    K: int

    def __post_init__(self) -> None:
        if self.K < 0:
            raise ValueError(f"quantity prompt must be >= 0, got {self.K}")


@dataclass(frozen=True)
class PseudoLabel:
    """Mined candidate ground-truth box with provenance."""

    box: Box
    peak: Tuple[int, int]  # (x, y) prompt point that produced it
    mask_area: int
    score: Optional[float] = None  # assigned once by the MIL classifier

    def with_score(self, score: float) -> "PseudoLabel":
        if self.score is not None:
            raise ValueError("pseudo-label score is assigned exactly once")
        return dataclasses.replace(self, score=float(score))


class FrameClip:
    """Window of T grayscale frames plus the keyframe index.

    Frames are float arrays in [0,1], all sharing one H x W shape. Instances
    are treated as immutable after construction and are safe to share across
    workers.
    """

    def __init__(self, frames: Sequence[np.ndarray], sequence_id: str,
                 frame_ids: Sequence[int], keyframe_index: Optional[int] = None):
        if len(frames) < 1:
            raise ValueError("clip needs at least one frame")
        shape = frames[0].shape
        for f in frames:
            if f.ndim != 2 or f.shape != shape:
                raise ValueError("all frames must share one H x W shape")
            if float(f.min()) < 0.0 or float(f.max()) > 1.0:
                raise ValueError("frame intensities must lie in [0,1]")
        if len(frame_ids) != len(frames):
            raise ValueError("frame_ids must match frames")
        self.frames = [np.asarray(f, dtype=np.float32) for f in frames]
        self.sequence_id = str(sequence_id)
        self.frame_ids = list(int(i) for i in frame_ids)
        self.keyframe_index = len(frames) - 1 if keyframe_index is None else int(keyframe_index)
        if not 0 <= self.keyframe_index < len(frames):
            raise ValueError("keyframe_index out of range")

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames[0].shape

    @property
    def keyframe(self) -> np.ndarray:
        return self.frames[self.keyframe_index]

    @property
    def keyframe_id(self) -> int:
        return self.frame_ids[self.keyframe_index]

    def stacked(self) -> np.ndarray:
        return np.stack(self.frames, axis=0)


_TUPLE_KEYS = ()  # flat config: every field is a scalar


@dataclass
class Config:
    """Training/inference configuration with desk-scale defaults."""

    T: int = 5                     # clip window size
    n: int = 3                     # prompt multiplier (Top-nK peaks)
    eta: float = 1.0               # detection-loss weight
    gamma: float = 1.0             # contrastive-loss weight
    lambda1: float = 5.0           # box-regression weight
    lambda2: float = 1.0           # objectness weight
    epsilon: float = 1e-6          # MIL log bias
    learning_rate: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 20
    peak_min_distance: int = 5     # Chebyshev separation of point prompts
    min_box_side: float = 1.0
    max_box_side: float = 32.0
    max_area_fraction: float = 0.005   # mask-area bound of the label filter
    duplicate_iou: float = 0.7         # label dedup threshold
    iou_threshold: float = 0.5         # evaluation matching threshold
    score_threshold: float = 0.3       # inference confidence cut
    nms_iou: float = 0.5
    channels: int = 64             # trunk feature channels
    stride: int = 8                # trunk spatial stride
    embed_dim: int = 128           # region-feature dimension D
    roi_grid: int = 4              # ROI pooling output grid
    attn_heads: int = 4
    center_radius: float = 2.5     # assignment radius in cells
    use_energy: bool = True        # multi-frame energy branch toggle
    segmenter_backend: str = "floodfill"   # floodfill | external
    segmenter_url: str = ""
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.min_box_side > self.max_box_side:
            raise ValueError("min_box_side must not exceed max_box_side")
        if self.segmenter_backend not in ("floodfill", "external"):
            raise ValueError(f"unknown segmenter backend {self.segmenter_backend!r}")

    @classmethod
    def from_file(cls, path: str | Path, overrides: Optional[dict] = None) -> "Config":
        """Load a flat key=value text file; later `overrides` win."""
        values: dict = {}
        text = Path(path).read_text()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        if overrides:
            values.update(overrides)
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "Config":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        parsed = {}
        for key, value in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            parsed[key] = _parse_value(fields[key].type, value)
        return cls(**parsed)

    def replace(self, **kwargs) -> "Config":
        return dataclasses.replace(self, **kwargs)

    def to_file(self, path: str | Path) -> None:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_value(annotation, value):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if annotation in ("bool", bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    if annotation in ("int", int):
        return int(text)
    if annotation in ("float", float):
        return float(text)
    return text
