"""Pseudo-label mining: saliency, multi-frame energy accumulation, peak
prompts, and point-driven segmentation of the keyframe.

The stages feed each other: a local-contrast activation map of the keyframe is
fused with the accumulated per-frame Laplacian energy of the clip, the fused
map's strongest well-separated peaks become point prompts, and a segmenter
turns each prompt into a mask that is boxed and filtered into a pseudo-label.
"""
from __future__ import annotations

import abc
import base64
import collections
import io
import json
import subprocess
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import Box, IrdetError, NoForegroundError, PseudoLabel, iou, mask_to_box

# 3x3 sharpen-style high-pass kernel: center 8, ring -1 (DC-free).
HPF_KERNEL = np.array([[-1.0, -1.0, -1.0],
                       [-1.0, 8.0, -1.0],
                       [-1.0, -1.0, -1.0]])

# 5-point discrete Laplacian.
LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0],
                             [1.0, -4.0, 1.0],
                             [0.0, 1.0, 0.0]])

# instrumentation: bumped by the mining entry points, checked by the
# inference-path tests which require that inference never mines
counters: collections.Counter = collections.Counter()


@dataclass(frozen=True)
class ActivationMap:
    """H x W saliency grid tagged with its origin."""

    values: np.ndarray
    source: str  # generator | energy | fused

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("activation map must be 2-D")
        if not np.isfinite(self.values).all():
            raise ValueError("activation map must be finite")


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    rank: int


class SegmenterInterface(abc.ABC):
    """Point-prompted segmenter contract.

    ``segment`` returns a binary mask that is a single connected component
    containing the prompt point, or an empty mask when nothing grows.
    """

    @abc.abstractmethod
    def segment(self, frame: np.ndarray, point: Tuple[int, int]) -> np.ndarray:
        ...


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0,1]; constant input maps to all zeros."""
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo <= 0.0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def activation_generate(keyframe: np.ndarray,
                        generator: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                        ) -> ActivationMap:
    """Coarse target saliency of the keyframe, in [0,1].

    The built-in generator scores each pixel by the mean of its 3x3 patch minus
    the mean of the surrounding 9x9 ring, rectified at zero. An external
    generator callable producing an H x W map may be slotted in instead.
    """
    counters["activation_generate"] += 1
    frame = np.asarray(keyframe, dtype=np.float64)
    if generator is not None:
        values = np.asarray(generator(frame), dtype=np.float64)
        if values.shape != frame.shape:
            raise ValueError("external generator must return an H x W map")
        return ActivationMap(minmax_normalize(values), source="generator")
    center = ndimage.uniform_filter(frame, size=3, mode="reflect")
    window = ndimage.uniform_filter(frame, size=9, mode="reflect")
    # ring mean over the 9x9 window with its 3x3 center removed (81-9=72 px)
    ring = (window * 81.0 - center * 9.0) / 72.0
    contrast = np.maximum(center - ring, 0.0)
    return ActivationMap(minmax_normalize(contrast), source="generator")


def high_pass_filter(frames: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Convolve each frame with the fixed 3x3 high-pass kernel (reflect borders)."""
    shape = frames[0].shape
    out = []
    for frame in frames:
        if frame.shape != shape:
            raise ValueError("all frames must share one shape")
        out.append(ndimage.convolve(np.asarray(frame, dtype=np.float64),
                                    HPF_KERNEL, mode="reflect"))
    return out


def energy_accumulate(filtered: Sequence[np.ndarray], normalize: bool = True) -> ActivationMap:
    """Sum per-frame |5-point Laplacian| over the clip; min-max normalized.

    The absolute value is taken per frame so positive and negative lobes of the
    response cannot cancel across frames.
    """
    total = np.zeros(filtered[0].shape, dtype=np.float64)
    for frame in filtered:
        lap = ndimage.convolve(np.asarray(frame, dtype=np.float64),
                               LAPLACIAN_KERNEL, mode="reflect")
        total += np.abs(lap)
    values = minmax_normalize(total) if normalize else total
    return ActivationMap(values, source="energy")


def fuse_activation(m: ActivationMap, e: ActivationMap) -> ActivationMap:
    """Elementwise sum of the saliency and energy maps (peak ranking needs no rescale)."""
    if m.values.shape != e.values.shape:
        raise ValueError("activation maps must share one shape")
    return ActivationMap(m.values + e.values, source="fused")


def _local_maxima(values: np.ndarray) -> List[Tuple[int, int]]:
    """Strict local maxima over the 8-neighborhood (border pixels compare in-bounds only)."""
    h, w = values.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = values
    center = padded[1:-1, 1:-1]
    strict = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            strict &= center > padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    ys, xs = np.nonzero(strict)
    return list(zip(ys.tolist(), xs.tolist()))


def extract_peaks(activation: ActivationMap, count: int, min_distance: int = 5,
                  ) -> List[PointPrompt]:
    """Top peaks of the map, greedily separated by Chebyshev ``min_distance``.

    Candidates are strict 8-neighborhood local maxima, visited in descending
    value with (row, column) lexicographic tie-breaking; at most ``count``
    survive the separation rule.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if min_distance < 1:
        raise ValueError("min_distance must be >= 1")
    if count == 0:
        return []
    values = activation.values
    candidates = _local_maxima(values)
    candidates.sort(key=lambda rc: (-values[rc[0], rc[1]], rc[0], rc[1]))
    chosen: List[Tuple[int, int]] = []
    for (r, c) in candidates:
        if len(chosen) == count:
            break
        if all(max(abs(r - rr), abs(c - cc)) >= min_distance for rr, cc in chosen):
            chosen.append((r, c))
    return [PointPrompt(x=c, y=r, rank=i) for i, (r, c) in enumerate(chosen)]


class FloodFillSegmenter(SegmenterInterface):
    """Adaptive flood fill around the prompt point.

    Grows the 8-connected region of pixels whose value stays within ``tau`` of
    the prompt pixel value, where ``tau`` is ``tau_factor`` times the dynamic
    range of the surrounding ``window``-sized patch.
    """

    def __init__(self, window: int = 15, tau_factor: float = 0.3):
        self.window = window
        self.tau_factor = tau_factor
        self.calls = 0

    def segment(self, frame: np.ndarray, point: Tuple[int, int]) -> np.ndarray:
        self.calls += 1
        frame = np.asarray(frame, dtype=np.float64)
        h, w = frame.shape
        x, y = point
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"prompt point {point} outside frame {w}x{h}")
        half = self.window // 2
        patch = frame[max(0, y - half):y + half + 1, max(0, x - half):x + half + 1]
        tau = self.tau_factor * float(patch.max() - patch.min())
        threshold = frame[y, x] - tau
        grow = frame >= threshold
        if not grow[y, x]:
            return np.zeros_like(grow)
        labels, _ = ndimage.label(grow, structure=np.ones((3, 3), dtype=int))
        return labels == labels[y, x]


def rle_encode(mask: np.ndarray) -> List[int]:
    """Row-major run lengths, alternating zero/one runs and starting with zeros."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    runs: List[int] = []
    current, length = 0, 0
    for value in flat:
        if value == current:
            length += 1
        else:
            runs.append(length)
            current, length = value, 1
    runs.append(length)
    return runs


def rle_decode(runs: Sequence[int], shape: Tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    pos, value = 0, 0
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value ^= 1
    if pos != total:
        raise ValueError(f"run lengths cover {pos} pixels, expected {total}")
    return flat.reshape(shape)


class ExternalSegmenter(SegmenterInterface):
    """Adapter speaking the external-segmenter wire protocol.

    Request: JSON ``{"png": <base64 PNG of the frame>, "x": int, "y": int}``;
    response: JSON ``{"rle": [...], "height": H, "width": W}``. Transport is an
    HTTP endpoint when ``url`` starts with http(s), otherwise a subprocess
    command exchanging one JSON line per request on stdin/stdout. Requests on
    one connection are serialized.
    """

    def __init__(self, url: str):
        if not url:
            raise ValueError("external segmenter needs a url or command")
        self.url = url
        self.calls = 0
        self._proc: Optional[subprocess.Popen] = None

    def _encode_request(self, frame: np.ndarray, point: Tuple[int, int]) -> str:
        from PIL import Image
        buf = io.BytesIO()
        scaled = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
        Image.fromarray(np.round(scaled * 65535.0).astype(np.uint16), mode="I;16").save(
            buf, format="PNG")
        return json.dumps({
            "png": base64.b64encode(buf.getvalue()).decode("ascii"),
            "x": int(point[0]),
            "y": int(point[1]),
        })

    def _decode_response(self, payload: str, shape: Tuple[int, int]) -> np.ndarray:
        reply = json.loads(payload)
        mask = rle_decode(reply["rle"], (reply["height"], reply["width"]))
        if mask.shape != shape:
            raise IrdetError(f"segmenter returned {mask.shape}, expected {shape}")
        return mask

    def segment(self, frame: np.ndarray, point: Tuple[int, int]) -> np.ndarray:
        self.calls += 1
        request = self._encode_request(frame, point)
        if self.url.startswith(("http://", "https://")):
            import urllib.request
            req = urllib.request.Request(
                self.url, data=request.encode(), headers={"Content-Type": "application/json"})
            with urllib.request.urlopen(req, timeout=30.0) as resp:
                payload = resp.read().decode()
        else:
            if self._proc is None or self._proc.poll() is not None:
                self._proc = subprocess.Popen(
                    self.url, shell=True, text=True,
                    stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            assert self._proc.stdin and self._proc.stdout
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
            payload = self._proc.stdout.readline()
            if not payload:
                raise IrdetError(f"segmenter subprocess {self.url!r} closed its stream")
        return self._decode_response(payload, np.asarray(frame).shape)

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10.0)
        self._proc = None


def make_segmenter(backend: str, url: str = "") -> SegmenterInterface:
    if backend == "floodfill":
        return FloodFillSegmenter()
    if backend == "external":
        return ExternalSegmenter(url)
    raise ValueError(f"unknown segmenter backend {backend!r}")


def segment_and_propose(prompts: Sequence[PointPrompt], keyframe: np.ndarray,
                        segmenter: SegmenterInterface,
                        min_box_side: float = 1.0, max_box_side: float = 32.0,
                        max_area_fraction: float = 0.005,
                        duplicate_iou: float = 0.7) -> List[PseudoLabel]:
    """Segment each prompt and keep the boxes that pass the plausibility filter.

    A candidate is dropped when its mask is empty, a side length falls outside
    the configured bounds, the mask area exceeds ``max_area_fraction`` of the
    frame, or it duplicates an earlier (higher-ranked) box above the IoU bound.
    """
    counters["segment_and_propose"] += 1
    h, w = np.asarray(keyframe).shape
    max_area = max_area_fraction * h * w
    labels: List[PseudoLabel] = []
    for prompt in prompts:
        mask = segmenter.segment(keyframe, (prompt.x, prompt.y))
        area = int(mask.sum())
        if area == 0:
            continue
        try:
            box = mask_to_box(mask)
        except NoForegroundError:
            continue
        if box.width < min_box_side or box.width > max_box_side:
            continue
        if box.height < min_box_side or box.height > max_box_side:
            continue
        if area > max_area:
            continue
        if any(iou(box, kept.box) > duplicate_iou for kept in labels):
            continue
        labels.append(PseudoLabel(box=box, peak=(prompt.x, prompt.y), mask_area=area))
    return labels


def mine_clip(frames: Sequence[np.ndarray], keyframe: np.ndarray, quantity: int,
              segmenter: SegmenterInterface, n: int = 3, min_distance: int = 5,
              use_energy: bool = True,
              generator: Optional[Callable[[np.ndarray], np.ndarray]] = None,
              min_box_side: float = 1.0, max_box_side: float = 32.0,
              max_area_fraction: float = 0.005, duplicate_iou: float = 0.7,
              ) -> List[PseudoLabel]:
    """Full mining pass for one clip: fused activation -> prompts -> labels."""
    if quantity <= 0:
        return []
    m = activation_generate(keyframe, generator=generator)
    if use_energy:
        e = energy_accumulate(high_pass_filter(frames))
        fused = fuse_activation(m, e)
    else:
        fused = m
    prompts = extract_peaks(fused, count=n * quantity, min_distance=min_distance)
    return segment_and_propose(prompts, keyframe, segmenter,
                               min_box_side=min_box_side, max_box_side=max_box_side,
                               max_area_fraction=max_area_fraction,
                               duplicate_iou=duplicate_iou)
