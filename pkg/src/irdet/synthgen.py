"""Deterministic synthetic infrared sequences with planted moving point targets.

Scenes are a smooth drifting background plus Gaussian-blob targets and optional
static clutter blobs, with additive Gaussian pixel noise. Ground truth is the
tight box around each target's bright core (pixels above ``core_level`` of the
blob amplitude), and the per-frame count K covers targets whose core lies fully
inside the frame.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Box, mask_to_box, NoForegroundError
from . import data


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_frames: int = 8
    num_targets: int = 2
    target_amplitude: float = 0.5
    target_sigma: float = 1.4          # blob radius in pixels, 1..4
    max_speed: float = 0.7             # per-axis velocity bound, px/frame
    velocities: Optional[Tuple[Tuple[float, float], ...]] = None
    background_level: float = 0.25
    background_amplitude: float = 0.08
    background_waves: int = 3
    background_drift: float = 0.02     # phase drift per frame, radians
    noise_sigma: float = 0.0
    num_clutter: int = 0               # static wide blobs, not ground truth
    clutter_amplitude: float = 0.5
    clutter_sigma: float = 2.4
    core_level: float = 0.45           # truth box encloses pixels >= this fraction of amplitude
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1.0 <= self.target_sigma <= 4.0:
            raise ValueError("target_sigma must lie in [1, 4]")
        if self.velocities is not None and len(self.velocities) != self.num_targets:
            raise ValueError("velocities must match num_targets")
        if not 0.0 < self.core_level < 1.0:
            raise ValueError("core_level must lie in (0, 1)")

    @property
    def local_snr(self) -> float:
        """Peak target contrast over pixel-noise sigma; inf for noise-free scenes."""
        if self.noise_sigma == 0.0:
            return math.inf
        return self.target_amplitude / self.noise_sigma


def _blob(height: int, width: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    # pixel (r, c) samples the field at its center (c + 0.5, r + 0.5)
    return np.exp(-(((xs + 0.5) - cx) ** 2 + ((ys + 0.5) - cy) ** 2) / (2.0 * sigma * sigma))


def _background(spec: SceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample per-wave parameters; returns (kx, ky, phase) arrays."""
    n = spec.background_waves
    # wavelengths of one to three frame widths: strictly low-frequency content
    wavelength = rng.uniform(1.0, 3.0, size=n) * max(spec.height, spec.width)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    kx = 2.0 * np.pi * np.cos(angle) / wavelength
    ky = 2.0 * np.pi * np.sin(angle) / wavelength
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return kx, ky, phase


def _render_background(spec: SceneSpec, kx, ky, phase, t: int) -> np.ndarray:
    ys = np.arange(spec.height, dtype=np.float64)[:, None]
    xs = np.arange(spec.width, dtype=np.float64)[None, :]
    field = np.zeros((spec.height, spec.width), dtype=np.float64)
    for j in range(len(kx)):
        field += np.sin(kx[j] * xs + ky[j] * ys + phase[j] + spec.background_drift * t * (j + 1))
    if len(kx):
        field *= spec.background_amplitude / len(kx)
    return spec.background_level + field


def _core_radius(sigma: float, core_level: float) -> float:
    return sigma * math.sqrt(2.0 * math.log(1.0 / core_level))


def generate_sequence(spec: SceneSpec):
    """Render a scene; returns (frames, per-frame truth boxes, per-frame K).

    Deterministic given ``spec.seed``. A target whose bright core is not fully
    inside the frame is excluded from that frame's truth list and count.
    """
    rng = np.random.default_rng(spec.seed)
    kx, ky, phase = _background(spec, rng)

    margin = _core_radius(spec.target_sigma, spec.core_level) + 1.5
    starts = np.column_stack([
        rng.uniform(margin, spec.width - margin, size=spec.num_targets),
        rng.uniform(margin, spec.height - margin, size=spec.num_targets),
    ]) if spec.num_targets else np.zeros((0, 2))
    if spec.velocities is not None:
        vels = np.asarray(spec.velocities, dtype=np.float64)
    else:
        vels = rng.uniform(-spec.max_speed, spec.max_speed, size=(spec.num_targets, 2))
        if spec.num_targets:
            # avoid near-static draws so trajectories actually move
            slow = np.abs(vels).max(axis=1) < 0.15
            vels[slow, 0] = np.where(vels[slow, 0] >= 0, 0.3, -0.3)

    clutter = np.column_stack([
        rng.uniform(margin, spec.width - margin, size=spec.num_clutter),
        rng.uniform(margin, spec.height - margin, size=spec.num_clutter),
    ]) if spec.num_clutter else np.zeros((0, 2))

    frames: List[np.ndarray] = []
    truth: List[List[Box]] = []
    counts: List[int] = []
    for t in range(spec.num_frames):
        frame = _render_background(spec, kx, ky, phase, t)
        boxes: List[Box] = []
        for i in range(spec.num_targets):
            cx = starts[i, 0] + vels[i, 0] * t
            cy = starts[i, 1] + vels[i, 1] * t
            blob = spec.target_amplitude * _blob(spec.height, spec.width, cx, cy, spec.target_sigma)
            frame += blob
            core = blob >= spec.core_level * spec.target_amplitude
            try:
                box = mask_to_box(core)
            except NoForegroundError:
                continue
            r = _core_radius(spec.target_sigma, spec.core_level)
            inside = (cx - r >= 0 and cx + r <= spec.width
                      and cy - r >= 0 and cy + r <= spec.height)
            if inside:
                boxes.append(box)
        for j in range(spec.num_clutter):
            frame += spec.clutter_amplitude * _blob(
                spec.height, spec.width, clutter[j, 0], clutter[j, 1], spec.clutter_sigma)
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, size=frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
        truth.append(boxes)
        counts.append(len(boxes))
    return frames, truth, counts


def emit_dataset(specs: Sequence[SceneSpec], root: str | Path,
                 ids: Optional[Sequence[str]] = None) -> dict:
    """Write sequences in the standard layout plus a manifest; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if ids is None:
        ids = [f"seq{i:03d}" for i in range(len(specs))]
    if len(ids) != len(specs):
        raise ValueError("ids must match specs")
    manifest = {"schema_version": 1, "sequences": []}
    for seq_id, spec in zip(ids, specs):
        seq_dir = root / seq_id
        seq_dir.mkdir(parents=True, exist_ok=True)
        frames, truth, counts = generate_sequence(spec)
        quantities: Dict[int, int] = {}
        boxes: Dict[int, List[Box]] = {}
        for frame_id, (frame, frame_boxes, k) in enumerate(zip(frames, truth, counts)):
            try:
                data.write_frame(seq_dir / f"{frame_id:05d}.png", frame)
            except OSError as exc:
                raise OSError(f"failed writing {seq_dir / f'{frame_id:05d}.png'}: {exc}") from exc
            quantities[frame_id] = k
            if frame_boxes:
                boxes[frame_id] = frame_boxes
        data.write_quantities(seq_dir / "quantities.csv", quantities)
        data.write_boxes(seq_dir / "boxes.csv", boxes)
        manifest["sequences"].append({
            "sequence_id": seq_id,
            "num_frames": spec.num_frames,
            "local_snr": None if math.isinf(spec.local_snr) else spec.local_snr,
            "spec": dataclasses.asdict(spec),
        })
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def dataset_digest(root: str | Path) -> str:
    """SHA-256 over all emitted files, for determinism checks."""
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
