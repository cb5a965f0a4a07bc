"""Training and inference orchestration.

Training mines pseudo-labels per clip, refines them through the Top-K MIL
split, and supervises both the contrastive losses and the detection head in a
single SGD step. Inference runs only the motion trunk and the head: no
mining, no segmenter, no MIL classifier.
"""
from __future__ import annotations

import dataclasses
import logging
import random
import time
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import checkpoint, data, losses, metrics, pcl, ptm
from .core import Box, Config, FrameClip, PseudoLabel
from .losses import Detection, DetectionHead
from .ltm import MotionNet

logger = logging.getLogger(__name__)


class CountSupervisedDetector(nn.Module):
    """Full model bundle: motion trunk, detection head, region projector, MIL."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.trunk = MotionNet(channels=cfg.channels, window=cfg.T, heads=cfg.attn_heads)
        self.head = DetectionHead(cfg.channels)
        self.projector = pcl.RegionProjector(cfg.channels, grid=cfg.roi_grid,
                                             embed_dim=cfg.embed_dim)
        self.mil = pcl.MILClassifier(cfg.embed_dim)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: Config) -> CountSupervisedDetector:
    """Deterministic construction: the config seed fixes every initial weight."""
    torch.manual_seed(cfg.seed)
    return CountSupervisedDetector(cfg)


def build_optimizer(model: nn.Module, cfg: Config) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)


@dataclasses.dataclass
class TrainState:
    model: CountSupervisedDetector
    optimizer: torch.optim.SGD
    cfg: Config
    epoch: int = 0
    history: List[Dict[str, float]] = dataclasses.field(default_factory=list)


def make_state(cfg: Config) -> TrainState:
    model = build_model(cfg)
    return TrainState(model=model, optimizer=build_optimizer(model, cfg), cfg=cfg)


def _frames_tensor(clips: Sequence[FrameClip]) -> torch.Tensor:
    stacks = [torch.from_numpy(clip.stacked()) for clip in clips]
    return torch.stack(stacks)


def mine_labels(clip: FrameClip, quantity: int, cfg: Config,
                segmenter: Optional[ptm.SegmenterInterface] = None) -> List[PseudoLabel]:
    """Run the mining stage for one clip with the configured segmenter."""
    if segmenter is None:
        segmenter = ptm.make_segmenter(cfg.segmenter_backend, cfg.segmenter_url)
    return ptm.mine_clip(
        clip.frames, clip.keyframe, quantity, segmenter,
        n=cfg.n, min_distance=cfg.peak_min_distance, use_energy=cfg.use_energy,
        min_box_side=cfg.min_box_side, max_box_side=cfg.max_box_side,
        max_area_fraction=cfg.max_area_fraction, duplicate_iou=cfg.duplicate_iou)


def train_step(batch: Sequence[Tuple[FrameClip, int]], state: TrainState,
               segmenter: Optional[ptm.SegmenterInterface] = None) -> Dict[str, float]:
    """One SGD update over a batch of (clip, quantity) pairs.

    Labels are re-mined from the clip data alone on every call; nothing is
    cached across epochs. Clips whose mining comes back empty contribute only
    background objectness loss.
    """
    cfg = state.cfg
    model = state.model
    model.train()
    frames = _frames_tensor([clip for clip, _ in batch])
    h, w = batch[0][0].shape
    motion, key_feats = model.trunk(frames)
    head_out = model.head(motion)

    positives: List[pcl.RegionFeature] = []
    negatives: List[pcl.RegionFeature] = []
    score_batches: List[torch.Tensor] = []
    k_list: List[int] = []
    selected_per_frame: List[List[PseudoLabel]] = []
    mined_counts: List[int] = []
    for i, (clip, quantity) in enumerate(batch):
        labels = mine_labels(clip, quantity, cfg, segmenter=segmenter)
        mined_counts.append(len(labels))
        if not labels:
            selected_per_frame.append([])
            continue
        features = pcl.crop_and_pool(labels, key_feats[i], stride=cfg.stride,
                                     projector=model.projector, grid=cfg.roi_grid)
        scores = pcl.mil_score(features, model.mil)
        split = pcl.split_samples(features, scores, quantity, labels=labels)
        positives.extend(split.positives)
        negatives.extend(split.negatives)
        score_batches.append(scores)
        k_list.append(quantity)
        selected_per_frame.append(split.selected)

    pcl_value = pcl.pcl_loss(positives, negatives, score_batches, k_list,
                             epsilon=cfg.epsilon)
    det_components = losses.detection_loss(
        head_out, cfg.stride, w, h, selected_per_frame,
        center_radius=cfg.center_radius)
    loss = losses.total_loss(det_components, pcl_value,
                             eta=cfg.eta, gamma=cfg.gamma,
                             lambda1=cfg.lambda1, lambda2=cfg.lambda2)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    return {
        "total": float(loss),
        "cls": float(det_components["cls"]),
        "reg": float(det_components["reg"]),
        "obj": float(det_components["obj"]),
        "pcl": float(pcl_value),
        "mined": float(np.mean(mined_counts)) if mined_counts else 0.0,
        "selected": float(np.mean([len(s) for s in selected_per_frame])),
    }


def train(root: str | Path, cfg: Config, out_dir: str | Path,
          segmenter: Optional[ptm.SegmenterInterface] = None,
          log_every: int = 20) -> TrainState:
    """Full training loop over the dataset at `root`; checkpoints into `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = make_state(cfg)
    clips = list(data.iter_training_clips(root, cfg.T))
    if not clips:
        raise data.DatasetError(f"no annotated clips under {root}")
    rng = random.Random(cfg.seed)
    start = time.time()
    for epoch in range(cfg.epochs):
        order = list(range(len(clips)))
        rng.shuffle(order)
        epoch_losses: List[Dict[str, float]] = []
        for begin in range(0, len(order), cfg.batch_size):
            batch = [clips[i] for i in order[begin:begin + cfg.batch_size]]
            epoch_losses.append(train_step(batch, state, segmenter=segmenter))
        summary = {key: float(np.mean([e[key] for e in epoch_losses]))
                   for key in epoch_losses[0]}
        summary["epoch"] = epoch
        state.history.append(summary)
        state.epoch = epoch + 1
        if (epoch + 1) % log_every == 0 or epoch == cfg.epochs - 1:
            logger.info("epoch %d: total=%.4f det=(%.4f,%.4f,%.4f) pcl=%.4f [%.1fs]",
                        epoch, summary["total"], summary["cls"], summary["reg"],
                        summary["obj"], summary["pcl"], time.time() - start)
    save_state(out_dir / "checkpoint", state)
    _write_history(out_dir / "loss_trace.csv", state.history)
    return state


def _write_history(path: Path, history: List[Dict[str, float]]) -> None:
    if not history:
        return
    keys = [k for k in history[0] if k != "epoch"]
    lines = ["epoch," + ",".join(keys)]
    for row in history:
        lines.append(f"{int(row['epoch'])}," + ",".join(f"{row[k]:.6f}" for k in keys))
    path.write_text("\n".join(lines) + "\n")


def save_state(directory: str | Path, state: TrainState) -> None:
    checkpoint.save_checkpoint(directory, state.model, arch=state.cfg.as_dict(),
                               epoch=state.epoch, seed=state.cfg.seed,
                               optimizer=state.optimizer)


def load_state(directory: str | Path) -> TrainState:
    manifest = checkpoint.load_manifest(directory)
    cfg = Config.from_mapping({k: str(v) for k, v in manifest["arch"].items()})
    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    checkpoint.load_checkpoint(directory, model, optimizer)
    return TrainState(model=model, optimizer=optimizer, cfg=cfg,
                      epoch=manifest["epoch"])


@torch.no_grad()
def infer(clip: FrameClip, state: TrainState) -> List[Detection]:
    """Detections for one clip's keyframe; motion trunk and head only."""
    cfg = state.cfg
    state.model.eval()
    frames = _frames_tensor([clip])
    motion, _ = state.model.trunk(frames)
    head_out = state.model.head(motion)
    h, w = clip.shape
    return losses.postprocess(head_out, cfg.stride, w, h,
                              score_threshold=cfg.score_threshold,
                              nms_iou=cfg.nms_iou)[0]


def infer_sequence(seq: data.Sequence, state: TrainState) -> Dict[int, List[Detection]]:
    """Per-frame detections for every frame of a sequence (causal padding)."""
    out: Dict[int, List[Detection]] = {}
    for pos in range(len(seq)):
        clip = seq.clip(pos, state.cfg.T)
        out[seq.frame_ids[pos]] = infer(clip, state)
    return out


def evaluate_dataset(root: str | Path, state: TrainState,
                     iou_thr: Optional[float] = None) -> metrics.MetricsReport:
    """Run inference over a dataset root and score it against its truth boxes."""
    iou_thr = state.cfg.iou_threshold if iou_thr is None else iou_thr
    per_image = []
    for seq_id in data.list_sequences(root):
        seq = data.Sequence(root, seq_id)
        detections = infer_sequence(seq, state)
        for frame_id, dets in detections.items():
            gts = seq.truth_boxes.get(frame_id, [])
            per_image.append(([(d.box, d.score) for d in dets], gts))
    return metrics.evaluate_set(per_image, iou_thr=iou_thr)
