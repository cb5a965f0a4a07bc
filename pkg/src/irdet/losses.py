"""Anchor-free detection head and the composite training loss.

Single-scale head over the fused motion feature: three 1x1 branches predict
per-cell box offsets, objectness, and a class logit. Assignment is
deterministic center-radius matching against the selected pseudo-labels;
classification and objectness use sigmoid focal loss and regression uses GIoU.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from .core import Box, NonFiniteLossError, PseudoLabel

PROB_EPS = 1e-7


@dataclass(frozen=True)
class Detection:
    box: Box
    objectness: float
    class_score: float

    @property
    def score(self) -> float:
        return self.objectness * self.class_score


class DetectionHead(nn.Module):
    """1x1 conv branches for box offsets, objectness, and class logits.

    Score branches start with a low-confidence prior bias so an untrained
    model produces (almost) no detections above threshold.
    """

    def __init__(self, channels: int, prior_prob: float = 0.01):
        super().__init__()
        self.box_branch = nn.Conv2d(channels, 4, 1)
        self.obj_branch = nn.Conv2d(channels, 1, 1)
        self.cls_branch = nn.Conv2d(channels, 1, 1)
        bias = -math.log((1.0 - prior_prob) / prior_prob)
        nn.init.zeros_(self.box_branch.bias)
        nn.init.constant_(self.obj_branch.bias, bias)
        nn.init.constant_(self.cls_branch.bias, bias)

    def forward(self, motion: torch.Tensor) -> Dict[str, torch.Tensor]:
        """(B, C, H', W') -> raw maps: box (B,4,H',W'), obj/cls (B,1,H',W')."""
        return {
            "box": self.box_branch(motion),
            "obj": self.obj_branch(motion),
            "cls": self.cls_branch(motion),
        }


def decode_boxes(box_map: torch.Tensor, stride: int,
                 frame_width: int, frame_height: int) -> torch.Tensor:
    """Raw box map (B, 4, H', W') -> (B, H'*W', 4) xyxy clamped to the frame.

    Channels are (tx, ty, tw, th): the center lands at (cell + 0.5 + t) * stride
    and sides are exp(t) * stride, so a zero prediction is a stride-sized box
    centered on its cell.
    """
    b, _, gh, gw = box_map.shape
    device = box_map.device
    ys = torch.arange(gh, dtype=box_map.dtype, device=device)
    xs = torch.arange(gw, dtype=box_map.dtype, device=device)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    tx, ty, tw, th = box_map[:, 0], box_map[:, 1], box_map[:, 2], box_map[:, 3]
    cx = (grid_x + 0.5 + tx) * stride
    cy = (grid_y + 0.5 + ty) * stride
    w = torch.exp(tw.clamp(max=8.0)) * stride
    h = torch.exp(th.clamp(max=8.0)) * stride
    x_l = torch.clamp(cx - w / 2, 0.0, frame_width - 1.0)
    y_l = torch.clamp(cy - h / 2, 0.0, frame_height - 1.0)
    x_r = torch.maximum(torch.clamp(cx + w / 2, max=float(frame_width)), x_l + 1e-3)
    y_r = torch.maximum(torch.clamp(cy + h / 2, max=float(frame_height)), y_l + 1e-3)
    return torch.stack([x_l, y_l, x_r, y_r], dim=-1).reshape(b, gh * gw, 4)


def focal_loss(pred_prob: torch.Tensor, target: torch.Tensor,
               gamma_f: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Sigmoid focal loss on probabilities, mean-reduced over all elements."""
    p = pred_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = target.to(p.dtype)
    pos = -alpha * (1.0 - p) ** gamma_f * torch.log(p)
    neg = -(1.0 - alpha) * p ** gamma_f * torch.log(1.0 - p)
    return (t * pos + (1.0 - t) * neg).mean()


def giou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of aligned box rows, each (N, 4) xyxy."""
    ix = torch.clamp(torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0]), min=0.0)
    iy = torch.clamp(torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1]), min=0.0)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    ex = torch.maximum(a[:, 2], b[:, 2]) - torch.minimum(a[:, 0], b[:, 0])
    ey = torch.maximum(a[:, 3], b[:, 3]) - torch.minimum(a[:, 1], b[:, 1])
    enclosure = ex * ey
    return inter / union - (enclosure - union) / enclosure


def giou(a: Box, b: Box) -> float:
    """Scalar GIoU of two boxes, in (-1, 1]."""
    ta = torch.tensor([a.as_tuple()], dtype=torch.float64)
    tb = torch.tensor([b.as_tuple()], dtype=torch.float64)
    return float(giou_tensor(ta, tb)[0])


def assign_targets(grid_h: int, grid_w: int, stride: int,
                   labels: Sequence[PseudoLabel], center_radius: float = 2.5,
                   ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Center-radius assignment of grid cells to pseudo-labels.

    A cell is positive for a box when its center lies inside the box or within
    ``center_radius`` cells (Chebyshev) of the box center; contested cells go
    to the box with the higher MIL score, then to the earlier label. Returns
    (positive mask (H'*W',) bool, matched boxes (H'*W', 4) xyxy).
    """
    pos = torch.zeros(grid_h * grid_w, dtype=torch.bool)
    matched = torch.zeros(grid_h * grid_w, 4, dtype=torch.float64)
    if not labels:
        return pos, matched
    best_score = torch.full((grid_h * grid_w,), -math.inf, dtype=torch.float64)
    radius = center_radius * stride
    for label in labels:
        box = label.box
        score = label.score if label.score is not None else 0.0
        bx, by = box.center
        for gy in range(grid_h):
            cy = (gy + 0.5) * stride
            for gx in range(grid_w):
                cx = (gx + 0.5) * stride
                inside = box.x_l <= cx < box.x_r and box.y_l <= cy < box.y_r
                near = max(abs(cx - bx), abs(cy - by)) <= radius
                if not (inside or near):
                    continue
                idx = gy * grid_w + gx
                if score > best_score[idx]:
                    best_score[idx] = score
                    pos[idx] = True
                    matched[idx] = torch.tensor(box.as_tuple(), dtype=torch.float64)
    return pos, matched


def detection_loss(head_out: Dict[str, torch.Tensor], stride: int,
                   frame_width: int, frame_height: int,
                   labels_per_frame: Sequence[Sequence[PseudoLabel]],
                   center_radius: float = 2.5,
                   gamma_f: float = 2.0, alpha: float = 0.25,
                   ) -> Dict[str, torch.Tensor]:
    """Per-batch detection loss components {cls, reg, obj}."""
    box_map, obj_map, cls_map = head_out["box"], head_out["obj"], head_out["cls"]
    b, _, gh, gw = obj_map.shape
    if len(labels_per_frame) != b:
        raise ValueError("labels_per_frame must align with the batch")
    boxes = decode_boxes(box_map, stride, frame_width, frame_height)
    obj_prob = torch.sigmoid(obj_map.reshape(b, -1))
    cls_prob = torch.sigmoid(cls_map.reshape(b, -1))

    obj_targets = torch.zeros_like(obj_prob)
    cls_losses: List[torch.Tensor] = []
    reg_losses: List[torch.Tensor] = []
    for i, labels in enumerate(labels_per_frame):
        pos, matched = assign_targets(gh, gw, stride, labels, center_radius)
        obj_targets[i] = pos.to(obj_prob.dtype)
        if pos.any():
            idx = torch.nonzero(pos, as_tuple=True)[0]
            cls_losses.append(focal_loss(cls_prob[i, idx],
                                         torch.ones(len(idx), dtype=cls_prob.dtype),
                                         gamma_f=gamma_f, alpha=alpha))
            g = giou_tensor(boxes[i, idx], matched[idx].to(boxes.dtype))
            reg_losses.append((1.0 - g).mean())
    zero = obj_prob.sum() * 0.0
    return {
        "cls": torch.stack(cls_losses).mean() if cls_losses else zero,
        "reg": torch.stack(reg_losses).mean() if reg_losses else zero,
        "obj": focal_loss(obj_prob, obj_targets, gamma_f=gamma_f, alpha=alpha),
    }


def total_loss(det_components: Dict[str, torch.Tensor], pcl_value: torch.Tensor,
               eta: float = 1.0, gamma: float = 1.0,
               lambda1: float = 5.0, lambda2: float = 1.0) -> torch.Tensor:
    """eta * (cls + lambda1 * reg + lambda2 * obj) + gamma * pcl."""
    det = det_components["cls"] + lambda1 * det_components["reg"] \
        + lambda2 * det_components["obj"]
    value = eta * det + gamma * pcl_value
    if not torch.isfinite(value):
        parts = {k: float(v) for k, v in det_components.items()}
        raise NonFiniteLossError(f"non-finite loss: det={parts} pcl={float(pcl_value)}")
    return value


def nms(detections: List[Detection], iou_thr: float = 0.5) -> List[Detection]:
    """Greedy score-descending suppression at the given IoU threshold."""
    from .core import iou as box_iou
    ordered = sorted(enumerate(detections), key=lambda kv: (-kv[1].score, kv[0]))
    kept: List[Detection] = []
    for _, det in ordered:
        if all(box_iou(det.box, other.box) <= iou_thr for other in kept):
            kept.append(det)
    return kept


def postprocess(head_out: Dict[str, torch.Tensor], stride: int,
                frame_width: int, frame_height: int,
                score_threshold: float = 0.3, nms_iou: float = 0.5,
                ) -> List[List[Detection]]:
    """Decode, threshold, and suppress the head output into per-frame detections."""
    boxes = decode_boxes(head_out["box"], stride, frame_width, frame_height)
    obj = torch.sigmoid(head_out["obj"]).flatten(1)
    cls = torch.sigmoid(head_out["cls"]).flatten(1)
    results: List[List[Detection]] = []
    for i in range(boxes.shape[0]):
        frame_dets: List[Detection] = []
        scores = obj[i] * cls[i]
        for j in torch.nonzero(scores >= score_threshold, as_tuple=True)[0].tolist():
            x_l, y_l, x_r, y_r = (float(v) for v in boxes[i, j])
            frame_dets.append(Detection(
                box=Box(x_l, y_l, x_r, y_r),
                objectness=float(obj[i, j]),
                class_score=float(cls[i, j]),
            ))
        results.append(nms(frame_dets, iou_thr=nms_iou))
    return results
