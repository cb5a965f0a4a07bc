"""Pseudo-label scoring and contrastive refinement.

Region features are pooled from the keyframe feature map under each candidate
box, scored by a tiny MIL classifier, and split into positives/negatives by the
quantity prompt; three losses (positive cohesion, positive/negative
separation, smooth Top-K count consistency) shape both the features and the
classifier.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .core import Box, PseudoLabel


@dataclass
class RegionFeature:
    """Embedding of one candidate region plus its index into the label list."""

    vector: torch.Tensor
    label_ref: int


@dataclass
class SampleSplit:
    positives: List[RegionFeature]
    negatives: List[RegionFeature]
    selected: List[PseudoLabel]  # boxes of the positives, in score order


def _overlap_weights(lo: float, hi: float, cells: int) -> torch.Tensor:
    """Length each feature cell [c, c+1) contributes to the interval [lo, hi)."""
    lows = torch.arange(cells, dtype=torch.float64)
    overlap = torch.clamp(torch.minimum(lows + 1.0, torch.tensor(hi)) -
                          torch.maximum(lows, torch.tensor(lo)), min=0.0)
    return overlap


def roi_pool(feature: torch.Tensor, box: Box, stride: int, grid: int = 4) -> torch.Tensor:
    """Average-pool the box region of a (C, H', W') map onto a grid x grid output.

    The box is projected to feature coordinates and each output cell is the
    exact area-weighted average of the feature cells it overlaps, treating the
    map as piecewise constant. A box contained in one feature cell therefore
    replicates that cell's channels across the whole grid. Differentiable in
    the feature map.
    """
    if feature.ndim != 3:
        raise ValueError("feature must be (C, H', W')")
    _, fh, fw = feature.shape
    x_l, y_l = box.x_l / stride, box.y_l / stride
    x_r, y_r = box.x_r / stride, box.y_r / stride
    # keep a sliver of extent inside the map even for degenerate projections
    x_l, x_r = min(x_l, fw - 1e-6), min(max(x_r, x_l + 1e-6), float(fw))
    y_l, y_r = min(y_l, fh - 1e-6), min(max(y_r, y_l + 1e-6), float(fh))
    cell_w = (x_r - x_l) / grid
    cell_h = (y_r - y_l) / grid
    out = feature.new_zeros((feature.shape[0], grid, grid))
    for gy in range(grid):
        wy = _overlap_weights(y_l + gy * cell_h, y_l + (gy + 1) * cell_h, fh)
        wy = (wy / wy.sum()).to(feature.dtype).to(feature.device)
        for gx in range(grid):
            wx = _overlap_weights(x_l + gx * cell_w, x_l + (gx + 1) * cell_w, fw)
            wx = (wx / wx.sum()).to(feature.dtype).to(feature.device)
            out[:, gy, gx] = torch.einsum("h,chw,w->c", wy, feature, wx)
    return out


class RegionProjector(nn.Module):
    """Linear projection of the flattened pooled grid to the embedding space."""

    def __init__(self, channels: int, grid: int = 4, embed_dim: int = 128):
        super().__init__()
        self.proj = nn.Linear(channels * grid * grid, embed_dim)
        nn.init.zeros_(self.proj.bias)

    def forward(self, pooled_flat: torch.Tensor) -> torch.Tensor:
        return self.proj(pooled_flat)


def crop_and_pool(labels: Sequence[PseudoLabel], keyframe_feature: torch.Tensor,
                  stride: int, projector: Optional[nn.Module] = None,
                  grid: int = 4) -> List[RegionFeature]:
    """Pool every candidate box into a region feature (projected when given)."""
    features: List[RegionFeature] = []
    for i, label in enumerate(labels):
        pooled = roi_pool(keyframe_feature, label.box, stride=stride, grid=grid)
        vector = pooled.reshape(-1)
        if projector is not None:
            vector = projector(vector)
        features.append(RegionFeature(vector=vector, label_ref=i))
    return features


class MILClassifier(nn.Module):
    """Sigmoid of an affine map of the region feature."""

    def __init__(self, embed_dim: int = 128):
        super().__init__()
        self.affine = nn.Linear(embed_dim, 1)
        nn.init.zeros_(self.affine.bias)
        self.calls = 0

    def forward(self, vectors: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        return torch.sigmoid(self.affine(vectors).squeeze(-1))


def mil_score(features: Sequence[RegionFeature], classifier: MILClassifier) -> torch.Tensor:
    """Scores in (0,1) per region; empty input yields an empty tensor."""
    if not features:
        return torch.zeros(0)
    stacked = torch.stack([f.vector for f in features])
    return classifier(stacked)


def _stable_descending(scores: torch.Tensor) -> torch.Tensor:
    """Indices sorting scores descending, ties broken by lower index."""
    return torch.argsort(-scores.detach(), stable=True)


def split_samples(features: Sequence[RegionFeature], scores: torch.Tensor, k: int,
                  labels: Optional[Sequence[PseudoLabel]] = None) -> SampleSplit:
    """Top-min(k, m) scorers become positives, the rest negatives.

    When the original labels are provided, the selected labels are returned in
    score order with their MIL score attached.
    """
    m = len(features)
    if scores.numel() != m:
        raise ValueError("scores must align with features")
    take = min(max(k, 0), m)
    order = _stable_descending(scores)
    pos_idx = order[:take].tolist()
    neg_idx = order[take:].tolist()
    positives = [features[i] for i in pos_idx]
    negatives = [features[i] for i in neg_idx]
    selected: List[PseudoLabel] = []
    if labels is not None:
        for i in pos_idx:
            selected.append(labels[features[i].label_ref].with_score(scores[i].item()))
    return SampleSplit(positives=positives, negatives=negatives, selected=selected)


def _guarded_cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities; pairs touching a zero-norm vector give 0."""
    eps = 1e-12
    norm_a = a.norm(dim=1)
    norm_b = b.norm(dim=1)
    sims = (a @ b.T) / (norm_a[:, None].clamp_min(eps) * norm_b[None, :].clamp_min(eps))
    valid = (norm_a[:, None] > eps) & (norm_b[None, :] > eps)
    return sims * valid


def loss_pos(positives: Sequence[RegionFeature]) -> torch.Tensor:
    """Negated mean pairwise cosine similarity over distinct positive pairs."""
    if len(positives) <= 1:
        return torch.zeros(())
    vectors = torch.stack([f.vector for f in positives])
    sims = _guarded_cosine_matrix(vectors, vectors)
    n = vectors.shape[0]
    idx = torch.triu_indices(n, n, offset=1)
    return -sims[idx[0], idx[1]].mean()


def loss_neg(positives: Sequence[RegionFeature], negatives: Sequence[RegionFeature],
             ) -> torch.Tensor:
    """Mean cosine similarity over all positive x negative pairs."""
    if not positives or not negatives:
        return torch.zeros(())
    q = torch.stack([f.vector for f in positives])
    h = torch.stack([f.vector for f in negatives])
    return _guarded_cosine_matrix(q, h).mean()


def loss_mil(score_batches: Sequence[torch.Tensor], k_list: Sequence[int],
             epsilon: float = 1e-6) -> torch.Tensor:
    """Smooth Top-K count-consistency loss over a batch of frames.

    Per frame the scores pass through a softmax and the weights of the
    Top-K_b scorers are pushed up via -log(w + eps); frames with no prompt
    (K_b = 0) or no candidates contribute nothing.
    """
    if len(score_batches) != len(k_list):
        raise ValueError("score_batches must align with k_list")
    terms: List[torch.Tensor] = []
    for scores, k in zip(score_batches, k_list):
        m = scores.numel()
        if k <= 0 or m == 0:
            continue
        take = min(k, m)
        weights = torch.softmax(scores, dim=0)
        top = _stable_descending(scores)[:take]
        terms.append(-torch.log(weights[top] + epsilon).mean())
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).mean()


def pcl_loss(positives: Sequence[RegionFeature], negatives: Sequence[RegionFeature],
             score_batches: Sequence[torch.Tensor], k_list: Sequence[int],
             epsilon: float = 1e-6) -> torch.Tensor:
    """Sum of the positive, negative, and Top-K MIL components."""
    return (loss_pos(positives) + loss_neg(positives, negatives)
            + loss_mil(score_batches, k_list, epsilon=epsilon))
