"""Minimal two-stage detector: anchor RPN, ROI pooling, classification heads.

Boxes are (x1, y1, x2, y2) in input-pixel coordinates throughout. The ROI
classifier produces a (K+1)-way softmax per proposal with background at
index 0; the K foreground rows form the score matrix Q used both for
detection output and for the per-image category vector q (row-wise max).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeatureMap, he_init_
from .errors import ConfigurationError, ContractViolation

RPN_POSITIVE_IOU = 0.7
RPN_NEGATIVE_IOU = 0.3
ROI_POSITIVE_IOU = 0.5
DELTA_CLAMP = 4.0  # cap on predicted log-size deltas before exp


@dataclass
class ProposalBatch:
    """Per-image region proposals with objectness scores in [0, 1]."""

    boxes: torch.Tensor  # (N, 4)
    objectness: torch.Tensor  # (N,)

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass
class ProposalScores:
    """Per-image ROI classifier output: foreground matrix Q plus background row."""

    Q: torch.Tensor  # (K, N) foreground probabilities
    bg: torch.Tensor  # (N,) background probabilities


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def iou(box_a, box_b) -> float:
    """Intersection-over-union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """(A, 4) x (B, 4) -> (A, B) IoU values."""
    if boxes_a.numel() == 0 or boxes_b.numel() == 0:
        return boxes_a.new_zeros((boxes_a.shape[0], boxes_b.shape[0]))
    a = boxes_a[:, None, :]
    b = boxes_b[None, :, :]
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(inter > 0, inter / union, torch.zeros_like(inter))


def generate_anchors(
    fmap_hw: tuple[int, int],
    stride: int,
    scales: tuple[float, ...],
    ratios: tuple[float, ...],
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """One anchor per (cell, scale, ratio), centered on feature-cell centers.

    A ratio is height/width: width = scale*stride/sqrt(ratio), height =
    scale*stride*sqrt(ratio), so ratio 1 gives squares of side scale*stride.
    Returns (H_f * W_f * len(scales) * len(ratios), 4) in row-major cell order.
    """
    if not scales or not ratios:
        raise ConfigurationError("scales and ratios must be non-empty")
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ConfigurationError("scales and ratios must be positive")
    h, w = fmap_hw
    shapes = []
    for scale in scales:
        for ratio in ratios:
            bw = scale * stride / (ratio ** 0.5)
            bh = scale * stride * (ratio ** 0.5)
            shapes.append((bw, bh))
    shapes_t = torch.tensor(shapes, dtype=dtype)  # (A, 2)
    ys = (torch.arange(h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=1)  # (H*W, 2)
    half = shapes_t / 2.0
    x1y1 = centers[:, None, :] - half[None, :, :]
    x2y2 = centers[:, None, :] + half[None, :, :]
    return torch.cat([x1y1, x2y2], dim=2).reshape(-1, 4)


def encode_boxes(anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Box regression targets: center offsets scaled by anchor size, log sizes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return torch.stack(
        [(tx - ax) / aw, (ty - ay) / ah, torch.log(tw / aw), torch.log(th / ah)], dim=1
    )


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Inverse of encode_boxes, with log-size deltas clamped for stability."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    w = aw * torch.exp(deltas[:, 2].clamp(max=DELTA_CLAMP))
    h = ah * torch.exp(deltas[:, 3].clamp(max=DELTA_CLAMP))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, image_hw: tuple[int, int]) -> torch.Tensor:
    h, w = image_hw
    x1 = boxes[:, 0].clamp(0.0, float(w))
    y1 = boxes[:, 1].clamp(0.0, float(h))
    x2 = boxes[:, 2].clamp(0.0, float(w))
    y2 = boxes[:, 3].clamp(0.0, float(h))
    return torch.stack([x1, y1, x2, y2], dim=1)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Elementwise smooth-L1 (Huber) values; zero exactly at zero residual."""
    diff = (pred - target).abs()
    return torch.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)


def nms(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    iou_threshold: float,
    max_keep: int | None = None,
) -> torch.Tensor:
    """Greedy descending-score suppression; ties broken by lower box index.

    Returns kept indices (in keep order). A candidate is suppressed when its
    IoU with any kept box is >= iou_threshold, so survivors have pairwise
    IoU strictly below the threshold. Deterministic, hence idempotent.
    """
    n = boxes.shape[0]
    if n == 0:
        return torch.empty(0, dtype=torch.int64)
    order = torch.sort(-scores.detach(), stable=True).indices
    mat = iou_matrix(boxes.detach(), boxes.detach())
    suppressed = torch.zeros(n, dtype=torch.bool)
    kept: list[int] = []
    for idx in order.tolist():
        if suppressed[idx]:
            continue
        kept.append(idx)
        if max_keep is not None and len(kept) >= max_keep:
            break
        suppressed |= mat[idx] >= iou_threshold
    return torch.tensor(kept, dtype=torch.int64)


def roi_average_pool(
    features: torch.Tensor,
    rois: torch.Tensor,
    stride: int,
    output_size: int,
) -> torch.Tensor:
    """Average-pool feature cells under each ROI into a fixed grid.

    features: (B, C, H_f, W_f); rois: (R, 5) rows of (batch_index, x1, y1,
    x2, y2) in input pixels. Bins snap to whole feature cells (at least one
    cell per bin) and are averaged via a padded integral image, so the op
    is exactly differentiable w.r.t. features. Returns (R, C, P, P).
    """
    if rois.numel() == 0:
        b, c = features.shape[:2]
        return features.new_zeros((0, c, output_size, output_size))
    _, _, hf, wf = features.shape
    p = output_size
    integral = F.pad(features, (1, 0, 1, 0)).cumsum(2).cumsum(3)  # (B, C, H+1, W+1)

    batch_idx = rois[:, 0].long()
    grid = torch.arange(p + 1, dtype=features.dtype) / p

    def bin_edges(lo, hi, limit):
        edges = lo[:, None] + (hi - lo)[:, None] * grid[None, :]  # (R, P+1)
        starts = edges[:, :-1].floor().long().clamp(0, limit - 1)
        ends = edges[:, 1:].ceil().long().clamp(1, limit)
        ends = torch.maximum(ends, starts + 1)
        return starts, ends

    xs, xe = bin_edges(rois[:, 1] / stride, rois[:, 3] / stride, wf)
    ys, ye = bin_edges(rois[:, 2] / stride, rois[:, 4] / stride, hf)

    bidx = batch_idx[:, None, None]
    y0 = ys[:, :, None].expand(-1, p, p)
    y1 = ye[:, :, None].expand(-1, p, p)
    x0 = xs[:, None, :].expand(-1, p, p)
    x1 = xe[:, None, :].expand(-1, p, p)

    total = (
        integral[bidx, :, y1, x1]
        - integral[bidx, :, y0, x1]
        - integral[bidx, :, y1, x0]
        + integral[bidx, :, y0, x0]
    )  # (R, P, P, C)
    area = ((y1 - y0) * (x1 - x0)).to(features.dtype)
    pooled = total / area[..., None]
    return pooled.permute(0, 3, 1, 2).contiguous()


def detector_category_vector(Q: torch.Tensor) -> torch.Tensor | None:
    """Per-image category probabilities q_k = max over proposals of Q[k, n].

    Returns None when there are no proposals; the caller masks that image
    out of the consistency loss.
    """
    if Q.numel() == 0 or Q.shape[1] == 0:
        return None
    return Q.max(dim=1).values


class RegionProposalNetwork(nn.Module):
    """Anchor-based proposal head over the shared feature map."""

    def __init__(
        self,
        in_channels: int,
        stride: int,
        mid_channels: int = 64,
        scales: tuple[float, ...] = (1.25, 2.0, 3.0),
        ratios: tuple[float, ...] = (0.5, 1.0, 2.0),
        pre_nms_top_n: int = 256,
        post_nms_top_n: int = 32,
        nms_threshold: float = 0.7,
        min_box_size: float = 2.0,
        seed: int = 0,
    ):
        super().__init__()
        self.stride = stride
        self.scales = tuple(scales)
        self.ratios = tuple(ratios)
        self.num_anchors = len(self.scales) * len(self.ratios)
        self.pre_nms_top_n = pre_nms_top_n
        self.post_nms_top_n = post_nms_top_n
        self.nms_threshold = nms_threshold
        self.min_box_size = min_box_size
        self.conv = nn.Conv2d(in_channels, mid_channels, kernel_size=3, padding=1)
        self.objectness = nn.Conv2d(mid_channels, self.num_anchors, kernel_size=1)
        self.deltas = nn.Conv2d(mid_channels, self.num_anchors * 4, kernel_size=1)
        he_init_(self, torch.Generator().manual_seed(seed))

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (objectness logits (B, M), deltas (B, M, 4), anchors (M, 4))."""
        b, _, hf, wf = features.shape
        h = F.relu(self.conv(features))
        logits = self.objectness(h)  # (B, A, Hf, Wf)
        deltas = self.deltas(h)  # (B, 4A, Hf, Wf)
        # match anchor layout: cells row-major, then (scale, ratio) within a cell
        logits = logits.permute(0, 2, 3, 1).reshape(b, -1)
        deltas = deltas.permute(0, 2, 3, 1).reshape(b, -1, 4)
        anchors = generate_anchors((hf, wf), self.stride, self.scales, self.ratios, features.dtype)
        return logits, deltas, anchors

    def select_proposals(
        self,
        logits: torch.Tensor,
        deltas: torch.Tensor,
        anchors: torch.Tensor,
        image_hw: tuple[int, int],
    ) -> list[ProposalBatch]:
        """Decode, clip, filter tiny boxes, then NMS down to post_nms_top_n."""
        proposals = []
        for i in range(logits.shape[0]):
            scores = torch.sigmoid(logits[i].detach())
            boxes = clip_boxes(decode_boxes(anchors, deltas[i].detach()), image_hw)
            wide = (boxes[:, 2] - boxes[:, 0]) >= self.min_box_size
            tall = (boxes[:, 3] - boxes[:, 1]) >= self.min_box_size
            valid = wide & tall
            boxes, scores = boxes[valid], scores[valid]
            if boxes.shape[0] > self.pre_nms_top_n:
                order = torch.sort(-scores, stable=True).indices[: self.pre_nms_top_n]
                boxes, scores = boxes[order], scores[order]
            keep = nms(boxes, scores, self.nms_threshold, max_keep=self.post_nms_top_n)
            proposals.append(ProposalBatch(boxes=boxes[keep], objectness=scores[keep]))
        return proposals

    def losses(
        self,
        logits: torch.Tensor,
        deltas: torch.Tensor,
        anchors: torch.Tensor,
        gt_boxes: list[torch.Tensor],
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness BCE plus box-delta smooth-L1 against anchor/GT matches.

        Anchors with IoU >= 0.7 to some GT box (or that are a GT box's best
        anchor) are positive, anchors with IoU <= 0.3 negative, the rest
        ignored. Positives are vastly outnumbered, so instead of sampling a
        balanced anchor minibatch the BCE averages positives and negatives
        separately and weights the two means equally (deterministic).
        The regression loss averages over positive anchor coordinates.
        """
        pos_terms, neg_terms, reg_terms = [], [], []
        n_pos = n_neg = n_pos_coords = 0
        for i, gt in enumerate(gt_boxes):
            if gt.numel() == 0:
                continue
            ious = iou_matrix(anchors, gt)
            max_iou, argmax = ious.max(dim=1)
            labels = torch.full((anchors.shape[0],), -1, dtype=torch.int64)
            labels[max_iou <= RPN_NEGATIVE_IOU] = 0
            labels[max_iou >= RPN_POSITIVE_IOU] = 1
            # every GT box recruits its best-overlap anchors as positives
            gt_best = ious.max(dim=0).values
            for g in range(gt.shape[0]):
                if gt_best[g] > 0:
                    labels[ious[:, g] == gt_best[g]] = 1
            positive = labels == 1
            negative = labels == 0
            if positive.any():
                pos_terms.append(
                    F.binary_cross_entropy_with_logits(
                        logits[i][positive], torch.ones_like(logits[i][positive]), reduction="sum"
                    )
                )
                n_pos += int(positive.sum())
                target = encode_boxes(anchors[positive], gt[argmax[positive]])
                reg_terms.append(smooth_l1(deltas[i][positive], target).sum())
                n_pos_coords += int(positive.sum()) * 4
            if negative.any():
                neg_terms.append(
                    F.binary_cross_entropy_with_logits(
                        logits[i][negative], torch.zeros_like(logits[i][negative]), reduction="sum"
                    )
                )
                n_neg += int(negative.sum())
        zero = logits.sum() * 0.0
        cls_loss = zero
        if pos_terms and neg_terms:
            cls_loss = 0.5 * (torch.stack(pos_terms).sum() / n_pos) + 0.5 * (
                torch.stack(neg_terms).sum() / n_neg
            )
        elif pos_terms:
            cls_loss = torch.stack(pos_terms).sum() / n_pos
        elif neg_terms:
            cls_loss = torch.stack(neg_terms).sum() / n_neg
        reg_loss = torch.stack(reg_terms).sum() / n_pos_coords if reg_terms else zero
        return cls_loss, reg_loss


class RoiHead(nn.Module):
    """ROI pooling plus (K+1)-way classifier and per-class box regressor."""

    def __init__(
        self,
        in_channels: int,
        num_classes: int,
        stride: int,
        pool_size: int = 4,
        hidden: int = 128,
        seed: int = 0,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.stride = stride
        self.pool_size = pool_size
        self.fc = nn.Linear(in_channels * pool_size * pool_size, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, num_classes * 4)
        he_init_(self, torch.Generator().manual_seed(seed))

    def forward(self, features: torch.Tensor, rois: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """rois (R, 5) of (batch_index, x1, y1, x2, y2) -> (logits (R, K+1), deltas (R, 4K))."""
        pooled = roi_average_pool(features, rois, self.stride, self.pool_size)
        h = F.relu(self.fc(pooled.flatten(1)))
        return self.cls(h), self.reg(h)

    def scores(self, cls_logits: torch.Tensor) -> ProposalScores:
        """Column-stochastic softmax split into background row and K x N matrix Q."""
        probs = F.softmax(cls_logits, dim=1)  # (N, K+1), background at column 0
        return ProposalScores(Q=probs[:, 1:].t(), bg=probs[:, 0])

    def match_proposals(
        self, proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_classes: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Assign each proposal a (K+1)-way label: GT class + 1 at IoU >= 0.5, else 0."""
        labels = torch.zeros(proposals.shape[0], dtype=torch.int64)
        matched = torch.full((proposals.shape[0],), -1, dtype=torch.int64)
        if gt_boxes.numel():
            ious = iou_matrix(proposals, gt_boxes)
            max_iou, argmax = ious.max(dim=1)
            positive = max_iou >= ROI_POSITIVE_IOU
            labels[positive] = gt_classes[argmax[positive]] + 1
            matched[positive] = argmax[positive]
        return labels, matched

    def losses(
        self,
        cls_logits: torch.Tensor,
        reg_deltas: torch.Tensor,
        proposals: torch.Tensor,
        labels: torch.Tensor,
        matched: torch.Tensor,
        gt_boxes: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Cross-entropy over all ROIs; smooth-L1 on the matched class' deltas."""
        cls_loss = F.cross_entropy(cls_logits, labels)
        positive = labels > 0
        if positive.any():
            pos_idx = positive.nonzero(as_tuple=True)[0]
            fg_class = labels[pos_idx] - 1
            deltas = reg_deltas[pos_idx].reshape(len(pos_idx), self.num_classes, 4)
            picked = deltas[torch.arange(len(pos_idx)), fg_class]
            target = encode_boxes(proposals[pos_idx], gt_boxes[matched[pos_idx]])
            reg_loss = smooth_l1(picked, target).mean()
        else:
            reg_loss = cls_logits.sum() * 0.0
        return cls_loss, reg_loss


def detection_loss(
    rpn_cls: torch.Tensor,
    rpn_reg: torch.Tensor,
    roi_cls: torch.Tensor,
    roi_reg: torch.Tensor,
) -> torch.Tensor:
    """Total supervised detection loss: RPN and ROI classification + regression."""
    return rpn_cls + rpn_reg + roi_cls + roi_reg
