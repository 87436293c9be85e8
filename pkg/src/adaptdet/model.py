"""Full adaptive detection model: one module owning every trainable part.

All submodules are constructed unconditionally and in a fixed order from a
single seed, so parameter initialization is reproducible and independent of
the training variant; variants only change which parts participate in the
forward graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .adversary import DomainDiscriminator, FeatureReducer
from .backbone import FeatureExtractor, batch_to_tensor
from .detector import (
    Detection,
    ProposalScores,
    RegionProposalNetwork,
    RoiHead,
    clip_boxes,
    decode_boxes,
    detector_category_vector,
    nms,
)
from .errors import ConfigurationError
from .multilabel import MultiLabelHead


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 0  # 0 = fill in from the dataset manifest at build time
    image_size: int = 128
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    multilabel_channels: int = 64
    reduce_channels: int = 64
    rpn_channels: int = 64
    anchor_scales: tuple[float, ...] = (1.25, 2.0, 3.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pre_nms: int = 256
    rpn_post_nms: int = 32
    rpn_nms_threshold: float = 0.7
    roi_pool_size: int = 4
    roi_hidden: int = 128
    disc_hidden: tuple[int, ...] = ()
    normalize_inputs: bool = True

    def __post_init__(self):
        if self.num_classes < 0:
            raise ConfigurationError(f"num_classes must be >= 0, got {self.num_classes}")


@dataclass
class DetectorOutput:
    """Per-batch detector forward results."""

    proposals: list  # ProposalBatch per image
    scores: list[ProposalScores]  # over RPN proposals only (the K x N matrix Q)
    q_vectors: list[torch.Tensor | None]  # row-wise max of Q; None when N == 0
    box_deltas: list[torch.Tensor]  # (N, 4K) per image, over RPN proposals only
    losses: dict[str, torch.Tensor] = field(default_factory=dict)


class AdaptiveDetector(nn.Module):
    def __init__(self, config: ModelConfig, conditioning: str = "p", seed: int = 0):
        super().__init__()
        if config.num_classes < 1:
            raise ConfigurationError(
                f"model requires num_classes >= 1, got {config.num_classes}"
            )
        self.config = config
        self.conditioning = conditioning
        self.seed = seed
        K = config.num_classes

        self.backbone = FeatureExtractor(
            channels=config.backbone_channels,
            normalize_inputs=config.normalize_inputs,
            seed=seed,
        )
        stride = self.backbone.stride
        self.rpn = RegionProposalNetwork(
            in_channels=self.backbone.out_channels,
            stride=stride,
            mid_channels=config.rpn_channels,
            scales=config.anchor_scales,
            ratios=config.anchor_ratios,
            pre_nms_top_n=config.rpn_pre_nms,
            post_nms_top_n=config.rpn_post_nms,
            nms_threshold=config.rpn_nms_threshold,
            seed=seed + 1,
        )
        self.roi_head = RoiHead(
            in_channels=self.backbone.out_channels,
            num_classes=K,
            stride=stride,
            pool_size=config.roi_pool_size,
            hidden=config.roi_hidden,
            seed=seed + 2,
        )
        self.multilabel = MultiLabelHead(
            in_channels=self.backbone.out_channels,
            num_classes=K,
            conv_channels=config.multilabel_channels,
            seed=seed + 3,
        )
        self.reducer = FeatureReducer(
            in_channels=self.backbone.out_channels,
            out_channels=config.reduce_channels,
            seed=seed + 4,
        )
        disc_in = config.reduce_channels * (1 if conditioning == "unconditional" else K)
        self.discriminator = DomainDiscriminator(
            in_features=disc_in, hidden=config.disc_hidden, seed=seed + 5
        )

    @property
    def image_hw(self) -> tuple[int, int]:
        return (self.config.image_size, self.config.image_size)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def detector_forward(
        self,
        features: torch.Tensor,
        gt_boxes: list[torch.Tensor] | None = None,
        gt_classes: list[torch.Tensor] | None = None,
        append_gt: bool = True,
    ) -> DetectorOutput:
        """RPN + ROI pass. With ground truth, also computes detection losses.

        The score matrix Q of each image covers its RPN proposals only;
        ground-truth boxes appended for ROI training do not enter Q or q.
        """
        logits, deltas, anchors = self.rpn(features)
        proposals = self.rpn.select_proposals(logits, deltas, anchors, self.image_hw)

        supervised = gt_boxes is not None
        roi_boxes, roi_counts, rpn_counts = [], [], []
        for i, prop in enumerate(proposals):
            boxes = prop.boxes
            rpn_counts.append(boxes.shape[0])
            if supervised and append_gt and gt_boxes[i].numel():
                boxes = torch.cat([boxes, gt_boxes[i].to(boxes.dtype)], dim=0)
            roi_counts.append(boxes.shape[0])
            if boxes.numel():
                idx = torch.full((boxes.shape[0], 1), float(i), dtype=boxes.dtype)
                roi_boxes.append(torch.cat([idx, boxes], dim=1))
        rois = (
            torch.cat(roi_boxes, dim=0)
            if roi_boxes
            else features.new_zeros((0, 5))
        )
        cls_logits, reg_deltas = self.roi_head(features, rois)

        scores, q_vectors, box_deltas = [], [], []
        offset = 0
        for n_roi, n_rpn in zip(roi_counts, rpn_counts):
            image_logits = cls_logits[offset : offset + n_roi]
            score = self.roi_head.scores(image_logits[:n_rpn])
            scores.append(score)
            q_vectors.append(detector_category_vector(score.Q))
            box_deltas.append(reg_deltas[offset : offset + n_rpn])
            offset += n_roi

        losses: dict[str, torch.Tensor] = {}
        if supervised:
            rpn_cls, rpn_reg = self.rpn.losses(logits, deltas, anchors, gt_boxes)
            roi_cls_terms, roi_reg_terms = [], []
            offset = 0
            for i, n_roi in enumerate(roi_counts):
                img_logits = cls_logits[offset : offset + n_roi]
                img_deltas = reg_deltas[offset : offset + n_roi]
                img_boxes = rois[offset : offset + n_roi, 1:]
                offset += n_roi
                if n_roi == 0:
                    continue
                labels, matched = self.roi_head.match_proposals(
                    img_boxes, gt_boxes[i], gt_classes[i]
                )
                c, r = self.roi_head.losses(
                    img_logits, img_deltas, img_boxes, labels, matched, gt_boxes[i]
                )
                roi_cls_terms.append(c)
                roi_reg_terms.append(r)
            zero = features.sum() * 0.0
            losses = {
                "rpn_cls": rpn_cls,
                "rpn_reg": rpn_reg,
                "roi_cls": torch.stack(roi_cls_terms).mean() if roi_cls_terms else zero,
                "roi_reg": torch.stack(roi_reg_terms).mean() if roi_reg_terms else zero,
            }
        return DetectorOutput(
            proposals=proposals,
            scores=scores,
            q_vectors=q_vectors,
            box_deltas=box_deltas,
            losses=losses,
        )

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        """Reduced per-image feature vectors g (no reversal on this path)."""
        return self.reducer(features)

    @torch.no_grad()
    def detect(
        self,
        images: list[np.ndarray],
        score_threshold: float = 0.05,
        nms_threshold: float = 0.5,
        max_detections: int = 20,
    ) -> list[list[Detection]]:
        """Inference: per-class decoded boxes, score filter, NMS, top-k cap."""
        was_training = self.training
        self.eval()
        try:
            dtype = next(self.parameters()).dtype
            feats = self.features(batch_to_tensor(images, dtype))
            out = self.detector_forward(feats, gt_boxes=None)
            results: list[list[Detection]] = []
            for i, prop in enumerate(out.proposals):
                detections: list[Detection] = []
                n = prop.boxes.shape[0]
                if n == 0:
                    results.append(detections)
                    continue
                probs = torch.cat(
                    [out.scores[i].bg.unsqueeze(0), out.scores[i].Q], dim=0
                ).t()  # (N, K+1)
                reg_deltas = out.box_deltas[i]
                for k in range(self.config.num_classes):
                    cls_scores = probs[:, k + 1]
                    keep_mask = cls_scores >= score_threshold
                    if not keep_mask.any():
                        continue
                    deltas_k = reg_deltas[keep_mask].reshape(-1, self.config.num_classes, 4)[:, k]
                    boxes_k = clip_boxes(
                        decode_boxes(prop.boxes[keep_mask], deltas_k), self.image_hw
                    )
                    scores_k = cls_scores[keep_mask]
                    valid = (boxes_k[:, 2] > boxes_k[:, 0]) & (boxes_k[:, 3] > boxes_k[:, 1])
                    boxes_k, scores_k = boxes_k[valid], scores_k[valid]
                    keep = nms(boxes_k, scores_k, nms_threshold)
                    for j in keep.tolist():
                        detections.append(
                            Detection(
                                box=tuple(float(v) for v in boxes_k[j]),
                                class_id=k,
                                score=float(scores_k[j]),
                            )
                        )
                detections.sort(key=lambda d: -d.score)
                results.append(detections[:max_detections])
            return results
        finally:
            self.train(was_training)
