"""Lightweight task heads fitted on frozen backbone features.

The backbone is never trained here. Classification uses a linear probe on
the mean patch embedding; segmentation concatenates the class token onto
every patch token, upsamples the token map to pixel resolution, and applies
one small convolution. Fitting is full-batch and deterministic: weights
start at zero and biases at the log class prior, so no RNG is involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import (
    AggregationSpec,
    BackboneHandle,
    MEAN_PATCH_AGG,
    SEG_AGG,
    forward_features,
)
from .errors import DimensionMismatch, InsufficientData
from .image import ImageTensor

HEAD_KINDS = ("classification", "segmentation")


@dataclass(frozen=True)
class HeadHyperparams:
    epochs: int = 250
    lr: float = 0.05
    weight_decay: float = 1e-4
    conv_kernel: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd and >= 1, got {self.conv_kernel}")


@dataclass
class TaskHead:
    kind: str
    module: nn.Module
    num_classes: int
    layer: int
    agg: AggregationSpec


def head_dtype(head: TaskHead) -> torch.dtype:
    return next(head.module.parameters()).dtype


class _SegmentationHead(nn.Module):
    """(cls + per-patch tokens) -> per-pixel class logits."""

    def __init__(
        self,
        embed_dim: int,
        grid_hw: tuple[int, int],
        image_hw: tuple[int, int],
        num_classes: int,
        conv_kernel: int,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.grid_hw = grid_hw
        self.image_hw = image_hw
        self.conv = nn.Conv2d(
            2 * embed_dim, num_classes, conv_kernel, padding=conv_kernel // 2
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        single = z.ndim == 1
        if single:
            z = z.unsqueeze(0)
        b = z.shape[0]
        d = self.embed_dim
        gh, gw = self.grid_hw
        cls = z[:, :d]
        patches = z[:, d:].reshape(b, gh * gw, d)
        with_cls = torch.cat(
            [patches, cls.unsqueeze(1).expand(-1, gh * gw, -1)], dim=2
        )
        fmap = with_cls.permute(0, 2, 1).reshape(b, 2 * d, gh, gw)
        fmap = F.interpolate(
            fmap, size=self.image_hw, mode="bicubic", align_corners=False
        )
        logits = self.conv(fmap)
        return logits[0] if single else logits


def _log_prior(counts: np.ndarray) -> torch.Tensor:
    # add-one smoothing keeps absent classes finite
    smoothed = (counts + 1.0) / (counts.sum() + counts.size)
    return torch.from_numpy(np.log(smoothed)).to(torch.float32)


def _collect_features(
    model: BackboneHandle,
    images: Sequence[ImageTensor],
    layer: int,
    agg: AggregationSpec,
) -> torch.Tensor:
    feats = np.stack([forward_features(model, img, layer, agg) for img in images])
    return torch.from_numpy(feats).to(torch.float32)


def fit_head(
    model: BackboneHandle,
    images: Sequence[ImageTensor],
    targets: Sequence,
    kind: str,
    num_classes: int,
    layer: Optional[int] = None,
    agg: Optional[AggregationSpec] = None,
    hyper: HeadHyperparams = HeadHyperparams(),
) -> TaskHead:
    """Fit a probe on frozen features with full-batch Adam.

    `targets` are integer labels for classification and (H, W) integer masks
    for segmentation.
    """
    if kind not in HEAD_KINDS:
        raise ValueError(f"kind must be one of {HEAD_KINDS}, got {kind!r}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if len(images) < 2:
        raise InsufficientData(f"need at least 2 training images, got {len(images)}")
    if len(images) != len(targets):
        raise DimensionMismatch("images and targets differ in length")

    layer = model.num_layers if layer is None else layer
    if agg is None:
        agg = MEAN_PATCH_AGG if kind == "classification" else SEG_AGG

    hw = (images[0].height, images[0].width)
    for img in images[1:]:
        if (img.height, img.width) != hw:
            raise DimensionMismatch("training images must share one size")

    feats = _collect_features(model, images, layer, agg)

    if kind == "classification":
        labels = np.asarray(targets, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ValueError("labels outside [0, num_classes)")
        if np.unique(labels).size < 2:
            raise InsufficientData("training labels cover fewer than 2 classes")
        counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
        module = nn.Linear(feats.shape[1], num_classes)
        with torch.no_grad():
            module.weight.zero_()
            module.bias.copy_(_log_prior(counts))
        target_t = torch.from_numpy(labels)
    else:
        masks = np.stack([np.asarray(m, dtype=np.int64) for m in targets])
        if masks.shape[1:] != hw:
            raise DimensionMismatch(
                f"mask shape {masks.shape[1:]} does not match image size {hw}"
            )
        if masks.min() < 0 or masks.max() >= num_classes:
            raise ValueError("mask labels outside [0, num_classes)")
        if np.unique(masks).size < 2:
            raise InsufficientData("training masks cover fewer than 2 classes")
        counts = np.bincount(masks.reshape(-1), minlength=num_classes).astype(np.float64)
        if agg.mode != "class_plus_patch" or agg.patch_reduction != "concat_flatten":
            raise ValueError(
                "segmentation heads need class_plus_patch / concat_flatten features"
            )
        grid = (hw[0] // model.patch_size, hw[1] // model.patch_size)
        module = _SegmentationHead(
            model.embed_dim, grid, hw, num_classes, hyper.conv_kernel
        )
        with torch.no_grad():
            module.conv.weight.zero_()
            module.conv.bias.copy_(_log_prior(counts))
        target_t = torch.from_numpy(masks)

    module.train()
    opt = torch.optim.Adam(
        module.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay
    )
    for _ in range(hyper.epochs):
        opt.zero_grad()
        logits = module(feats)
        loss = F.cross_entropy(logits, target_t)
        loss.backward()
        opt.step()
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)

    return TaskHead(kind=kind, module=module, num_classes=num_classes, layer=layer, agg=agg)


def predict_class(model: BackboneHandle, head: TaskHead, image: ImageTensor) -> int:
    """Top-1 class; logit ties break toward the lower index."""
    if head.kind != "classification":
        raise ValueError(f"head is {head.kind!r}, not classification")
    z = forward_features(model, image, head.layer, head.agg)
    with torch.no_grad():
        logits = head.module(torch.from_numpy(z).to(head_dtype(head)))
    return int(np.argmax(logits.numpy()))


def predict_mask(model: BackboneHandle, head: TaskHead, image: ImageTensor) -> np.ndarray:
    """Per-pixel class map (H, W); ties break toward the lower index."""
    if head.kind != "segmentation":
        raise ValueError(f"head is {head.kind!r}, not segmentation")
    z = forward_features(model, image, head.layer, head.agg)
    with torch.no_grad():
        logits = head.module(torch.from_numpy(z).to(head_dtype(head)))
    return np.argmax(logits.numpy(), axis=0).astype(np.int64)
