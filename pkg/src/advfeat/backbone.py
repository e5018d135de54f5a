"""Uniform "features + gradients" oracle over vision-transformer backbones.

A BackboneHandle bundles a torch module with its geometry and normalization.
Images enter in [0,1] pixel space; per-channel normalization happens inside
the oracle, so attacks and gradients operate strictly on pixels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch

from .errors import (
    DuplicateModelId,
    GradientUnavailable,
    IncompatibleImageSize,
    LayerOutOfRange,
    UnknownModelId,
)
from .image import ImageTensor
from .vit import TinyViT

VALID_PATCH_SIZES = (4, 8, 14, 16)

AGG_MODES = ("class_token", "patch_tokens", "class_plus_patch")
PATCH_REDUCTIONS = ("concat_flatten", "mean")


@dataclass(frozen=True)
class AggregationSpec:
    """How class/patch tokens collapse into one embedding vector."""

    mode: str = "patch_tokens"
    patch_reduction: str = "concat_flatten"

    def __post_init__(self):
        if self.mode not in AGG_MODES:
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if self.patch_reduction not in PATCH_REDUCTIONS:
            raise ValueError(f"unknown patch reduction {self.patch_reduction!r}")

    @property
    def id(self) -> str:
        """Short stable identifier used in filenames and reports."""
        if self.mode == "class_token":
            return "class_token"
        suffix = "flat" if self.patch_reduction == "concat_flatten" else "mean"
        return f"{self.mode}_{suffix}"

    def output_dim(self, embed_dim: int, num_patches: int) -> int:
        if self.mode == "class_token":
            return embed_dim
        patch_dim = (
            embed_dim * num_patches
            if self.patch_reduction == "concat_flatten"
            else embed_dim
        )
        if self.mode == "patch_tokens":
            return patch_dim
        return embed_dim + patch_dim


DEFAULT_ATTACK_AGG = AggregationSpec("patch_tokens", "concat_flatten")
CLS_AGG = AggregationSpec("class_token")
MEAN_PATCH_AGG = AggregationSpec("patch_tokens", "mean")
SEG_AGG = AggregationSpec("class_plus_patch", "concat_flatten")


@dataclass
class TokenSet:
    """Backbone tap: class token [D] and patch tokens [P, D] at one layer."""

    class_token: np.ndarray
    patch_tokens: np.ndarray
    layer_index: int


@dataclass(frozen=True)
class BackboneHandle:
    """Immutable view of a backbone; safe to share across concurrent readers."""

    model_id: str
    patch_size: int
    embed_dim: int
    num_layers: int
    norm_mean: tuple[float, float, float]
    norm_std: tuple[float, float, float]
    gradient_capable: bool
    module: torch.nn.Module
    dtype: torch.dtype = torch.float32


def build_reference_backbone(
    depth: int,
    embed_dim: int,
    patch_size: int = 4,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> BackboneHandle:
    """Deterministic small ViT; same seed gives identical weights every run."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if embed_dim < 8:
        raise ValueError(f"embed_dim must be >= 8, got {embed_dim}")
    if patch_size not in VALID_PATCH_SIZES:
        raise ValueError(f"patch_size must be one of {VALID_PATCH_SIZES}")
    module = TinyViT(depth=depth, embed_dim=embed_dim, patch_size=patch_size)
    module.seed_weights_(seed)
    module = module.to(dtype)
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return BackboneHandle(
        model_id=reference_model_id(depth, embed_dim, patch_size, seed),
        patch_size=patch_size,
        embed_dim=embed_dim,
        num_layers=depth,
        norm_mean=(0.5, 0.5, 0.5),
        norm_std=(0.5, 0.5, 0.5),
        gradient_capable=True,
        module=module,
        dtype=dtype,
    )


def reference_model_id(depth: int, embed_dim: int, patch_size: int, seed: int) -> str:
    return f"ref-vit-d{depth}-e{embed_dim}-p{patch_size}-s{seed}"


_REF_ID_RE = re.compile(r"^ref-vit-d(\d+)-e(\d+)-p(\d+)-s(\d+)$")


def _check_geometry(model: BackboneHandle, image: ImageTensor, layer: int) -> None:
    h, w = image.height, image.width
    if h % model.patch_size or w % model.patch_size:
        raise IncompatibleImageSize(
            f"{h}x{w} image not divisible by patch size {model.patch_size}"
        )
    if not 1 <= layer <= model.num_layers:
        raise LayerOutOfRange(
            f"layer {layer} outside [1, {model.num_layers}] for {model.model_id}"
        )


def _to_input(model: BackboneHandle, image: ImageTensor) -> torch.Tensor:
    """[0,1] pixels -> normalized (1, 3, H, W) tensor in the model dtype."""
    px = torch.from_numpy(np.ascontiguousarray(image.pixels)).to(model.dtype)
    return px.permute(2, 0, 1).unsqueeze(0)


def _normalize(model: BackboneHandle, px: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(model.norm_mean, dtype=px.dtype).view(1, 3, 1, 1)
    std = torch.tensor(model.norm_std, dtype=px.dtype).view(1, 3, 1, 1)
    return (px - mean) / std


def _aggregate_torch(
    cls: torch.Tensor, patches: torch.Tensor, agg: AggregationSpec
) -> torch.Tensor:
    """Collapse (cls [D], patches [P, D]) into one vector, differentiably."""
    if agg.mode == "class_token":
        return cls
    if agg.patch_reduction == "concat_flatten":
        patch_part = patches.reshape(-1)
    else:
        patch_part = patches.mean(dim=0)
    if agg.mode == "patch_tokens":
        return patch_part
    return torch.cat([cls, patch_part])


def forward_tokens(model: BackboneHandle, image: ImageTensor, layer: int) -> TokenSet:
    """Class and patch tokens at one layer, as numpy arrays."""
    _check_geometry(model, image, layer)
    with torch.no_grad():
        x = _normalize(model, _to_input(model, image))
        cls, patches = model.module.tokens_at(x, layer)
    return TokenSet(
        class_token=cls[0].numpy().copy(),
        patch_tokens=patches[0].numpy().copy(),
        layer_index=layer,
    )


def forward_features(
    model: BackboneHandle,
    image: ImageTensor,
    layer: Optional[int] = None,
    agg: AggregationSpec = DEFAULT_ATTACK_AGG,
) -> np.ndarray:
    """Aggregated embedding z at the requested layer (default: final layer)."""
    layer = model.num_layers if layer is None else layer
    _check_geometry(model, image, layer)
    with torch.no_grad():
        x = _normalize(model, _to_input(model, image))
        cls, patches = model.module.tokens_at(x, layer)
        z = _aggregate_torch(cls[0], patches[0], agg)
    return z.numpy().copy()


def loss_and_input_gradient(
    model: BackboneHandle,
    image: ImageTensor,
    loss: Callable[[torch.Tensor], torch.Tensor],
    layer: Optional[int] = None,
    agg: AggregationSpec = DEFAULT_ATTACK_AGG,
) -> tuple[float, np.ndarray]:
    """Loss value and d(loss)/d(pixels) for a scalar loss over features z.

    `loss` receives the aggregated feature vector as a torch tensor and must
    return a scalar torch tensor built from differentiable ops.
    """
    if not model.gradient_capable:
        raise GradientUnavailable(
            f"{model.model_id} is inference-only and can only be a transfer target"
        )
    layer = model.num_layers if layer is None else layer
    _check_geometry(model, image, layer)
    px = _to_input(model, image).requires_grad_(True)
    cls, patches = model.module.tokens_at(_normalize(model, px), layer)
    z = _aggregate_torch(cls[0], patches[0], agg)
    value = loss(z)
    grad = torch.autograd.grad(value, px)[0]
    return float(value.detach()), grad[0].permute(1, 2, 0).numpy().copy()


def input_gradient(
    model: BackboneHandle,
    image: ImageTensor,
    loss: Callable[[torch.Tensor], torch.Tensor],
    layer: Optional[int] = None,
    agg: AggregationSpec = DEFAULT_ATTACK_AGG,
) -> np.ndarray:
    """d(loss)/d(pixels) evaluated at `image`, shape (H, W, 3)."""
    _, grad = loss_and_input_gradient(model, image, loss, layer, agg)
    return grad


# ---------------------------------------------------------------------------
# Adapter registry
# ---------------------------------------------------------------------------


@dataclass
class AdapterEntry:
    model_id: str
    factory: Optional[Callable[[], BackboneHandle]]
    gradient_capable: bool
    available: bool
    description: str = ""


@dataclass
class AdapterRegistry:
    entries: dict = field(default_factory=dict)

    def register(self, entry: AdapterEntry) -> None:
        if entry.model_id in self.entries:
            raise DuplicateModelId(f"adapter {entry.model_id!r} already registered")
        self.entries[entry.model_id] = entry

    def list(self) -> list[AdapterEntry]:
        return [self.entries[k] for k in sorted(self.entries)]

    def resolve(self, model_id: str) -> BackboneHandle:
        m = _REF_ID_RE.match(model_id)
        if m:
            depth, dim, patch, seed = (int(g) for g in m.groups())
            return build_reference_backbone(depth, dim, patch, seed)
        entry = self.entries.get(model_id)
        if entry is None:
            known = ", ".join(sorted(self.entries)) or "(none)"
            raise UnknownModelId(
                f"unknown model_id {model_id!r}; registered adapters: {known}"
            )
        if not entry.available or entry.factory is None:
            raise UnknownModelId(
                f"adapter {model_id!r} is registered but unavailable: {entry.description}"
            )
        return entry.factory()


def _default_registry() -> AdapterRegistry:
    reg = AdapterRegistry()
    ref_id = reference_model_id(2, 32, 4, 7)
    reg.register(
        AdapterEntry(
            model_id=ref_id,
            factory=lambda: build_reference_backbone(2, 32, 4, 7),
            gradient_capable=True,
            available=True,
            description="deterministic reference backbone (any ref-vit-d*-e*-p*-s* id resolves)",
        )
    )
    reg.register(
        AdapterEntry(
            model_id="dinov2-vits14",
            factory=None,
            gradient_capable=True,
            available=False,
            description="pretrained external backbone; see README for the integration recipe",
        )
    )
    return reg


REGISTRY = _default_registry()


def list_adapters() -> list[AdapterEntry]:
    """Registered backbone constructors with capability and availability tags."""
    return REGISTRY.list()


def register_adapter(
    model_id: str,
    factory: Optional[Callable[[], BackboneHandle]],
    gradient_capable: bool = True,
    available: bool = True,
    description: str = "",
) -> None:
    REGISTRY.register(
        AdapterEntry(model_id, factory, gradient_capable, available, description)
    )


def resolve_model(model_id: str) -> BackboneHandle:
    return REGISTRY.resolve(model_id)


def as_transfer_target(model: BackboneHandle) -> BackboneHandle:
    """Inference-only view of a backbone (gradient calls will be refused)."""
    return replace(model, gradient_capable=False)
