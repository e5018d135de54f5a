"""Feature statistics: training-set mean, centering, and the cosine objective.

The attack objective is the cosine similarity between centered adversarial
and centered original features. The mean over a training set is estimated
once, frozen, and treated as a constant (no gradient flows through it).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch

from .backbone import AggregationSpec, BackboneHandle, forward_features
from .errors import DegenerateFeature, DimensionMismatch, EmptyTrainingSet, IoFailure
from .image import ImageTensor

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class MeanVector:
    """Frozen training-set feature mean with the metadata that produced it."""

    values: np.ndarray
    model_id: str
    layer: int
    agg_id: str
    num_samples: int
    dataset_id: str

    def __post_init__(self):
        if self.values.ndim != 1:
            raise DimensionMismatch(f"mean must be 1-D, got shape {self.values.shape}")


@dataclass(frozen=True)
class CenteredFeature:
    values: np.ndarray
    mean_ref: MeanVector


def estimate_mean(
    model: BackboneHandle,
    images: Sequence[ImageTensor],
    layer: Optional[int] = None,
    agg: AggregationSpec = None,
    dataset_id: str = "unspecified",
) -> MeanVector:
    """Average feature over a training set, accumulated in float64."""
    from .backbone import DEFAULT_ATTACK_AGG

    agg = DEFAULT_ATTACK_AGG if agg is None else agg
    if len(images) == 0:
        raise EmptyTrainingSet("mean estimation needs at least one image")
    layer = model.num_layers if layer is None else layer
    acc = None
    for img in images:
        z = forward_features(model, img, layer, agg).astype(np.float64)
        if acc is None:
            acc = z
        elif z.shape != acc.shape:
            raise DimensionMismatch(
                f"feature dim changed across training images: {acc.shape} vs {z.shape}"
            )
        else:
            acc = acc + z
    return MeanVector(
        values=(acc / len(images)).astype(np.float32),
        model_id=model.model_id,
        layer=layer,
        agg_id=agg.id,
        num_samples=len(images),
        dataset_id=dataset_id,
    )


def zero_mean(
    dim: int,
    model_id: str = "none",
    layer: int = 0,
    agg_id: str = "none",
    dataset_id: str = "none",
) -> MeanVector:
    """All-zero mean; centering with it is the identity (uncentered mode)."""
    return MeanVector(
        values=np.zeros(dim, dtype=np.float32),
        model_id=model_id,
        layer=layer,
        agg_id=agg_id,
        num_samples=0,
        dataset_id=dataset_id,
    )


def center(feature: np.ndarray, mean: MeanVector) -> CenteredFeature:
    if feature.shape != mean.values.shape:
        raise DimensionMismatch(
            f"feature dim {feature.shape} does not match mean dim {mean.values.shape}"
        )
    return CenteredFeature(values=feature - mean.values, mean_ref=mean)


def cosine_loss(a: Union[CenteredFeature, np.ndarray], b: Union[CenteredFeature, np.ndarray]) -> float:
    """Cosine similarity in [-1, 1]; raises on a (near-)zero vector."""
    va = a.values if isinstance(a, CenteredFeature) else a
    vb = b.values if isinstance(b, CenteredFeature) else b
    if va.shape != vb.shape:
        raise DimensionMismatch(f"shape mismatch {va.shape} vs {vb.shape}")
    va = va.astype(np.float64)
    vb = vb.astype(np.float64)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        raise DegenerateFeature(
            f"cosine undefined for near-zero vector (norms {na:.3e}, {nb:.3e})"
        )
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def cosine_loss_torch(
    z: torch.Tensor, z_ref_centered: torch.Tensor, mean: torch.Tensor
) -> torch.Tensor:
    """Differentiable twin of cosine_loss; mean and z_ref are constants."""
    zc = z - mean
    na = torch.linalg.vector_norm(zc)
    nb = torch.linalg.vector_norm(z_ref_centered)
    return torch.dot(zc, z_ref_centered) / (na * nb)


# ---------------------------------------------------------------------------
# Mean file format: one JSON header line, then little-endian float32 payload.
# ---------------------------------------------------------------------------


def mean_filename(model_id: str, layer: int, agg_id: str) -> str:
    return f"mean-{model_id}-L{layer}-{agg_id}.bin"


def save_mean(mean: MeanVector, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    path = directory / mean_filename(mean.model_id, mean.layer, mean.agg_id)
    header = {
        "model_id": mean.model_id,
        "layer": mean.layer,
        "agg": mean.agg_id,
        "N_T": mean.num_samples,
        "dataset_id": mean.dataset_id,
        "dim": int(mean.values.shape[0]),
    }
    payload = mean.values.astype("<f4").tobytes()
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            f.write(b"\n")
            f.write(payload)
    except OSError as e:
        raise IoFailure(f"cannot write mean file {path}: {e}") from e
    return path


def load_mean(path: Union[str, Path]) -> MeanVector:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read mean file {path}: {e}") from e
    nl = raw.find(b"\n")
    if nl < 0:
        raise IoFailure(f"mean file {path} has no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IoFailure(f"mean file {path} has a corrupt header: {e}") from e
    for key in ("model_id", "layer", "agg", "N_T", "dataset_id", "dim"):
        if key not in header:
            raise IoFailure(f"mean file {path} header missing {key!r}")
    payload = raw[nl + 1 :]
    dim = int(header["dim"])
    expected = dim * struct.calcsize("<f")
    if len(payload) != expected:
        raise IoFailure(
            f"mean file {path} payload is {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32).copy()
    return MeanVector(
        values=values,
        model_id=str(header["model_id"]),
        layer=int(header["layer"]),
        agg_id=str(header["agg"]),
        num_samples=int(header["N_T"]),
        dataset_id=str(header["dataset_id"]),
    )
