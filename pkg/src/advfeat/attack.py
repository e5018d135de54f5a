"""Adversarial attack engine.

The task-agnostic attack (taa_attack) runs projected gradient descent on the
cosine similarity between mean-centered features of the adversarial and the
original image. Task-specific baselines (tsa_classification,
tsa_segmentation) attack a fitted head instead. All attacks share one loop,
one projection, and one finalization path (quantize to PNG levels, reload).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import AggregationSpec, BackboneHandle, DEFAULT_ATTACK_AGG, forward_features, loss_and_input_gradient
from .errors import DegenerateFeature, IdenticalImages
from .features import DEGENERATE_NORM, MeanVector, cosine_loss_torch
from .heads import TaskHead, head_dtype
from .image import ImageTensor, linf_distance, quantize, quantize_and_roundtrip
from .metrics import psnr

STEP_RULES = ("plain_gradient", "sign", "momentum")

ATTACK_TAA = "taa"
ATTACK_TSA_CLS = "tsa_cls"
ATTACK_TSA_SEG = "tsa_seg"

# raw gradients this small make the L1-normalized momentum step unstable
_MOMENTUM_L1_FLOOR = 1e-20


@dataclass(frozen=True)
class AttackConfig:
    """Knobs for the PGD loop; defaults match the standard attack setting."""

    eps_inf: float = 8.0 / 255.0
    alpha: float = 4e-4
    num_steps: int = 50
    step_rule: str = "sign"
    momentum_decay: float = 1.0
    centering: bool = True
    layer: Optional[int] = None
    agg: AggregationSpec = field(default_factory=AggregationSpec)
    target_psnr_db: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.eps_inf <= 1.0:
            raise ValueError(f"eps_inf must lie in [0, 1], got {self.eps_inf}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(
                f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}"
            )
        if self.momentum_decay < 0.0:
            raise ValueError(f"momentum_decay must be >= 0, got {self.momentum_decay}")


@dataclass
class AttackResult:
    adversarial: ImageTensor
    loss_trace: list
    linf_trace: list
    final_loss: float
    linf: float
    psnr_db: float
    succeeded: bool
    fallback_uncentered: bool
    iterations_run: int
    png_path: Optional[Path] = None


def project_linf(x: np.ndarray, x_orig: np.ndarray, eps_inf: float) -> np.ndarray:
    """Clip onto the L-inf ball around x_orig intersected with [0, 1]."""
    lo = np.clip(x_orig - eps_inf, 0.0, 1.0)
    hi = np.clip(x_orig + eps_inf, 0.0, 1.0)
    return np.clip(x, lo, hi).astype(np.float32)


def step_update(
    x: np.ndarray,
    grad: np.ndarray,
    alpha: float,
    rule: str,
    momentum: np.ndarray,
    momentum_decay: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """One descent step; returns the new iterate and updated momentum buffer."""
    if rule == "plain_gradient":
        return (x - alpha * grad).astype(np.float32), momentum
    if rule == "sign":
        return (x - alpha * np.sign(grad)).astype(np.float32), momentum
    if rule == "momentum":
        l1 = float(np.abs(grad).sum())
        g = grad if l1 < _MOMENTUM_L1_FLOOR else grad / l1
        m = momentum_decay * momentum + g
        return (x - alpha * np.sign(m)).astype(np.float32), m.astype(np.float32)
    raise ValueError(f"unknown step rule {rule!r}")


def calibrate_to_psnr(
    adversarial: np.ndarray, original: np.ndarray, target_psnr_db: float
) -> np.ndarray:
    """Shrink the perturbation until PSNR >= target; never amplifies it.

    MSE is measured on the 255-level scale. Already-quiet perturbations pass
    through unchanged.
    """
    delta = adversarial.astype(np.float64) - original.astype(np.float64)
    mse = float(np.mean((delta * 255.0) ** 2))
    if mse == 0.0:
        raise IdenticalImages("cannot calibrate a zero perturbation")
    target_mse = 255.0**2 / 10.0 ** (target_psnr_db / 10.0)
    if mse <= target_mse:
        return adversarial.astype(np.float32)
    scale = math.sqrt(target_mse / mse)
    return (original.astype(np.float64) + scale * delta).astype(np.float32)


Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


def run_pgd_loop(
    original: np.ndarray,
    objective: Objective,
    config: AttackConfig,
    stop_when: Optional[Callable[[float], bool]] = None,
) -> tuple[np.ndarray, list, list, int]:
    """Shared descent loop.

    objective(pixels) -> (loss, d loss / d pixels). Traces hold the loss and
    L-inf distance at the starting point and after every applied step.
    """
    x = original.astype(np.float32).copy()
    momentum = np.zeros_like(x)
    loss, grad = objective(x)
    loss_trace = [loss]
    linf_trace = [0.0]
    iterations = 0
    for _ in range(config.num_steps):
        if stop_when is not None and stop_when(loss):
            break
        x, momentum = step_update(
            x, grad, config.alpha, config.step_rule, momentum, config.momentum_decay
        )
        x = project_linf(x, original, config.eps_inf)
        loss, grad = objective(x)
        loss_trace.append(loss)
        linf_trace.append(float(np.abs(x.astype(np.float64) - original).max()))
        iterations += 1
    return x, loss_trace, linf_trace, iterations


def adv_filename(image_id: str, attack: str, model_id: str) -> str:
    return f"{image_id}.{attack}.{model_id}.png"


def _finalize(
    original: ImageTensor,
    x_final: np.ndarray,
    config: AttackConfig,
    *,
    loss_trace: list,
    linf_trace: list,
    iterations: int,
    succeeded: bool,
    fallback_uncentered: bool = False,
    image_id: Optional[str] = None,
    attack: Optional[str] = None,
    model_id: Optional[str] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> AttackResult:
    """Calibrate, quantize to 8-bit PNG levels, optionally store and reload."""
    if config.target_psnr_db is not None:
        x_final = calibrate_to_psnr(x_final, original.pixels, config.target_psnr_db)
    adv = quantize(ImageTensor(pixels=x_final.astype(np.float32), quantized=False))
    png_path = None
    if out_dir is not None:
        if image_id is None or attack is None or model_id is None:
            raise ValueError("saving adversarials requires image_id, attack, model_id")
        png_path = Path(out_dir) / adv_filename(image_id, attack, model_id)
        png_path, adv = quantize_and_roundtrip(adv, png_path)
    return AttackResult(
        adversarial=adv,
        loss_trace=[float(v) for v in loss_trace],
        linf_trace=[float(v) for v in linf_trace],
        final_loss=float(loss_trace[-1]),
        linf=linf_distance(adv, original),
        psnr_db=psnr(original.pixels, adv.pixels),
        succeeded=succeeded,
        fallback_uncentered=fallback_uncentered,
        iterations_run=iterations,
        png_path=png_path,
    )


def taa_attack(
    model: BackboneHandle,
    image: ImageTensor,
    mean: Optional[MeanVector] = None,
    config: AttackConfig = AttackConfig(),
    image_id: Optional[str] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> AttackResult:
    """Feature-space attack: push cos(z - mu, z_orig - mu) as low as possible.

    The mean mu is a frozen constant. If centering leaves the original
    feature (near-)zero, the attack falls back to the uncentered objective
    and flags it; a zero uncentered feature is a hard error.
    """
    layer = model.num_layers if config.layer is None else config.layer
    agg = config.agg
    z_orig = forward_features(model, image, layer, agg).astype(np.float64)

    if config.centering:
        if mean is None:
            raise ValueError("centering=True requires a MeanVector")
        mu = mean.values.astype(np.float64)
        if mu.shape != z_orig.shape:
            raise ValueError(
                f"mean dim {mu.shape} does not match feature dim {z_orig.shape}"
            )
    else:
        mu = np.zeros_like(z_orig)

    fallback = False
    if float(np.linalg.norm(z_orig - mu)) < DEGENERATE_NORM:
        if not config.centering or float(np.linalg.norm(z_orig)) < DEGENERATE_NORM:
            raise DegenerateFeature(
                "original feature is (near-)zero; no attack direction exists"
            )
        mu = np.zeros_like(z_orig)
        fallback = True

    mu_t = torch.from_numpy(mu.astype(np.float32)).to(model.dtype)
    z_ref_t = torch.from_numpy((z_orig - mu).astype(np.float32)).to(model.dtype)

    def loss_fn(z: torch.Tensor) -> torch.Tensor:
        return cosine_loss_torch(z, z_ref_t, mu_t)

    def objective(pixels: np.ndarray):
        img = ImageTensor(pixels=pixels, quantized=False)
        return loss_and_input_gradient(model, img, loss_fn, layer, agg)

    x, losses, linfs, iters = run_pgd_loop(image.pixels, objective, config)
    return _finalize(
        image,
        x,
        config,
        loss_trace=losses,
        linf_trace=linfs,
        iterations=iters,
        succeeded=losses[-1] < losses[0],
        fallback_uncentered=fallback,
        image_id=image_id,
        attack=ATTACK_TAA,
        model_id=model.model_id,
        out_dir=out_dir,
    )


def _classification_margin(logits: torch.Tensor, label: int) -> torch.Tensor:
    """p(label) minus the best other-class probability; negative when fooled."""
    probs = torch.softmax(logits, dim=-1)
    masked = probs.clone()
    masked[label] = -float("inf")
    return probs[label] - masked.max()


def tsa_classification(
    model: BackboneHandle,
    head: TaskHead,
    image: ImageTensor,
    label: int,
    config: AttackConfig = AttackConfig(),
    image_id: Optional[str] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> AttackResult:
    """Minimize p(true) minus the best rival probability for the full budget."""
    if not 0 <= label < head.num_classes:
        raise ValueError(f"label {label} outside [0, {head.num_classes})")
    dtype = head_dtype(head)

    def loss_fn(z: torch.Tensor) -> torch.Tensor:
        logits = head.module(z.to(dtype))
        return _classification_margin(logits, label)

    def objective(pixels: np.ndarray):
        img = ImageTensor(pixels=pixels, quantized=False)
        return loss_and_input_gradient(model, img, loss_fn, head.layer, head.agg)

    x, losses, linfs, iters = run_pgd_loop(image.pixels, objective, config)
    return _finalize(
        image,
        x,
        config,
        loss_trace=losses,
        linf_trace=linfs,
        iterations=iters,
        succeeded=losses[-1] < 0.0,
        image_id=image_id,
        attack=ATTACK_TSA_CLS,
        model_id=model.model_id,
        out_dir=out_dir,
    )


def tsa_segmentation(
    model: BackboneHandle,
    head: TaskHead,
    image: ImageTensor,
    config: AttackConfig = AttackConfig(),
    image_id: Optional[str] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> AttackResult:
    """Push per-pixel predictions away from the clean prediction map."""
    dtype = head_dtype(head)
    z_clean = forward_features(model, image, head.layer, head.agg)
    with torch.no_grad():
        clean_logits = head.module(torch.from_numpy(z_clean).to(dtype))
    clean_labels = clean_logits.argmax(dim=0, keepdim=False).unsqueeze(0)

    def loss_fn(z: torch.Tensor) -> torch.Tensor:
        logits = head.module(z.to(dtype)).unsqueeze(0)
        return -F.cross_entropy(logits, clean_labels, reduction="mean")

    def objective(pixels: np.ndarray):
        img = ImageTensor(pixels=pixels, quantized=False)
        return loss_and_input_gradient(model, img, loss_fn, head.layer, head.agg)

    x, losses, linfs, iters = run_pgd_loop(image.pixels, objective, config)
    return _finalize(
        image,
        x,
        config,
        loss_trace=losses,
        linf_trace=linfs,
        iterations=iters,
        succeeded=losses[-1] < losses[0],
        image_id=image_id,
        attack=ATTACK_TSA_SEG,
        model_id=model.model_id,
        out_dir=out_dir,
    )


def write_trace(result: AttackResult, path: Union[str, Path]) -> Path:
    """One JSON object per line: {"step", "loss", "linf"}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for step, (loss, linf) in enumerate(zip(result.loss_trace, result.linf_trace)):
            f.write(json.dumps({"step": step, "loss": loss, "linf": linf}) + "\n")
    return path
