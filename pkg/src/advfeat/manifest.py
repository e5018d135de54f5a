"""Campaign manifests: a strict, versioned JSON description of a run.

Unknown keys are rejected at every level so a typo cannot silently change an
experiment. Fractions like "8/255" are accepted wherever a pixel budget is
expected. The manifest hash is the sha256 of the canonical (sorted, compact)
JSON encoding and identifies a run configuration exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

from .attack import ATTACK_TAA, ATTACK_TSA_CLS, ATTACK_TSA_SEG, AttackConfig
from .backbone import AggregationSpec
from .errors import ManifestError
from .heads import HeadHyperparams

MANIFEST_VERSION = 1

TASKS = ("classification", "segmentation", "retrieval")
ATTACKS = (ATTACK_TAA, ATTACK_TSA_CLS, ATTACK_TSA_SEG)
MEAN_MODES = ("train", "zero")

MANIFEST_SCHEMA = """\
{
  "manifest_version": 1,
  "name": "demo",
  "seed": 0,
  "models": {"sources": ["ref-vit-d2-e32-p4-s7"],
             "targets": ["ref-vit-d2-e32-p4-s7", "ref-vit-d2-e32-p4-s11"]},
  "tasks": ["classification", "segmentation", "retrieval"],
  "attacks": ["taa", "tsa_cls", "tsa_seg"],
  "data": {"image_size": 32,
           "classification": {"train_per_class": 8, "test_per_class": 8},
           "segmentation": {"num_train": 24, "num_test": 16},
           "retrieval": {"num_groups": 8, "gallery_per_group": 3}},
  "attack": {"eps_inf": "8/255", "alpha": 0.0004, "num_steps": 50,
             "step_rule": "sign", "momentum_decay": 1.0, "centering": true,
             "aggregation": {"mode": "patch_tokens",
                             "patch_reduction": "concat_flatten"},
             "layer": null, "target_psnr_db": null},
  "mean": {"samples": null, "mode": "train"},
  "head": {"epochs": 250, "lr": 0.05, "weight_decay": 0.0001, "conv_kernel": 3}
}
All keys above are optional except manifest_version; unknown keys are errors.
"""


@dataclass
class RunManifest:
    name: str = "run"
    seed: int = 0
    sources: list = field(default_factory=lambda: ["ref-vit-d2-e32-p4-s7"])
    targets: list = field(default_factory=lambda: ["ref-vit-d2-e32-p4-s7"])
    tasks: list = field(default_factory=lambda: list(TASKS))
    attacks: list = field(default_factory=lambda: list(ATTACKS))
    attack: AttackConfig = field(default_factory=AttackConfig)
    image_size: int = 32
    cls_train_per_class: int = 8
    cls_test_per_class: int = 8
    seg_num_train: int = 24
    seg_num_test: int = 16
    ret_num_groups: int = 8
    ret_gallery_per_group: int = 3
    mean_samples: Optional[int] = None
    mean_mode: str = "train"
    head: HeadHyperparams = field(default_factory=HeadHyperparams)


def _take(raw: dict, allowed: tuple, where: str) -> None:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ManifestError(
            f"unknown key(s) {sorted(unknown)} in {where}; allowed: {sorted(allowed)}"
        )


def _number(value, where: str) -> float:
    """Accept JSON numbers and fraction strings like "8/255"."""
    if isinstance(value, bool):
        raise ManifestError(f"{where} must be a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value))
        except (ValueError, ZeroDivisionError) as e:
            raise ManifestError(f"{where} is not a number or fraction: {value!r}") from e
    raise ManifestError(f"{where} must be a number, got {type(value).__name__}")


def _int(value, where: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ManifestError(f"{where} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ManifestError(f"{where} must be >= {minimum}, got {value}")
    return value


def _bool(value, where: str) -> bool:
    if not isinstance(value, bool):
        raise ManifestError(f"{where} must be true or false, got {value!r}")
    return value


def _str_list(value, where: str, allowed: Optional[tuple] = None) -> list:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ManifestError(f"{where} must be a list of strings")
    if not value:
        raise ManifestError(f"{where} must not be empty")
    if allowed is not None:
        bad = [v for v in value if v not in allowed]
        if bad:
            raise ManifestError(f"{where} contains unknown entries {bad}; allowed: {list(allowed)}")
    if len(set(value)) != len(value):
        raise ManifestError(f"{where} contains duplicates")
    return list(value)


def _parse_attack(raw: dict) -> AttackConfig:
    allowed = (
        "eps_inf",
        "alpha",
        "num_steps",
        "step_rule",
        "momentum_decay",
        "centering",
        "aggregation",
        "layer",
        "target_psnr_db",
    )
    _take(raw, allowed, "attack")
    kwargs = {}
    if "eps_inf" in raw:
        kwargs["eps_inf"] = _number(raw["eps_inf"], "attack.eps_inf")
    if "alpha" in raw:
        kwargs["alpha"] = _number(raw["alpha"], "attack.alpha")
    if "num_steps" in raw:
        kwargs["num_steps"] = _int(raw["num_steps"], "attack.num_steps", 1)
    if "step_rule" in raw:
        if not isinstance(raw["step_rule"], str):
            raise ManifestError("attack.step_rule must be a string")
        kwargs["step_rule"] = raw["step_rule"]
    if "momentum_decay" in raw:
        kwargs["momentum_decay"] = _number(raw["momentum_decay"], "attack.momentum_decay")
    if "centering" in raw:
        kwargs["centering"] = _bool(raw["centering"], "attack.centering")
    if "aggregation" in raw:
        agg_raw = raw["aggregation"]
        if not isinstance(agg_raw, dict):
            raise ManifestError("attack.aggregation must be an object")
        _take(agg_raw, ("mode", "patch_reduction"), "attack.aggregation")
        try:
            kwargs["agg"] = AggregationSpec(
                mode=agg_raw.get("mode", "patch_tokens"),
                patch_reduction=agg_raw.get("patch_reduction", "concat_flatten"),
            )
        except ValueError as e:
            raise ManifestError(str(e)) from e
    if "layer" in raw and raw["layer"] is not None:
        kwargs["layer"] = _int(raw["layer"], "attack.layer", 1)
    if "target_psnr_db" in raw and raw["target_psnr_db"] is not None:
        kwargs["target_psnr_db"] = _number(raw["target_psnr_db"], "attack.target_psnr_db")
    try:
        return AttackConfig(**kwargs)
    except ValueError as e:
        raise ManifestError(str(e)) from e


def parse_manifest(raw: dict) -> RunManifest:
    if not isinstance(raw, dict):
        raise ManifestError("manifest must be a JSON object")
    _take(
        raw,
        ("manifest_version", "name", "seed", "models", "tasks", "attacks", "data", "attack", "mean", "head"),
        "manifest",
    )
    if "manifest_version" not in raw:
        raise ManifestError("manifest_version is required")
    version = _int(raw["manifest_version"], "manifest_version")
    if version != MANIFEST_VERSION:
        raise ManifestError(
            f"manifest_version {version} unsupported; this build reads version {MANIFEST_VERSION}"
        )
    m = RunManifest()
    if "name" in raw:
        if not isinstance(raw["name"], str) or not raw["name"]:
            raise ManifestError("name must be a non-empty string")
        m.name = raw["name"]
    if "seed" in raw:
        m.seed = _int(raw["seed"], "seed", 0)
    if "models" in raw:
        models = raw["models"]
        if not isinstance(models, dict):
            raise ManifestError("models must be an object")
        _take(models, ("sources", "targets"), "models")
        if "sources" in models:
            m.sources = _str_list(models["sources"], "models.sources")
        if "targets" in models:
            m.targets = _str_list(models["targets"], "models.targets")
    if "tasks" in raw:
        m.tasks = _str_list(raw["tasks"], "tasks", TASKS)
    if "attacks" in raw:
        m.attacks = _str_list(raw["attacks"], "attacks", ATTACKS)
    if "data" in raw:
        data = raw["data"]
        if not isinstance(data, dict):
            raise ManifestError("data must be an object")
        _take(data, ("image_size", "classification", "segmentation", "retrieval"), "data")
        if "image_size" in data:
            m.image_size = _int(data["image_size"], "data.image_size", 4)
        sub = data.get("classification", {})
        _take(sub, ("train_per_class", "test_per_class"), "data.classification")
        m.cls_train_per_class = _int(sub.get("train_per_class", m.cls_train_per_class), "data.classification.train_per_class", 1)
        m.cls_test_per_class = _int(sub.get("test_per_class", m.cls_test_per_class), "data.classification.test_per_class", 1)
        sub = data.get("segmentation", {})
        _take(sub, ("num_train", "num_test"), "data.segmentation")
        m.seg_num_train = _int(sub.get("num_train", m.seg_num_train), "data.segmentation.num_train", 2)
        m.seg_num_test = _int(sub.get("num_test", m.seg_num_test), "data.segmentation.num_test", 1)
        sub = data.get("retrieval", {})
        _take(sub, ("num_groups", "gallery_per_group"), "data.retrieval")
        m.ret_num_groups = _int(sub.get("num_groups", m.ret_num_groups), "data.retrieval.num_groups", 2)
        m.ret_gallery_per_group = _int(sub.get("gallery_per_group", m.ret_gallery_per_group), "data.retrieval.gallery_per_group", 1)
    if "attack" in raw:
        if not isinstance(raw["attack"], dict):
            raise ManifestError("attack must be an object")
        m.attack = _parse_attack(raw["attack"])
    if "mean" in raw:
        mean = raw["mean"]
        if not isinstance(mean, dict):
            raise ManifestError("mean must be an object")
        _take(mean, ("samples", "mode"), "mean")
        if "samples" in mean and mean["samples"] is not None:
            m.mean_samples = _int(mean["samples"], "mean.samples", 1)
        if "mode" in mean:
            if mean["mode"] not in MEAN_MODES:
                raise ManifestError(f"mean.mode must be one of {MEAN_MODES}, got {mean['mode']!r}")
            m.mean_mode = mean["mode"]
    if "head" in raw:
        head = raw["head"]
        if not isinstance(head, dict):
            raise ManifestError("head must be an object")
        _take(head, ("epochs", "lr", "weight_decay", "conv_kernel"), "head")
        try:
            m.head = HeadHyperparams(
                epochs=_int(head.get("epochs", 250), "head.epochs", 1),
                lr=_number(head.get("lr", 0.05), "head.lr"),
                weight_decay=_number(head.get("weight_decay", 1e-4), "head.weight_decay"),
                conv_kernel=_int(head.get("conv_kernel", 3), "head.conv_kernel", 1),
            )
        except ValueError as e:
            raise ManifestError(str(e)) from e
    return m


def load_manifest(path: Union[str, Path]) -> tuple[RunManifest, str]:
    """Parse a manifest file; returns (manifest, manifest_hash)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    return parse_manifest(raw), manifest_hash(raw)


def manifest_hash(raw: dict) -> str:
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
