"""Campaign orchestration: craft adversarials once per source, evaluate on
every target, and assemble the transfer matrix with its on-disk artifacts.

Layout of a run directory:
    adv/{source}/{attack}/{image_id}.png   crafted adversarial images
    cells/{src}.{tgt}.{task}.{attack}.csv  per-cell metric records
    matrix.csv, matrix.json, heatmap.png   assembled results
    run.lock.json                          config hash + artifact digests

A cell that cannot be computed (attack does not apply to the task, or the
target cannot consume the images) is recorded as skipped with a reason; the
campaign always completes.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .attack import (
    ATTACK_TAA,
    ATTACK_TSA_CLS,
    ATTACK_TSA_SEG,
    AttackConfig,
    taa_attack,
    tsa_classification,
    tsa_segmentation,
)
from .backbone import (
    AggregationSpec,
    BackboneHandle,
    CLS_AGG,
    forward_features,
    resolve_model,
)
from .datasets import (
    make_classification_dataset,
    make_retrieval_dataset,
    make_segmentation_dataset,
)
from .errors import AdvFeatError
from .features import MeanVector, cosine_loss, estimate_mean, save_mean
from .heads import TaskHead, fit_head
from .image import save_png
from .manifest import RunManifest
from .metrics import (
    MetricRecord,
    evaluate_classification,
    evaluate_retrieval,
    evaluate_segmentation,
    write_records_csv,
)
from .report import (
    MatrixCell,
    TransferMatrix,
    emit_report,
    write_run_lock,
)

_METRIC_FOR_TASK = {
    "classification": "accuracy_pct",
    "segmentation": "miou_pct",
    "retrieval": "map_pct",
}

_TASK_FOR_ATTACK = {ATTACK_TSA_CLS: "classification", ATTACK_TSA_SEG: "segmentation"}


def attack_applies(attack: str, task: str) -> bool:
    """Task-specific attacks only produce images for their own task."""
    if attack == ATTACK_TAA:
        return True
    return _TASK_FOR_ATTACK.get(attack) == task


def build_campaign_data(m: RunManifest) -> dict:
    data = {}
    if "classification" in m.tasks:
        data["classification"] = make_classification_dataset(
            seed=m.seed,
            image_size=m.image_size,
            train_per_class=m.cls_train_per_class,
            test_per_class=m.cls_test_per_class,
        )
    if "segmentation" in m.tasks:
        data["segmentation"] = make_segmentation_dataset(
            seed=m.seed,
            image_size=m.image_size,
            num_train=m.seg_num_train,
            num_test=m.seg_num_test,
        )
    if "retrieval" in m.tasks:
        data["retrieval"] = make_retrieval_dataset(
            seed=m.seed,
            image_size=m.image_size,
            num_groups=m.ret_num_groups,
            gallery_per_group=m.ret_gallery_per_group,
        )
    return data


class _Caches:
    """Per-campaign lazy caches keyed by model/task so work happens once."""

    def __init__(self, manifest: RunManifest, data: dict):
        self.m = manifest
        self.data = data
        self.heads = {}
        self.means = {}
        self.clean = {}

    def head(self, model: BackboneHandle, task: str) -> TaskHead:
        key = (model.model_id, task)
        if key not in self.heads:
            if task == "classification":
                ds = self.data["classification"]
                self.heads[key] = fit_head(
                    model,
                    [s.image for s in ds.train],
                    [s.label for s in ds.train],
                    "classification",
                    ds.num_classes,
                    hyper=self.m.head,
                )
            elif task == "segmentation":
                ds = self.data["segmentation"]
                self.heads[key] = fit_head(
                    model,
                    [s.image for s in ds.train],
                    [s.mask for s in ds.train],
                    "segmentation",
                    ds.num_classes,
                    hyper=self.m.head,
                )
            else:
                raise ValueError(f"no head for task {task!r}")
        return self.heads[key]

    def mean(
        self, model: BackboneHandle, task: str, config: AttackConfig
    ) -> Optional[MeanVector]:
        if not config.centering:
            return None
        layer = model.num_layers if config.layer is None else config.layer
        key = (model.model_id, task, layer, config.agg.id)
        if key not in self.means:
            ds = self.data[task]
            train = ds.gallery if task == "retrieval" else ds.train
            images = [s.image for s in train]
            if self.m.mean_samples is not None:
                images = images[: self.m.mean_samples]
            if self.m.mean_mode == "zero":
                from .features import zero_mean

                dim = forward_features(model, images[0], layer, config.agg).shape[0]
                self.means[key] = zero_mean(
                    dim, model.model_id, layer, config.agg.id, ds.dataset_id
                )
            else:
                self.means[key] = estimate_mean(
                    model, images, layer, config.agg, dataset_id=ds.dataset_id
                )
        return self.means[key]

    def clean_metric(self, model: BackboneHandle, task: str) -> float:
        key = (model.model_id, task)
        if key not in self.clean:
            self.clean[key] = _evaluate(model, task, None, self)
        return self.clean[key]


def _eval_images(data: dict, task: str) -> list:
    ds = data[task]
    return ds.queries if task == "retrieval" else ds.test


def _evaluate(
    model: BackboneHandle, task: str, adv_images: Optional[list], caches: _Caches
) -> float:
    """Metric on the target; adv_images=None means the clean condition."""
    ds = caches.data[task]
    samples = _eval_images(caches.data, task)
    images = adv_images if adv_images is not None else [s.image for s in samples]
    if task == "classification":
        return evaluate_classification(
            model, caches.head(model, task), images, [s.label for s in samples]
        )
    if task == "segmentation":
        return evaluate_segmentation(
            model, caches.head(model, task), images, [s.mask for s in samples]
        )
    return evaluate_retrieval(
        model,
        images,
        [s.label for s in samples],
        [g.image for g in ds.gallery],
        [g.label for g in ds.gallery],
    ).map_pct


def _craft(
    source: BackboneHandle,
    attack: str,
    task: str,
    caches: _Caches,
    config: AttackConfig,
    out_dir: Path,
) -> list:
    """Adversarial images for one (source, attack, task), saved as PNGs."""
    samples = _eval_images(caches.data, task)
    adv_dir = out_dir / "adv" / source.model_id / attack
    out = []
    for s in samples:
        if attack == ATTACK_TAA:
            res = taa_attack(source, s.image, caches.mean(source, task, config), config)
        elif attack == ATTACK_TSA_CLS:
            res = tsa_classification(
                source, caches.head(source, task), s.image, s.label, config
            )
        else:
            res = tsa_segmentation(source, caches.head(source, task), s.image, config)
        save_png(res.adversarial, adv_dir / f"{s.image_id}.png")
        out.append(res.adversarial)
    return out


def run_campaign(
    manifest: RunManifest,
    out_dir: Union[str, Path],
    manifest_hash: str = "",
) -> TransferMatrix:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_campaign_data(manifest)
    handles = {
        mid: resolve_model(mid)
        for mid in dict.fromkeys(manifest.sources + manifest.targets)
    }
    caches = _Caches(manifest, data)
    matrix = TransferMatrix(
        name=manifest.name, seed=manifest.seed, manifest_hash=manifest_hash
    )

    crafted = {}
    for src_id in manifest.sources:
        for attack in manifest.attacks:
            for task in manifest.tasks:
                if not attack_applies(attack, task):
                    continue
                try:
                    crafted[(src_id, attack, task)] = _craft(
                        handles[src_id], attack, task, caches, manifest.attack, out
                    )
                except AdvFeatError as e:
                    crafted[(src_id, attack, task)] = e

    for src_id in manifest.sources:
        for tgt_id in manifest.targets:
            for task in manifest.tasks:
                for attack in manifest.attacks:
                    cell = MatrixCell(
                        source=src_id,
                        target=tgt_id,
                        task=task,
                        attack=attack,
                        metric_name=_METRIC_FOR_TASK[task],
                    )
                    matrix.cells.append(cell)
                    if not attack_applies(attack, task):
                        cell.status = "skipped"
                        cell.reason = f"{attack} crafts {_TASK_FOR_ATTACK[attack]} images only"
                        continue
                    made = crafted[(src_id, attack, task)]
                    if isinstance(made, AdvFeatError):
                        cell.status = "skipped"
                        cell.reason = f"crafting failed: {made}"
                        continue
                    try:
                        cell.clean = caches.clean_metric(handles[tgt_id], task)
                        cell.attacked = _evaluate(handles[tgt_id], task, made, caches)
                    except AdvFeatError as e:
                        cell.clean = None
                        cell.attacked = None
                        cell.status = "skipped"
                        cell.reason = f"evaluation failed: {e}"
                        continue
                    _write_cell_records(cell, data[task].dataset_id, out)

    # means for different tasks share a filename, so split by task
    for (_, task, _, _), mean in caches.means.items():
        if mean.num_samples > 0:
            save_mean(mean, out / "means" / task)
    emit_report(matrix, out)
    write_run_lock(out, manifest_hash, manifest.name, manifest.seed)
    return matrix


def _write_cell_records(cell: MatrixCell, dataset_id: str, out: Path) -> None:
    records = [
        MetricRecord(
            model_id=cell.target,
            task=cell.task,
            dataset_id=dataset_id,
            condition="clean",
            detail=f"src={cell.source}",
            metric_name=cell.metric_name,
            value=cell.clean,
        ),
        MetricRecord(
            model_id=cell.target,
            task=cell.task,
            dataset_id=dataset_id,
            condition="attacked",
            detail=f"src={cell.source},attack={cell.attack}",
            metric_name=cell.metric_name,
            value=cell.attacked,
        ),
    ]
    name = f"{cell.source}.{cell.target}.{cell.task}.{cell.attack}.csv"
    write_records_csv(records, out / "cells" / name)


# ---------------------------------------------------------------------------
# Ablations: vary one attack axis on one source model, white-box.
# ---------------------------------------------------------------------------

ABLATION_AXES = ("layer", "aggregation", "centering", "step_rule")

_AGG_VARIANTS = (
    ("class_token", AggregationSpec("class_token")),
    ("patch_tokens_flat", AggregationSpec("patch_tokens", "concat_flatten")),
    ("patch_tokens_mean", AggregationSpec("patch_tokens", "mean")),
    ("class_plus_patch_flat", AggregationSpec("class_plus_patch", "concat_flatten")),
)


def _variants(axis: str, model: BackboneHandle, base: AttackConfig) -> list:
    if axis == "layer":
        return [(f"L{k}", replace(base, layer=k)) for k in range(1, model.num_layers + 1)]
    if axis == "aggregation":
        return [(name, replace(base, agg=agg)) for name, agg in _AGG_VARIANTS]
    if axis == "centering":
        return [
            ("centered", replace(base, centering=True)),
            ("uncentered", replace(base, centering=False)),
        ]
    if axis == "step_rule":
        return [(rule, replace(base, step_rule=rule)) for rule in ("plain_gradient", "sign", "momentum")]
    raise ValueError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")


def run_ablation(
    manifest: RunManifest, axis: str, out_dir: Union[str, Path]
) -> list:
    """White-box classification harm while varying one attack axis.

    Each row also reports the cosine similarity of final-layer class tokens
    between clean and adversarial images, which tracks how far the feature
    representation moved regardless of the probe.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    model = resolve_model(manifest.sources[0])
    data = build_campaign_data(replace(manifest, tasks=["classification"]))
    caches = _Caches(manifest, data)
    head = caches.head(model, "classification")
    samples = data["classification"].test
    labels = [s.label for s in samples]
    clean_acc = evaluate_classification(model, head, [s.image for s in samples], labels)

    rows = []
    for name, cfg in _variants(axis, model, manifest.attack):
        adv = [
            taa_attack(model, s.image, caches.mean(model, "classification", cfg), cfg).adversarial
            for s in samples
        ]
        acc = evaluate_classification(model, head, adv, labels)
        cos = float(
            np.mean(
                [
                    cosine_loss(
                        forward_features(model, a, agg=CLS_AGG),
                        forward_features(model, s.image, agg=CLS_AGG),
                    )
                    for a, s in zip(adv, samples)
                ]
            )
        )
        rows.append(
            {
                "axis": axis,
                "variant": name,
                "clean_accuracy_pct": clean_acc,
                "attacked_accuracy_pct": acc,
                "drop": clean_acc - acc,
                "cls_cos_sim": cos,
            }
        )
    _write_ablation(rows, axis, out)
    return rows


def _write_ablation(rows: list, axis: str, out: Path) -> None:
    import csv
    import json

    cols = list(rows[0].keys())
    with open(out / f"ablation-{axis}.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in cols)])
    (out / f"ablation-{axis}.json").write_text(
        json.dumps(rows, indent=2) + "\n", encoding="utf-8"
    )
