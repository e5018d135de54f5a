"""Transfer-matrix artifacts: CSV/JSON serialization, heatmap, run lock file.

All float serialization goes through repr() so CSV and JSON round-trip
losslessly; the heatmap PNG is written without software metadata so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DegenerateBaseline, IncompleteMatrix, IoFailure

MATRIX_COLUMNS = (
    "source",
    "target",
    "task",
    "attack",
    "metric_name",
    "clean",
    "attacked",
    "drop",
    "status",
    "reason",
)

_BASELINE_FOR_TASK = {"classification": "tsa_cls", "segmentation": "tsa_seg"}


@dataclass
class MatrixCell:
    source: str
    target: str
    task: str
    attack: str
    metric_name: str = ""
    clean: Optional[float] = None
    attacked: Optional[float] = None
    status: str = "ok"
    reason: str = ""

    @property
    def drop(self) -> Optional[float]:
        if self.clean is None or self.attacked is None:
            return None
        return self.clean - self.attacked


@dataclass
class TransferMatrix:
    name: str
    seed: int
    manifest_hash: str
    cells: list = field(default_factory=list)

    def cell(self, source: str, target: str, task: str, attack: str) -> MatrixCell:
        for c in self.cells:
            if (c.source, c.target, c.task, c.attack) == (source, target, task, attack):
                return c
        raise KeyError((source, target, task, attack))


def _float_text(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _float_from_text(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def write_matrix_csv(matrix: TransferMatrix, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(MATRIX_COLUMNS)
            for c in matrix.cells:
                writer.writerow(
                    [
                        c.source,
                        c.target,
                        c.task,
                        c.attack,
                        c.metric_name,
                        _float_text(c.clean),
                        _float_text(c.attacked),
                        _float_text(c.drop),
                        c.status,
                        c.reason,
                    ]
                )
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    return path


def read_matrix_csv(path: Union[str, Path]) -> list:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    if not rows or tuple(rows[0]) != MATRIX_COLUMNS:
        raise IoFailure(f"{path} is not a transfer-matrix CSV")
    cells = []
    for row in rows[1:]:
        cells.append(
            MatrixCell(
                source=row[0],
                target=row[1],
                task=row[2],
                attack=row[3],
                metric_name=row[4],
                clean=_float_from_text(row[5]),
                attacked=_float_from_text(row[6]),
                status=row[8],
                reason=row[9],
            )
        )
    return cells


def derive_efficiency(matrix: TransferMatrix) -> list:
    """Relative efficiency of the task-agnostic attack per (source, target, task).

    eta = 100 * (taa_perf - clean) / (baseline_perf - clean), computed from
    completed cells only; a baseline that did not move the metric yields a
    null eta with an explanatory note.
    """
    from .metrics import relative_efficiency

    rows = []
    for c in matrix.cells:
        if c.attack != "taa" or c.status != "ok":
            continue
        baseline_name = _BASELINE_FOR_TASK.get(c.task)
        if baseline_name is None:
            continue
        try:
            base = matrix.cell(c.source, c.target, c.task, baseline_name)
        except KeyError:
            continue
        if base.status != "ok":
            continue
        row = {
            "source": c.source,
            "target": c.target,
            "task": c.task,
            "baseline_attack": baseline_name,
            "eta_pct": None,
            "note": "",
        }
        try:
            row["eta_pct"] = relative_efficiency(c.attacked, base.attacked, c.clean)
        except DegenerateBaseline as e:
            row["note"] = str(e)
        rows.append(row)
    return rows


def write_matrix_json(matrix: TransferMatrix, path: Union[str, Path]) -> Path:
    path = Path(path)
    payload = {
        "name": matrix.name,
        "seed": matrix.seed,
        "manifest_hash": matrix.manifest_hash,
        "cells": [
            {**asdict(c), "drop": c.drop} for c in matrix.cells
        ],
        "efficiency": derive_efficiency(matrix),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
    return path


def load_matrix_json(path: Union[str, Path]) -> TransferMatrix:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    cells = [
        MatrixCell(
            source=d["source"],
            target=d["target"],
            task=d["task"],
            attack=d["attack"],
            metric_name=d.get("metric_name", ""),
            clean=d.get("clean"),
            attacked=d.get("attacked"),
            status=d.get("status", "ok"),
            reason=d.get("reason", ""),
        )
        for d in payload["cells"]
    ]
    return TransferMatrix(
        name=payload["name"],
        seed=payload["seed"],
        manifest_hash=payload["manifest_hash"],
        cells=cells,
    )


def _panel_grid(matrix: TransferMatrix):
    sources = list(dict.fromkeys(c.source for c in matrix.cells))
    targets = list(dict.fromkeys(c.target for c in matrix.cells))
    panels = list(dict.fromkeys((c.task, c.attack) for c in matrix.cells))
    return sources, targets, panels


def render_heatmap(matrix: TransferMatrix, path: Union[str, Path]) -> Path:
    """One panel per (task, attack): drop by source (rows) x target (cols).

    Skipped cells are hatched. A sidecar .meta.json records the color bounds.
    """
    if not matrix.cells:
        raise IncompleteMatrix("no cells to render")
    sources, targets, panels = _panel_grid(matrix)
    ncols = max(1, min(3, len(panels)))
    nrows = (len(panels) + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows,
        ncols,
        figsize=(3.2 * ncols + 1.2, 2.6 * nrows + 0.8),
        squeeze=False,
    )
    drops = [c.drop for c in matrix.cells if c.status == "ok" and c.drop is not None]
    vmax = max(drops) if drops else 1.0
    vmin = min(0.0, min(drops)) if drops else 0.0
    if vmax <= vmin:
        vmax = vmin + 1.0
    meta = {"vmin": vmin, "vmax": vmax, "panels": []}
    for idx, (task, attack) in enumerate(panels):
        ax = axes[idx // ncols][idx % ncols]
        grid = np.full((len(sources), len(targets)), np.nan)
        for c in matrix.cells:
            if (c.task, c.attack) != (task, attack):
                continue
            i, j = sources.index(c.source), targets.index(c.target)
            if c.status == "ok" and c.drop is not None:
                grid[i, j] = c.drop
            else:
                ax.add_patch(
                    plt.Rectangle(
                        (j - 0.5, i - 0.5),
                        1,
                        1,
                        fill=False,
                        hatch="///",
                        edgecolor="gray",
                        linewidth=0.5,
                    )
                )
        im = ax.imshow(grid, vmin=vmin, vmax=vmax, cmap="viridis")
        ax.set_title(f"{task} / {attack}", fontsize=9)
        ax.set_xticks(range(len(targets)))
        ax.set_xticklabels(targets, fontsize=6, rotation=45, ha="right")
        ax.set_yticks(range(len(sources)))
        ax.set_yticklabels(sources, fontsize=6)
        if idx % ncols == 0:
            ax.set_ylabel("source", fontsize=8)
        ax.set_xlabel("target", fontsize=8)
        meta["panels"].append({"task": task, "attack": attack})
    for idx in range(len(panels), nrows * ncols):
        axes[idx // ncols][idx % ncols].axis("off")
    fig.colorbar(im, ax=[a for row in axes for a in row], label="metric drop", shrink=0.8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # strip the encoder tag so repeated runs give byte-identical PNGs
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    path.with_suffix(".meta.json").write_text(
        json.dumps(meta, indent=2) + "\n", encoding="utf-8"
    )
    return path


def emit_report(matrix: TransferMatrix, out_dir: Union[str, Path]) -> dict:
    """Write matrix.csv, matrix.json, and heatmap.png into out_dir."""
    if not matrix.cells:
        raise IncompleteMatrix("cannot report an empty matrix")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {
        "matrix_csv": write_matrix_csv(matrix, out / "matrix.csv"),
        "matrix_json": write_matrix_json(matrix, out / "matrix.json"),
        "heatmap": render_heatmap(matrix, out / "heatmap.png"),
    }


def hash_artifacts(run_dir: Union[str, Path], exclude: Sequence[str] = ("run.lock.json",)) -> dict:
    """sha256 of every file under run_dir, keyed by posix-style relative path."""
    run_dir = Path(run_dir)
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(run_dir).as_posix()
        if rel in exclude:
            continue
        out[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def write_run_lock(
    run_dir: Union[str, Path], manifest_hash: str, name: str, seed: int
) -> Path:
    """Pin what produced this run directory: config hash, versions, artifacts."""
    import numpy
    import torch

    from . import __version__

    lock = {
        "name": name,
        "seed": seed,
        "manifest_hash": manifest_hash,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": numpy.__version__,
        },
        "artifacts": hash_artifacts(run_dir),
    }
    path = Path(run_dir) / "run.lock.json"
    path.write_text(json.dumps(lock, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
