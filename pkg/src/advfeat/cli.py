"""Command-line interface.

Subcommands: attack, eval, mean, campaign, ablate, report. Relative input
paths resolve against $TAA_DATA_DIR when it is set. Exit codes: 0 on
success, 1 on runtime failures (unknown model, unreadable data), 2 on usage
or manifest errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

import torch

from .attack import ATTACK_TAA, AttackConfig, taa_attack, write_trace
from .backbone import AggregationSpec, forward_features, list_adapters, resolve_model
from .campaign import ABLATION_AXES, run_ablation, run_campaign
from .errors import AdvFeatError, ManifestError, UnknownModelId
from .features import cosine_loss, estimate_mean, load_mean, save_mean
from .image import linf_distance, load_png
from .manifest import MANIFEST_SCHEMA, manifest_hash, parse_manifest
from .metrics import MetricRecord, psnr, write_records_csv, write_records_json
from .report import emit_report, load_matrix_json

DATA_DIR_ENV = "TAA_DATA_DIR"


def _data_path(value: str) -> Path:
    p = Path(value)
    base = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and base:
        return Path(base) / p
    return p


def _parse_budget(text: str) -> float:
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number or fraction: {text!r}")


def _parse_agg(text: str) -> AggregationSpec:
    mode, _, reduction = text.partition(":")
    kwargs = {"mode": mode}
    if reduction:
        kwargs["patch_reduction"] = reduction
    return AggregationSpec(**kwargs)


def _attack_config(args) -> AttackConfig:
    kwargs = {}
    if args.eps is not None:
        kwargs["eps_inf"] = _parse_budget(args.eps)
    if args.alpha is not None:
        kwargs["alpha"] = args.alpha
    if args.steps is not None:
        kwargs["num_steps"] = args.steps
    if args.rule is not None:
        kwargs["step_rule"] = args.rule
    if args.layer is not None:
        kwargs["layer"] = args.layer
    if args.agg is not None:
        kwargs["agg"] = _parse_agg(args.agg)
    if args.psnr is not None:
        kwargs["target_psnr_db"] = args.psnr
    if getattr(args, "uncentered", False):
        kwargs["centering"] = False
    return AttackConfig(**kwargs)


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eps", help='L-inf budget, e.g. "8/255" or 0.03')
    p.add_argument("--alpha", type=float, help="step size")
    p.add_argument("--steps", type=int, help="number of steps")
    p.add_argument("--rule", choices=("plain_gradient", "sign", "momentum"))
    p.add_argument("--layer", type=int, help="feature layer to attack (default: last)")
    p.add_argument("--agg", help="feature aggregation, e.g. patch_tokens:mean")
    p.add_argument("--psnr", type=float, help="calibrate perturbation to this PSNR (dB)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advfeat",
        description="Feature-space adversarial attacks on ViT backbones.",
        epilog=f"Relative input paths resolve against ${DATA_DIR_ENV} when set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="craft a task-agnostic adversarial for one PNG")
    p.add_argument("--model", required=True, help="backbone id, e.g. ref-vit-d2-e32-p4-s7")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mean", help="mean file for centering (mean-*.bin)")
    p.add_argument("--uncentered", action="store_true", help="attack without mean centering")
    p.add_argument("--trace", action="store_true", help="also write a per-step JSONL trace")
    _add_attack_flags(p)

    p = sub.add_parser("eval", help="compare a clean and an adversarial PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--clean", required=True, help="clean PNG")
    p.add_argument("--adv", required=True, help="adversarial PNG")
    p.add_argument("--layer", type=int)
    p.add_argument("--agg", help="feature aggregation, e.g. patch_tokens:mean")
    p.add_argument("--out", help="directory for eval.csv / eval.json (default: print)")

    p = sub.add_parser("mean", help="estimate a feature mean over a directory of PNGs")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="directory of PNG files")
    p.add_argument("--out", required=True, help="output directory for the mean file")
    p.add_argument("--layer", type=int)
    p.add_argument("--agg", help="feature aggregation, e.g. patch_tokens:mean")
    p.add_argument("--dataset-id", default="adhoc")
    p.add_argument("--limit", type=int, help="use only the first N images")

    p = sub.add_parser("campaign", help="run a transfer campaign from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the manifest seed")

    p = sub.add_parser("ablate", help="sweep one attack axis on the first source model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the manifest seed")

    p = sub.add_parser("report", help="re-emit matrix.csv/json and heatmap from a run")
    p.add_argument("--run", required=True, help="run directory containing matrix.json")
    p.add_argument("--out", help="output directory (default: the run directory)")
    return parser


def _print_adapters() -> None:
    print("registered backbones:", file=sys.stderr)
    for e in list_adapters():
        avail = "available" if e.available else "unavailable"
        print(f"  {e.model_id:30s} {avail:12s} {e.description}", file=sys.stderr)


def _load_manifest_cli(path: str, seed_override):
    raw_path = _data_path(path)
    try:
        raw = json.loads(Path(raw_path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ManifestError(f"cannot read manifest {raw_path}: {e}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {raw_path} is not valid JSON: {e}")
    if seed_override is not None:
        if not isinstance(raw, dict):
            raise ManifestError("manifest must be a JSON object")
        raw["seed"] = seed_override
    return parse_manifest(raw), manifest_hash(raw)


def _cmd_attack(args) -> int:
    model = resolve_model(args.model)
    image_path = _data_path(args.image)
    image = load_png(image_path)
    config = _attack_config(args)
    mean = None
    if config.centering:
        if args.mean is None:
            raise ValueError("provide --mean or pass --uncentered")
        mean = load_mean(_data_path(args.mean))
    image_id = image_path.stem
    result = taa_attack(model, image, mean, config, image_id=image_id, out_dir=args.out)
    if args.trace:
        trace_path = Path(args.out) / f"{image_id}.{ATTACK_TAA}.{model.model_id}.trace.jsonl"
        write_trace(result, trace_path)
    print(
        f"wrote {result.png_path}  loss {result.loss_trace[0]:.4f} -> {result.final_loss:.4f}  "
        f"linf {result.linf:.6f}  psnr {result.psnr_db:.2f} dB"
    )
    return 0


def _cmd_eval(args) -> int:
    model = resolve_model(args.model)
    clean = load_png(_data_path(args.clean))
    adv = load_png(_data_path(args.adv))
    agg = _parse_agg(args.agg) if args.agg else AggregationSpec()
    z_clean = forward_features(model, clean, args.layer, agg)
    z_adv = forward_features(model, adv, args.layer, agg)
    values = {
        "psnr_db": psnr(clean.pixels, adv.pixels),
        "linf": linf_distance(clean, adv),
        "feature_cos_sim": cosine_loss(z_clean, z_adv),
    }
    records = [
        MetricRecord(
            model_id=model.model_id,
            task="feature",
            dataset_id="adhoc",
            condition="attacked",
            detail=Path(args.adv).name,
            metric_name=k,
            value=v,
        )
        for k, v in values.items()
    ]
    if args.out:
        write_records_csv(records, Path(args.out) / "eval.csv")
        write_records_json(records, Path(args.out) / "eval.json")
        print(f"wrote {Path(args.out) / 'eval.csv'} and eval.json")
    else:
        for k, v in values.items():
            print(f"{k}\t{v!r}")
    return 0


def _cmd_mean(args) -> int:
    model = resolve_model(args.model)
    images_dir = _data_path(args.images)
    paths = sorted(images_dir.glob("*.png"))
    if args.limit is not None:
        paths = paths[: args.limit]
    if not paths:
        raise AdvFeatError(f"no PNG files in {images_dir}")
    images = [load_png(p) for p in paths]
    agg = _parse_agg(args.agg) if args.agg else AggregationSpec()
    mean = estimate_mean(model, images, args.layer, agg, dataset_id=args.dataset_id)
    out = save_mean(mean, args.out)
    print(f"wrote {out}  (N_T={mean.num_samples}, dim={mean.values.shape[0]})")
    return 0


def _cmd_campaign(args) -> int:
    manifest, mhash = _load_manifest_cli(args.manifest, args.seed)
    matrix = run_campaign(manifest, args.out, manifest_hash=mhash)
    ok = sum(1 for c in matrix.cells if c.status == "ok")
    skipped = len(matrix.cells) - ok
    print(f"campaign {manifest.name}: {ok} cells computed, {skipped} skipped -> {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    manifest, _ = _load_manifest_cli(args.manifest, args.seed)
    rows = run_ablation(manifest, args.axis, args.out)
    for r in rows:
        print(
            f"{r['axis']}={r['variant']:22s} acc {r['clean_accuracy_pct']:6.2f} -> "
            f"{r['attacked_accuracy_pct']:6.2f}  cls_cos {r['cls_cos_sim']:+.4f}"
        )
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    matrix = load_matrix_json(run_dir / "matrix.json")
    out = Path(args.out) if args.out else run_dir
    emit_report(matrix, out)
    print(f"report written to {out}")
    return 0


_COMMANDS = {
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "mean": _cmd_mean,
    "campaign": _cmd_campaign,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ManifestError as e:
        print(f"error: {e}", file=sys.stderr)
        print("\nexpected manifest shape:\n" + MANIFEST_SCHEMA, file=sys.stderr)
        return 2
    except UnknownModelId as e:
        print(f"error: {e}", file=sys.stderr)
        _print_adapters()
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except AdvFeatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
