"""Sweep the attacked feature layer and compare downstream damage.

Uses the ablation harness on a small manifest; the resulting CSV/JSON land
in ./demo-out/ablate.
"""

from pathlib import Path

from advfeat.campaign import run_ablation
from advfeat.manifest import parse_manifest

OUT = Path("demo-out/ablate")

RAW = {
    "manifest_version": 1,
    "name": "layer-sweep",
    "data": {"classification": {"train_per_class": 4, "test_per_class": 2}},
    "attack": {"num_steps": 25},
    "head": {"epochs": 120},
}


def main():
    rows = run_ablation(parse_manifest(RAW), "layer", OUT)
    print(f"ablation written to {OUT}")
    for row in rows:
        print(
            f"  layer={row['variant']}: accuracy {row['clean_accuracy_pct']:.1f}% "
            f"-> {row['attacked_accuracy_pct']:.1f}% "
            f"(drop {row['drop']:.1f}, final-layer class-token cosine {row['cls_cos_sim']:.3f})"
        )


if __name__ == "__main__":
    main()
