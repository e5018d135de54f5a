"""Run a small end-to-end campaign: two backbones, three tasks, two attacks.

Adversarials are crafted on the first backbone and evaluated on both; the
second backbone never exposes gradients, so every number in its column is
pure transfer. Writes the full run (matrix, heatmap, lock) to
./demo-out/campaign.
"""

from pathlib import Path

from advfeat.campaign import run_campaign
from advfeat.manifest import manifest_hash, parse_manifest

OUT = Path("demo-out/campaign")

RAW = {
    "manifest_version": 1,
    "name": "transfer-demo",
    "seed": 0,
    "models": {
        "sources": ["ref-vit-d2-e32-p4-s7"],
        "targets": ["ref-vit-d2-e32-p4-s7", "ref-vit-d2-e32-p4-s11"],
    },
    "attacks": ["taa", "tsa_cls"],
    "data": {
        "classification": {"train_per_class": 4, "test_per_class": 2},
        "segmentation": {"num_train": 8, "num_test": 4},
        "retrieval": {"num_groups": 4, "gallery_per_group": 2},
    },
    "attack": {"num_steps": 25},
    "head": {"epochs": 120},
}


def main():
    manifest = parse_manifest(RAW)
    matrix = run_campaign(manifest, OUT, manifest_hash=manifest_hash(RAW))
    print(f"run written to {OUT}")
    print("source -> target cells:")
    for cell in matrix.cells:
        tag = f"{cell.source} -> {cell.target} {cell.task}/{cell.attack}"
        if cell.status == "ok":
            print(f"  {tag}: clean {cell.clean:.1f} -> attacked {cell.attacked:.1f}")
        else:
            print(f"  {tag}: skipped ({cell.reason})")


if __name__ == "__main__":
    main()
