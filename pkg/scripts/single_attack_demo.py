"""Craft one task-agnostic adversarial and show what it does to the features.

Writes the clean and adversarial PNGs plus a step trace to ./demo-out/single.
"""

from pathlib import Path

from advfeat.attack import AttackConfig, taa_attack, write_trace
from advfeat.backbone import forward_features, resolve_model
from advfeat.datasets import make_classification_dataset
from advfeat.features import cosine_loss, estimate_mean
from advfeat.image import linf_distance, save_png

OUT = Path("demo-out/single")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    model = resolve_model("ref-vit-d2-e32-p4-s7")
    data = make_classification_dataset(seed=0)
    mean = estimate_mean(
        model, [s.image for s in data.train], dataset_id=data.dataset_id
    )

    sample = data.test[0]
    save_png(sample.image, OUT / "clean.png")
    result = taa_attack(
        model, sample.image, mean, AttackConfig(), image_id="demo", out_dir=OUT
    )
    write_trace(result, OUT / "trace.jsonl")

    z_clean = forward_features(model, sample.image)
    z_adv = forward_features(model, result.adversarial)
    print(f"adversarial written to {result.png_path}")
    print(f"objective (centered cosine): {result.loss_trace[0]:.4f} -> {result.final_loss:.4f}")
    print(f"uncentered feature cosine:   {cosine_loss(z_adv, z_clean):.4f}")
    print(f"L-inf distance: {linf_distance(result.adversarial, sample.image):.6f} "
          f"(budget 8/255 = {8 / 255:.6f} + quantization slack)")
    print(f"PSNR: {result.psnr_db:.2f} dB")


if __name__ == "__main__":
    main()
