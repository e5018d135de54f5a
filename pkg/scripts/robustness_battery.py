"""Does the perturbation survive common input transforms?

Crafts task-agnostic adversarials for a few test images, pushes both the
clean and adversarial copies through every default transform, and reports
classification accuracy side by side. A transform "defends" when the
adversarial column recovers toward the clean one.
"""

from advfeat.attack import AttackConfig, taa_attack
from advfeat.backbone import resolve_model
from advfeat.datasets import make_classification_dataset
from advfeat.features import estimate_mean
from advfeat.heads import fit_head
from advfeat.metrics import evaluate_classification
from advfeat.transforms import apply_transform, default_transform_suite


def main():
    model = resolve_model("ref-vit-d2-e32-p4-s7")
    data = make_classification_dataset(seed=0)
    train_images = [s.image for s in data.train]
    mean = estimate_mean(model, train_images, dataset_id=data.dataset_id)
    head = fit_head(
        model, train_images, [s.label for s in data.train],
        "classification", data.num_classes,
    )

    subset = data.test[:16]
    labels = [s.label for s in subset]
    clean = [s.image for s in subset]
    adv = [taa_attack(model, img, mean, AttackConfig()).adversarial for img in clean]

    print(f"{'transform':34s} {'clean acc':>10s} {'adv acc':>10s}")
    for spec in default_transform_suite():
        acc_clean = evaluate_classification(
            model, head, [apply_transform(i, spec) for i in clean], labels
        )
        acc_adv = evaluate_classification(
            model, head, [apply_transform(i, spec) for i in adv], labels
        )
        print(f"{spec.detail:34s} {acc_clean:9.1f}% {acc_adv:9.1f}%")


if __name__ == "__main__":
    main()
