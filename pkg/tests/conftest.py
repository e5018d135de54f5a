import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from advfeat.backbone import build_reference_backbone
from advfeat.datasets import make_classification_dataset
from advfeat.image import from_array, quantize


@pytest.fixture(scope="session")
def model():
    return build_reference_backbone(2, 32, 4, seed=7)


@pytest.fixture(scope="session")
def model64():
    return build_reference_backbone(2, 32, 4, seed=7, dtype=torch.float64)


@pytest.fixture(scope="session")
def cls_data():
    return make_classification_dataset(seed=0)


@pytest.fixture(scope="session")
def sample_image(cls_data):
    return cls_data.test[0].image


@pytest.fixture(scope="session")
def attack_mean(model, cls_data):
    from advfeat.features import estimate_mean

    return estimate_mean(
        model, [s.image for s in cls_data.train], dataset_id=cls_data.dataset_id
    )


@pytest.fixture(scope="session")
def cls_head(model, cls_data):
    from advfeat.heads import fit_head

    return fit_head(
        model,
        [s.image for s in cls_data.train],
        [s.label for s in cls_data.train],
        "classification",
        cls_data.num_classes,
    )


def random_image(seed: int, size: int = 32):
    """Quantized random image, bit-reproducible from the seed."""
    rng = np.random.default_rng(seed)
    px = rng.uniform(0.0, 1.0, size=(size, size, 3)).astype(np.float32)
    return quantize(from_array(px))
