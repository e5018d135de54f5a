import numpy as np
import pytest
import torch

from advfeat.backbone import CLS_AGG, MEAN_PATCH_AGG, SEG_AGG
from advfeat.errors import DimensionMismatch, InsufficientData
from advfeat.heads import (
    HeadHyperparams,
    fit_head,
    head_dtype,
    predict_class,
    predict_mask,
)
from advfeat.metrics import evaluate_classification, evaluate_segmentation


def test_hyperparams_validation():
    HeadHyperparams()
    with pytest.raises(ValueError):
        HeadHyperparams(epochs=0)
    with pytest.raises(ValueError):
        HeadHyperparams(lr=0.0)
    with pytest.raises(ValueError):
        HeadHyperparams(conv_kernel=2)


def test_classification_head_fits_the_synthetic_task(model, cls_data, cls_head):
    assert cls_head.kind == "classification"
    assert cls_head.agg == MEAN_PATCH_AGG
    assert cls_head.layer == model.num_layers
    train_acc = evaluate_classification(
        model,
        cls_head,
        [s.image for s in cls_data.train],
        [s.label for s in cls_data.train],
    )
    test_acc = evaluate_classification(
        model,
        cls_head,
        [s.image for s in cls_data.test],
        [s.label for s in cls_data.test],
    )
    assert train_acc == 100.0
    assert test_acc >= 90.0


def test_head_fit_is_deterministic(model, cls_data):
    imgs = [s.image for s in cls_data.train[:8]]
    labels = [s.label for s in cls_data.train[:8]]
    a = fit_head(model, imgs, labels, "classification", 4)
    b = fit_head(model, imgs, labels, "classification", 4)
    for pa, pb in zip(a.module.parameters(), b.module.parameters()):
        assert torch.equal(pa, pb)


def test_fit_validation(model, cls_data):
    imgs = [s.image for s in cls_data.train[:4]]
    labels = [s.label for s in cls_data.train[:4]]
    with pytest.raises(ValueError):
        fit_head(model, imgs, labels, "detection", 4)
    with pytest.raises(ValueError):
        fit_head(model, imgs, labels, "classification", 1)
    with pytest.raises(InsufficientData):
        fit_head(model, imgs[:1], labels[:1], "classification", 4)
    with pytest.raises(DimensionMismatch):
        fit_head(model, imgs, labels[:2], "classification", 4)
    with pytest.raises(ValueError):
        fit_head(model, imgs, [0, 1, 2, 9], "classification", 4)
    with pytest.raises(InsufficientData):
        fit_head(model, imgs, [1, 1, 1, 1], "classification", 4)


def test_segmentation_head_fits_and_predicts(model):
    from advfeat.datasets import make_segmentation_dataset

    data = make_segmentation_dataset(seed=1, num_train=8, num_test=4)
    head = fit_head(
        model,
        [s.image for s in data.train],
        [s.mask for s in data.train],
        "segmentation",
        data.num_classes,
    )
    assert head.agg == SEG_AGG
    mask = predict_mask(model, head, data.test[0].image)
    assert mask.shape == (data.image_size, data.image_size)
    assert mask.dtype == np.int64
    assert set(np.unique(mask)) <= {0, 1}
    miou = evaluate_segmentation(
        model, head, [s.image for s in data.test], [s.mask for s in data.test]
    )
    assert miou >= 50.0


def test_segmentation_head_requires_class_plus_patch_features(model):
    from advfeat.datasets import make_segmentation_dataset

    data = make_segmentation_dataset(seed=1, num_train=4, num_test=1)
    with pytest.raises(ValueError):
        fit_head(
            model,
            [s.image for s in data.train],
            [s.mask for s in data.train],
            "segmentation",
            2,
            agg=CLS_AGG,
        )


def test_segmentation_mask_shape_checked(model):
    from advfeat.datasets import make_segmentation_dataset

    data = make_segmentation_dataset(seed=1, num_train=4, num_test=1)
    bad_masks = [m.mask[:16, :16] for m in data.train]
    with pytest.raises(DimensionMismatch):
        fit_head(
            model,
            [s.image for s in data.train],
            bad_masks,
            "segmentation",
            2,
        )


def test_predict_kind_mismatch(model, cls_head, sample_image):
    with pytest.raises(ValueError):
        predict_mask(model, cls_head, sample_image)


def test_head_is_frozen_after_fit(cls_head):
    assert head_dtype(cls_head) == torch.float32
    for p in cls_head.module.parameters():
        assert not p.requires_grad
    assert not cls_head.module.training
