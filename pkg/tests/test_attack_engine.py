import json
import math

import numpy as np
import pytest

from advfeat.attack import (
    ATTACK_TAA,
    AttackConfig,
    adv_filename,
    taa_attack,
    tsa_classification,
    tsa_segmentation,
    write_trace,
)
from advfeat.features import MeanVector
from advfeat.backbone import forward_features
from advfeat.heads import fit_head, predict_class, predict_mask
from advfeat.image import linf_distance, load_png

BUDGET_SLACK = 1.0 / 510.0  # quantization moves each pixel at most half a level


def test_taa_reduces_feature_similarity(model, sample_image, attack_mean):
    cfg = AttackConfig()
    res = taa_attack(model, sample_image, attack_mean, cfg)
    assert res.loss_trace[0] > 0.999  # cosine with itself
    assert res.final_loss < 0.5
    assert res.succeeded
    assert not res.fallback_uncentered
    assert res.iterations_run == cfg.num_steps
    assert len(res.loss_trace) == cfg.num_steps + 1
    assert len(res.linf_trace) == cfg.num_steps + 1
    assert res.linf_trace[0] == 0.0
    assert res.adversarial.quantized
    assert res.linf <= cfg.eps_inf + BUDGET_SLACK
    assert 20.0 < res.psnr_db < math.inf


def test_taa_is_deterministic(model, sample_image, attack_mean):
    cfg = AttackConfig(num_steps=8)
    a = taa_attack(model, sample_image, attack_mean, cfg)
    b = taa_attack(model, sample_image, attack_mean, cfg)
    assert np.array_equal(a.adversarial.pixels, b.adversarial.pixels)
    assert a.loss_trace == b.loss_trace


def test_taa_saves_and_reloads_exactly(model, sample_image, attack_mean, tmp_path):
    cfg = AttackConfig(num_steps=8)
    res = taa_attack(
        model, sample_image, attack_mean, cfg, image_id="img0", out_dir=tmp_path
    )
    assert res.png_path is not None
    assert res.png_path.name == adv_filename("img0", ATTACK_TAA, model.model_id)
    reloaded = load_png(res.png_path)
    assert np.array_equal(reloaded.pixels, res.adversarial.pixels)
    assert linf_distance(reloaded, sample_image) <= cfg.eps_inf + BUDGET_SLACK


def test_taa_uncentered_mode_needs_no_mean(model, sample_image):
    cfg = AttackConfig(num_steps=8, centering=False)
    res = taa_attack(model, sample_image, mean=None, config=cfg)
    assert res.succeeded
    assert not res.fallback_uncentered


def test_taa_centered_mode_requires_matching_mean(model, sample_image, attack_mean):
    with pytest.raises(ValueError):
        taa_attack(model, sample_image, mean=None, config=AttackConfig(num_steps=2))
    bad = MeanVector(
        np.zeros(7, dtype=np.float32), model.model_id, model.num_layers, "x", 1, "d"
    )
    with pytest.raises(ValueError):
        taa_attack(model, sample_image, bad, AttackConfig(num_steps=2))


def test_taa_falls_back_when_centering_zeroes_the_feature(model, sample_image):
    z = forward_features(model, sample_image)
    own = MeanVector(z.copy(), model.model_id, model.num_layers, "patch_tokens_flat", 1, "d")
    res = taa_attack(model, sample_image, own, AttackConfig(num_steps=4))
    assert res.fallback_uncentered
    assert res.iterations_run == 4


def test_zero_budget_attack_returns_the_original(model, sample_image, attack_mean):
    cfg = AttackConfig(eps_inf=0.0, num_steps=3)
    res = taa_attack(model, sample_image, attack_mean, cfg)
    assert np.array_equal(res.adversarial.pixels, sample_image.pixels)
    assert res.linf == 0.0
    assert res.psnr_db == math.inf
    assert not res.succeeded


def test_psnr_calibration_quietens_the_attack(model, sample_image, attack_mean):
    # big steps saturate the budget, leaving a perturbation well below 40 dB
    big = AttackConfig(alpha=2.0 / 255.0, num_steps=12)
    loud = taa_attack(model, sample_image, attack_mean, big)
    quiet = taa_attack(
        model,
        sample_image,
        attack_mean,
        AttackConfig(alpha=2.0 / 255.0, num_steps=12, target_psnr_db=40.0),
    )
    assert loud.psnr_db < 40.0
    # quantization rounds each pixel by up to half a level, so a 40 dB
    # target (2.55 levels rms) can land at 20*log10(255/3.05) = 38.44 dB
    assert quiet.psnr_db >= 38.4
    assert quiet.psnr_db > loud.psnr_db + 5.0
    assert quiet.linf <= loud.linf + BUDGET_SLACK


def test_trace_file_is_line_json(model, sample_image, attack_mean, tmp_path):
    res = taa_attack(model, sample_image, attack_mean, AttackConfig(num_steps=5))
    path = write_trace(res, tmp_path / "trace.jsonl")
    lines = path.read_text().splitlines()
    assert len(lines) == 6
    rows = [json.loads(ln) for ln in lines]
    assert [r["step"] for r in rows] == list(range(6))
    assert rows[0]["linf"] == 0.0
    assert rows[0]["loss"] == pytest.approx(res.loss_trace[0])
    assert rows[-1]["loss"] == pytest.approx(res.final_loss)


def test_tsa_classification_flips_the_prediction(model, cls_data, cls_head):
    sample = cls_data.test[0]
    assert predict_class(model, cls_head, sample.image) == sample.label
    res = tsa_classification(model, cls_head, sample.image, sample.label, AttackConfig())
    assert res.succeeded  # final margin went negative
    assert res.linf <= AttackConfig().eps_inf + BUDGET_SLACK
    assert predict_class(model, cls_head, res.adversarial) != sample.label


def test_tsa_classification_validates_label(model, cls_head, sample_image):
    with pytest.raises(ValueError):
        tsa_classification(model, cls_head, sample_image, 17, AttackConfig(num_steps=2))


def test_tsa_segmentation_disturbs_the_clean_mask(model):
    from advfeat.datasets import make_segmentation_dataset

    data = make_segmentation_dataset(seed=0, num_train=8, num_test=2)
    head = fit_head(
        model,
        [s.image for s in data.train],
        [s.mask for s in data.train],
        "segmentation",
        data.num_classes,
    )
    sample = data.test[0]
    clean_pred = predict_mask(model, head, sample.image)
    res = tsa_segmentation(model, head, sample.image, AttackConfig(num_steps=25))
    assert res.succeeded
    adv_pred = predict_mask(model, head, res.adversarial)
    agreement = float(np.mean(adv_pred == clean_pred))
    assert agreement < 0.9
