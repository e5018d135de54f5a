import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advfeat.attack import (
    AttackConfig,
    calibrate_to_psnr,
    project_linf,
    step_update,
)
from advfeat.errors import IdenticalImages
from advfeat.metrics import psnr


def test_plain_gradient_step():
    x = np.array([0.5, 0.5], dtype=np.float32)
    g = np.array([2.0, -4.0], dtype=np.float32)
    m = np.zeros(2, dtype=np.float32)
    x2, m2 = step_update(x, g, 0.1, "plain_gradient", m)
    assert np.allclose(x2, [0.3, 0.9], atol=1e-7)
    assert np.array_equal(m2, m)


def test_sign_step_ignores_magnitude():
    x = np.array([0.5, 0.5, 0.5], dtype=np.float32)
    g = np.array([1e-9, -42.0, 0.0], dtype=np.float32)
    x2, _ = step_update(x, g, 0.25, "sign", np.zeros(3, dtype=np.float32))
    assert np.allclose(x2, [0.25, 0.75, 0.5], atol=1e-7)


def test_momentum_step_accumulates_l1_normalized():
    x = np.zeros(2, dtype=np.float32)
    m = np.zeros(2, dtype=np.float32)
    g1 = np.array([3.0, 1.0], dtype=np.float32)  # l1 = 4
    x, m = step_update(x, g1, 0.0, "momentum", m, momentum_decay=0.5)
    assert np.allclose(m, [0.75, 0.25], atol=1e-7)
    g2 = np.array([-8.0, 2.0], dtype=np.float32)  # l1 = 10
    x, m = step_update(x, g2, 0.0, "momentum", m, momentum_decay=0.5)
    # 0.5*[0.75, 0.25] + [-0.8, 0.2]
    assert np.allclose(m, [-0.425, 0.325], atol=1e-7)


def test_momentum_skips_l1_normalization_below_floor():
    m = np.array([0.5, -0.5], dtype=np.float32)
    g = np.full(2, 1e-30, dtype=np.float32)  # l1 below the stability floor
    x, m2 = step_update(np.zeros(2, dtype=np.float32), g, 0.1, "momentum", m, 1.0)
    # raw gradient is added unnormalized, so momentum barely changes
    assert np.allclose(m2, m, atol=1e-20)
    assert np.allclose(x, [-0.1, 0.1], atol=1e-7)


def test_step_update_rejects_unknown_rule():
    with pytest.raises(ValueError):
        step_update(np.zeros(1), np.zeros(1), 0.1, "nesterov", np.zeros(1))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(min_value=-2.0, max_value=3.0, width=32), min_size=4, max_size=4),
    st.lists(st.floats(min_value=0.0, max_value=1.0, width=32), min_size=4, max_size=4),
    st.floats(min_value=0.0, max_value=0.5),
)
def test_project_linf_properties(xs, origs, eps):
    x = np.array(xs, dtype=np.float32)
    orig = np.array(origs, dtype=np.float32)
    p = project_linf(x, orig, eps)
    assert p.dtype == np.float32
    assert (p >= 0.0).all() and (p <= 1.0).all()
    assert np.abs(p.astype(np.float64) - orig.astype(np.float64)).max() <= eps + 1e-7
    # projection is idempotent and fixes in-ball points
    assert np.array_equal(project_linf(p, orig, eps), p)


def test_project_linf_identity_inside_ball():
    orig = np.array([0.5, 0.5], dtype=np.float32)
    x = np.array([0.52, 0.49], dtype=np.float32)
    assert np.array_equal(project_linf(x, orig, 0.05), x)


def test_calibrate_shrinks_loud_perturbations():
    orig = np.full((8, 8, 3), 0.5, dtype=np.float32)
    adv = orig + np.float32(20.0 / 255.0)  # PSNR = 10*log10(255^2/400) ~ 22.1 dB
    assert psnr(orig, adv) < 40.0
    out = calibrate_to_psnr(adv, orig, 40.0)
    assert psnr(orig, out) >= 40.0 - 1e-9
    # direction preserved, only the magnitude shrinks
    d_in = adv.astype(np.float64) - orig
    d_out = out.astype(np.float64) - orig
    ratio = d_out / d_in
    assert np.allclose(ratio, ratio.flat[0], atol=1e-9)
    assert 0.0 < ratio.flat[0] < 1.0


def test_calibrate_passes_quiet_perturbations_through():
    orig = np.full((8, 8, 3), 0.5, dtype=np.float32)
    adv = orig.copy()
    adv[0, 0, 0] += np.float32(1.0 / 255.0)  # far above 40 dB already
    out = calibrate_to_psnr(adv, orig, 40.0)
    assert np.array_equal(out, adv)


def test_calibrate_rejects_identical_images():
    orig = np.full((4, 4, 3), 0.25, dtype=np.float32)
    with pytest.raises(IdenticalImages):
        calibrate_to_psnr(orig.copy(), orig, 40.0)


def test_calibrate_hits_target_mse_exactly():
    # 40 dB target means MSE 6.5025 on the 255-level scale
    orig = np.zeros((16, 16, 3), dtype=np.float32)
    adv = np.full((16, 16, 3), 8.0 / 255.0, dtype=np.float32)
    out = calibrate_to_psnr(adv, orig, 40.0)
    mse = float(np.mean(((out.astype(np.float64) - orig) * 255.0) ** 2))
    assert mse == pytest.approx(6.5025, rel=1e-6)


def test_attack_config_validation():
    AttackConfig()  # defaults are valid
    with pytest.raises(ValueError):
        AttackConfig(eps_inf=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(eps_inf=1.5)
    with pytest.raises(ValueError):
        AttackConfig(alpha=0.0)
    with pytest.raises(ValueError):
        AttackConfig(num_steps=0)
    with pytest.raises(ValueError):
        AttackConfig(step_rule="adamw")
    with pytest.raises(ValueError):
        AttackConfig(momentum_decay=-1.0)


def test_attack_config_defaults_match_standard_setting():
    cfg = AttackConfig()
    assert cfg.eps_inf == pytest.approx(8.0 / 255.0)
    assert cfg.alpha == pytest.approx(4e-4)
    assert cfg.num_steps == 50
    assert cfg.step_rule == "sign"
    assert cfg.centering is True
    assert cfg.agg.id == "patch_tokens_flat"
