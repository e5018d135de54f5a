import numpy as np
import torch

from advfeat.backbone import (
    CLS_AGG,
    DEFAULT_ATTACK_AGG,
    MEAN_PATCH_AGG,
    SEG_AGG,
    input_gradient,
    loss_and_input_gradient,
)
from advfeat.features import cosine_loss_torch
from advfeat.image import ImageTensor

from gradcheck import (
    attack_loss_setup,
    central_differences,
    raw_loss,
    relative_errors,
    sample_coords,
)


def _autograd(model, px, z_ref_c, mu, layer, agg):
    zref = torch.from_numpy(z_ref_c).to(model.dtype)
    mu_t = torch.from_numpy(mu).to(model.dtype)
    img = ImageTensor(pixels=px, quantized=False)
    return loss_and_input_gradient(
        model, img, lambda z: cosine_loss_torch(z, zref, mu_t), layer, agg
    )


def test_autograd_matches_finite_differences(model, model64, cls_data, sample_image):
    rng = np.random.default_rng(42)
    train = [s.image for s in cls_data.train[:6]]
    px, z_ref_c, mu, layer, agg = attack_loss_setup(model, sample_image, train, rng)

    val64, g64 = _autograd(model64, px, z_ref_c, mu, layer, agg)
    assert abs(val64 - raw_loss(model64, px, z_ref_c, mu, layer, agg)) < 1e-12

    coords = sample_coords(px.shape, 60, rng)
    fd = central_differences(model64, px, z_ref_c, mu, layer, agg, coords)
    ag = np.array([g64[c] for c in coords])
    errs = relative_errors(ag, fd)
    assert float(np.mean(errs < 1e-3)) == 1.0, f"worst rel err {errs.max():.3e}"


def test_float32_gradient_tracks_float64(model, model64, cls_data, sample_image):
    rng = np.random.default_rng(43)
    train = [s.image for s in cls_data.train[:6]]
    px, z_ref_c, mu, layer, agg = attack_loss_setup(model, sample_image, train, rng)
    _, g32 = _autograd(model, px, z_ref_c, mu, layer, agg)
    _, g64 = _autograd(model64, px, z_ref_c, mu, layer, agg)
    a = g32.astype(np.float64).ravel()
    b = g64.ravel()
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert cos > 0.999
    assert 0.99 < np.linalg.norm(a) / np.linalg.norm(b) < 1.01


def test_clean_image_is_a_stationary_point(model, cls_data, sample_image):
    # cosine(z, z_orig) peaks at the clean image, so its gradient vanishes
    # there; descent needs sign() of numerical noise to leave the start
    from advfeat.features import estimate_mean
    from advfeat.backbone import forward_features

    train = [s.image for s in cls_data.train[:6]]
    mean = estimate_mean(model, train)
    z_orig = forward_features(model, sample_image)
    mu = mean.values.astype(np.float32)
    z_ref_c = (z_orig - mu).astype(np.float32)
    val, g = _autograd(model, sample_image.pixels, z_ref_c, mu, model.num_layers, DEFAULT_ATTACK_AGG)
    assert val > 0.999999
    assert float(np.abs(g).max()) < 1e-6


def test_gradient_flows_through_every_aggregation(model, sample_image):
    for agg in (CLS_AGG, MEAN_PATCH_AGG, DEFAULT_ATTACK_AGG, SEG_AGG):
        g = input_gradient(model, sample_image, lambda z: (z * z).sum(), agg=agg)
        assert g.shape == sample_image.pixels.shape
        assert np.isfinite(g).all()
        assert float(np.abs(g).max()) > 0.0


def test_layer_taps_give_distinct_gradients(model, sample_image):
    g1 = input_gradient(model, sample_image, lambda z: (z * z).sum(), layer=1)
    g2 = input_gradient(model, sample_image, lambda z: (z * z).sum(), layer=2)
    assert not np.allclose(g1, g2)
