import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advfeat.backbone import MEAN_PATCH_AGG, forward_features
from advfeat.errors import (
    DegenerateFeature,
    DimensionMismatch,
    EmptyTrainingSet,
    IoFailure,
)
from advfeat.features import (
    MeanVector,
    center,
    cosine_loss,
    cosine_loss_torch,
    estimate_mean,
    load_mean,
    mean_filename,
    save_mean,
    zero_mean,
)


def test_cosine_hand_values():
    assert cosine_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert cosine_loss(np.array([1.0, 0.0]), np.array([-2.0, 0.0])) == pytest.approx(-1.0)
    assert cosine_loss(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == pytest.approx(0.0)
    # 135 degrees
    assert cosine_loss(np.array([1.0, 0.0]), np.array([-1.0, 1.0])) == pytest.approx(
        -0.70710678, abs=1e-8
    )


def test_cosine_rejects_degenerate_and_mismatched():
    with pytest.raises(DegenerateFeature):
        cosine_loss(np.zeros(4), np.ones(4))
    with pytest.raises(DegenerateFeature):
        cosine_loss(np.ones(4), np.full(4, 1e-14))
    with pytest.raises(DimensionMismatch):
        cosine_loss(np.ones(3), np.ones(4))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(min_value=-1e3, max_value=1e3, width=32), min_size=2, max_size=8),
    st.lists(st.floats(min_value=-1e3, max_value=1e3, width=32), min_size=2, max_size=8),
    st.floats(min_value=0.01, max_value=100.0),
)
def test_cosine_properties(xs, ys, scale):
    n = min(len(xs), len(ys))
    a = np.array(xs[:n], dtype=np.float64)
    b = np.array(ys[:n], dtype=np.float64)
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    c = cosine_loss(a, b)
    assert -1.0 <= c <= 1.0
    assert cosine_loss(b, a) == pytest.approx(c, abs=1e-12)
    assert cosine_loss(scale * a, b) == pytest.approx(c, abs=1e-9)
    assert cosine_loss(-a, b) == pytest.approx(-c, abs=1e-12)


def test_cosine_torch_matches_numpy_with_centering():
    rng = np.random.default_rng(5)
    z = rng.normal(size=16)
    mu = rng.normal(size=16)
    z_ref_c = rng.normal(size=16)
    got = float(
        cosine_loss_torch(
            torch.from_numpy(z), torch.from_numpy(z_ref_c), torch.from_numpy(mu)
        )
    )
    want = cosine_loss(z - mu, z_ref_c)
    assert got == pytest.approx(want, abs=1e-12)


def test_estimate_mean_matches_manual_float64(model, cls_data):
    imgs = [s.image for s in cls_data.train[:5]]
    mean = estimate_mean(model, imgs, agg=MEAN_PATCH_AGG, dataset_id="d")
    acc = np.zeros(model.embed_dim, dtype=np.float64)
    for img in imgs:
        acc += forward_features(model, img, agg=MEAN_PATCH_AGG).astype(np.float64)
    want = (acc / len(imgs)).astype(np.float32)
    assert np.array_equal(mean.values, want)
    assert mean.num_samples == 5
    assert mean.layer == model.num_layers
    assert mean.agg_id == "patch_tokens_mean"
    assert mean.dataset_id == "d"
    assert mean.model_id == model.model_id


def test_estimate_mean_rejects_empty(model):
    with pytest.raises(EmptyTrainingSet):
        estimate_mean(model, [])


def test_center_and_zero_mean():
    mu = MeanVector(np.array([1.0, 2.0], dtype=np.float32), "m", 1, "a", 3, "d")
    c = center(np.array([3.0, 3.0], dtype=np.float32), mu)
    assert np.array_equal(c.values, np.array([2.0, 1.0], dtype=np.float32))
    z = zero_mean(2)
    assert np.array_equal(center(np.array([3.0, 3.0], dtype=np.float32), z).values,
                          np.array([3.0, 3.0], dtype=np.float32))
    with pytest.raises(DimensionMismatch):
        center(np.zeros(3, dtype=np.float32), mu)
    with pytest.raises(DimensionMismatch):
        MeanVector(np.zeros((2, 2), dtype=np.float32), "m", 1, "a", 1, "d")


def test_mean_file_round_trip(tmp_path):
    vals = np.linspace(-2, 2, 17, dtype=np.float32)
    mean = MeanVector(vals, "ref-vit-d2-e32-p4-s7", 2, "patch_tokens_flat", 9, "train")
    path = save_mean(mean, tmp_path)
    assert path.name == mean_filename(mean.model_id, mean.layer, mean.agg_id)
    back = load_mean(path)
    assert np.array_equal(back.values, vals)
    assert back.model_id == mean.model_id
    assert back.layer == 2
    assert back.agg_id == "patch_tokens_flat"
    assert back.num_samples == 9
    assert back.dataset_id == "train"


def test_mean_file_corruption_detected(tmp_path):
    mean = MeanVector(np.ones(4, dtype=np.float32), "m", 1, "a", 2, "d")
    path = save_mean(mean, tmp_path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")

    no_header = tmp_path / "no_header.bin"
    no_header.write_bytes(raw[nl + 1 :][:-1])  # no newline at all
    with pytest.raises(IoFailure):
        load_mean(no_header)

    bad_json = tmp_path / "bad_json.bin"
    bad_json.write_bytes(b"{not json\n" + raw[nl + 1 :])
    with pytest.raises(IoFailure):
        load_mean(bad_json)

    missing_key = tmp_path / "missing_key.bin"
    missing_key.write_bytes(b'{"model_id": "m"}\n' + raw[nl + 1 :])
    with pytest.raises(IoFailure):
        load_mean(missing_key)

    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(raw[:-3])
    with pytest.raises(IoFailure):
        load_mean(truncated)

    with pytest.raises(IoFailure):
        load_mean(tmp_path / "does_not_exist.bin")
