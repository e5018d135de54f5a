import json

import pytest

from advfeat.errors import IncompleteMatrix, IoFailure
from advfeat.report import (
    MatrixCell,
    TransferMatrix,
    derive_efficiency,
    emit_report,
    hash_artifacts,
    load_matrix_json,
    read_matrix_csv,
    render_heatmap,
    write_matrix_csv,
    write_matrix_json,
    write_run_lock,
)


def _matrix():
    cells = [
        MatrixCell("s", "t", "classification", "taa", "accuracy_pct", 96.25, 10.0),
        MatrixCell("s", "t", "classification", "tsa_cls", "accuracy_pct", 96.25, 5.0),
        MatrixCell(
            "s", "t", "segmentation", "tsa_cls",
            status="skipped", reason="tsa_cls crafts classification images only",
        ),
        MatrixCell("s", "t", "retrieval", "taa", "map_pct", 80.0, 40.0),
    ]
    return TransferMatrix(name="demo", seed=3, manifest_hash="abc", cells=cells)


def test_drop_property():
    c = MatrixCell("s", "t", "classification", "taa", clean=90.0, attacked=30.0)
    assert c.drop == 60.0
    assert MatrixCell("s", "t", "classification", "taa").drop is None


def test_cell_lookup():
    m = _matrix()
    assert m.cell("s", "t", "retrieval", "taa").attacked == 40.0
    with pytest.raises(KeyError):
        m.cell("s", "t", "retrieval", "tsa_seg")


def test_matrix_csv_round_trip(tmp_path):
    m = _matrix()
    path = write_matrix_csv(m, tmp_path / "matrix.csv")
    back = read_matrix_csv(path)
    assert len(back) == len(m.cells)
    for got, want in zip(back, m.cells):
        assert (got.source, got.target, got.task, got.attack) == (
            want.source, want.target, want.task, want.attack,
        )
        assert got.clean == want.clean
        assert got.attacked == want.attacked
        assert got.status == want.status
        assert got.reason == want.reason
    junk = tmp_path / "junk.csv"
    junk.write_text("x,y\n")
    with pytest.raises(IoFailure):
        read_matrix_csv(junk)


def test_matrix_json_round_trip(tmp_path):
    m = _matrix()
    path = write_matrix_json(m, tmp_path / "matrix.json")
    back = load_matrix_json(path)
    assert back.name == "demo" and back.seed == 3 and back.manifest_hash == "abc"
    assert len(back.cells) == 4
    assert back.cell("s", "t", "classification", "taa").drop == pytest.approx(86.25)
    payload = json.loads(path.read_text())
    assert "efficiency" in payload
    assert payload["cells"][0]["drop"] == pytest.approx(86.25)


def test_derive_efficiency():
    rows = derive_efficiency(_matrix())
    # only the classification pair has a usable baseline; retrieval has none
    assert len(rows) == 1
    row = rows[0]
    assert row["task"] == "classification"
    assert row["baseline_attack"] == "tsa_cls"
    # (10 - 96.25) / (5 - 96.25) * 100
    assert row["eta_pct"] == pytest.approx(100.0 * (10.0 - 96.25) / (5.0 - 96.25))
    assert row["note"] == ""


def test_derive_efficiency_degenerate_baseline():
    m = TransferMatrix(
        "d", 0, "h",
        cells=[
            MatrixCell("s", "t", "classification", "taa", "accuracy_pct", 90.0, 40.0),
            MatrixCell("s", "t", "classification", "tsa_cls", "accuracy_pct", 90.0, 90.0),
        ],
    )
    rows = derive_efficiency(m)
    assert len(rows) == 1
    assert rows[0]["eta_pct"] is None
    assert "baseline" in rows[0]["note"]


def test_derive_efficiency_ignores_skipped_baselines():
    m = TransferMatrix(
        "d", 0, "h",
        cells=[
            MatrixCell("s", "t", "classification", "taa", "accuracy_pct", 90.0, 40.0),
            MatrixCell(
                "s", "t", "classification", "tsa_cls",
                status="skipped", reason="crafting failed: x",
            ),
        ],
    )
    assert derive_efficiency(m) == []


def test_heatmap_renders_with_sidecar(tmp_path):
    m = _matrix()
    path = render_heatmap(m, tmp_path / "heatmap.png")
    assert path.exists() and path.stat().st_size > 0
    meta = json.loads(path.with_suffix(".meta.json").read_text())
    assert meta["vmax"] >= meta["vmin"]
    assert {"task": "classification", "attack": "taa"} in meta["panels"]


def test_heatmap_is_byte_deterministic(tmp_path):
    m = _matrix()
    a = render_heatmap(m, tmp_path / "a.png")
    b = render_heatmap(m, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()


def test_heatmap_rejects_empty_matrix(tmp_path):
    with pytest.raises(IncompleteMatrix):
        render_heatmap(TransferMatrix("e", 0, "h"), tmp_path / "x.png")
    with pytest.raises(IncompleteMatrix):
        emit_report(TransferMatrix("e", 0, "h"), tmp_path)


def test_emit_report_writes_all_three(tmp_path):
    out = emit_report(_matrix(), tmp_path)
    assert set(out) == {"matrix_csv", "matrix_json", "heatmap"}
    for p in out.values():
        assert p.exists()


def test_run_lock_pins_artifacts(tmp_path):
    (tmp_path / "a.txt").write_text("alpha")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "b.txt").write_text("beta")
    lock_path = write_run_lock(tmp_path, "deadbeef", "demo", 9)
    lock = json.loads(lock_path.read_text())
    assert lock["manifest_hash"] == "deadbeef"
    assert lock["name"] == "demo" and lock["seed"] == 9
    assert set(lock["artifacts"]) == {"a.txt", "sub/b.txt"}
    assert set(lock["versions"]) == {"package", "python", "torch", "numpy"}
    # the lock excludes itself, so re-hashing reproduces the recorded digests
    assert hash_artifacts(tmp_path) == lock["artifacts"]
