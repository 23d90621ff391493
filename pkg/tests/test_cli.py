"""End-to-end tests of the command line front end, run in process."""

import json
import os

import numpy as np
import pytest

from vesseltomo.cli import config_hash, main
from vesseltomo.geometry import make_geometry
from vesseltomo.projection import integral_projection, load_stack
from vesseltomo.volume import load_volume


def run_cli(capsys, *argv) -> tuple[int, str]:
    rc = main(list(argv))
    return rc, capsys.readouterr().out


PHANTOM_FLAGS = (
    "--dims", "16", "16", "16", "--depth", "2",
    "--root-radius", "2.5", "--root-length", "5.0", "--seed", "3",
)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One small phantom plus its projections, shared across tests."""
    root = tmp_path_factory.mktemp("cli")
    rc = main(["phantom", "--out-dir", str(root)] + list(PHANTOM_FLAGS))
    assert rc == 0
    rc = main([
        "project-ip", "--volume", str(root / "ct.vol"), "--out", str(root / "ip.stack"),
        "--views", "6", "--angle-step", "30.0", "--detector", "16", "16",
        "--workers", "1",
    ])
    assert rc == 0
    rc = main([
        "project-topk", "--volume", str(root / "ct.vol"), "--out", str(root / "k1.stack"),
        "--k", "1", "--views", "6", "--angle-step", "30.0", "--detector", "16", "16",
        "--workers", "1",
    ])
    assert rc == 0
    return root


def test_phantom_reports_and_reproduces(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    rc, out = run_cli(capsys, "phantom", "--out-dir", str(a), *PHANTOM_FLAGS)
    assert rc == 0
    report = json.loads(out)
    assert report["vessel_voxels"] > 0
    assert 0.0 < report["vessel_fraction"] < 1.0
    assert isinstance(report["clipped"], bool)
    rc, _ = run_cli(capsys, "phantom", "--out-dir", str(b), *PHANTOM_FLAGS)
    assert rc == 0
    assert (a / "tree.vol").read_bytes() == (b / "tree.vol").read_bytes()
    assert (a / "centerline.json").read_text() == (b / "centerline.json").read_text()


def test_project_ip_matches_library_call(workdir):
    ct = load_volume(str(workdir / "ct.vol"))
    geom = make_geometry(n_views=6, angle_step_deg=30.0, detector=(16, 16))
    expected = integral_projection(ct, geom)
    got = load_stack(str(workdir / "ip.stack"))
    # The file round trip goes through f32, so compare at that precision.
    assert np.array_equal(
        got.data.astype(np.float32), expected.data.astype(np.float32)
    )


def test_project_topk_rerun_is_bit_identical(workdir, tmp_path, capsys):
    rc, _ = run_cli(
        capsys, "project-topk", "--volume", str(workdir / "ct.vol"),
        "--out", str(tmp_path / "again.stack"), "--k", "1",
        "--views", "6", "--angle-step", "30.0", "--detector", "16", "16",
        "--workers", "1",
    )
    assert rc == 0
    assert (tmp_path / "again.stack").read_bytes() == (workdir / "k1.stack").read_bytes()


def test_project_topk_no_normalize_differs(workdir, tmp_path, capsys):
    rc, _ = run_cli(
        capsys, "project-topk", "--volume", str(workdir / "ct.vol"),
        "--out", str(tmp_path / "raw.stack"), "--k", "1", "--no-normalize",
        "--views", "6", "--angle-step", "30.0", "--detector", "16", "16",
        "--workers", "1",
    )
    assert rc == 0
    raw = load_stack(str(tmp_path / "raw.stack"))
    scaled = load_stack(str(workdir / "k1.stack"))
    assert not np.array_equal(raw.data, scaled.data)


def test_fbp_writes_volume(workdir, tmp_path, capsys):
    out = tmp_path / "fbp.vol"
    rc, _ = run_cli(
        capsys, "fbp", "--stack", str(workdir / "ip.stack"), "--out", str(out),
        "--dims", "16", "16", "16", "--filter", "hann", "--workers", "1",
    )
    assert rc == 0
    vol = load_volume(str(out))
    assert vol.dims == (16, 16, 16)


def test_fbp_rejects_topk_stack(workdir, tmp_path, capsys):
    rc = main([
        "fbp", "--stack", str(workdir / "k1.stack"), "--out", str(tmp_path / "x.vol"),
        "--dims", "16", "16", "16",
    ])
    capsys.readouterr()
    assert rc == 1


def test_optimize_writes_trace_and_improves(workdir, tmp_path, capsys):
    out = tmp_path / "opt.vol"
    trace = tmp_path / "trace.csv"
    rc, text = run_cli(
        capsys, "optimize", "--stack", str(workdir / "ip.stack"),
        "--init", str(workdir / "ct.vol"), "--out", str(out),
        "--iterations", "3", "--trace", str(trace), "--workers", "1",
    )
    assert rc == 0
    report = json.loads(text)
    assert report["final_residual"] <= report["initial_residual"]
    lines = trace.read_text().strip().splitlines()
    assert lines[0] == "iteration,residual,step_size"
    assert len(lines) == 5
    assert load_volume(str(out)).dims == (16, 16, 16)


def test_optimize_divergence_exit_code(workdir, tmp_path, capsys):
    rc = main([
        "optimize", "--stack", str(workdir / "ip.stack"),
        "--init", str(workdir / "ct.vol"), "--out", str(tmp_path / "x.vol"),
        "--iterations", "10", "--step-size", "1e6", "--workers", "1",
    ])
    capsys.readouterr()
    assert rc == 3


def test_segment_writes_mask_and_component_table(workdir, tmp_path, capsys):
    out = tmp_path / "mask.vol"
    comp = tmp_path / "components.csv"
    rc, text = run_cli(
        capsys, "segment", "--volume", str(workdir / "ct.vol"), "--out", str(out),
        "--percentile", "90.0", "--components", str(comp),
    )
    assert rc == 0
    report = json.loads(text)
    assert report["foreground_voxels"] > 0
    mask = load_volume(str(out))
    assert set(np.unique(mask.data)) <= {0.0, 1.0}
    lines = comp.read_text().strip().splitlines()
    assert lines[0] == "label,size,centroid_x,centroid_y,centroid_z"
    assert len(lines) >= 2


def test_metrics_identical_masks_score_perfect(workdir, capsys):
    tree = str(workdir / "tree.vol")
    rc, text = run_cli(capsys, "metrics", "--pred", tree, "--gt", tree)
    assert rc == 0
    report = json.loads(text)
    assert report["dsc"] == 100.0
    assert report["cldice"] == 100.0
    assert report["iou"] == 100.0


def test_metrics_stack_quality_keys(workdir, tmp_path, capsys):
    noisy = tmp_path / "noisy.stack"
    rc, _ = run_cli(
        capsys, "estimate", "--cond", str(workdir / "k1.stack"),
        "--estimator", f"noisy-oracle:sigma=0.5,gt={workdir / 'ip.stack'}",
        "--out", str(noisy),
    )
    assert rc == 0
    tree = str(workdir / "tree.vol")
    rc, text = run_cli(
        capsys, "metrics", "--pred", tree, "--gt", tree,
        "--stack-a", str(noisy), "--stack-b", str(workdir / "ip.stack"),
    )
    assert rc == 0
    report = json.loads(text)
    assert isinstance(report["psnr"], float)
    assert 0.0 < report["ssim"] <= 1.0


def test_estimate_oracle_copies_payload(workdir, tmp_path, capsys):
    out = tmp_path / "est.stack"
    rc, _ = run_cli(
        capsys, "estimate", "--cond", str(workdir / "k1.stack"),
        "--estimator", f"oracle:gt={workdir / 'ip.stack'}", "--out", str(out),
    )
    assert rc == 0
    assert out.read_bytes() == (workdir / "ip.stack").read_bytes()


def test_estimate_unknown_name_is_usage_error(workdir, tmp_path, capsys):
    rc = main([
        "estimate", "--cond", str(workdir / "k1.stack"),
        "--estimator", "magic", "--out", str(tmp_path / "x.stack"),
    ])
    capsys.readouterr()
    assert rc == 1


def test_missing_input_file_exits_io(tmp_path, capsys):
    rc = main([
        "project-ip", "--volume", str(tmp_path / "missing.vol"),
        "--out", str(tmp_path / "x.stack"),
    ])
    capsys.readouterr()
    assert rc == 2


def test_unknown_flag_exits_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["phantom", "--out-dir", "/tmp/x", "--bogus"])
    capsys.readouterr()
    assert exc.value.code == 1


PIPELINE_CONFIG = {
    "seed": 3,
    "k": 4,
    "estimator": "oracle",
    "phantom": {"dims": [16, 16, 16], "depth": 2, "root_radius": 2.5, "root_length": 5.0},
    "geometry": {"n_views": 6, "angle_step_deg": 30.0, "detector": [16, 16]},
    "optimizer": {"n_iterations": 3},
}


def write_config(tmp_path, name: str, extra: dict | None = None) -> str:
    cfg = {**PIPELINE_CONFIG, **(extra or {})}
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_pipeline_manifest_and_hash_stability(tmp_path, capsys):
    cfg = write_config(tmp_path, "cfg.json")
    rc, text = run_cli(
        capsys, "pipeline", "--config", cfg,
        "--out-dir", str(tmp_path / "run1"), "--workers", "1",
    )
    assert rc == 0
    first = json.loads(text)
    with open(tmp_path / "run1" / "manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["config_hash"] == first["config_hash"]
    assert manifest["metrics"]["segmentation"]["dsc"] > 0.0
    assert manifest["metrics"]["reprojection"]["after"]["psnr"] > 0.0
    assert {s["name"] for s in manifest["stages"]} >= {
        "phantom", "project-gt", "project-topk", "estimate", "optimize", "segment",
    }
    for entry in manifest["inputs"].values():
        assert len(entry["sha256"]) == 64
    for name in ("optimized.vol", "pred.vol", "trace.csv", "components.csv",
                 "manifest.json", "condition_view0.pgm", "xhat_view0.pgm"):
        assert os.path.exists(tmp_path / "run1" / name)

    # Same semantic config in a different directory: identical hash.
    rc, text = run_cli(
        capsys, "pipeline", "--config", cfg,
        "--out-dir", str(tmp_path / "run2"), "--workers", "1",
    )
    assert rc == 0
    assert json.loads(text)["config_hash"] == first["config_hash"]

    # A seed override is semantic and must change the hash.
    rc, text = run_cli(
        capsys, "pipeline", "--config", cfg, "--seed", "4",
        "--out-dir", str(tmp_path / "run3"), "--workers", "1",
    )
    assert rc == 0
    assert json.loads(text)["config_hash"] != first["config_hash"]


def test_pipeline_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = write_config(tmp_path, "bad.json", {"bogus": 1})
    rc = main(["pipeline", "--config", cfg, "--out-dir", str(tmp_path / "run")])
    capsys.readouterr()
    assert rc == 1


def test_config_hash_ignores_key_order():
    a = {"x": 1, "y": {"b": 2, "a": 3}}
    b = {"y": {"a": 3, "b": 2}, "x": 1}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({"x": 2, "y": {"b": 2, "a": 3}})
