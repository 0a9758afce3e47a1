import dataclasses
import json

import numpy as np
import pytest

from histostack.cli import main
from histostack.image import Image
from histostack.phantom import PhantomSpec, generate, write_stack
from histostack.pipeline import (
    ManifestError,
    PipelineError,
    RunConfig,
    StackManifest,
    run_reconstruct,
)
from histostack.transform import parse_affine


def make_stack(directory, slice_count=5, side=64, seed=20, **kwargs):
    spec = PhantomSpec(
        width=side,
        height=side,
        slice_count=slice_count,
        seed=seed,
        max_rotation_deg=kwargs.pop("max_rotation_deg", 3.0),
        max_translation=kwargs.pop("max_translation", 2.0),
        gain_range=kwargs.pop("gain_range", (0.9, 1.1)),
        bias_range=kwargs.pop("bias_range", (-5.0, 5.0)),
        **kwargs,
    )
    images, _ = generate(spec)
    return write_stack(directory, images)


FAST = dict(
    pyramid_levels=2,
    max_iterations=8,
    r_f=2.0,
    cam_window=9,
    cam_search_radius=3,
    cam_grid_spacing=16,
    subvolume_size=25,
)


def test_manifest_load_features(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n1 1\n255\n\x00")
    (tmp_path / "b.pgm").write_bytes(b"P5\n1 1\n255\n\x00")
    path = tmp_path / "manifest.txt"
    path.write_text("# a comment\n2\tb.pgm\n\n1 a.pgm\n")
    manifest = StackManifest.load(path)
    assert len(manifest) == 2
    # entries sorted by index, relative paths resolved against the manifest
    assert manifest.paths() == [tmp_path / "a.pgm", tmp_path / "b.pgm"]


def test_manifest_load_errors(tmp_path):
    path = tmp_path / "manifest.txt"
    path.write_text("1\tmissing.pgm\n")
    with pytest.raises(ManifestError, match="missing slice"):
        StackManifest.load(path)
    path.write_text("not a line\n")
    with pytest.raises(ManifestError, match="bad manifest line"):
        StackManifest.load(path)
    path.write_text("# only comments\n")
    with pytest.raises(ManifestError, match="empty"):
        StackManifest.load(path)
    (tmp_path / "a.pgm").write_bytes(b"P5\n1 1\n255\n\x00")
    path.write_text("2\ta.pgm\n")
    with pytest.raises(ManifestError, match="contiguous"):
        StackManifest.load(path)
    with pytest.raises(ManifestError, match="cannot read"):
        StackManifest.load(tmp_path / "nope.txt")


def test_manifest_write_round_trip(tmp_path):
    files = []
    for k in (1, 2):
        p = tmp_path / f"s{k}.pgm"
        p.write_bytes(b"P5\n1 1\n255\n\x00")
        files.append(p)
    path = tmp_path / "manifest.txt"
    StackManifest.write(path, files, header_comments=("hello",))
    text = path.read_text()
    assert text.startswith("# hello\n1\ts1.pgm\n")
    assert StackManifest.load(path).paths() == files


def test_run_config_validation_and_overrides():
    with pytest.raises(ValueError):
        RunConfig(mode="banana")
    with pytest.raises(ValueError):
        RunConfig(brs_mode="banana")
    with pytest.raises(ValueError):
        RunConfig(subvolume_size=1)
    with pytest.raises(ValueError):
        RunConfig(jobs=0)
    cfg = RunConfig().with_overrides(mode="rigid", jobs=None)
    assert cfg.mode == "rigid" and cfg.jobs == 1


def test_run_config_snapshot_and_file_round_trip(tmp_path):
    cfg = RunConfig(mode="affine", subvolume_size=10, r_f=2.0,
                    output_dir="somewhere/else")
    text = cfg.snapshot_text()
    assert "output_dir" not in text
    keys = [line.split(" = ")[0] for line in text.splitlines()]
    assert keys == sorted(keys)
    path = tmp_path / "cfg.txt"
    path.write_text(text + "# trailing comment\n")
    loaded = RunConfig.from_file(path)
    assert loaded == dataclasses.replace(cfg, output_dir=RunConfig.output_dir)


def test_run_config_from_file_errors(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("nonsense_key = 3\n")
    with pytest.raises(ValueError, match="unknown config key"):
        RunConfig.from_file(path)
    path.write_text("just some words\n")
    with pytest.raises(ValueError, match="bad config line"):
        RunConfig.from_file(path)


def test_reconstruct_rigid_outputs_and_determinism(tmp_path):
    manifest = StackManifest.load(make_stack(tmp_path / "stack"))
    outputs = []
    for name in ("run_a", "run_b"):
        cfg = RunConfig(mode="rigid", output_dir=str(tmp_path / name), **FAST)
        out = run_reconstruct(manifest, cfg)
        assert not (out / "incomplete").exists()
        for rel in (
            "config.snapshot",
            "aligned/manifest.txt",
            "aligned/slice_0001.pgm",
            "aligned/slice_0005.pgm",
            "transforms/links.txt",
            "transforms/affine_resolved.txt",
            "transforms/rigid_subvolumes.txt",
            "reports/brs.csv",
            "reports/cam_unregistered.csv",
            "reports/cam_rigid.csv",
            "reports/registration_log.csv",
            "run_report.txt",
        ):
            assert (out / rel).exists(), rel
        assert len(StackManifest.load(out / "aligned" / "manifest.txt")) == 5
        log = (out / "reports" / "registration_log.csv").read_text().splitlines()
        assert log[0] == "stage,source,target,level,iteration,mse"
        assert len(log) > 1
        outputs.append(out)

    a, b = outputs
    same = [p.relative_to(a) for p in a.rglob("*") if p.is_file()
            and p.name != "run_report.txt"]
    assert same
    for rel in same:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_reconstruct_lags_writes_fields(tmp_path):
    manifest = StackManifest.load(
        make_stack(tmp_path / "stack", slice_count=3, seed=21)
    )
    cfg = RunConfig(mode="lags", output_dir=str(tmp_path / "run"),
                    lags_block_size=16, lags_outer_iterations=2, **FAST)
    out = run_reconstruct(manifest, cfg)
    fields = sorted(p.name for p in (out / "transforms").glob("field_*.laf"))
    assert len(fields) == 2  # every slice except the reference
    assert (out / "reports" / "cam_affine.csv").exists()
    assert (out / "reports" / "cam_lags.csv").exists()


def test_reconstruct_failure_keeps_marker(tmp_path):
    stack_dir = tmp_path / "stack"
    flat = [Image(np.full((64, 64), 7), 255) for _ in range(3)]
    manifest = StackManifest.load(write_stack(stack_dir, flat))
    cfg = RunConfig(mode="rigid", output_dir=str(tmp_path / "run"), **FAST)
    with pytest.raises(PipelineError, match="stage standardize"):
        run_reconstruct(manifest, cfg)
    marker = tmp_path / "run" / "incomplete"
    assert marker.exists()
    assert marker.read_text().startswith("stage standardize")


def run_cli(capsys, argv):
    rc = main(argv)
    captured = capsys.readouterr()
    return rc, json.loads(captured.out.strip().splitlines()[-1])


def test_cli_phantom_and_features(tmp_path, capsys):
    rc, summary = run_cli(capsys, [
        "phantom", "--out", str(tmp_path / "stack"), "--seed", "5",
        "--slices", "4", "--width", "64", "--height", "64",
        "--max-rotation", "3", "--max-translation", "2",
    ])
    assert rc == 0
    assert summary["slices"] == 4
    assert (tmp_path / "stack" / "gt_transforms.txt").exists()

    rc, summary = run_cli(capsys, [
        "features", str(tmp_path / "stack" / "slice_0001.pgm"),
        "--out", str(tmp_path / "feat.pgm"), "--r-f", "2",
    ])
    assert rc == 0
    assert summary["entropy_bits"] > 0
    assert (tmp_path / "feat.pgm").exists()
    assert (tmp_path / "feat.pgm.scale").exists()


def test_cli_standardization_flow(tmp_path, capsys):
    make_stack(tmp_path / "stack", slice_count=3, seed=22)
    scale_path = tmp_path / "scale.txt"
    rc, summary = run_cli(capsys, [
        "train-std", "--manifest", str(tmp_path / "stack" / "manifest.txt"),
        "--out", str(scale_path),
    ])
    assert rc == 0
    assert summary["images"] == 3 and scale_path.exists()

    rc, summary = run_cli(capsys, [
        "standardize", str(tmp_path / "stack" / "slice_0001.pgm"),
        str(tmp_path / "std.pgm"), "--scale", str(scale_path),
    ])
    assert rc == 0
    assert (tmp_path / "std.pgm").exists()
    assert summary["max_gray"] > 255  # mapped onto the wider standard scale


def test_cli_register_pair_and_select_brs(tmp_path, capsys):
    make_stack(tmp_path / "stack", slice_count=3, seed=23)
    out = tmp_path / "pair.affine"
    rc, summary = run_cli(capsys, [
        "register-pair", str(tmp_path / "stack" / "slice_0001.pgm"),
        str(tmp_path / "stack" / "slice_0002.pgm"),
        "--mode", "rigid", "--out", str(out), "--pyramid-levels", "2",
    ])
    assert rc == 0
    parse_affine(out.read_text())  # file holds one parseable transform
    assert isinstance(summary["final_mse"], float)

    rc, summary = run_cli(capsys, [
        "select-brs", "--manifest", str(tmp_path / "stack" / "manifest.txt"),
        "--out", str(tmp_path / "brs.csv"),
    ])
    assert rc == 0
    assert 1 <= summary["chosen"] <= 3
    assert (tmp_path / "brs.csv").read_text().startswith("subvolume,slice,")


def test_cli_reconstruct_and_evaluate(tmp_path, capsys):
    make_stack(tmp_path / "stack", slice_count=3, seed=24)
    rc, summary = run_cli(capsys, [
        "reconstruct", "--manifest", str(tmp_path / "stack" / "manifest.txt"),
        "--out", str(tmp_path / "run"), "--mode", "rigid",
        "--set", "pyramid_levels=2", "--set", "max_iterations=8",
        "--set", "r_f=2", "--set", "cam_window=9",
        "--set", "cam_search_radius=3",
    ])
    assert rc == 0
    assert summary["mode"] == "rigid"
    aligned_manifest = summary["aligned_manifest"]
    assert StackManifest.load(aligned_manifest)

    rc, summary = run_cli(capsys, [
        "evaluate-cam", "--manifest", aligned_manifest,
        "--out", str(tmp_path / "eval"), "--window", "9",
        "--search-radius", "3", "--grid-spacing", "16",
    ])
    assert rc == 0
    assert (tmp_path / "eval" / "cam.csv").exists()
    assert (tmp_path / "eval" / "cam_summary.txt").exists()


def test_cli_error_exit_code(tmp_path, capsys):
    rc = main(["reconstruct", "--manifest", str(tmp_path / "nope.txt"),
               "--out", str(tmp_path / "run")])
    captured = capsys.readouterr()
    assert rc == 1
    summary = json.loads(captured.out.strip().splitlines()[-1])
    assert summary["status"] == "error"
    assert summary["command"] == "reconstruct"
    assert captured.err != ""
