import filecmp
import json

import numpy as np
import pytest
import yaml

from bitstain.cli import OUTPUT_ROOT_ENV, main
from bitstain.metrics import FeatureSet, save_features
from bitstain.volume_io import load_volume

SMALL_SPEC = ["volume_dims=[32, 32, 8]", "nuclei_count=3", "focal_plane_z=4"]
SMALL_TRAIN = {
    "epochs": 1, "pretrain_epochs": 1, "channel_subset_n": 4, "disc_channels": 8, "disc_stages": 2,
    "generator": {"input_size": 32, "stage_channels": [4, 8, 8], "token_dim": 16, "vit_depth": 1,
                  "vit_heads": 2},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def synth(capsys, out, *extra):
    args = ["synth", "--out", out]
    for o in SMALL_SPEC + list(extra):
        args += ["--override", o]
    code, stdout, err = run(capsys, *args)
    assert code == 0, err
    return out


def dirs_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    return not (cmp.left_only or cmp.right_only or cmp.diff_files) and all(
        dirs_identical(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth twice (one per domain), pretrain, train, stain; shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.yaml"
    cfg.write_text(yaml.safe_dump(SMALL_TRAIN))
    codes = {}
    codes["synth_a"] = main(["synth", "--out", str(root / "a"), "--seed", "1"]
                            + sum((["--override", o] for o in SMALL_SPEC), []))
    codes["synth_b"] = main(["synth", "--out", str(root / "b"), "--seed", "2"]
                            + sum((["--override", o] for o in SMALL_SPEC), []))
    data = ["--bit", str(root / "a" / "bit"), "--he", str(root / "b" / "he"), "--config", str(cfg)]
    codes["pretrain"] = main(["pretrain", "--out", str(root / "pre"), *data])
    codes["train"] = main(["train", "--out", str(root / "train"), *data,
                           "--pretrained", str(root / "pre" / "pretrain.pt"),
                           "--override", "lambda_msc=0"])
    codes["stain"] = main(["stain", "--out", str(root / "stain"), "--checkpoint",
                           str(root / "train" / "epoch_001.pt"), "--input", str(root / "a" / "bit")])
    return root, codes


def test_pipeline_exit_codes(pipeline):
    _, codes = pipeline
    assert codes == {k: 0 for k in codes}


def test_synth_writes_triplet_with_matching_dims(pipeline):
    root, _ = pipeline
    vols = {m: load_volume(root / "a" / m) for m in ("bit", "he", "labels")}
    assert {meta.dims for _, meta in vols.values()} == {(32, 32, 8)}
    assert vols["he"][0].shape == (8, 32, 32, 3)
    spec = yaml.safe_load((root / "a" / "spec.yaml").read_text())
    assert spec["seed"] == 1 and spec["volume_dims"] == [32, 32, 8]
    manifest = json.loads((root / "a" / "manifest.json").read_text())
    assert manifest["command"] == "synth" and "bit" in manifest["outputs"]


def test_synth_is_byte_deterministic(tmp_path, capsys):
    a = synth(capsys, tmp_path / "x")
    b = synth(capsys, tmp_path / "y")
    for m in ("bit", "he", "labels"):
        assert dirs_identical(a / m, b / m)


def test_synth_zero_nuclei(tmp_path, capsys):
    out = synth(capsys, tmp_path / "z", "nuclei_count=0")
    labels, _ = load_volume(out / "labels")
    assert not labels.any()


def test_synth_rejects_unknown_and_invalid_keys(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out", tmp_path / "u", "--override", "nuclei=3")
    assert code == 1 and "unknown config key: nuclei" in err
    code, _, err = run(capsys, "synth", "--out", tmp_path / "v", "--override", "nuclei_count=-1")
    assert code == 1 and "nuclei_count" in err


def test_train_logs_resolved_override(pipeline):
    root, _ = pipeline
    manifest = json.loads((root / "train" / "manifest.json").read_text())
    assert manifest["resolved_config"]["lambda_msc"] == 0.0
    assert yaml.safe_load((root / "train" / "config.yaml").read_text())["lambda_msc"] == 0.0
    assert "epoch_001.pt" in manifest["outputs"]
    lines = (root / "train" / "losses.jsonl").read_text().splitlines()
    assert lines and all(json.loads(l)["msc_total"] >= 0 for l in lines)


def test_resolved_config_is_logged(tmp_path, capsys):
    code, _, err = run(capsys, "preprocess", "--out", tmp_path / "p", "--input",
                       synth(capsys, tmp_path / "s") / "bit", "--override", "lo_pct=2")
    assert code == 0
    assert "resolved config" in err and "lo_pct: 2" in err
    pre, meta = load_volume(tmp_path / "p" / "preprocessed")
    assert pre.dtype == np.uint8 and meta.modality == "BIT"


def test_train_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    code, _, err = run(capsys, "train", "--out", tmp_path / "t", "--bit", missing, "--he", missing)
    assert code == 1 and str(missing) in err


def test_unknown_config_key_is_fatal(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("lambda_msc: 1\nlamda_style: 2\n")
    code, _, err = run(capsys, "preprocess", "--out", tmp_path / "p", "--input", tmp_path, "--config", cfg)
    assert code == 1 and "lamda_style" in err
    code, _, err = run(capsys, "preprocess", "--out", tmp_path / "p", "--input", tmp_path,
                       "--override", "generator.depth=3")
    assert code == 1 and "generator.depth" in err


def test_stain_output_volume(pipeline):
    root, _ = pipeline
    stained, meta = load_volume(root / "stain" / "stained")
    assert stained.shape == (8, 32, 32, 3) and meta.modality == "HE"
    assert meta.spacing_um == (0.5, 0.5, 1.0)


def test_stain_corrupt_checkpoint_is_runtime_error(tmp_path, capsys, pipeline):
    root, _ = pipeline
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    code, _, err = run(capsys, "stain", "--out", tmp_path / "s", "--checkpoint", bad,
                       "--input", root / "a" / "bit")
    assert code == 2 and "error" in err


def test_eval_gt_vs_gt(pipeline, tmp_path, capsys):
    root, _ = pipeline
    labels = root / "a" / "labels"
    code, out, _ = run(capsys, "eval", "--out", tmp_path / "e", "--pred", labels, "--gt", labels)
    assert code == 0
    report = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert report["dice3d"] == 1.0 and "1.000" in out
    assert report["absent"]["fid"] == report["absent"]["kid"] == "no features"
    assert "fid: absent (no features)" in out


def test_eval_stained_volume_with_features(pipeline, tmp_path, capsys):
    root, _ = pipeline
    rng = np.random.default_rng(0)
    f1 = save_features(FeatureSet(rng.normal(size=(6, 3)), "toy"), tmp_path / "p.csv")
    f2 = save_features(FeatureSet(rng.normal(size=(7, 3)), "toy"), tmp_path / "r.csv")
    code, _, _ = run(capsys, "eval", "--out", tmp_path / "e", "--pred", root / "stain" / "stained",
                     "--gt", root / "a" / "labels", "--pred-features", f1, "--real-features", f2)
    assert code == 0
    report = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert report["fid"] is not None and report["kid"] is not None and report["extractor"] == "toy"


def test_eval_malformed_features_names_file_and_line(pipeline, tmp_path, capsys):
    root, _ = pipeline
    bad = tmp_path / "bad.csv"
    bad.write_text("2,2,x\n1,2\n1,zz\n")
    good = save_features(FeatureSet(np.ones((3, 2)) + np.eye(3, 2), "x"), tmp_path / "g.csv")
    labels = root / "a" / "labels"
    code, _, err = run(capsys, "eval", "--out", tmp_path / "e", "--pred", labels, "--gt", labels,
                       "--pred-features", bad, "--real-features", good)
    assert code == 2 and "bad.csv:3" in err


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    code, out, _ = run(capsys, "synth", *sum((["--override", o] for o in SMALL_SPEC), []))
    assert code == 0
    run_dir = (tmp_path / "root").iterdir().__next__()
    assert run_dir.name.endswith("-synth") and out.strip() == str(run_dir)
    assert (run_dir / "manifest.json").is_file()
    code, out2, _ = run(capsys, "synth", *sum((["--override", o] for o in SMALL_SPEC), []))
    assert out2.strip() != out.strip()


def test_usage_error_exit_code(capsys):
    assert run(capsys, "eval", "--pred", "x")[0] == 1
    assert run(capsys)[0] == 1
