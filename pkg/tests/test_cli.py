import json

import yaml

from qsemcom.cli import main


def _cfg_file(tmp_path, **overrides):
    cfg = {
        "seed": 5,
        "model": {
            "image_size": 32,
            "patch_size": 4,
            "embed_dim": 32,
            "backbone_depth": 4,
            "layer_selection": [2, 4],
            "num_text_embeddings": 8,
        },
        "quantizer": {"segment_length": 8, "codeword_count": 16},
        "data": {"synthetic_n": 48},
        "train": {
            "batch_size": 8,
            "epochs_phase1": 1,
            "epochs_phase2": 1,
            "snr_grid_db": [5.0, 15.0],
        },
        "phy": {"calibration_trials": 1000},
    }
    for dotted, value in overrides.items():
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_usage_error_exit_code():
    assert main(["no-such-verb"]) == 1
    assert main([]) == 1


def test_missing_required_flag_is_usage_error(tmp_path):
    assert main(["--out", str(tmp_path), "eval-sweep"]) == 1


def test_synth_data_writes_manifest(tmp_path, capsys):
    cfg = _cfg_file(tmp_path)
    rc = main(
        ["--config", str(cfg), "--out", str(tmp_path / "data"), "synth-data", "--n", "6"]
    )
    assert rc == 0
    manifest = tmp_path / "data" / "train.tsv"
    assert manifest.exists()
    assert len(manifest.read_text().splitlines()) == 6
    assert len(list((tmp_path / "data" / "images").glob("*.png"))) == 6


def test_bad_config_is_runtime_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  no_such_key: 1\n")
    assert main(["--config", str(path), "--out", str(tmp_path), "synth-data"]) == 2


def test_train_then_sweep_and_report(tmp_path):
    cfg = _cfg_file(tmp_path)
    out = tmp_path / "run"
    assert main(["--config", str(cfg), "--out", str(out), "train"]) == 0
    ckpt = out / "ckpt_final.pt"
    assert ckpt.exists()

    sweep_out = tmp_path / "sweep"
    rc = main(
        [
            "--config", str(cfg), "--out", str(sweep_out),
            "eval-sweep", "--checkpoint", str(ckpt),
            "--dataset", "zeroshot", "--snr-grid", "10",
        ]
    )
    assert rc == 0
    assert (sweep_out / "sweep_full.tsv").exists()
    summary = sweep_out / "sweep_summary.json"
    blob = json.loads(summary.read_text())
    assert blob["schema_version"] == 1

    report_out = tmp_path / "reemitted"
    rc = main(["--out", str(report_out), "report", "--summary", str(summary)])
    assert rc == 0
    assert (report_out / "eval_full.tsv").exists()


def test_calibrate_channel_verb(tmp_path):
    cfg = _cfg_file(tmp_path)
    out = tmp_path / "calib"
    rc = main(
        [
            "--config", str(cfg), "--out", str(out),
            "calibrate-channel", "--scheme", "none",
            "--snr-grid", "0,10", "--trials", "800",
        ]
    )
    assert rc == 0
    lines = (out / "calibration.tsv").read_text().splitlines()
    assert lines[0] == "scheme\tsnr_db\tindex_error_rate\tn_trials"
    assert len(lines) == 3


def test_codec_unavailable_exits_partial(tmp_path, monkeypatch):
    from qsemcom.evalsuite import Jpeg2000Codec

    monkeypatch.setattr(Jpeg2000Codec, "available", staticmethod(lambda: False))
    cfg = _cfg_file(tmp_path)
    rc = main(
        [
            "--config", str(cfg), "--out", str(tmp_path / "codec"),
            "baseline-codec", "--quality", "0", "--snr-grid", "10",
            "--max-samples", "2",
        ]
    )
    assert rc == 3


def test_seed_override(tmp_path):
    cfg = _cfg_file(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    main(["--config", str(cfg), "--seed", "1", "--out", str(out_a), "synth-data", "--n", "4"])
    main(["--config", str(cfg), "--seed", "2", "--out", str(out_b), "synth-data", "--n", "4"])
    a = (out_a / "train.tsv").read_bytes()
    b = (out_b / "train.tsv").read_bytes()
    assert a != b
