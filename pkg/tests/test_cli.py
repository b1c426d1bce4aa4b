import json
import os

import numpy as np
import pytest

from freqfill import pnm
from freqfill.cli import main

SUBCOMMANDS = [
    "gen-data", "filter", "stats", "extract-hf", "split-diptych",
    "train", "infer", "eval", "grad-check", "selftest",
]


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    out = capsys.readouterr().out
    assert "usage" in out.lower()


def test_unknown_subcommand_exits_one(capsys):
    assert main(["frobnicate"]) == 1


def test_unknown_flag_exits_one(capsys):
    assert main(["selftest", "--bogus"]) == 1


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "selftest PASS" in capsys.readouterr().out


def test_extract_hf_constant_image_gives_zero_pgm(tmp_path, capsys):
    src = os.path.join(tmp_path, "flat.pgm")
    dst = os.path.join(tmp_path, "hf.pgm")
    pnm.write_pgm(src, np.full((16, 16), 0.5, dtype=np.float32))
    assert main(["extract-hf", "--in", src, "--out", dst, "--radius-frac", "0.1",
                 "--normalize", "minmax"]) == 0
    out = pnm.read_pgm(dst)
    assert np.array_equal(out, np.zeros((16, 16), dtype=np.float32))


def test_missing_input_exits_two_with_path(tmp_path, capsys):
    missing = os.path.join(tmp_path, "nope.pgm")
    code = main(["extract-hf", "--in", missing, "--out", os.path.join(tmp_path, "o.pgm")])
    assert code == 2
    assert "nope.pgm" in capsys.readouterr().err


def test_gen_data_stats_filter_flow(tmp_path, capsys):
    out = os.path.join(tmp_path, "data")
    assert main(["gen-data", "--count", "6", "--seed", "3", "--out", out]) == 0
    manifest = os.path.join(out, "manifest.jsonl")
    assert os.path.exists(manifest)
    with open(manifest) as fh:
        lines = [json.loads(l) for l in fh if l.strip()]
    assert len(lines) == 6
    for entry in lines:
        for f in entry["files"].values():
            assert os.path.exists(os.path.join(out, f))

    json_path = os.path.join(tmp_path, "stats.json")
    pgm_path = os.path.join(tmp_path, "stats.pgm")
    assert main(["stats", "--manifest", manifest, "--out-json", json_path,
                 "--out-pgm", pgm_path]) == 0
    doc = json.load(open(json_path))
    assert doc["count"] == 6
    assert len(doc["area_ratio_bins"]) == 10
    assert os.path.exists(pgm_path)

    kept = os.path.join(tmp_path, "kept.jsonl")
    assert main(["filter", "--manifest", manifest, "--sem-th", "0.0",
                 "--txt-th", "0.0", "--out", kept]) == 0
    assert sum(1 for _ in open(kept)) == 6
    assert main(["filter", "--manifest", manifest, "--sem-th", "0.999",
                 "--txt-th", "1.0"]) == 0


def test_gen_data_deterministic(tmp_path):
    a = os.path.join(tmp_path, "a")
    b = os.path.join(tmp_path, "b")
    for out in (a, b):
        assert main(["gen-data", "--count", "4", "--seed", "9", "--out", out]) == 0
    with open(os.path.join(a, "manifest.jsonl"), "rb") as fa, open(
        os.path.join(b, "manifest.jsonl"), "rb"
    ) as fb:
        assert fa.read() == fb.read()


def test_split_diptych_cli(tmp_path, capsys):
    from freqfill.datagen import gen_diptych

    dip = gen_diptych(5)
    src = os.path.join(tmp_path, "dip.ppm")
    pnm.write_ppm(src, dip.image)
    left = os.path.join(tmp_path, "left.ppm")
    right = os.path.join(tmp_path, "right.ppm")
    assert main(["split-diptych", "--in", src, "--out-left", left,
                 "--out-right", right]) == 0
    assert pnm.read_ppm(left).shape == (32, 32, 3)
    assert pnm.read_ppm(right).shape == (32, 32, 3)
    assert "seam at column" in capsys.readouterr().out


def test_train_and_infer_roundtrip(tmp_path, capsys):
    data = os.path.join(tmp_path, "data")
    assert main(["gen-data", "--count", "4", "--seed", "13", "--out", data,
                 "--size", "16"]) == 0
    cfg = {
        "version": 1,
        "model": {"image_size": 16, "text_len": 8},
        "train": {"steps": 3, "batch": 2, "ckpt_every": 3},
    }
    cfg_path = os.path.join(tmp_path, "run.json")
    json.dump(cfg, open(cfg_path, "w"))
    ckpt_dir = os.path.join(tmp_path, "ckpt")
    assert main(["train", "--config", cfg_path, "--data",
                 os.path.join(data, "manifest.jsonl"), "--out", ckpt_dir]) == 0
    assert os.path.exists(os.path.join(ckpt_dir, "log.jsonl"))
    ckpt = os.path.join(ckpt_dir, "step000003.hifi")
    assert os.path.exists(ckpt)

    with open(os.path.join(data, "manifest.jsonl")) as fh:
        entry = json.loads(fh.readline())
    out_img = os.path.join(tmp_path, "gen.ppm")
    assert main([
        "infer", "--ckpt", ckpt, "--prompt", entry["prompt"],
        "--human", os.path.join(data, entry["files"]["human"]),
        "--product", os.path.join(data, entry["files"]["product"]),
        "--mask", os.path.join(data, entry["files"]["mask"]),
        "--out", out_img, "--steps", "2", "--seed", "7",
    ]) == 0
    gen = pnm.read_ppm(out_img)
    human = pnm.read_ppm(os.path.join(data, entry["files"]["human"]))
    mask = pnm.read_pgm(os.path.join(data, entry["files"]["mask"])) > 0.5
    assert np.array_equal(gen[~mask], human[~mask])

    # eval against the ground truth as a stand-in prediction
    pred_dir = os.path.join(tmp_path, "preds")
    os.makedirs(pred_dir)
    with open(os.path.join(data, "manifest.jsonl")) as fh:
        for line in fh:
            e = json.loads(line)
            img = pnm.read_ppm(os.path.join(data, e["files"]["gt"]))
            pnm.write_ppm(os.path.join(pred_dir, f"{e['id']}.ppm"), img)
    report_path = os.path.join(tmp_path, "report.json")
    assert main(["eval", "--pred-dir", pred_dir, "--manifest",
                 os.path.join(data, "manifest.jsonl"), "--report", report_path]) == 0
    report = json.load(open(report_path))
    assert report["mean_ssim"] == pytest.approx(1.0, abs=1e-9)


def test_run_config_rejects_unknown_keys(tmp_path, capsys):
    bad = {"version": 1, "modell": {}}
    path = os.path.join(tmp_path, "bad.json")
    json.dump(bad, open(path, "w"))
    code = main(["train", "--config", path, "--data", "x.jsonl", "--out",
                 os.path.join(tmp_path, "o")])
    assert code == 1
    assert "unknown" in capsys.readouterr().err

    nover = {"model": {}}
    json.dump(nover, open(path, "w"))
    assert main(["train", "--config", path, "--data", "x.jsonl", "--out",
                 os.path.join(tmp_path, "o")]) == 1

    badfield = {"version": 1, "train": {"stepz": 3}}
    json.dump(badfield, open(path, "w"))
    assert main(["train", "--config", path, "--data", "x.jsonl", "--out",
                 os.path.join(tmp_path, "o")]) == 1


def test_grad_check_cli(capsys):
    assert main(["grad-check", "--samples", "12"]) == 0
    out = capsys.readouterr().out
    assert "grad-check PASS" in out
