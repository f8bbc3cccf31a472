import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import torch
from filelock import FileLock

from rsgan import dataset
from rsgan.cli import LOCK_NAME, main
from rsgan.config import ConfigError, RunConfig, dump_config, load_config
from rsgan.imaging import read_png, write_png
from rsgan.trainer import Trainer, TrainConfig

SMALL = """\
seed: 3
data.n_drr_phantoms: 1
data.n_cxr_train_phantoms: 1
data.n_cxr_test_phantoms: 1
data.n_views: 4
data.volume_size: 32
data.detector_size: 32
data.n_ribs: 4
train.net.image_size: 32
train.iters_init: 4
train.iters_fine: 2
train.lung_iters: 2
train.checkpoint_every: 2
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.yaml"
    cfg.write_text(SMALL)
    assert main(["generate-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def _log(path):
    return [json.loads(ln) for ln in path.read_text().splitlines()]


# --- config -----------------------------------------------------------------

def test_defaults_and_overrides():
    cfg = load_config(None, {"seed": 7, "train.mode": "RM"})
    assert cfg.train.seed == 7 and cfg.train.net.seed == 7 and cfg.train.mode == "RM"
    assert load_config(None) == RunConfig()


@pytest.mark.parametrize("text,match", [("train.bogus: 1\n", "unknown"),
                                        ("train:\n  lr: 0.1\n", "flat dotted"),
                                        ("- 1\n", "mapping"),
                                        ("train.lr: -1\n", "invalid"),
                                        ("train.seed: 4\n", "unknown")])
def test_bad_config_files(tmp_path, text, match):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(p)


def test_config_dump_round_trip(tmp_path):
    cfg = load_config(None, {"seed": 2, "style.gamma": 0.9, "metrics.lpips_weights": [1, 0, 2]})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


# --- generate-data ----------------------------------------------------------

def test_generate_data_echoes_config_and_counts(work):
    root, cfg = work
    d = root / "data"
    man = json.loads((d / "manifest.json").read_text())
    assert man["counts"] == {"drr": 4, "cxr_train": 4, "cxr_test": 4}
    assert (d / "config.yaml").read_text() == dump_config(load_config(cfg))
    assert len(dataset.list_samples(d / "drr")) == 4


def test_generate_data_is_reproducible(work):
    root, cfg = work
    assert main(["generate-data", "--config", str(cfg), "--out", str(root / "again")]) == 0
    a, b = root / "data", root / "again"
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    for split in ("drr", "cxr_test"):
        for name in dataset.list_samples(a / split):
            for f in (a / split / name).iterdir():
                assert f.read_bytes() == (b / split / name / f.name).read_bytes()


def test_generate_data_default_has_84_drr_samples(tmp_path):
    assert main(["generate-data", "--out", str(tmp_path / "d")]) == 0
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert man["counts"]["drr"] == 84
    assert len(dataset.list_samples(tmp_path / "d" / "drr")) == 84


def test_busy_directory_is_refused(work, tmp_path, capsys):
    root, cfg = work
    out = tmp_path / "busy"
    out.mkdir()
    with FileLock(str(out / LOCK_NAME)):
        assert main(["generate-data", "--config", str(cfg), "--out", str(out)]) == 1
    assert "in use" in capsys.readouterr().err


# --- train ------------------------------------------------------------------

def test_train_rm_logs_and_is_reproducible(work):
    root, cfg = work
    logs = []
    for run in ("rm1", "rm2"):
        out = root / run
        assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out),
                     "--mode", "RM"]) == 0
        logs.append((out / "train_log.jsonl").read_bytes())
        assert (out / "final.zip").exists() and not (out / "lung_log.jsonl").exists()
    assert logs[0] == logs[1]
    recs = _log(root / "rm1" / "train_log.jsonl")
    assert [r["iter"] for r in recs] == [1, 2, 3, 4]
    assert all({k for k in r if k.startswith("L_")} == {"L_su", "L_rec"} for r in recs)


def test_train_full_and_resume(work):
    root, cfg = work
    out = root / "full"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
    assert len(_log(out / "lung_log.jsonl")) == 2
    full = _log(out / "train_log.jsonl")
    assert [r["stage"] for r in full] == ["init"] * 4 + ["fine"] * 2
    assert sorted(p.name for p in out.glob("ckpt_*.zip")) == [
        "ckpt_000002.zip", "ckpt_000004.zip", "ckpt_000006.zip"]

    resumed_dir = root / "resumed"
    resumed_dir.mkdir()
    shutil.copy(out / "train_log.jsonl", resumed_dir / "train_log.jsonl")
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(resumed_dir),
                 "--resume", str(out / "ckpt_000002.zip")]) == 0
    resumed = _log(resumed_dir / "train_log.jsonl")
    assert [r["iter"] for r in resumed] == list(range(1, 7))
    for a, b in zip(full, resumed):
        for k in a:
            if k.startswith("L_"):
                assert b[k] == pytest.approx(a[k], rel=1e-6, abs=1e-6)


def test_train_nan_exits_2_naming_term(work, tmp_path, capsys):
    root, cfg = work
    bad = tmp_path / "bad"
    shutil.copytree(root / "data", bad)
    for name in dataset.list_samples(bad / "drr"):
        kind, arrays, meta = dataset.read_sample(bad / "drr" / name)
        arrays["suppressed"] = np.full_like(arrays["suppressed"], np.nan)
        dataset.write_sample(bad / "drr" / name, arrays, meta, kind)
    code = main(["train", "--config", str(cfg), "--data", str(bad), "--out", str(tmp_path / "run"),
                 "--mode", "RM"])
    assert code == 2
    assert "L_su" in capsys.readouterr().err
    assert (tmp_path / "run" / "aborted.zip").exists()


def test_train_missing_data_exits_1(work, tmp_path):
    root, cfg = work
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 1


# --- suppress ---------------------------------------------------------------

@pytest.fixture(scope="module")
def identity_ckpt(work):
    root, cfg = work
    tcfg = load_config(cfg).train_config()
    tr = Trainer(tcfg)
    with torch.no_grad():
        for head in tr.gen.G_R.to_image:
            head.weight.zero_()
            head.bias.zero_()
    return tr.save(root / "identity.zip")


@pytest.mark.parametrize("depth", [8, 16])
def test_suppress_png_identity(identity_ckpt, tmp_path, rng, depth):
    img = rng.uniform(-1, 1, (40, 48)).astype(np.float32)
    write_png(tmp_path / "x.png", img, depth)
    src, _ = read_png(tmp_path / "x.png")
    out = tmp_path / "out"
    assert main(["suppress", "--ckpt", str(identity_ckpt), "--in", str(tmp_path / "x.png"),
                 "--out", str(out)]) == 0
    q, qdepth = read_png(out / "x_Q.png")
    assert qdepth == depth and q.shape == (40, 48)
    assert np.abs(q - src).max() <= 2.0 / (2**depth - 1) + 1e-6
    for key, bits in (("R", 16), ("B", 16), ("L", 8), ("M", 8)):
        assert read_png(out / f"x_{key}.png")[1] == bits


def test_suppress_png_is_byte_reproducible(work, tmp_path, rng):
    root, _ = work
    write_png(tmp_path / "x.png", rng.uniform(-1, 1, (32, 32)), 8)
    outs = []
    for o in ("a", "b"):
        assert main(["suppress", "--ckpt", str(root / "rm1" / "final.zip"), "--in", str(tmp_path / "x.png"),
                     "--out", str(tmp_path / o)]) == 0
        outs.append({p.name: p.read_bytes() for p in (tmp_path / o).glob("*.png")})
    assert outs[0] == outs[1] and len(outs[0]) == 5


def test_suppress_partial_failure(identity_ckpt, tmp_path, rng, capsys):
    write_png(tmp_path / "good.png", rng.uniform(-1, 1, (32, 32)), 8)
    (tmp_path / "bad.png").write_bytes(b"not a png")
    code = main(["suppress", "--ckpt", str(identity_ckpt), "--in", str(tmp_path / "bad.png"),
                 str(tmp_path / "good.png"), "--out", str(tmp_path / "out")])
    assert code == 1
    assert (tmp_path / "out" / "good_Q.png").exists()
    assert "bad" in capsys.readouterr().err


def test_suppress_unreadable_checkpoint(tmp_path):
    (tmp_path / "c.zip").write_bytes(b"x")
    assert main(["suppress", "--ckpt", str(tmp_path / "c.zip"), "--in", "x.png",
                 "--out", str(tmp_path / "o")]) == 1


# --- evaluate ---------------------------------------------------------------

@pytest.fixture(scope="module")
def outputs(work):
    root, _ = work
    out = root / "suppressed" / "full"
    assert main(["suppress", "--ckpt", str(root / "full" / "final.zip"), "--in",
                 str(root / "data" / "cxr_test"), "--out", str(out),
                 "--pair-data", str(root / "data" / "drr")]) == 0
    return out


def test_suppress_dataset_writes_arrays(outputs, work):
    names = dataset.list_samples(outputs)
    assert names == dataset.list_samples(work[0] / "data" / "cxr_test")
    _, arrays, meta = dataset.read_sample(outputs / names[0])
    assert {"Q", "R", "B", "L", "M", "I_net", "I_rec", "I_cyc"} <= set(arrays)
    assert arrays["Q"].shape == (32, 32) and meta["mode"] == "full"


def test_evaluate_report_with_reference(work, outputs, tmp_path):
    root, cfg = work
    report = tmp_path / "rep" / "table.csv"
    assert main(["evaluate", "--config", str(cfg), "--data", str(root / "data"),
                 "--outputs", str(outputs), "--report", str(report), "--with-reference"]) == 0
    rows = [ln for ln in report.read_text().splitlines() if not ln.startswith("#")]
    assert [r.split(",")[0] for r in rows[1:]] == ["full", "input", "ground_truth"]
    summary = json.loads(report.with_suffix(".json").read_text())["summary"]
    assert summary["ground_truth"]["PSNR"]["mean"] == 99.0
    assert summary["ground_truth"]["LPIPS"]["mean"] == 0.0
    assert "MAE_cyc" in summary["full"]
    pv = (tmp_path / "rep" / "table_pvalues.csv").read_text().splitlines()
    assert pv[0] == "method_a,method_b,metric,p_value" and len(pv) > 1
    first = report.read_bytes()
    assert main(["evaluate", "--config", str(cfg), "--data", str(root / "data"),
                 "--outputs", str(outputs), "--report", str(report), "--with-reference"]) == 0
    assert report.read_bytes() == first


def test_evaluate_alignment_error(work, outputs, tmp_path, capsys):
    root, cfg = work
    partial = tmp_path / "partial"
    shutil.copytree(outputs, partial)
    dropped = dataset.list_samples(partial)[0]
    shutil.rmtree(partial / dropped)
    code = main(["evaluate", "--config", str(cfg), "--data", str(root / "data"),
                 "--outputs", str(partial), "--report", str(tmp_path / "r.csv")])
    assert code == 1
    assert dropped in capsys.readouterr().err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "rsgan.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate-data", "train", "suppress", "evaluate"):
        assert cmd in res.stdout
