import json

import numpy as np
import pytest

from csmixer import _kernels
from csmixer.checkpoint import load_checkpoint
from csmixer.cli import main
from csmixer.data import ImageDataset, save_cifar10, synth_dataset
from csmixer.training import read_metrics

FAST = ["--epochs", "2", "--train-samples", "64", "--val-samples", "32", "--batch", "32"]


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["describe"]) == 1
    assert main(["describe", "--variant", "Q"]) == 1
    assert main(["describe", "--variant", "T", "--set", "bogus=1"]) == 1
    assert main(["train"]) == 1
    assert main(["eval"]) == 1


def test_describe_variant_passes(capsys, tmp_path):
    assert main(["describe", "--variant", "T", "--csv", str(tmp_path / "t.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "published T" in out and "PASS" in out and "FAIL" not in out
    assert (tmp_path / "t.csv").read_text().startswith("layer,path,params,macs")
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["variant"] == "T" and man["model"]["base_dim"] == 64


def test_describe_all_prints_four_rows(capsys):
    assert main(["describe", "--all"]) == 0
    out = capsys.readouterr().out
    rows = [l for l in out.splitlines() if l.split()[:1] in (["T"], ["S"], ["B"], ["L"])]
    assert len(rows) == 4 and all(r.endswith("PASS") for r in rows)


def test_describe_non_canonical(capsys):
    assert main(["describe", "--variant", "T", "--set", "g=2"]) == 0
    out = capsys.readouterr().out
    assert "no published comparison" in out and "PASS" not in out


def test_describe_config_file(tmp_path, capsys):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("# tiny model\nvariant = tiny\nC = 16\ndepths = 2,2,2,2\n")
    assert main(["describe", "--config", str(cfg)]) == 0
    assert "non-canonical" in capsys.readouterr().out


def test_gradcheck_pass_and_reproducible(capsys):
    assert main(["gradcheck", "--seed", "3", "--samples", "40"]) == 0
    first = capsys.readouterr().out
    assert first.strip().endswith("PASS")
    assert main(["gradcheck", "--seed", "3", "--samples", "40"]) == 0
    assert capsys.readouterr().out == first


def test_gradcheck_catches_corrupted_backward(monkeypatch, capsys):
    real = _kernels.active
    broken = type(real)(**vars(real))
    broken.gelu_grad = lambda x, g: real.gelu_grad(x, g) * 1.01
    monkeypatch.setattr(_kernels, "active", broken)
    assert main(["gradcheck", "--samples", "60"]) == 4
    assert capsys.readouterr().out.strip().endswith("FAIL")


def test_gradcheck_refuses_large_configs(capsys):
    assert main(["gradcheck", "--variant", "T"]) == 1


def test_train_eval_export_round_trip(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--seed", "1", *FAST]) == 0
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 1 and man["data"]["train_samples"] == 64
    assert (out / "grids" / "manifest.json").exists()
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(out / "final.ckpt")]) == 0
    acc = float(capsys.readouterr().out.split()[1])
    assert acc == rows[-1]["val_acc"]
    assert main(["eval", "--checkpoint", str(out / "final.ckpt"), "--ema"]) == 0
    ema_acc = float(capsys.readouterr().out.split()[1])
    assert ema_acc == rows[-1]["ema_val_acc"]

    grids = tmp_path / "grids"
    assert main(["export-weights", "--checkpoint", str(out / "final.ckpt"),
                 "--out", str(grids)]) == 0
    assert len(list(grids.glob("*.csv"))) == 4
    assert "no GA layer" in capsys.readouterr().out


def test_eval_ema_with_zero_decay_equals_raw(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--set", "ema_decay=0", *FAST]) == 0
    ck = load_checkpoint(out / "final.ckpt")
    for k in ck.params:
        assert np.array_equal(ck.params[k], ck.ema[k])
    capsys.readouterr()
    main(["eval", "--checkpoint", str(out / "final.ckpt")])
    raw = capsys.readouterr().out.split()[1]
    main(["eval", "--checkpoint", str(out / "final.ckpt"), "--ema"])
    assert capsys.readouterr().out.split()[1] == raw


def test_eval_errors(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *FAST]) == 0
    assert main(["eval", "--checkpoint", str(out / "final.ckpt"), "--dataset", "synth",
                 "--val-samples", "0"]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"CSMX\x01\x00")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt")]) == 2


def test_train_resume_via_cli(tmp_path):
    full, cut = tmp_path / "full", tmp_path / "cut"
    args = ["--epochs", "3", "--train-samples", "64", "--val-samples", "32", "--batch", "32"]
    assert main(["train", "--out", str(full), *args]) == 0
    assert main(["train", "--out", str(cut), "--stop-after", "1", *args]) == 0
    assert main(["train", "--out", str(cut), "--resume", *args]) == 0
    for f in ("metrics.csv", "final.ckpt"):
        assert (full / f).read_bytes() == (cut / f).read_bytes()


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CSMX_SEED", "5")
    assert main(["describe", "--variant", "tiny", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 5


def test_cifar_path_with_local_batches(tmp_path, capsys):
    d = tmp_path / "cifar"
    d.mkdir()
    syn = synth_dataset(96, 10, (32, 32), seed=0)
    save_cifar10(syn.subset(np.arange(64)), d / "data_batch_1.bin")
    save_cifar10(syn.subset(np.arange(64, 96)), d / "test_batch.bin")
    out = tmp_path / "run"
    assert main(["train", "--variant", "cifar", "--set", "C=16", "--dataset", "cifar10",
                 "--data-path", str(d), "--epochs", "1", "--batch", "32", "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "final.ckpt")]) == 0
    acc = float(capsys.readouterr().out.split()[1])
    assert acc == read_metrics(out / "metrics.csv")[-1]["val_acc"]
    assert main(["train", "--dataset", "cifar10", "--out", str(tmp_path / "x")]) == 1
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "data_batch_1.bin").write_bytes(b"\0" * 100)
    (bad / "test_batch.bin").write_bytes(b"\0" * 3073)
    assert main(["train", "--dataset", "cifar10", "--data-path", str(bad), "--variant", "cifar",
                 "--out", str(tmp_path / "y")]) == 2
