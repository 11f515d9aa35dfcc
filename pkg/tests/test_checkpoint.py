import numpy as np
import pytest

from csmixer.checkpoint import (Checkpoint, CheckpointError, check_compatible, decode, encode,
                                from_model, load_checkpoint, load_into, save_checkpoint)
from csmixer.config import tiny_config
from csmixer.data import synth_dataset
from csmixer.model import CSMixer
from csmixer.training import Recipe, read_metrics, train


def make_ckpt(seed=0):
    model = CSMixer(tiny_config(), seed)
    ck = from_model(model, epoch=3, note="x")
    ck.ema = {k: v * 0.5 for k, v in ck.params.items()}
    return model, ck


def test_round_trip_bit_exact(tmp_path):
    model, ck = make_ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == model.config and back.epoch == 3 and back.header["note"] == "x"
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.tobytes()
        assert back.ema[k].tobytes() == ck.ema[k].tobytes()
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_load_into_restores_params():
    model, ck = make_ckpt(0)
    other = CSMixer(tiny_config(), 9)
    load_into(other, decode(encode(ck)))
    for k in model.params:
        assert np.array_equal(other.params[k].data, model.params[k].data)


def test_format_errors():
    _, ck = make_ckpt()
    data = encode(ck)
    with pytest.raises(CheckpointError, match="bad magic"):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="byte offset"):
        decode(data[:-50])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(data + b"\0")
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint("/nonexistent/x.ckpt")


def test_duplicate_names_rejected():
    ck = Checkpoint(tiny_config(), {"a": np.zeros(2)})
    data = encode(ck)
    # rewrite the table so it lists the same record twice
    rec_start = data.index(b"\x01\x00a")
    rec = data[rec_start:-4]
    table_count = data.rindex((1).to_bytes(4, "little"), 0, rec_start)
    dup = data[:table_count] + (2).to_bytes(4, "little") + rec + rec + b"END!"
    with pytest.raises(CheckpointError, match="duplicate"):
        decode(dup)


def test_wrong_config_names_parameter():
    _, ck = make_ckpt()
    other = CSMixer(tiny_config(base_dim=16), 0)
    with pytest.raises(CheckpointError, match=r"embed\.conv4\.weight"):
        load_into(other, ck)
    with pytest.raises(CheckpointError, match="lacks"):
        check_compatible({}, {"w": (2,)})


def run(out, epochs=4, **kw):
    cfg = tiny_config()
    tr = synth_dataset(64, 4, (32, 32), seed=0)
    va = synth_dataset(32, 4, (32, 32), seed=1)
    rng = np.random.default_rng(11)
    model = CSMixer(cfg, rng)
    recipe = Recipe(epochs=epochs, batch_size=32, warmup_epochs=1)
    return train(model, tr, va, recipe, rng, out, **kw)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = run(tmp_path / "full")
    run(tmp_path / "cut", stop_after=2)
    assert not (tmp_path / "cut" / "final.ckpt").exists()
    assert load_checkpoint(tmp_path / "cut" / "last.ckpt").epoch == 2
    resumed = run(tmp_path / "cut", resume=True)
    assert resumed.metrics == full.metrics
    assert read_metrics(tmp_path / "cut" / "metrics.csv") == full.metrics
    for f in ("metrics.csv", "final.ckpt", "last.ckpt"):
        assert (tmp_path / "cut" / f).read_bytes() == (tmp_path / "full" / f).read_bytes()
