import csv
import json

import pytest
import torch

from gaitssl.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
)
from gaitssl.cli import main
from gaitssl.config import DEFAULTS, encoder_config, parse_flags, resolve_config, train_config
from gaitssl.errors import ConfigError, DataError
from gaitssl.synth import generate_cohort, write_cohort
from gaitssl.training import build_model, fit, make_optimizer
from conftest import SMALL_SPEC

TINY_FLAGS = ["--model.embed_dim", "8", "--model.depth", "1", "--model.heads", "2",
              "--model.dropout", "0.0", "--train.max_epochs", "2", "--data.past_len", "20",
              "--data.future_len", "20", "--sampler.subjects_per_batch", "2",
              "--sampler.windows_per_subject", "2", "--probe.max_epochs", "10"]


def test_defaults():
    run = resolve_config()
    assert run.get("train.learning_rate") == 1e-4
    assert run.get("model.embed_dim") == 128 and run.get("model.depth") == 8
    assert set(run.provenance.values()) == {"default"}


def test_layering_and_provenance(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lc": {"mask_ratio": 0.8}, "model": {"depth": 3}}))
    run = resolve_config(cfg, {"lc.mask_ratio": 0.5})
    assert run.get("lc.mask_ratio") == 0.5 and run.provenance["lc.mask_ratio"] == "flag"
    assert run.get("model.depth") == 3 and run.provenance["model.depth"] == "file"
    assert run.provenance["model.heads"] == "default"


def test_round_trip_is_identical():
    run = resolve_config(None, {"model.depth": 2, "data.target_channels": ["grf"]})
    again = resolve_config(json.loads(run.to_json()))
    assert again.values == run.values and again.hash() == run.hash()


@pytest.mark.parametrize("flags", [
    {"model.depht": 2},
    {"model.depth": "two"},
    {"model.depth": 2.5},
    {"train.augment": 1},
    {"sampler.windows_per_subject": 0},
    {"model.heads": 3},
    {"uicd.support_selection": "far"},
    {"lc.mask_ratio": 1.5},
])
def test_invalid_configs(flags):
    with pytest.raises(ConfigError):
        resolve_config(None, flags)


def test_parse_flags():
    assert parse_flags(["--lc.mask_ratio", "0.5", "--model.positional=learned",
                        "--data.target_channels", '["grf"]']) == {
        "lc.mask_ratio": 0.5, "model.positional": "learned", "data.target_channels": ["grf"]}
    with pytest.raises(ConfigError):
        parse_flags(["--model.depth"])
    with pytest.raises(ConfigError):
        parse_flags(["stray"])


def test_defaults_not_mutated():
    resolve_config(None, {"model.depth": 1})
    assert DEFAULTS["model"]["depth"] == 8


def test_checkpoint_round_trip_bit_exact(small_prepared, tmp_path):
    run = resolve_config(None, {"model.embed_dim": 8, "model.depth": 1, "model.heads": 2,
                                "train.max_epochs": 1, "data.past_len": 20,
                                "data.future_len": 20, "sampler.subjects_per_batch": 2,
                                "sampler.windows_per_subject": 2})
    model = build_model(encoder_config(run, len(small_prepared.input_channels)), 0)
    res = fit(model, small_prepared.splits["train"], small_prepared.splits["validation"],
              train_config(run), small_prepared.input_channels, extras={"note": [1, 2]})
    blob = encode_checkpoint(res.last)
    back = decode_checkpoint(blob)
    assert encode_checkpoint(back) == blob
    for k, v in res.last.model_state.items():
        assert torch.equal(back.model_state[k], v)
    assert back.extras == {"note": [1, 2]} and back.epoch == res.last.epoch
    fresh = back.build_model()
    opt = make_optimizer(fresh, train_config(run))
    opt.load_state_dict(back.optimizer_state)
    assert parameter_hash(fresh) == parameter_hash(res.last.build_model())
    save_checkpoint(back, tmp_path / "x.ckpt")
    assert (tmp_path / "x.ckpt").read_bytes() == blob


def test_bad_checkpoint(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    return write_cohort(generate_cohort(SMALL_SPEC), tmp_path_factory.mktemp("cohort"))


@pytest.fixture(scope="module")
def pretrained(cohort_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["pretrain", "--data", str(cohort_dir), "--out", str(out), *TINY_FLAGS]) == 0
    return out


def test_cli_pretrain_outputs(pretrained):
    for name in ("train_log.csv", "best.ckpt", "last.ckpt", "manifest.json"):
        assert (pretrained / name).exists()
    manifest = json.loads((pretrained / "manifest.json").read_text())
    assert manifest["config"]["model"]["embed_dim"] == 8
    assert manifest["provenance"]["model.embed_dim"] == "flag"
    assert manifest["config_hash"] == resolve_config(manifest["config"]).hash()
    with open(pretrained / "train_log.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 and {"epoch", "lc", "tc", "uicd", "joint", "lr", "grad_norm"} <= set(rows[0])


def test_cli_eval_probe_reconstruct(pretrained, cohort_dir, tmp_path, capsys):
    ckpt = str(pretrained / "best.ckpt")
    assert main(["eval-pretext", "--ckpt", ckpt, "--data", str(cohort_dir), "--objective", "tc",
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "pretext_tc.json").read_text())
    assert rep["metrics"]["r2"] is not None
    assert main(["probe", "--ckpt", ckpt, "--data", str(cohort_dir), "--task", "label",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "probe_label_predictions.csv").exists()
    assert main(["probe", "--ckpt", ckpt, "--data", str(cohort_dir), "--task", "grf"]) == 0
    out = tmp_path / "rec.csv"
    assert main(["reconstruct", "--ckpt", ckpt, "--data", str(cohort_dir), "--window",
                 "S000:T0:0", "--out", str(out)]) == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["time", "feature", "truth", "prediction", "masked"]
    assert len(rows) == 40 * 7


def test_cli_exit_codes(pretrained, cohort_dir, tmp_path):
    data = str(cohort_dir)
    assert main(["pretrain", "--data", data, "--out", str(tmp_path),
                 "--sampler.windows_per_subject", "0"]) == 2
    assert main(["pretrain", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3
    assert main(["probe", "--ckpt", str(tmp_path / "none.ckpt"), "--data", data,
                 "--task", "label"]) == 3
    assert main(["probe", "--ckpt", str(pretrained / "best.ckpt"), "--data", data,
                 "--task", "c0"]) == 2
    assert main(["reconstruct", "--ckpt", str(pretrained / "best.ckpt"), "--data", data,
                 "--window", "nope"]) == 3


def test_cli_generate_data(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_subjects": 6, "validation_subjects": 2,
                                "test_subjects": 2, "trial_length": [120, 150]}))
    assert main(["generate-data", "--spec", str(spec), "--out", str(tmp_path / "d"),
                 "--seed", "4"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["subjects"] == 6
    assert (tmp_path / "d" / "metadata.csv").exists() and (tmp_path / "d" / "split.json").exists()
    spec.write_text(json.dumps({"bogus": 1}))
    assert main(["generate-data", "--spec", str(spec), "--out", str(tmp_path / "e")]) == 2
