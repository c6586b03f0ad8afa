import json
from pathlib import Path

import pytest
import yaml

from maskocr.ablation import REFERENCE_ACCURACY, SUITES, AblationRunner, ExperimentSpec, ToySetup, write_report
from maskocr.cli import COMMANDS, build_parser, main
from maskocr.config import ConfigError, config_hash, default_config, load_config, setup_from_config
from maskocr.finetune import EvalReport

TINY = Path(__file__).with_name("tiny_config.yaml")


def _json(x):
    return json.loads(json.dumps(x))


def test_default_config_matches_setup_defaults():
    cfg = default_config()
    setup = _json(ToySetup().to_dict())
    assert {k: v for k, v in cfg.items() if k in setup} == setup
    assert set(setup) <= set(cfg)


def test_default_config_carries_reference_hyperparameters():
    cfg = default_config()
    assert cfg["mim"]["lam"] == 0.05 and cfg["mim"]["mask_ratio"] == 0.45
    assert cfg["char_mask_ratio"] == 0.15 and cfg["model"]["drop_path_rate"] == 0.1
    assert all(cfg[s]["weight_decay"] == 0.05 for s in ("visual_stage", "language_stage", "finetune_stage"))


def test_load_config_layers_and_rejects_unknown(tmp_path):
    cfg = load_config(TINY, {"mim": {"lam": 0.1}})
    assert cfg["canvas"] == [1, 8, 32] and cfg["mim"]["lam"] == 0.1 and cfg["mim"]["mask_ratio"] == 0.45
    with pytest.raises(ConfigError):
        load_config(overrides={"mim": {"lambda": 1}})
    with pytest.raises(ConfigError):
        load_config(overrides={"nope": 1})
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_setup_from_config_and_hash():
    cfg = load_config(TINY)
    s = setup_from_config(cfg)
    assert s.canvas == (1, 8, 32) and s.model_config().vocab_size == 9
    assert config_hash(cfg) == config_hash(load_config(TINY))
    assert config_hash(cfg) != config_hash(default_config())


def test_experiment_spec_validation():
    ExperimentSpec(["pretrain_visual", "pretrain_language", "finetune"])
    with pytest.raises(ValueError):
        ExperimentSpec(["pretrain_language", "finetune"])
    ExperimentSpec(["pretrain_language", "finetune"], overrides={"allow_language_only": True})
    with pytest.raises(ValueError):
        ExperimentSpec(["pretrain_everything"])


def test_suites_and_rows():
    r = AblationRunner(ToySetup())
    assert set(SUITES) == set(REFERENCE_ACCURACY)
    assert r.rows("vl_table") == ["Scratch", "V", "L", "V+L"]
    assert r.rows("patch_size") == ["16x4", "16x8"]
    with pytest.raises(ValueError):
        r.run("no_such_suite")


def test_write_report(tmp_path):
    res = {"Scratch": EvalReport(0.5, 10, per_seed=[0.4, 0.6], mean=0.5, std=0.1),
           "V": EvalReport(0.7, 10, per_seed=[0.7, 0.7], mean=0.7, std=0.0)}
    path = write_report(tmp_path, "vl_table", res, ToySetup(), [0, 1])
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert recs[0]["record"] == "spec" and recs[0]["seeds"] == [0, 1]
    assert [r["row"] for r in recs[1:]] == ["Scratch", "V"]
    assert recs[1]["reference"] == 75.8
    assert "Scratch" in (tmp_path / "vl_table_summary.txt").read_text()
    assert (tmp_path / "vl_table.png").exists()


def test_parser_has_every_command():
    p = build_parser()
    names = set(p._subparsers._group_actions[0].choices)
    assert names == set(COMMANDS) == {"synthesize", "pretrain-encoder", "pretrain-decoder", "finetune", "probe",
                                      "eval", "ablate", "reconstruct-dump"}
    for cmd in names:
        extra = ["--ckpt", "x"] if cmd in ("probe", "eval", "reconstruct-dump") else []
        a = p.parse_args([cmd, "--config", "c.yaml", "--seed", "3", "--out", "o", "--device", "cpu", *extra])
        assert (a.config, a.seed, a.out, a.device) == ("c.yaml", 3, "o", "cpu")


def test_cli_rejects_other_devices(tmp_path, capsys):
    assert main(["synthesize", "--device", "cuda:0", "--out", str(tmp_path)]) == 2


def test_cli_reports_errors(tmp_path, capsys):
    assert main(["eval", "--config", str(TINY), "--ckpt", str(tmp_path / "missing.pt"), "--out", str(tmp_path)]) == 1
    assert "maskocr eval" in capsys.readouterr().err


def _run(*args):
    assert main([*args]) == 0


def test_cli_pipeline_round_trip(tmp_path):
    c = ["--config", str(TINY), "--seed", "1"]
    syn, enc, dec, fin, prb, ev, rec = (tmp_path / d for d in ("syn", "enc", "dec", "fin", "prb", "ev", "rec"))
    _run("synthesize", *c, "--out", str(syn), "--style", "real", "--n", "40")
    manifest = syn / "manifest.jsonl"
    assert len(manifest.read_text().splitlines()) == 40 and (syn / "vocab.txt").exists()
    _run("pretrain-encoder", *c, "--out", str(enc))
    _run("pretrain-decoder", *c, "--out", str(dec), "--encoder", str(enc / "encoder.pt"))
    m = json.loads((dec / "metrics.json").read_text())
    assert m["encoder_hash"] and 0.0 <= m["masked_char_accuracy"] <= 1.0
    _run("finetune", *c, "--out", str(fin), "--init", str(dec / "decoder.pt"), "--data", str(manifest),
         "--split", "train", "--val", str(manifest))
    _run("probe", *c, "--out", str(prb), "--ckpt", str(dec / "decoder.pt"))
    _run("eval", *c, "--out", str(ev), "--ckpt", str(fin / "finetune.pt"), "--data", str(manifest),
         "--split", "test")
    m = json.loads((ev / "metrics.json").read_text())
    assert m["command"] == "eval" and 0.0 <= m["accuracy"] <= 1.0 and m["count"] == 4
    _run("reconstruct-dump", *c, "--out", str(rec), "--ckpt", str(enc / "encoder.pt"), "--n", "4")
    assert (rec / "triptych.png").exists()
    assert yaml.safe_load((rec / "config.yaml").read_text())["canvas"] == [1, 8, 32]
    # a checkpoint without the pretraining heads cannot be dumped
    assert main(["reconstruct-dump", *c, "--out", str(rec), "--ckpt", str(fin / "finetune.pt")]) == 1
