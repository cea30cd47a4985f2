import json
import struct

import numpy as np
import pytest

import oracles
from ordtopk import campaign, cli, evaluation
from ordtopk.config import env_overrides, merge, parse_config_text

SMALL = ["--samples", "6", "--methods", "cw-9x30,distill-9x30,fgsm,pgd-10"]


def run(argv, capsys=None, environ=None):
    code = cli.main(argv, environ=environ or {})
    return code


# configuration ------------------------------------------------------------


def test_parse_config_text():
    text = "# comment\n\nseed = 3\nmethods=cw-9x30, fgsm\nTrain-Batch = 16\n"
    assert parse_config_text(text) == {"seed": "3", "methods": "cw-9x30, fgsm", "train_batch": "16"}
    with pytest.raises(ValueError, match=":1: expected key=value"):
        parse_config_text("no equals sign")


def test_env_overrides_use_prefix():
    env = {"ORDTOPK_SAMPLES": "9", "ORDTOPK_TRAIN_SEED": "2", "HOME": "/root", "ORDTOPK_": "x"}
    assert env_overrides(env) == {"samples": "9", "train_seed": "2"}


def test_layer_precedence(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("samples = 7\nk = 2\nseed = 1\n")
    args = cli.build_parser().parse_args(["attack", "--config", str(cfg_file), "--seed", "5"])
    cfg = cli.resolve(args, preset={"samples": 3, "k": 4, "eps": 0.1}, environ={"ORDTOPK_K": "3"})
    assert (cfg.samples, cfg.k, cfg.seed, cfg.eps) == (7, 3, 5, 0.1)


def test_every_setting_has_a_flag():
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--train-per-class", "4", "--hidden", "8,4", "--fresh", "yes"])
    cfg = cli.resolve(args)
    assert cfg.train_per_class == 4 and cfg.hidden == (8, 4) and cfg.fresh is True


def test_unknown_setting_is_rejected():
    with pytest.raises(ValueError, match="unknown setting 'colour'"):
        campaign.CampaignConfig.from_mapping(merge({"colour": "red"}))


def test_parse_method():
    assert campaign.parse_method("cw-9x30") == ("cw", {"search_steps": 9, "iterations": 30})
    assert campaign.parse_method("distill-9x1000") == ("distill", {"search_steps": 9, "iterations": 1000})
    assert campaign.parse_method("pgd-10") == ("pgd", {"steps": 10})
    assert campaign.parse_method("fgsm") == ("fgsm", {"steps": 1})
    with pytest.raises(ValueError, match="unknown method"):
        campaign.parse_method("deepfool")


# commands -----------------------------------------------------------------


def test_unknown_preset_lists_valid_ones(tmp_path, capsys):
    assert run(["reproduce", "top7-random", "--output", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "top7-random" in err and all(name in err for name in campaign.PRESETS)


def test_attack_requires_seed(tmp_path, capsys):
    assert run(["train", "--output", str(tmp_path), "--epochs", "1"]) == 0
    assert run(["attack", "--output", str(tmp_path)]) == 1
    assert "seed is required" in capsys.readouterr().err


def test_attack_requires_model_file(tmp_path, capsys):
    assert run(["attack", "--output", str(tmp_path), "--seed", "0"]) == 1
    assert "model file not found" in capsys.readouterr().err


def test_too_many_samples(tmp_path, capsys):
    assert run(["train", "--output", str(tmp_path), "--epochs", "1"]) == 0
    assert run(["attack", "--output", str(tmp_path), "--seed", "0", "--samples", "100000"]) == 1
    assert "correctly classified" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert cli.main(["train", "--output", str(out)], environ={}) == 0
    return out


def test_train_attack_evaluate(trained, tmp_path, capsys):
    outcomes = tmp_path / "o.jsonl"
    base = ["--model", str(trained / "model.advm"), "--outcomes", str(outcomes), "--seed", "1"] + SMALL
    assert run(["attack"] + base) == 0
    records = campaign.read_outcomes(outcomes)
    assert len(records) == 4 * 6
    assert len({r["key"] for r in records}) == len(records)
    assert run(["evaluate"] + base) == 0
    assert "method=cw-9x30" in capsys.readouterr().out
    reports = evaluation.read_report(tmp_path / "report.json")
    assert {r.method for r in reports} == {"cw-9x30", "distill-9x30", "fgsm", "pgd-10"}
    assert (tmp_path / "report.csv").is_file()


def test_outcome_records_round_trip(trained, tmp_path):
    outcomes = tmp_path / "o.jsonl"
    argv = ["attack", "--model", str(trained / "model.advm"), "--outcomes", str(outcomes), "--seed", "2"] + SMALL
    assert run(argv) == 0
    for rec in campaign.read_outcomes(outcomes):
        o = campaign.record_outcome(rec)
        job = campaign.Job(rec["key"], rec["method"], rec["strategy"], rec["sample_id"], rec["gt"], o.targets)
        assert json.loads(json.dumps(campaign.outcome_record(job, o))) == rec
        assert o.gt_rank == oracles.gt_rank(o.probs, o.gt)
        assert evaluation.norms(o.delta)[2] == pytest.approx(o.linf, abs=1e-7)


def test_resume_after_interruption(trained, tmp_path):
    full, partial = tmp_path / "full.jsonl", tmp_path / "partial.jsonl"
    common = ["--model", str(trained / "model.advm"), "--seed", "3", "--attack-batch", "4"] + SMALL
    assert run(["attack", "--outcomes", str(full)] + common) == 0
    lines = full.read_bytes().splitlines(keepends=True)
    # keep ten complete records and half of the eleventh, as a crash mid-write would
    partial.write_bytes(b"".join(lines[:10]) + lines[10][: len(lines[10]) // 2])
    assert len(campaign.read_outcomes(partial)) == 10
    assert run(["attack", "--outcomes", str(partial)] + common) == 0
    assert partial.read_bytes() == full.read_bytes()
    # a completed file is left untouched by a rerun
    assert run(["attack", "--outcomes", str(partial)] + common) == 0
    assert partial.read_bytes() == full.read_bytes()


def test_malformed_middle_record_is_an_error(tmp_path):
    path = tmp_path / "o.jsonl"
    path.write_text('{"key": 1}\nnot json\n{"key": 2}\n')
    with pytest.raises(ValueError, match="line 2"):
        campaign.read_outcomes(path)


def test_worker_pool_matches_serial_run(trained, tmp_path):
    common = ["--model", str(trained / "model.advm"), "--seed", "4", "--attack-batch", "3"] + SMALL
    assert run(["attack", "--outcomes", str(tmp_path / "a.jsonl"), "--workers", "1"] + common) == 0
    assert run(["attack", "--outcomes", str(tmp_path / "b.jsonl"), "--workers", "2"] + common) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_reproduce_is_byte_identical(tmp_path):
    argv = ["--samples", "4", "--methods", "cw-9x30,distill-9x30,fgsm,pgd-10,mifgsm-10"]
    assert run(["reproduce", "gt-rank-table", "--output", str(tmp_path / "a")] + argv) == 0
    assert run(["reproduce", "gt-rank-table", "--output", str(tmp_path / "b")] + argv) == 0
    for name in ("model.advm", "outcomes.jsonl", "report.json", "report.csv", "campaign.json"):
        assert (tmp_path / "a/gt-rank-table" / name).read_bytes() == (tmp_path / "b/gt-rank-table" / name).read_bytes()


def test_gt_rank_table_preset_covers_every_method(tmp_path):
    argv = ["reproduce", "gt-rank-table", "--output", str(tmp_path), "--samples", "8",
            "--methods", "cw-9x30,cw-9x100,distill-9x30,distill-9x100,fgsm,pgd-10,mifgsm-10"]
    assert run(argv) == 0
    folder = tmp_path / "gt-rank-table"
    records = campaign.read_outcomes(folder / "outcomes.jsonl")
    reports = [r for r in evaluation.read_report(folder / "report.json") if r.case == "average"]
    assert {r.method for r in reports} == {"cw-9x30", "cw-9x100", "distill-9x30", "distill-9x100", "fgsm",
                                           "pgd-10", "mifgsm-10"}
    for r in reports:
        mine = [x for x in records if x["method"] == r.method and x["success"]]
        ranks = [oracles.gt_rank(np.array(x["probs"]), x["gt"]) for x in mine]
        assert r.gt_avg_rank == pytest.approx(np.mean(ranks))
        for m in evaluation.GT_BUCKETS:
            assert r.gt_top[m] == pytest.approx(np.mean([k <= m for k in ranks]))
    baselines = {r.strategy for r in reports if r.method in ("fgsm", "pgd-10", "mifgsm-10")}
    assert baselines == {"untargeted"}


def test_heatmaps_need_image_data(trained, tmp_path, capsys):
    outcomes = tmp_path / "o.jsonl"
    base = ["--model", str(trained / "model.advm"), "--outcomes", str(outcomes), "--seed", "1", "--samples", "2",
            "--methods", "fgsm"]
    assert run(["attack"] + base) == 0
    assert run(["evaluate", "--heatmaps", "1"] + base) == 1
    assert "2-D" in capsys.readouterr().err


def _write_idx(path_images, path_labels, images, labels):
    n, h, w = images.shape
    path_images.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes())
    path_labels.write_bytes(struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())


@pytest.mark.parametrize("architecture", ["mlp", "conv"])
def test_idx_campaign_with_heatmaps(tmp_path, architecture):
    rng = np.random.default_rng(0)
    patterns = rng.uniform(0, 255, size=(3, 6, 6))
    for split, n in (("train", 60), ("val", 30)):
        labels = np.arange(n) % 3
        images = np.clip(patterns[labels] + rng.normal(0, 20, size=(n, 6, 6)), 0, 255)
        _write_idx(tmp_path / f"{split}-img", tmp_path / f"{split}-lab", images, labels)
    data = ["--dataset", "idx", "--architecture", architecture, "--hidden", "16",
            "--train-images", str(tmp_path / "train-img"), "--train-labels", str(tmp_path / "train-lab"),
            "--val-images", str(tmp_path / "val-img"), "--val-labels", str(tmp_path / "val-lab"),
            "--output", str(tmp_path / "run"), "--learning-rate", "0.01", "--epochs", "10"]
    assert run(["train"] + data) == 0
    attack = data + ["--seed", "0", "--samples", "4", "--methods", "cw-9x30,pgd-10", "--heatmaps", "2"]
    assert run(["attack"] + attack) == 0
    assert run(["evaluate"] + attack) == 0
    maps = sorted((tmp_path / "run/heatmaps").glob("*.pgm"))
    assert len(maps) == 2
    assert evaluation.read_pgm(maps[0]).shape == (6, 6)
