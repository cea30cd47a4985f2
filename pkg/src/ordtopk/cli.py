"""
Command-line entry point: ``train``, ``attack``, ``evaluate`` and ``reproduce``.

Settings are resolved from built-in defaults, then the preset (``reproduce``
only), then ``--config FILE`` (key=value lines), then ``ORDTOPK_<KEY>``
environment variables, then flags. Every flag ``--some-key`` corresponds to
the config key ``some_key``.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import fields
from pathlib import Path

from . import campaign, evaluation
from .campaign import CampaignConfig
from .config import env_overrides, load_config_file, merge

_HELP = {
    "seed": "campaign seed (target choice and sample subsample); required for attack",
    "samples": "number of correctly classified validation samples to attack",
    "methods": "comma list of cw-SxI, distill-SxI, fgsm, pgd-N, mifgsm-N",
    "strategies": "comma list of target strategies",
    "k": "number of ordered targets",
    "output": "output directory",
    "outcomes": "outcomes file (default OUTPUT/outcomes.jsonl)",
    "model": "model file (default OUTPUT/model.advm)",
    "workers": "worker processes (0 = available CPUs)",
    "fresh": "discard an existing outcomes file instead of resuming",
    "heatmaps": "write PGM heatmaps for this many successful outcomes (image data only)",
}


def _add_settings(parser):
    parser.add_argument("--config", help="key=value settings file")
    for f in fields(CampaignConfig):
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS,
                            metavar=f.name.upper(), help=_HELP.get(f.name))


def build_parser():
    parser = argparse.ArgumentParser(prog="ordtopk", description="Ordered Top-k adversarial attack campaigns")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "train the classifier and write the model file"),
        ("attack", "run an attack campaign and write JSON-lines outcomes"),
        ("evaluate", "aggregate an outcomes file into reports"),
    ]:
        _add_settings(sub.add_parser(name, help=help_text))
    rep = sub.add_parser("reproduce", help="train, attack and evaluate a named preset")
    rep.add_argument("preset", help=f"one of: {', '.join(campaign.PRESETS)}")
    _add_settings(rep)
    return parser


def resolve(args, preset=None, environ=None) -> CampaignConfig:
    flags = {f.name: getattr(args, f.name) for f in fields(CampaignConfig) if hasattr(args, f.name)}
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    return CampaignConfig.from_mapping(merge(preset, file_values, env_overrides(environ), flags))


def cmd_train(cfg: CampaignConfig, out=None):
    model, report = campaign.train_model(cfg)
    print(f"train accuracy {report['train_accuracy']:.4f}", file=out)
    print(f"validation accuracy {report['validation_accuracy']:.4f}", file=out)
    print(f"model written to {cfg.model_path}", file=out)
    return model, report


def cmd_attack(cfg: CampaignConfig, out=None):
    path = campaign.run_campaign(cfg)
    print(f"outcomes written to {path}", file=out)
    return path


def _format(v):
    if v is None:
        return evaluation.NA
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _safe_name(key):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", key)


def cmd_evaluate(cfg: CampaignConfig, out=None):
    path = cfg.outcomes_path
    reports = campaign.evaluate_outcomes(path)
    written = []
    for fmt in cfg.report_formats:
        target = path.with_name(f"report.{fmt}")
        evaluation.write_report(reports, fmt, target)
        written.append(target)
    for r in reports:
        row = r.row()
        print("  ".join(f"{k}={_format(v)}" for k, v in row.items()), file=out)
    if cfg.heatmaps:
        _write_heatmaps(path, cfg.heatmaps)
    for target in written:
        print(f"report written to {target}", file=out)
    return reports


def _write_heatmaps(path, count):
    meta_path = path.with_name(campaign.META_NAME)
    shape = None
    if meta_path.is_file():
        shape = json.loads(meta_path.read_text(encoding="utf-8")).get("image_shape")
    folder = path.with_name("heatmaps")
    folder.mkdir(exist_ok=True)
    records = [r for r in campaign.read_outcomes(path) if r["success"]][:count]
    for rec in records:
        evaluation.export_heatmap(rec["delta"], shape, folder / f"{_safe_name(rec['key'])}.pgm")


def cmd_reproduce(preset_name, args, environ=None, out=None):
    """Train the fixture model, run the preset campaign from scratch and evaluate it."""
    preset = campaign.preset_settings(preset_name)
    cfg = resolve(args, preset, environ)
    cfg.output = str(Path(cfg.output) / preset_name)
    cfg.fresh = True
    cmd_train(cfg, out)
    cmd_attack(cfg, out)
    return cmd_evaluate(cfg, out)


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "reproduce":
            cmd_reproduce(args.preset, args, environ)
            return 0
        cfg = resolve(args, environ=environ)
        {"train": cmd_train, "attack": cmd_attack, "evaluate": cmd_evaluate}[args.command](cfg)
        return 0
    except KeyboardInterrupt:
        print("interrupted; completed records are kept and the campaign can be resumed", file=sys.stderr)
        return 130
    except (ValueError, KeyError, FileNotFoundError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
