"""
Campaign driver: builds the fixture data and model, expands (method x sample
x target) attacks, runs them in batches on a worker pool and streams the
outcomes to a JSON-lines file that can be resumed after an interruption.
"""

from __future__ import annotations

import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import attacks, classifier, evaluation, losses, semantics
from .config import normalize_key

log = logging.getLogger(__name__)

OPTIMIZER_FAMILIES = {"cw": "cw-topk", "distill": "distill"}
BASELINES = {"fgsm": attacks.fgsm, "pgd": attacks.pgd, "mifgsm": attacks.mifgsm}
_METHOD_RE = re.compile(r"^(?:(cw|distill)-(\d+)x(\d+)|(fgsm)|(pgd|mifgsm)-(\d+))$")
UNTARGETED = "untargeted"

OUTCOMES_NAME = "outcomes.jsonl"
META_NAME = "campaign.json"
MODEL_NAME = "model.advm"
# settings that name files; left out of config snapshots so reports do not depend on where a run lives
PATH_KEYS = ("model", "output", "outcomes", "embeddings", "train_images", "train_labels", "val_images", "val_labels")


def parse_method(tag):
    """
    Split a method tag into its family and parameters, e.g. ``cw-9x30`` ->
    ("cw", {"search_steps": 9, "iterations": 30}), ``pgd-10`` -> ("pgd",
    {"steps": 10}), ``fgsm`` -> ("fgsm", {"steps": 1}).
    """
    m = _METHOD_RE.match(tag)
    if not m:
        raise ValueError(f"unknown method {tag!r}; expected cw-SxI, distill-SxI, fgsm, pgd-N or mifgsm-N")
    if m.group(1):
        return m.group(1), {"search_steps": int(m.group(2)), "iterations": int(m.group(3))}
    if m.group(4):
        return "fgsm", {"steps": 1}
    return m.group(5), {"steps": int(m.group(6))}


def _str_tuple(value):
    if isinstance(value, str):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return tuple(str(v) for v in value)


def _int_tuple(value):
    return tuple(int(v) for v in _str_tuple(value))


def _bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _optional(cast):
    def convert(value):
        return None if value in (None, "", "none", "None") else cast(value)
    return convert


@dataclass
class CampaignConfig:
    # data
    dataset: str = "synthetic"
    classes: int = 20
    dimension: int = 64
    train_per_class: int = 100
    val_per_class: int = 30
    data_seed: int = 7
    spread: float = 0.055
    noise: float = 0.07
    prototype_weight: float = 0.5
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    labels: tuple = ()
    embeddings: str = ""
    # model
    model: str = ""
    architecture: str = "mlp"
    hidden: tuple = (128,)
    conv_channels: int = 4
    epochs: int = 30
    train_batch: int = 32
    learning_rate: float = 0.05
    train_seed: int = 0
    # attacks
    seed: int | None = None
    samples: int = 200
    methods: tuple = ("cw-9x30",)
    strategies: tuple = ("random",)
    k: int = 1
    fgsm_mode: str = "targeted"
    eps: float = 0.063
    momentum: float = 1.0
    fgsm_step_size: float | None = None
    initial_lambda: float = 1e-3
    lambda_upper: float = 1e10
    step_size: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    adv_z: float = losses.DEFAULT_Z
    adv_gamma: float = losses.DEFAULT_GAMMA
    adv_alpha: float = losses.DEFAULT_ALPHA
    adv_eps_floor: float = losses.DEFAULT_EPS_FLOOR
    # execution
    output: str = "runs"
    outcomes: str = ""
    workers: int = 0
    attack_batch: int = 200
    fresh: bool = False
    report_formats: tuple = ("json", "csv")
    heatmaps: int = 0

    @classmethod
    def from_mapping(cls, values: dict) -> "CampaignConfig":
        known = {f.name for f in fields(cls)}
        cfg = cls()
        for key, raw in values.items():
            key = normalize_key(key)
            if key not in known:
                raise ValueError(f"unknown setting {key!r}")
            setattr(cfg, key, _CONVERTERS.get(key, type(getattr(cfg, key)))(raw))
        return cfg

    def snapshot(self) -> dict:
        """Settings that determine results, as JSON-ready values."""
        out = {}
        for f in fields(self):
            if f.name in PATH_KEYS or f.name in _EXECUTION_KEYS:
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @property
    def model_path(self) -> Path:
        return Path(self.model) if self.model else Path(self.output) / MODEL_NAME

    @property
    def outcomes_path(self) -> Path:
        return Path(self.outcomes) if self.outcomes else Path(self.output) / OUTCOMES_NAME

    def optimizer(self, params) -> attacks.OptimizerConfig:
        return attacks.OptimizerConfig(
            initial_lambda=self.initial_lambda, lambda_upper=self.lambda_upper, step_size=self.step_size,
            beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps, **params,
        ).validate()

    def budget(self, params) -> attacks.BudgetConfig:
        return attacks.BudgetConfig(eps=self.eps, momentum=self.momentum, step_size=self.fgsm_step_size,
                                    mode=self.fgsm_mode, **params).validate()

    def validate(self, attacking=False):
        if self.dataset not in ("synthetic", "idx"):
            raise ValueError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.architecture not in ("mlp", "conv"):
            raise ValueError(f"architecture must be 'mlp' or 'conv', got {self.architecture!r}")
        if self.dataset == "idx":
            needed = ("val_images", "val_labels") if attacking else ("train_images", "train_labels", "val_images", "val_labels")
            for key in needed:
                path = getattr(self, key)
                if not path:
                    raise ValueError(f"IDX datasets need {key}")
                if not Path(path).is_file():
                    raise FileNotFoundError(f"{key}: no such file {path}")
        if self.embeddings and not Path(self.embeddings).is_file():
            raise FileNotFoundError(f"embeddings: no such file {self.embeddings}")
        if not attacking:
            return self
        if self.seed is None:
            raise ValueError("a seed is required for attack campaigns")
        if not self.model_path.is_file():
            raise FileNotFoundError(f"model file not found: {self.model_path}")
        if not self.methods:
            raise ValueError("no methods configured")
        for m in self.methods:
            parse_method(m)
        for s in self.strategies:
            if s not in semantics.STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; choose from {', '.join(semantics.STRATEGIES)}")
        if self.fgsm_mode not in attacks.FGSM_MODES:
            raise ValueError(f"fgsm_mode must be one of {attacks.FGSM_MODES}")
        if self.samples < 1 or self.attack_batch < 1:
            raise ValueError("samples and attack_batch must be positive")
        return self


_EXECUTION_KEYS = ("workers", "attack_batch", "fresh", "report_formats", "heatmaps")
_CONVERTERS = {
    "fresh": _bool,
    "report_formats": _str_tuple,
    "labels": _str_tuple,
    "methods": _str_tuple,
    "strategies": _str_tuple,
    "hidden": _int_tuple,
    "seed": _optional(int),
    "fgsm_step_size": _optional(float),
}

PRESET_SEED = 0
TOP1_METHODS = ("fgsm", "pgd-10", "mifgsm-10", "cw-9x30", "distill-9x30", "cw-9x1000", "distill-9x1000")
TOPK_METHODS = ("cw-9x30", "distill-9x30", "cw-9x1000", "distill-9x1000")

PRESETS = {
    "top1-random": {"methods": TOP1_METHODS, "strategies": ("random", "exhaustive-top1"), "k": 1, "samples": 20},
    "top1-mostlike": {"methods": TOP1_METHODS, "strategies": ("most-like",), "k": 1, "samples": 200},
    "top1-leastlike": {"methods": TOP1_METHODS, "strategies": ("least-like",), "k": 1, "samples": 200},
    "top5-random": {"methods": TOPK_METHODS, "strategies": ("random",), "k": 5, "samples": 100},
    "top5-mostlike": {"methods": TOPK_METHODS, "strategies": ("most-like",), "k": 5, "samples": 100},
    "top5-leastlike": {"methods": TOPK_METHODS, "strategies": ("least-like",), "k": 5, "samples": 100},
    "top5-cleanscore": {"methods": TOPK_METHODS, "strategies": ("highest-clean", "lowest-clean"), "k": 5,
                        "samples": 100},
    "gt-rank-table": {"methods": ("cw-9x30", "cw-9x1000", "distill-9x30", "distill-9x1000", "fgsm", "pgd-10",
                                  "mifgsm-10"),
                      "strategies": ("random",), "k": 1, "fgsm_mode": UNTARGETED, "samples": 200},
}


def preset_settings(name) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    return {"seed": PRESET_SEED, **PRESETS[name]}


# data and model -----------------------------------------------------------


def embedding_table(cfg: CampaignConfig):
    return semantics.load_embeddings(cfg.embeddings) if cfg.embeddings else semantics.bundled_embeddings()


def synthetic_labels(cfg: CampaignConfig, table) -> list:
    if cfg.labels:
        if len(cfg.labels) != cfg.classes:
            raise ValueError(f"{len(cfg.labels)} label names for {cfg.classes} classes")
        return list(cfg.labels)
    if cfg.classes <= len(table):
        return table.labels[: cfg.classes]
    return [f"class{i}" for i in range(cfg.classes)]


def load_split(cfg: CampaignConfig, split, table=None):
    """(dataset, label names) for ``train`` or ``validation``."""
    if cfg.dataset == "idx":
        images, labels = (cfg.train_images, cfg.train_labels) if split == "train" else (cfg.val_images, cfg.val_labels)
        data = classifier.load_idx(images, labels, split)
        names = list(cfg.labels) if cfg.labels else [str(i) for i in range(int(data.labels.max()) + 1)]
        return data, names
    table = table if table is not None else embedding_table(cfg)
    names = synthetic_labels(cfg, table)
    protos = np.stack([table[n] for n in names]) if all(n in table for n in names) else None
    per_class = cfg.train_per_class if split == "train" else cfg.val_per_class
    data = classifier.generate_synthetic(cfg.classes, per_class, cfg.dimension, cfg.data_seed, split,
                                         cfg.spread, cfg.noise, protos)
    return data, names


def architecture(cfg: CampaignConfig, data, n_classes):
    if cfg.architecture == "mlp":
        return classifier.mlp_architecture(data.dimension, cfg.hidden, n_classes), (data.dimension,)
    if data.image_shape is None or len(data.image_shape) != 2:
        raise ValueError("the conv architecture needs 2-D image data")
    h, w = data.image_shape
    c = cfg.conv_channels
    layers = [classifier.Layer("conv2d-3x3", (1, c)), classifier.Layer("relu"), classifier.Layer("flatten"),
              classifier.Layer("affine", (c * h * w, n_classes))]
    return layers, (1, h, w)


def train_model(cfg: CampaignConfig):
    """Train on the configured data and write the model file; returns (model, report)."""
    cfg.validate()
    table = embedding_table(cfg) if cfg.dataset == "synthetic" else None
    train, names = load_split(cfg, "train", table)
    val, _ = load_split(cfg, "validation", table)
    layers, input_shape = architecture(cfg, train, len(names))
    tc = classifier.TrainingConfig(epochs=cfg.epochs, batch_size=cfg.train_batch, learning_rate=cfg.learning_rate,
                                   seed=cfg.train_seed)
    model, report = classifier.train(train, layers, tc, names, input_shape=input_shape, validation=val)
    cfg.model_path.parent.mkdir(parents=True, exist_ok=True)
    classifier.save_model(model, cfg.model_path)
    return model, report


# outcome records ----------------------------------------------------------


@dataclass(frozen=True)
class Job:
    key: str
    method: str
    strategy: str
    sample_id: int
    gt: int
    spec: semantics.TargetSpec | None


def job_key(method, strategy, sample_id, spec):
    targets = "-".join(str(t) for t in spec.targets) if spec is not None else "none"
    return f"{method}|{strategy}|{sample_id}|{targets}"


def outcome_record(job: Job, o: attacks.AttackOutcome) -> dict:
    return {
        "key": job.key,
        "method": job.method,
        "strategy": job.strategy,
        "sample_id": job.sample_id,
        "gt": int(o.gt),
        "targets": list(job.spec.targets) if job.spec is not None else None,
        "success": bool(o.success),
        "l1": o.l1,
        "l2": o.l2,
        "linf": o.linf,
        "gt_rank": int(o.gt_rank),
        "final_lambda": o.final_lambda,
        "iterations": int(o.iterations),
        "lambda_trace": o.lambda_trace,
        "probs": np.asarray(o.probs, dtype=np.float32).tolist(),
        "delta": np.asarray(o.delta, dtype=np.float32).tolist(),
    }


def record_outcome(rec: dict) -> attacks.AttackOutcome:
    """Rebuild an outcome from a record; ``x_adv`` is not stored and comes back as ``None``."""
    spec = None
    if rec["targets"] is not None:
        spec = semantics.TargetSpec(tuple(rec["targets"]), rec["gt"], rec["strategy"])
    return attacks.AttackOutcome(
        method=rec["method"], gt=rec["gt"], targets=spec, delta=np.asarray(rec["delta"], dtype=np.float32),
        x_adv=None, success=rec["success"], l1=rec["l1"], l2=rec["l2"], linf=rec["linf"],
        probs=np.asarray(rec["probs"], dtype=np.float32), gt_rank=rec["gt_rank"],
        final_lambda=rec["final_lambda"], iterations=rec["iterations"], lambda_trace=rec["lambda_trace"],
        strategy=rec["strategy"], sample_id=rec["sample_id"],
    )


def _dump(rec) -> str:
    return json.dumps(rec, separators=(",", ":")) + "\n"


def read_outcomes(path, repair=False) -> list:
    """
    Records of a JSON-lines outcomes file. An incomplete final line (left by
    an interrupted write) is ignored, and cut off when ``repair`` is set; a
    malformed line elsewhere is an error.
    """
    path = Path(path)
    if not path.exists():
        return []
    raw = path.read_bytes()
    lines = raw.split(b"\n")
    records, good_bytes = [], 0
    for i, line in enumerate(lines):
        last = i == len(lines) - 1
        if not line:
            good_bytes += 0 if last else 1
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            if last:
                break
            raise ValueError(f"{path}: malformed record on line {i + 1}") from None
        if last:
            # parsed, but the newline terminator never made it to disk
            break
        records.append(rec)
        good_bytes += len(line) + 1
    else:
        good_bytes = len(raw)
    if repair and good_bytes < len(raw):
        log.warning("%s: dropping incomplete trailing record", path)
        with open(path, "r+b") as fh:
            fh.truncate(good_bytes)
    return records


def load_outcomes(path) -> list:
    return [record_outcome(r) for r in read_outcomes(path)]


# planning -----------------------------------------------------------------


def select_samples(cfg: CampaignConfig, model, data) -> list:
    """Seeded subsample of correctly classified samples, in ascending id order."""
    correct = classifier.correctly_classified(model, data)
    if cfg.samples > len(correct):
        raise ValueError(f"{cfg.samples} samples requested but only {len(correct)} are correctly classified")
    rng = np.random.default_rng([cfg.seed, 0])
    return sorted(int(i) for i in rng.choice(correct, size=cfg.samples, replace=False))


def plan_jobs(cfg: CampaignConfig, model, data, sample_ids, table=None) -> list:
    """Every (method, strategy, sample, target) attack, in a fixed order."""
    if cfg.k >= model.n_classes:
        raise ValueError(f"k={cfg.k} must be smaller than the label count {model.n_classes}")
    probs = model.predict(data.features[sample_ids]) if sample_ids else None
    jobs = []
    for method in cfg.methods:
        family, _ = parse_method(method)
        untargeted = family in BASELINES and cfg.fgsm_mode == UNTARGETED
        for strategy in (UNTARGETED,) if untargeted else cfg.strategies:
            for row, sid in enumerate(sample_ids):
                gt = int(data.labels[sid])
                if untargeted:
                    specs = [None]
                else:
                    chosen = semantics.select_targets(
                        strategy, cfg.k, gt, model.n_classes, label_names=model.label_names, table=table,
                        clean_probs=probs[row], seed=[cfg.seed, sid],
                    )
                    specs = chosen if isinstance(chosen, list) else [chosen]
                for spec in specs:
                    jobs.append(Job(job_key(method, strategy, sid, spec), method, strategy, sid, gt, spec))
    return jobs


def batch_jobs(jobs, size) -> list:
    """Consecutive chunks of at most ``size`` jobs sharing method and k."""
    def group(job):
        return job.method, job.spec.k if job.spec is not None else 0

    batches, current = [], []
    for job in jobs:
        if current and (len(current) == size or group(current[0]) != group(job)):
            batches.append(current)
            current = []
        current.append(job)
    if current:
        batches.append(current)
    return batches


# execution ----------------------------------------------------------------


@dataclass
class _Context:
    cfg: CampaignConfig
    model: classifier.ClassifierModel
    features: np.ndarray
    similarities: np.ndarray | None


_CONTEXT: _Context | None = None


def _install(ctx):
    global _CONTEXT
    _CONTEXT = ctx


def run_batch(jobs) -> list:
    """Attack one batch in the installed context; returns serialized records."""
    ctx = _CONTEXT
    cfg, model = ctx.cfg, ctx.model
    method = jobs[0].method
    family, params = parse_method(method)
    X = ctx.features[[j.sample_id for j in jobs]]
    specs = [j.spec for j in jobs]
    if family in OPTIMIZER_FAMILIES:
        advs = None
        if family == "distill":
            advs = [losses.build_adv_distribution(s, model.n_classes, similarities=ctx.similarities, Z=cfg.adv_z,
                                                  gamma=cfg.adv_gamma, alpha=cfg.adv_alpha,
                                                  eps_floor=cfg.adv_eps_floor) for s in specs]
        outs = attacks.optimize_attack(model, X, specs, OPTIMIZER_FAMILIES[family], cfg.optimizer(params), advs,
                                       method=method)
    else:
        budget = cfg.budget(params)
        targeted = budget.mode == "targeted"
        outs = BASELINES[family](model, X, [j.gt for j in jobs], specs if targeted else None, budget)
    return [_dump(outcome_record(j, o)) for j, o in zip(jobs, outs)]


def campaign_meta(cfg: CampaignConfig, model, data, sample_ids) -> dict:
    return {
        "config": cfg.snapshot(),
        "label_names": list(model.label_names),
        "image_shape": list(data.image_shape) if data.image_shape else None,
        "sample_ids": list(sample_ids),
        "rank_basis": "successful",
    }


def run_campaign(cfg: CampaignConfig, progress=sys.stderr) -> Path:
    """
    Run every planned attack not already in the outcomes file and append its
    record. Records are written by this process only, one complete line at a
    time, in plan order.
    """
    cfg.validate(attacking=True)
    model = classifier.load_model(cfg.model_path)
    table = embedding_table(cfg)
    data, _ = load_split(cfg, "validation", table)
    if data.dimension != model.n_inputs:
        raise ValueError(f"model expects {model.n_inputs} features, data has {data.dimension}")
    have_all = all(n in table for n in model.label_names)
    sims = table.similarity_matrix(model.label_names) if have_all else None
    if sims is None and cfg.adv_alpha > 0 and any(parse_method(m)[0] == "distill" for m in cfg.methods):
        missing = [n for n in model.label_names if n not in table]
        raise ValueError(f"distillation with adv_alpha > 0 needs embeddings for every label; missing {missing}")
    sample_ids = select_samples(cfg, model, data)
    jobs = plan_jobs(cfg, model, data, sample_ids, table if have_all else None)

    out = cfg.outcomes_path
    out.parent.mkdir(parents=True, exist_ok=True)
    meta_path = out.with_name(META_NAME)
    meta_path.write_text(json.dumps(campaign_meta(cfg, model, data, sample_ids), indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    if cfg.fresh and out.exists():
        out.unlink()
    done = {r["key"] for r in read_outcomes(out, repair=True)}
    pending = [j for j in jobs if j.key not in done]
    batches = batch_jobs(pending, cfg.attack_batch)
    workers = cfg.workers or os.cpu_count() or 1
    ctx = _Context(cfg, model, data.features, sims)
    total, written = len(jobs), len(jobs) - len(pending)
    if progress:
        print(f"attack: {written}/{total} records already present", file=progress)

    with open(out, "a", encoding="utf-8") as fh:
        def write(lines):
            nonlocal written
            fh.write("".join(lines))
            fh.flush()
            written += len(lines)
            if progress:
                print(f"attack: {written}/{total}", file=progress)

        if workers == 1 or len(batches) <= 1:
            _install(ctx)
            for batch in batches:
                write(run_batch(batch))
        else:
            with ProcessPoolExecutor(max_workers=workers, initializer=_install, initargs=(ctx,)) as pool:
                for lines in pool.map(run_batch, batches):
                    write(lines)
    return out


def evaluate_outcomes(path, config=None, buckets=evaluation.GT_BUCKETS):
    """Best / average / worst reports for every group in an outcomes file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"outcomes file not found: {path}")
    if config is None:
        meta = path.with_name(META_NAME)
        config = json.loads(meta.read_text(encoding="utf-8"))["config"] if meta.is_file() else {}
    return evaluation.aggregate_cases(load_outcomes(path), buckets, config)
