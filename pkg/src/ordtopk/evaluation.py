"""
Aggregation of attack outcomes into report rows: success rate, perturbation
norms, and where the ground-truth label ended up in the adversarial
prediction.

Norm means and GT-rank statistics are taken over successful attacks only;
when nothing succeeded they are reported as ``None`` (written ``N.A.``).
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackOutcome, gt_rank, perturbation_norms

GT_BUCKETS = (1, 2, 3, 5, 10)
CASES = ("best", "average", "worst")
NA = "N.A."


def norms(delta):
    """(l1, l2, l_inf) of a perturbation."""
    return perturbation_norms(delta)


@dataclass
class EvalReport:
    method: str
    strategy: str
    case: str
    k: int
    asr: float
    l1_mean: float | None
    l2_mean: float | None
    linf_mean: float | None
    gt_top: dict
    gt_avg_rank: float | None
    n: int
    rank_basis: str = "successful"
    config: dict = field(default_factory=dict)

    def row(self):
        """Flat mapping in CSV column order."""
        out = {
            "method": self.method, "strategy": self.strategy, "case": self.case, "k": self.k,
            "asr": self.asr, "l1_mean": self.l1_mean, "l2_mean": self.l2_mean, "linf_mean": self.linf_mean,
        }
        for m, p in self.gt_top.items():
            out[f"gt_top_{m}"] = p
        out["gt_avg_rank"] = self.gt_avg_rank
        out["n"] = self.n
        return out


def gt_rank_stats(outcomes, buckets=GT_BUCKETS):
    """
    Proportion of successful outcomes whose GT rank is within each bucket m,
    and the mean GT rank. Ranks are recomputed from each outcome's final
    prediction vector.

    :return: ({m: proportion or None}, average rank or None)
    """
    ranks = [gt_rank(o.probs, o.gt) for o in outcomes if o.success]
    if not ranks:
        return {m: None for m in buckets}, None
    ranks = np.array(ranks)
    return {m: float(np.mean(ranks <= m)) for m in buckets}, float(ranks.mean())


def summarize(outcomes, method, strategy, case, k, buckets=GT_BUCKETS, config=None) -> EvalReport:
    outcomes = list(outcomes)
    ok = [o for o in outcomes if o.success]
    n = len(outcomes)
    asr = 100.0 * len(ok) / n if n else 0.0
    props, avg = gt_rank_stats(outcomes, buckets)

    def mean(attr):
        return float(np.mean([getattr(o, attr) for o in ok])) if ok else None

    return EvalReport(method, strategy, case, int(k), asr, mean("l1"), mean("l2"), mean("linf"),
                      props, avg, n, config=dict(config or {}))


def _best(group):
    ok = [o for o in group if o.success]
    if ok:
        return min(ok, key=lambda o: o.l2)
    return group[0]


def _worst(group):
    failed = [o for o in group if not o.success]
    if failed:
        return failed[0]
    return max(group, key=lambda o: o.l2)


def _targets_key(o):
    return o.targets.targets if o.targets is not None else ()


def aggregate_cases(outcomes, buckets=GT_BUCKETS, config=None):
    """
    Best / average / worst reports for every (method, strategy, k) group.

    Within a group, outcomes are grouped per sample. Best keeps each sample's
    minimum-l2 successful target (a failure only if every target failed);
    worst keeps the maximum-l2 target and is a failure if any target failed;
    average pools all outcomes of the group.
    """
    groups = defaultdict(list)
    for o in outcomes:
        k = o.targets.k if o.targets is not None else 0
        groups[(o.method, o.strategy or "untargeted", k)].append(o)
    reports = []
    for (method, strategy, k), items in sorted(groups.items()):
        per_sample = defaultdict(list)
        for o in items:
            per_sample[o.sample_id].append(o)
        samples = [sorted(per_sample[s], key=_targets_key) for s in sorted(per_sample, key=lambda s: (s is None, s))]
        chosen = {
            "best": [_best(g) for g in samples],
            "average": items,
            "worst": [_worst(g) for g in samples],
        }
        for case in CASES:
            reports.append(summarize(chosen[case], method, strategy, case, k, buckets, config))
    return reports


# report files -------------------------------------------------------------


def _csv_value(v):
    if v is None:
        return NA
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    rows = [r.row() for r in reports]
    if not rows:
        return ""
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(rows[0]))
    for row in rows:
        writer.writerow([_csv_value(v) for v in row.values()])
    return buf.getvalue()


def reports_to_json(reports) -> str:
    payload = []
    for r in reports:
        d = asdict(r)
        d["gt_top"] = {str(m): p for m, p in r.gt_top.items()}
        payload.append(d)
    return json.dumps(payload, indent=2) + "\n"


def write_report(reports, fmt, path):
    """Write reports as ``json`` or ``csv``; field order is fixed."""
    if fmt == "json":
        text = reports_to_json(reports)
    elif fmt == "csv":
        text = reports_to_csv(reports)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(text, encoding="utf-8")


def read_report(path):
    """Load reports written with ``fmt='json'``."""
    out = []
    for d in json.loads(Path(path).read_text(encoding="utf-8")):
        d["gt_top"] = {int(m): p for m, p in d["gt_top"].items()}
        out.append(EvalReport(**d))
    return out


def export_heatmap(delta, shape, path):
    """
    Write |delta| scaled to [0, 255] as a binary PGM (P5) image. ``shape``
    must describe a 2-D image, optionally with leading singleton axes.
    """
    if shape is None:
        raise ValueError("heatmaps need 2-D input shape metadata; this input is a flat feature vector")
    dims = [int(d) for d in shape if int(d) != 1] if len(shape) > 2 else [int(d) for d in shape]
    if len(dims) != 2:
        raise ValueError(f"heatmaps need a 2-D image shape, got {tuple(shape)}")
    h, w = dims
    mag = np.abs(np.asarray(delta, dtype=np.float64)).reshape(h, w)
    top = mag.max()
    scaled = np.zeros_like(mag) if top == 0 else mag / top * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
