"""
White-box attacks against a :class:`~ordtopk.classifier.ClassifierModel`.

``optimize_attack`` minimises ||x' - x||_2^2 + lambda * L(x') over a tanh
reparameterisation x' = (tanh(w) + 1) / 2, with L either the ordered Top-k
hinge (``cw-topk``) or the KL divergence to a designed distribution
(``distill``), and a binary search over lambda. ``fgsm``, ``pgd`` and
``mifgsm`` are the signed-gradient baselines under an l_inf budget.

All attacks run on batches: rows are independent and each row keeps its own
lambda and search bounds, so a batch of one is the single-sample attack.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import losses
from . import tensor as T
from .semantics import TargetSpec

log = logging.getLogger(__name__)

LOSSES = ("cw-topk", "distill")
FGSM_MODES = ("targeted", "untargeted")
_TANH_LIMIT = 1 - 1e-6


def _coerce(cls, values):
    """Build a config dataclass from a mapping of strings or values, ignoring unknown keys."""
    cfg = cls()
    for f in fields(cls):
        if f.name in values and values[f.name] is not None:
            current = getattr(cfg, f.name)
            raw = values[f.name]
            if current is None:
                setattr(cfg, f.name, float(raw))
            else:
                setattr(cfg, f.name, type(current)(raw))
    cfg.validate()
    return cfg


@dataclass
class OptimizerConfig:
    search_steps: int = 9
    iterations: int = 1000
    initial_lambda: float = 1e-3
    lambda_lower: float = 0.0
    lambda_upper: float = 1e10
    step_size: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    norm: int = 2

    def validate(self):
        if self.search_steps < 1 or self.iterations < 1:
            raise ValueError("search_steps and iterations must be at least 1")
        if not (0 <= self.lambda_lower < self.lambda_upper) or self.initial_lambda <= 0:
            raise ValueError("lambda bounds must satisfy 0 <= lower < upper and initial > 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.norm != 2:
            raise ValueError("only the squared l2 energy is supported")
        return self

    @classmethod
    def from_mapping(cls, values):
        return _coerce(cls, values)

    @property
    def tag(self):
        return f"{self.search_steps}x{self.iterations}"


@dataclass
class BudgetConfig:
    eps: float = 0.063
    steps: int = 10
    step_size: float | None = None
    momentum: float = 1.0
    mode: str = "targeted"

    def validate(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.mode not in FGSM_MODES:
            raise ValueError(f"mode must be one of {FGSM_MODES}")
        return self

    @classmethod
    def from_mapping(cls, values):
        return _coerce(cls, values)


@dataclass
class AttackOutcome:
    method: str
    gt: int
    targets: TargetSpec | None
    delta: np.ndarray
    x_adv: np.ndarray
    success: bool
    l1: float
    l2: float
    linf: float
    probs: np.ndarray
    gt_rank: int
    final_lambda: float | None = None
    iterations: int = 0
    lambda_trace: list = field(default_factory=list)
    strategy: str | None = None
    sample_id: int | None = None


@dataclass(frozen=True)
class SearchState:
    lam: float
    lower: float
    upper: float


def binary_search_lambda(state: SearchState, success: bool, config: OptimizerConfig) -> SearchState:
    """
    Next lambda after a trial: on success the upper bound drops to lambda and
    lambda bisects; on failure the lower bound rises to lambda and lambda
    bisects if an upper bound has been found, otherwise grows tenfold (capped
    at the configured upper bound).
    """
    lower, upper = state.lower, state.upper
    if success:
        upper = min(upper, state.lam)
        lam = (lower + upper) / 2
    else:
        lower = max(lower, state.lam)
        if upper < config.lambda_upper:
            lam = (lower + upper) / 2
        else:
            lam = min(state.lam * 10, config.lambda_upper)
    return SearchState(lam, lower, upper)


# success checks -----------------------------------------------------------


def ordered_topk(P, k):
    """Indices of the k largest entries, descending, ties to the smaller id."""
    order = np.argsort(-np.asarray(P), kind="stable")
    return order[:k]


def check_ordered_topk(P, targets) -> bool:
    """
    True iff the k most probable labels, in descending order, are exactly the
    targets. A tie between rank k and rank k+1 counts as failure.
    """
    t = targets.targets if isinstance(targets, TargetSpec) else tuple(targets)
    P = np.asarray(P)
    k = len(t)
    order = np.argsort(-P, kind="stable")
    if tuple(order[:k].tolist()) != tuple(t):
        return False
    return k == len(P) or P[order[k - 1]] > P[order[k]]


def _batch_topk_success(P, rows):
    """Vectorised :func:`check_ordered_topk` over a (B, C) batch."""
    k = rows.shape[1]
    order = np.argsort(-P, axis=-1, kind="stable")
    match = np.all(order[:, :k] == rows, axis=1)
    idx = np.arange(len(P))
    return match & (P[idx, order[:, k - 1]] > P[idx, order[:, k]])


def gt_rank(P, gt) -> int:
    """1-based position of ``gt`` in the descending order of P (ties to the smaller id)."""
    P = np.asarray(P)
    return int(1 + np.sum(P > P[gt]) + np.sum(P[:gt] == P[gt]))


def perturbation_norms(delta):
    d = np.asarray(delta, dtype=np.float64).ravel()
    if d.size == 0:
        return 0.0, 0.0, 0.0
    return float(np.abs(d).sum()), float(np.sqrt((d * d).sum())), float(np.abs(d).max())


def _outcome(method, model, x, x_adv, gt, spec, success, **extra):
    delta = (x_adv.astype(np.float32) - x.astype(np.float32)).astype(np.float32)
    l1, l2, linf = perturbation_norms(x_adv.astype(np.float64) - x.astype(np.float64))
    probs = model.predict(x_adv)
    return AttackOutcome(
        method=method, gt=int(gt), targets=spec, delta=delta, x_adv=x_adv.astype(np.float32),
        success=bool(success), l1=l1, l2=l2, linf=linf, probs=probs, gt_rank=gt_rank(probs, gt),
        strategy=spec.strategy if spec is not None else None, **extra,
    )


def _verify(model, x_adv, gt, spec):
    P = model.predict(x_adv)
    if spec is None:
        return gt_rank(P, gt) > 1
    return check_ordered_topk(P, spec)


# penalised optimisation ---------------------------------------------------


def _as_batch(model, X):
    X = np.asarray(X, dtype=np.float32)
    single = X.ndim == 1
    X = X.reshape(1, -1) if single else X
    if X.shape[1] != model.n_inputs:
        raise T.ShapeError(f"expected feature length {model.n_inputs}, got {X.shape[1]}")
    return X, single


def _objective_loss(loss, z, rows, advs):
    if loss == "cw-topk":
        return losses.cw_topk_loss(z, rows)
    return losses.kl_loss_from_logits(z, advs)


def optimize_attack(model, X, specs, loss="cw-topk", config: OptimizerConfig | None = None, advs=None,
                    method=None):
    """
    Penalised attack with tanh box constraint and lambda binary search.

    :param X: clean input (n,) or batch (B, n); every row must be correctly
        classified
    :param specs: one TargetSpec, or one per row
    :param loss: ``cw-topk`` or ``distill``
    :param advs: AdvDistribution per row (``distill`` only)
    :return: AttackOutcome, or a list of them for a batch
    """
    config = (config or OptimizerConfig()).validate()
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; choose from {LOSSES}")
    X, single = _as_batch(model, X)
    specs = [specs] if isinstance(specs, TargetSpec) else list(specs)
    if len(specs) != len(X):
        raise ValueError(f"{len(specs)} target specs for {len(X)} inputs")
    for s in specs:
        s.validate(model.n_classes)
    if loss == "distill":
        if advs is None:
            raise ValueError("distill needs an adversarial distribution per input")
        advs = [advs] if isinstance(advs, losses.AdvDistribution) else list(advs)
        if len(advs) != len(X):
            raise ValueError(f"{len(advs)} adversarial distributions for {len(X)} inputs")
    method = method or f"{'cw' if loss == 'cw-topk' else 'distill'}-{config.tag}"
    gts = np.array([s.gt for s in specs])
    clean = model.classify(X)
    if np.any(clean != gts):
        raise ValueError(f"inputs {np.flatnonzero(clean != gts).tolist()} are not correctly classified")
    ks = {s.k for s in specs}
    if len(ks) != 1:
        raise ValueError("all rows of a batch must share k")
    rows = np.array([s.targets for s in specs], dtype=np.int64)
    start_loss = _objective_loss(loss, model.forward(T.Tensor(X)), rows, advs).numpy()
    if np.any(start_loss <= 0):
        raise AssertionError("attack loss is already zero at the clean input")

    B = len(X)
    best_d2 = np.full(B, np.inf)
    best_x = X.copy()
    best_lam = np.full(B, np.nan)
    fallback_loss = np.full(B, np.inf)
    fallback_x = X.copy()
    states = [SearchState(config.initial_lambda, config.lambda_lower, config.lambda_upper) for _ in range(B)]
    traces = [[] for _ in range(B)]
    w0 = T.arctanh(np.clip(2 * X.astype(np.float64) - 1, -_TANH_LIMIT, _TANH_LIMIT)).numpy()
    Xc = T.Tensor(X, name="x")
    total_iterations = 0

    for _ in range(config.search_steps):
        lam = np.array([s.lam for s in states], dtype=np.float32)
        lam_t = T.Tensor(lam, name="lambda")
        w = w0.copy()
        m = np.zeros(w.shape, dtype=np.float64)
        v = np.zeros(w.shape, dtype=np.float64)
        trial_success = np.zeros(B, dtype=bool)
        aborted = False
        for it in range(config.iterations):
            try:
                wt = T.Tensor(w, requires_grad=True, name="w")
                xa = T.tanh(wt) * 0.5 + 0.5
                d = xa - Xc
                dist = T.sum_reduce(d * d, axis=-1)
                z = model.forward(xa)
                per_row = _objective_loss(loss, z, rows, advs)
                objective = T.sum_reduce(dist + lam_t * per_row)
            except T.NonFiniteError as exc:
                log.warning("aborting lambda trial: %s", exc)
                aborted = True
                break
            total_iterations += 1
            xa_v, d2, lv = xa.data, dist.data.astype(np.float64), per_row.data.astype(np.float64)
            ok = _batch_topk_success(T.softmax(z).data, rows)
            trial_success |= ok
            better = ok & (d2 < best_d2)
            if better.any():
                best_d2[better] = d2[better]
                best_x[better] = xa_v[better]
                best_lam[better] = lam[better]
            closer = ~ok & (lv < fallback_loss)
            if closer.any():
                fallback_loss[closer] = lv[closer]
                fallback_x[closer] = xa_v[closer]
            objective.backward()
            g = wt.grad.astype(np.float64)
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            mhat = m / (1 - config.beta1 ** (it + 1))
            vhat = v / (1 - config.beta2 ** (it + 1))
            w = (w - config.step_size * mhat / (np.sqrt(vhat) + config.adam_eps)).astype(np.float32)
        for b in range(B):
            success = bool(trial_success[b]) and not aborted
            traces[b].append({"lambda": float(states[b].lam), "success": success, "aborted": aborted})
            states[b] = binary_search_lambda(states[b], success, config)

    outcomes = []
    for b in range(B):
        found = np.isfinite(best_d2[b])
        x_adv = best_x[b] if found else fallback_x[b]
        success = found and _verify(model, x_adv, gts[b], specs[b])
        if found and not success:
            log.warning("row %d: stored adversarial example failed re-verification", b)
        outcomes.append(_outcome(
            method, model, X[b], x_adv, gts[b], specs[b], success,
            final_lambda=float(best_lam[b]) if found else float(traces[b][-1]["lambda"]),
            iterations=total_iterations, lambda_trace=traces[b],
        ))
    return outcomes[0] if single else outcomes


# signed-gradient baselines ------------------------------------------------


def _ce_gradient(model, X, labels):
    xt = T.Tensor(X, requires_grad=True, name="x")
    ce = losses.cross_entropy_from_logits(model.forward(xt), labels)
    T.sum_reduce(ce).backward()
    return xt.grad.astype(np.float64)


def project_linf(x_adv, x, eps):
    """
    Clip ``x_adv`` into the l_inf ball of radius eps around x and into [0, 1],
    in float32, such that |x_adv - x| <= eps holds when measured in float64.
    """
    x = np.asarray(x, dtype=np.float32)
    lo = np.maximum(x.astype(np.float64) - eps, 0.0)
    hi = np.minimum(x.astype(np.float64) + eps, 1.0)
    out = np.clip(np.asarray(x_adv, dtype=np.float64), lo, hi).astype(np.float32)
    for _ in range(4):
        over = out.astype(np.float64) - x.astype(np.float64) > eps
        under = x.astype(np.float64) - out.astype(np.float64) > eps
        if not (over.any() or under.any()):
            break
        out[over] = np.nextafter(out[over], x[over])
        out[under] = np.nextafter(out[under], x[under])
    return np.clip(out, np.float32(0), np.float32(1))


def _prepare_fgsm(model, X, gts, specs, budget):
    budget = (budget or BudgetConfig()).validate()
    X, single = _as_batch(model, X)
    gts = np.atleast_1d(np.asarray(gts, dtype=np.int64))
    if len(gts) != len(X):
        raise ValueError(f"{len(gts)} labels for {len(X)} inputs")
    if budget.mode == "targeted":
        if specs is None:
            raise ValueError("targeted mode needs target specs")
        specs = [specs] if isinstance(specs, TargetSpec) else list(specs)
        if len(specs) != len(X):
            raise ValueError(f"{len(specs)} target specs for {len(X)} inputs")
        if any(s.gt != g for s, g in zip(specs, gts)):
            raise ValueError("target specs disagree with ground-truth labels")
        # the step descends the cross-entropy of the first target
        labels, sign = np.array([s.targets[0] for s in specs]), -1.0
    else:
        specs = [None] * len(X)
        labels, sign = gts, 1.0
    return budget, X, single, gts, specs, labels, sign


def _finish(method, model, X, x_adv, gts, specs, single, steps):
    out = [
        _outcome(method, model, X[b], x_adv[b], gts[b], specs[b], _verify(model, x_adv[b], gts[b], specs[b]),
                 iterations=steps)
        for b in range(len(X))
    ]
    return out[0] if single else out


def fgsm(model, X, gts, specs=None, budget: BudgetConfig | None = None):
    """
    One signed-gradient step of size eps: ascend the cross-entropy of the
    ground truth (untargeted) or descend that of t_1 (targeted).
    """
    budget, X, single, gts, specs, labels, sign = _prepare_fgsm(model, X, gts, specs, budget)
    g = _ce_gradient(model, X, labels)
    x_adv = project_linf(X + sign * budget.eps * np.sign(g), X, budget.eps)
    return _finish("fgsm", model, X, x_adv, gts, specs, single, 1)


def pgd(model, X, gts, specs=None, budget: BudgetConfig | None = None):
    """
    Iterated signed-gradient steps (default size 2*eps/steps), each projected
    onto the eps-ball around x and onto [0, 1]. No random start.
    """
    budget, X, single, gts, specs, labels, sign = _prepare_fgsm(model, X, gts, specs, budget)
    alpha = budget.step_size if budget.step_size is not None else 2 * budget.eps / budget.steps
    x_adv = X.copy()
    for _ in range(budget.steps):
        g = _ce_gradient(model, x_adv, labels)
        x_adv = project_linf(x_adv + sign * alpha * np.sign(g), X, budget.eps)
    return _finish(f"pgd-{budget.steps}", model, X, x_adv, gts, specs, single, budget.steps)


def mifgsm(model, X, gts, specs=None, budget: BudgetConfig | None = None):
    """
    Momentum iterative FGSM: g <- mu * g + grad / ||grad||_1, step of size
    eps/steps along sign(g), projected as in :func:`pgd`.
    """
    budget, X, single, gts, specs, labels, sign = _prepare_fgsm(model, X, gts, specs, budget)
    alpha = budget.step_size if budget.step_size is not None else budget.eps / budget.steps
    x_adv = X.copy()
    momentum = np.zeros(X.shape, dtype=np.float64)
    for _ in range(budget.steps):
        g = _ce_gradient(model, x_adv, labels)
        l1 = np.abs(g).sum(axis=1, keepdims=True)
        momentum = budget.momentum * momentum + g / np.maximum(l1, 1e-12)
        x_adv = project_linf(x_adv + sign * alpha * np.sign(momentum), X, budget.eps)
    return _finish(f"mifgsm-{budget.steps}", model, X, x_adv, gts, specs, single, budget.steps)
