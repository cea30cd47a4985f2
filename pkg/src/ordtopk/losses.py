"""
Attack objectives built from tensor primitives.

Every loss takes logits or probabilities as a single vector ``(C,)`` or a
batch ``(B, C)`` and returns a scalar or a ``(B,)`` vector of per-row losses.
Targets for a batch are given one row per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .semantics import EmbeddingTable, TargetSpec

DEFAULT_Z = 10.0
DEFAULT_GAMMA = 0.3
DEFAULT_ALPHA = 1.0
DEFAULT_EPS_FLOOR = 1e-5

# additive mask for labels excluded from a hinge's runner-up maximum
_EXCLUDED = -1e9


def _tensor(x):
    return x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float32))


def _target_rows(targets, batch):
    """Normalise targets to an int array of shape (rows, k)."""
    if isinstance(targets, TargetSpec):
        rows = [targets.targets]
    elif isinstance(targets, (list, tuple)) and targets and isinstance(targets[0], TargetSpec):
        rows = [t.targets for t in targets]
    else:
        arr = np.asarray(targets, dtype=np.int64)
        rows = arr.reshape(1, -1) if arr.ndim <= 1 else arr
    rows = np.asarray(rows, dtype=np.int64)
    if batch is None:
        if len(rows) != 1:
            raise ValueError("one target row expected for a single logit vector")
    elif len(rows) != batch:
        raise ValueError(f"{len(rows)} target rows for a batch of {batch}")
    return rows


def _onehot(rows_idx, shape):
    out = np.zeros(shape, dtype=np.float32)
    np.put_along_axis(out.reshape(-1, shape[-1]), rows_idx.reshape(-1, 1), 1.0, axis=1)
    return out


def cw_loss(z, t):
    """
    Top-1 hinge: max(0, max_{c != t} z_c - z_t).

    :param z: logits, (C,) or (B, C)
    :param t: target label, or one label per row
    """
    z = _tensor(z)
    n_classes = z.shape[-1]
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any((t < 0) | (t >= n_classes)):
        raise IndexError(f"target label out of range for {n_classes} classes")
    lead = z.shape[:-1]
    target = _onehot(t, z.shape)
    others = np.where(target > 0, np.float32(_EXCLUDED), np.float32(0)).astype(np.float32)
    axis = -1 if lead else None
    runner_up = T.max_reduce(z + others, axis=axis)
    z_t = T.sum_reduce(z * target, axis=axis)
    return T.relu(runner_up - z_t)


def cw_topk_loss(z, targets):
    """
    Ordered Top-k hinge: sum over i of
    max(0, max_{j not in {t_1..t_i}} z_j - z_{t_i}).

    Zero exactly when the k largest logits are t_1 > ... > t_k in that order.
    """
    z = _tensor(z)
    n_classes = z.shape[-1]
    batched = z.ndim == 2
    rows = _target_rows(targets, z.shape[0] if batched else None)
    if np.any((rows < 0) | (rows >= n_classes)):
        raise IndexError(f"target label out of range for {n_classes} classes")
    if rows.shape[1] >= n_classes:
        raise ValueError("k must be smaller than the number of classes")
    axis = -1 if batched else None
    placed = np.zeros((len(rows), n_classes), dtype=bool)
    total = None
    for i in range(rows.shape[1]):
        placed[np.arange(len(rows)), rows[:, i]] = True
        mask = np.where(placed, np.float32(_EXCLUDED), np.float32(0)).astype(np.float32)
        target = np.zeros((len(rows), n_classes), dtype=np.float32)
        target[np.arange(len(rows)), rows[:, i]] = 1.0
        if not batched:
            mask, target = mask[0], target[0]
        term = T.relu(T.max_reduce(z + mask, axis=axis) - T.sum_reduce(z * target, axis=axis))
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class AdvDistribution:
    """Designed target distribution for an ordered Top-k attack."""

    probs: np.ndarray  # float64, strictly positive, sums to 1
    logits: np.ndarray
    targets: TargetSpec
    Z: float
    gamma: float
    alpha: float
    eps_floor: float

    @property
    def log_probs(self):
        return np.log(self.probs)


def adv_logits(targets: TargetSpec, n_classes, similarities=None, Z=DEFAULT_Z, gamma=DEFAULT_GAMMA,
               alpha=DEFAULT_ALPHA, eps_floor=DEFAULT_EPS_FLOOR) -> np.ndarray:
    """
    Logits of the adversarial distribution: Z - (i-1)*gamma at t_i, and
    alpha * mean_i s(t_i, j) + eps_floor for every other label j.
    """
    k = targets.k
    z_last = Z - (k - 1) * gamma
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha >= z_last:
        raise ValueError(f"alpha={alpha} must be below the last target logit {z_last}")
    z = np.full(n_classes, eps_floor, dtype=np.float64)
    if alpha > 0:
        if similarities is None:
            raise ValueError("alpha > 0 needs label similarities")
        s = np.asarray(similarities, dtype=np.float64)
        z = alpha * s[list(targets.targets)].mean(axis=0) + eps_floor
    for i, t in enumerate(targets.targets):
        z[t] = Z - i * gamma
    return z


def build_adv_distribution(targets: TargetSpec, n_classes, table: EmbeddingTable | None = None,
                           label_names=None, Z=DEFAULT_Z, gamma=DEFAULT_GAMMA, alpha=DEFAULT_ALPHA,
                           eps_floor=DEFAULT_EPS_FLOOR, similarities=None) -> AdvDistribution:
    """
    Construct the adversarial distribution for ``targets``.

    Similarities come from ``similarities`` (an ``n_classes`` square matrix)
    or from ``table`` indexed by ``label_names``. They are only needed when
    ``alpha > 0``.

    :raises ValueError: if alpha is not below the last target logit, or the
        resulting probabilities do not respect the target ordering
    """
    targets.validate(n_classes)
    if alpha > 0 and similarities is None:
        if table is None or label_names is None:
            raise ValueError("alpha > 0 needs an embedding table and label names")
        similarities = table.similarity_matrix(label_names)
    z = adv_logits(targets, n_classes, similarities, Z, gamma, alpha, eps_floor)
    e = np.exp(z - z.max())
    p = e / e.sum()
    check_adv_ordering(p, targets)
    p.setflags(write=False)
    z.setflags(write=False)
    return AdvDistribution(p, z, targets, Z, gamma, alpha, eps_floor)


def check_adv_ordering(p, targets: TargetSpec):
    tp = p[list(targets.targets)]
    if np.any(np.diff(tp) >= 0):
        raise ValueError("target probabilities are not strictly decreasing")
    rest = np.delete(p, list(targets.targets))
    if rest.size and not tp[-1] > rest.max():
        raise ValueError("a non-target label is at least as likely as the last target")
    if np.any(p <= 0):
        raise ValueError("adversarial distribution has a zero entry")


def _log_adv(adv, batched, n_rows):
    if isinstance(adv, AdvDistribution):
        advs = [adv]
    else:
        advs = list(adv)
    rows = np.stack([a.log_probs for a in advs]).astype(np.float32)
    if batched:
        if len(rows) != n_rows:
            raise ValueError(f"{len(rows)} adversarial distributions for a batch of {n_rows}")
        return rows
    return rows[0]


def kl_loss(P, adv):
    """
    KL(P || P_adv) = sum_c P_c log(P_c / P_adv_c), with 0 log 0 = 0.

    :param P: probability vector(s) (C,) or (B, C)
    :param adv: AdvDistribution, or one per row
    """
    P = _tensor(P)
    batched = P.ndim == 2
    log_q = _log_adv(adv, batched, P.shape[0] if batched else 1)
    tiny = float(np.finfo(np.float32).tiny)
    log_p = T.log(T.clamp(P, lo=tiny))
    return T.sum_reduce(P * (log_p - log_q), axis=-1 if batched else None)


def kl_loss_from_logits(z, adv):
    """KL(softmax(z) || P_adv), computed through log-softmax so it is finite for any logits."""
    z = _tensor(z)
    batched = z.ndim == 2
    log_q = _log_adv(adv, batched, z.shape[0] if batched else 1)
    log_p = T.log_softmax(z)
    return T.sum_reduce(T.softmax(z) * (log_p - log_q), axis=-1 if batched else None)


def cross_entropy_loss(P, y):
    """-log P_y for probability vector(s) ``P``."""
    P = _tensor(P)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    onehot = _onehot(y, P.shape)
    axis = -1 if P.ndim == 2 else None
    return -T.log(T.sum_reduce(P * onehot, axis=axis))


def cross_entropy_from_logits(z, y):
    """-log softmax(z)_y, stable for large logit gaps."""
    z = _tensor(z)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    onehot = _onehot(y, z.shape)
    axis = -1 if z.ndim == 2 else None
    return -T.sum_reduce(T.log_softmax(z) * onehot, axis=axis)
