"""
Label vocabulary, word embeddings, cosine similarity, and target selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

STRATEGIES = ("random", "most-like", "least-like", "highest-clean", "lowest-clean", "exhaustive-top1")


@dataclass(frozen=True)
class TargetSpec:
    """Ordered attack targets (t_1, ..., t_k) for a sample with ground truth ``gt``."""

    targets: tuple
    gt: int
    strategy: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if not self.targets:
            raise ValueError("a TargetSpec needs at least one target")
        if len(set(self.targets)) != len(self.targets):
            raise ValueError(f"targets must be distinct: {self.targets}")
        if self.gt in self.targets:
            raise ValueError(f"ground truth {self.gt} cannot be a target")

    @property
    def k(self):
        return len(self.targets)

    def validate(self, n_classes):
        if not self.k < n_classes:
            raise ValueError(f"k={self.k} must be smaller than the label count {n_classes}")
        if not all(0 <= t < n_classes for t in self.targets) or not 0 <= self.gt < n_classes:
            raise ValueError(f"label ids out of range for {n_classes} classes")
        return self


class EmbeddingTable:
    """Immutable map from label name to a fixed-dimension vector."""

    def __init__(self, vectors: dict):
        if not vectors:
            raise ValueError("empty embedding table")
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions {sorted(dims)}")
        self._vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        for name, v in self._vectors.items():
            v.setflags(write=False)
            if not np.any(v):
                raise ValueError(f"zero vector for label {name!r}")
        self.dimension = dims.pop()

    def __contains__(self, name):
        return name in self._vectors

    def __getitem__(self, name):
        return self._vectors[name]

    def __len__(self):
        return len(self._vectors)

    @property
    def labels(self):
        return list(self._vectors)

    def require(self, names):
        missing = [n for n in names if n not in self._vectors]
        if missing:
            raise KeyError(f"labels missing from embedding table: {missing}")
        return self

    def similarity_matrix(self, names) -> np.ndarray:
        """Pairwise cosine similarities, indexed in the order of ``names``."""
        self.require(names)
        v = np.stack([self._vectors[n] for n in names])
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        return np.clip(v @ v.T, -1.0, 1.0)


def load_embeddings(path, labels=None) -> EmbeddingTable:
    """
    Read a text table with one entry per line: a label followed by its
    whitespace-separated components. When ``labels`` is given, every label
    must be present.
    """
    vectors = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        name = parts[0]
        if name in vectors:
            raise ValueError(f"{path}:{lineno}: duplicate label {name!r}")
        try:
            vectors[name] = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: unparsable number ({exc})") from None
        if not vectors[name]:
            raise ValueError(f"{path}:{lineno}: label {name!r} has no components")
    dims = {len(v) for v in vectors.values()}
    if len(dims) > 1:
        raise ValueError(f"{path}: inconsistent embedding dimensions {sorted(dims)}")
    table = EmbeddingTable(vectors)
    if labels is not None:
        table.require(labels)
    return table


def bundled_embeddings_path() -> Path:
    return Path(str(resources.files("ordtopk") / "data" / "embeddings50.txt"))


def bundled_embeddings() -> EmbeddingTable:
    return load_embeddings(bundled_embeddings_path())


def bundled_vocabulary() -> list:
    return bundled_embeddings().labels


def similarity(table: EmbeddingTable, a: str, b: str) -> float:
    """Cosine similarity of two labels' embedding vectors."""
    table.require([a, b])
    u, v = table[a], table[b]
    return float(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), -1.0, 1.0))


def _rank_labels(scores, gt, k, descending):
    """Non-GT label ids ordered by score; ties go to the smaller id."""
    ids = [c for c in range(len(scores)) if c != gt]
    key = (lambda c: (-scores[c], c)) if descending else (lambda c: (scores[c], c))
    return sorted(ids, key=key)[:k]


def select_targets(strategy, k, gt, n_classes, *, label_names=None, table=None,
                   clean_probs=None, seed=None):
    """
    Choose ordered targets for one sample.

    Returns a single :class:`TargetSpec`, except for ``exhaustive-top1`` which
    returns one k=1 spec per non-GT label.

    :param strategy: one of :data:`STRATEGIES`
    :param gt: ground-truth label id
    :param label_names: needed by the similarity strategies
    :param table: embedding table (most-like / least-like)
    :param clean_probs: clean prediction vector (highest-clean / lowest-clean)
    :param seed: RNG seed (random); an int or a sequence of ints
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if strategy == "exhaustive-top1":
        return [TargetSpec((c,), gt, strategy) for c in range(n_classes) if c != gt]
    if not 1 <= k < n_classes:
        raise ValueError(f"k={k} must satisfy 1 <= k < {n_classes}")
    if strategy == "random":
        rng = np.random.default_rng(seed)
        pool = np.array([c for c in range(n_classes) if c != gt])
        chosen = rng.permutation(pool)[:k]
        return TargetSpec(tuple(chosen.tolist()), gt, strategy)
    if strategy in ("most-like", "least-like"):
        if table is None or label_names is None:
            raise ValueError(f"{strategy} needs an embedding table and label names")
        sims = table.similarity_matrix(label_names)[gt]
        return TargetSpec(_rank_labels(sims, gt, k, strategy == "most-like"), gt, strategy)
    if clean_probs is None:
        raise ValueError(f"{strategy} needs the clean prediction vector")
    scores = np.asarray(clean_probs, dtype=np.float64)
    return TargetSpec(_rank_labels(scores, gt, k, strategy == "highest-clean"), gt, strategy)


def targets_for_sample(strategy, k, sample, model, table=None, seed=None):
    """:func:`select_targets` with label names and clean scores taken from ``model``."""
    probs = model.predict(sample.features) if strategy in ("highest-clean", "lowest-clean") else None
    return select_targets(strategy, k, sample.label, model.n_classes, label_names=model.label_names,
                          table=table, clean_probs=probs, seed=seed)
