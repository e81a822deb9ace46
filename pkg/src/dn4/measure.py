"""Image-to-class similarity and the classifiers built on it.

The core score of a query image against a class: embed the query into m
local descriptors, pool the class's support descriptors into one search
space, and sum each query descriptor's k largest cosine similarities over
that pool. The image-to-image ablation variants restrict the search to
individual support images; the frozen-feature classifiers reuse the same
machinery without gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embedding import DescriptorSet, EmbeddingParams, embed
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, record

__all__ = [
    "MeasureConfig", "ClassPool", "SimilarityVector",
    "cosine_matrix", "topk_sum", "image_to_class",
    "ioi1_score", "ioi1_class_score", "ioi2_score",
    "class_score", "classify", "pools_from_support", "episode_score_matrix",
    "nbnn_classify", "global_knn_classify",
]

VARIANTS = ("dn4", "ioi1", "ioi2")


@dataclass(frozen=True)
class MeasureConfig:
    k_neighbors: int = 3
    similarity: str = "cosine"
    zero_norm_eps: float = 1e-8

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ConfigurationError("k_neighbors must be positive")
        if self.similarity != "cosine":
            raise ConfigurationError(f"unknown similarity {self.similarity!r}")
        if self.zero_norm_eps <= 0:
            raise ConfigurationError("zero_norm_eps must be positive")


@dataclass
class ClassPool:
    """All support descriptors of one class, flattened into one matrix.

    per_image_ranges[(j)] = (start, length) of support image j's columns.
    """
    class_id: int
    descriptors: Tensor  # (d, K*m)
    per_image_ranges: list[tuple[int, int]]

    def __post_init__(self):
        cols = self.descriptors.data.shape[1]
        covered = sum(ln for _, ln in self.per_image_ranges)
        if covered != cols:
            raise ContractError(
                f"per-image ranges cover {covered} of {cols} pool columns")


@dataclass
class SimilarityVector:
    """Per-class scores; the prediction is the first maximal entry."""
    scores: Tensor  # (C,)

    @property
    def values(self) -> np.ndarray:
        return self.scores.data

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.scores.data))


def cosine_matrix(queries: Tensor, pool: Tensor, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarity of column vectors: out[i,j] = cos(q_i, p_j).

    Columns with norm below eps are divided by eps instead, which keeps the
    op defined (and differentiable) at zero vectors.
    """
    if queries.data.ndim != 2 or pool.data.ndim != 2:
        raise DimensionError("cosine_matrix expects 2-D descriptor matrices")
    if queries.data.shape[0] != pool.data.shape[0]:
        raise DimensionError(
            f"descriptor dims differ: {queries.data.shape[0]} vs {pool.data.shape[0]}")
    qn = np.sqrt((queries.data * queries.data).sum(axis=0))
    pn = np.sqrt((pool.data * pool.data).sum(axis=0))
    qden = np.maximum(qn, eps)
    pden = np.maximum(pn, eps)
    qh = queries.data / qden
    ph = pool.data / pden
    out = qh.T @ ph

    def rule(g):
        dqh = ph @ g.T
        dph = qh @ g
        # below the eps floor the denominator is the constant eps
        qact = (qn > eps).astype(qh.dtype)
        pact = (pn > eps).astype(ph.dtype)
        gq = (dqh - qh * (qh * dqh).sum(axis=0) * qact) / qden
        gp = (dph - ph * (ph * dph).sum(axis=0) * pact) / pden
        return gq, gp

    return record(out, (queries, pool), rule)


def _topk_mask(s: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of each row's k largest entries, ties to lower index."""
    n = s.shape[1]
    if k == n:
        return np.ones_like(s, dtype=bool)
    part = np.partition(s, n - k, axis=1)
    thresh = part[:, n - k][:, None]
    gt = s > thresh
    need = k - gt.sum(axis=1, keepdims=True)
    eq = s == thresh
    take = eq & (np.cumsum(eq, axis=1) <= need)
    return gt | take


def topk_sum(s: Tensor, k: int) -> Tensor:
    """Sum of every row's k largest entries of a 2-D score matrix.

    Gradient passes straight through the selected entries; the selection
    itself is treated as constant.
    """
    if s.data.ndim != 2:
        raise DimensionError("topk_sum expects a 2-D matrix")
    n = s.data.shape[1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"k={k} out of range for {n} pool columns")
    mask = _topk_mask(s.data, k)
    out = (s.data * mask).sum()

    def rule(g):
        return (g * mask.astype(s.data.dtype),)

    return record(out, (s,), rule)


def image_to_class(query: DescriptorSet, pool: ClassPool, cfg: MeasureConfig) -> Tensor:
    """Sum over query descriptors of their k largest cosines over the pool."""
    cols = pool.descriptors.data.shape[1]
    if cfg.k_neighbors > cols:
        raise ConfigurationError(
            f"k_neighbors={cfg.k_neighbors} exceeds pool size {cols}")
    sims = cosine_matrix(query.descriptors, pool.descriptors, cfg.zero_norm_eps)
    return topk_sum(sims, cfg.k_neighbors)


def _as_column(ds: Tensor) -> Tensor:
    d, m = ds.data.shape
    return T.reshape(ds, (d * m, 1))


def ioi1_score(query: DescriptorSet, support_image: DescriptorSet,
               eps: float = 1e-8) -> Tensor:
    """Cosine of the two images' concatenated descriptor vectors."""
    if query.descriptors.data.shape != support_image.descriptors.data.shape:
        raise DimensionError("image-to-image score needs equal descriptor shapes")
    sims = cosine_matrix(_as_column(query.descriptors),
                         _as_column(support_image.descriptors), eps)
    return topk_sum(sims, 1)


def ioi1_class_score(query: DescriptorSet, pool: ClassPool, cfg: MeasureConfig) -> Tensor:
    """Best concatenated-vector cosine over the class's support images."""
    qv = _as_column(query.descriptors)
    cols = []
    for start, length in pool.per_image_ranges:
        img = T.narrow(pool.descriptors, 1, start, length)
        d, m = img.data.shape
        cols.append(T.reshape(img, (d * m, 1)))
    mat = cols[0] if len(cols) == 1 else T.concat(cols, axis=1)
    sims = cosine_matrix(qv, mat, cfg.zero_norm_eps)
    return topk_sum(sims, 1)


def ioi2_score(query: DescriptorSet, pool: ClassPool, cfg: MeasureConfig) -> Tensor:
    """Per-support-image top-k sums, added over the class's K images.

    With a single support image this is the same computation as
    image_to_class, down to the bit.
    """
    terms = []
    for start, length in pool.per_image_ranges:
        if cfg.k_neighbors > length:
            raise ConfigurationError(
                f"k_neighbors={cfg.k_neighbors} exceeds single-image pool {length}")
        img = T.narrow(pool.descriptors, 1, start, length)
        sims = cosine_matrix(query.descriptors, img, cfg.zero_norm_eps)
        terms.append(topk_sum(sims, cfg.k_neighbors))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def class_score(query: DescriptorSet, pool: ClassPool, cfg: MeasureConfig,
                variant: str = "dn4") -> Tensor:
    if variant == "dn4":
        return image_to_class(query, pool, cfg)
    if variant == "ioi1":
        return ioi1_class_score(query, pool, cfg)
    if variant == "ioi2":
        return ioi2_score(query, pool, cfg)
    raise ConfigurationError(f"unknown measure variant {variant!r}")


def classify(query: DescriptorSet, pools: list[ClassPool], cfg: MeasureConfig,
             variant: str = "dn4") -> SimilarityVector:
    if not pools:
        raise ContractError("classify needs at least one class pool")
    scores = [class_score(query, pool, cfg, variant) for pool in pools]
    return SimilarityVector(T.stack(scores, axis=0))


def pools_from_support(support_sets: list[DescriptorSet],
                       support_labels: np.ndarray, way: int) -> list[ClassPool]:
    """Group support descriptor sets by episode label into flat pools.

    Column order inside a pool follows support order, so the layout is
    deterministic for a deterministic episode.
    """
    pools = []
    for c in range(way):
        idxs = [i for i, lab in enumerate(support_labels) if int(lab) == c]
        if not idxs:
            raise ContractError(f"episode class {c} has no support images")
        parts = [support_sets[i].descriptors for i in idxs]
        ranges = []
        start = 0
        for p in parts:
            m = p.data.shape[1]
            ranges.append((start, m))
            start += m
        merged = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        pools.append(ClassPool(class_id=c, descriptors=merged,
                               per_image_ranges=ranges))
    return pools


def episode_score_matrix(query_sets: list[DescriptorSet], pools: list[ClassPool],
                         cfg: MeasureConfig, variant: str = "dn4") -> Tensor:
    """(Q, C) matrix of class scores; row q is query q's similarity vector."""
    rows = [T.stack([class_score(q, pool, cfg, variant) for pool in pools], axis=0)
            for q in query_sets]
    return T.stack(rows, axis=0)


def nbnn_classify(frozen_params: EmbeddingParams, episode, cfg: MeasureConfig,
                  variant: str = "dn4") -> np.ndarray:
    """Predictions of the non-learned nearest-neighbor head on frozen features.

    `episode` provides support_images/support_labels/query_images/way.
    Embedding runs with running-statistics normalization so each image's
    descriptors are independent of the rest of the episode.
    """
    sx = Tensor(episode.support_images)
    qx = Tensor(episode.query_images)
    support_sets = embed(frozen_params, sx, mode="running")
    query_sets = embed(frozen_params, qx, mode="running")
    pools = pools_from_support(support_sets, episode.support_labels, episode.way)
    return np.array([classify(q, pools, cfg, variant).predicted
                     for q in query_sets], dtype=np.int64)


def global_knn_classify(support_features: np.ndarray, support_labels: np.ndarray,
                        query_features: np.ndarray, k: int,
                        eps: float = 1e-8) -> np.ndarray:
    """Cosine k-nearest-neighbor vote on image-level features.

    Majority vote over the k most similar support images; vote ties go to
    the tied class holding the single nearest neighbor (similarity ties by
    lower support index, via stable ordering).
    """
    s = np.asarray(support_features, dtype=np.float64)
    q = np.asarray(query_features, dtype=np.float64)
    labels = np.asarray(support_labels)
    if k < 1 or k > s.shape[0]:
        raise ConfigurationError(f"k={k} out of range for {s.shape[0]} supports")
    sn = s / np.maximum(np.linalg.norm(s, axis=1, keepdims=True), eps)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), eps)
    sims = qn @ sn.T
    preds = np.empty(q.shape[0], dtype=np.int64)
    for i in range(q.shape[0]):
        order = np.argsort(-sims[i], kind="stable")[:k]
        votes: dict[int, int] = {}
        for idx in order:
            lab = int(labels[idx])
            votes[lab] = votes.get(lab, 0) + 1
        best = max(votes.values())
        tied = {lab for lab, v in votes.items() if v == best}
        for idx in order:
            if int(labels[idx]) in tied:
                preds[i] = int(labels[idx])
                break
    return preds
