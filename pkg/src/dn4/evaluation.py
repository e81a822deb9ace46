"""Evaluation protocol and the comparative study harnesses.

Accuracy is measured over repeated batches of freshly sampled episodes: for
each repeat, `episodes` episodes are drawn, per-episode top-1 accuracy is
averaged, and the report carries the mean over repeats plus a 1.96-SEM
interval over all episode accuracies. Studies share episode streams across
arms so only the model varies.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DatasetManifest, Episode, sample_episode
from .embedding import EmbeddingParams, HeadParams, embed, embed_global
from .errors import ConfigurationError
from .measure import (MeasureConfig, classify, global_knn_classify,
                      nbnn_classify, pools_from_support)
from .rng import substream
from .tensor import Tensor
from .trainer import run_episode_forward

__all__ = [
    "EvalReport", "evaluate",
    "dn4_predictor", "nbnn_predictor", "knn_predictor",
    "constant_predictor", "chance_predictor",
    "run_ablation", "run_k_study", "run_shot_study",
    "export_similarity_matrix", "write_report", "write_table_csv",
]

Predictor = Callable[[Episode], np.ndarray]


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    per_repeat_means: list[float]
    episodes_per_repeat: int
    repeats: int
    way: int
    shot: int
    queries_per_class: int
    seed: int
    stream_digest: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "per_repeat_means": self.per_repeat_means,
            "episodes_per_repeat": self.episodes_per_repeat,
            "repeats": self.repeats,
            "way": self.way,
            "shot": self.shot,
            "queries_per_class": self.queries_per_class,
            "seed": self.seed,
            "stream_digest": self.stream_digest,
        }
        payload.update(self.extra)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def evaluate(predict: Predictor, manifest: DatasetManifest, classes,
             way: int, shot: int, queries_per_class: int,
             episodes: int = 600, repeats: int = 5, seed: int = 0,
             extra: dict | None = None) -> EvalReport:
    """Run the sampled-episode protocol against one predictor."""
    if episodes < 1 or repeats < 1:
        raise ConfigurationError("episodes and repeats must be positive")
    all_accs = []
    per_repeat = []
    digest = hashlib.sha256()
    for r in range(repeats):
        accs = []
        for e in range(episodes):
            gen = substream(seed, "eval-episode", r, e)
            ep = sample_episode(manifest, classes, way, shot,
                                queries_per_class, gen)
            digest.update(ep.digest().encode())
            preds = predict(ep)
            accs.append(float((preds == ep.query_labels).mean()))
        per_repeat.append(float(np.mean(accs)))
        all_accs.extend(accs)
    arr = np.array(all_accs)
    ci = float(1.96 * arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return EvalReport(
        mean_accuracy=float(np.mean(per_repeat)), ci95=ci,
        per_repeat_means=per_repeat, episodes_per_repeat=episodes,
        repeats=repeats, way=way, shot=shot,
        queries_per_class=queries_per_class, seed=seed,
        stream_digest=digest.hexdigest()[:16], extra=extra or {})


def dn4_predictor(params: EmbeddingParams, mcfg: MeasureConfig,
                  variant: str = "dn4", mode: str = "batch") -> Predictor:
    """Episode-batched similarity classification with trained weights."""
    def predict(ep: Episode) -> np.ndarray:
        scores = run_episode_forward(params, ep, mcfg, variant, mode=mode)
        return scores.data.argmax(axis=1)
    return predict


def nbnn_predictor(frozen_params: EmbeddingParams, mcfg: MeasureConfig) -> Predictor:
    def predict(ep: Episode) -> np.ndarray:
        return nbnn_classify(frozen_params, ep, mcfg)
    return predict


def knn_predictor(params: EmbeddingParams, head: HeadParams, k: int) -> Predictor:
    """Image-level feature k-NN on the pretrained classifier's features."""
    def predict(ep: Episode) -> np.ndarray:
        sup, _ = embed_global(params, head, Tensor(ep.support_images),
                              mode="running")
        qry, _ = embed_global(params, head, Tensor(ep.query_images),
                              mode="running")
        return global_knn_classify(sup.data, ep.support_labels, qry.data, k)
    return predict


def constant_predictor(label: int) -> Predictor:
    def predict(ep: Episode) -> np.ndarray:
        return np.full(ep.query_labels.shape, label, dtype=np.int64)
    return predict


def chance_predictor(seed: int) -> Predictor:
    """Uniform random guesses from a dedicated substream."""
    def predict(ep: Episode) -> np.ndarray:
        gen = substream(seed, "chance", ep.digest())
        return gen.integers(0, ep.way, size=ep.query_labels.shape[0])
    return predict


def _assert_shared_streams(reports: list[EvalReport]) -> None:
    digests = {r.stream_digest for r in reports}
    if len(digests) > 1:
        raise ConfigurationError(
            f"study arms saw different episode streams: {sorted(digests)}")


def run_ablation(arms: dict[str, Predictor], manifest: DatasetManifest, classes,
                 way: int, shot: int, queries_per_class: int,
                 episodes: int, repeats: int, seed: int) -> list[tuple[str, EvalReport]]:
    """Evaluate measure variants on identical episode streams."""
    rows = []
    for name, predict in arms.items():
        rows.append((name, evaluate(predict, manifest, classes, way, shot,
                                    queries_per_class, episodes, repeats, seed,
                                    extra={"arm": name})))
    _assert_shared_streams([r for _, r in rows])
    return rows


def run_k_study(arms: dict[int, Predictor], manifest: DatasetManifest, classes,
                way: int, shot: int, queries_per_class: int,
                episodes: int, repeats: int, seed: int) -> list[tuple[int, EvalReport]]:
    rows = []
    for k, predict in sorted(arms.items()):
        rows.append((k, evaluate(predict, manifest, classes, way, shot,
                                 queries_per_class, episodes, repeats, seed,
                                 extra={"arm": f"k={k}"})))
    _assert_shared_streams([r for _, r in rows])
    return rows


def run_shot_study(models: dict[int, Predictor | dict[int, Predictor]],
                   manifest: DatasetManifest, classes, way: int,
                   queries_per_class: int, episodes: int, repeats: int,
                   seed: int, test_shots=(1, 2, 3, 4, 5)):
    """Cross-evaluate train-shot models over test shots.

    `models[train_shot]` is either one predictor reused across test shots or
    a per-test-shot mapping. Returns (matrix, triangle means) where
    matrix[i][j] is accuracy at test shot (i+1) of the model trained at
    shot (j+1). Rows are test shots, so the lower triangle collects the
    runs given more support at test time than the model was trained with;
    extra support only ever enlarges the class pools, which is why the
    lower-triangle mean is expected to lead the diagonal and the diagonal
    to lead the upper triangle.
    """
    train_shots = sorted(models)
    mat = np.zeros((len(test_shots), len(train_shots)))
    per_test_reports: dict[int, list[EvalReport]] = {t: [] for t in test_shots}
    for j, ts in enumerate(train_shots):
        entry = models[ts]
        for i, qs in enumerate(test_shots):
            predict = entry[qs] if isinstance(entry, dict) else entry
            rep = evaluate(predict, manifest, classes, way, qs,
                           queries_per_class, episodes, repeats, seed,
                           extra={"arm": f"train{ts}-test{qs}"})
            per_test_reports[qs].append(rep)
            mat[i, j] = rep.mean_accuracy
    for qs in test_shots:  # same test shot means same stream across models
        _assert_shared_streams(per_test_reports[qs])
    lower = [mat[i, j] for i in range(len(test_shots))
             for j in range(len(train_shots)) if i > j]
    diag = [mat[i, i] for i in range(min(mat.shape))]
    upper = [mat[i, j] for i in range(len(test_shots))
             for j in range(len(train_shots)) if i < j]
    means = {
        "lower": float(np.mean(lower)) if lower else 0.0,
        "diagonal": float(np.mean(diag)),
        "upper": float(np.mean(upper)) if upper else 0.0,
    }
    return mat, means


def export_similarity_matrix(params: EmbeddingParams, episode: Episode,
                             mcfg: MeasureConfig, out_csv, out_json,
                             mode: str = "batch", seed: int = 0) -> np.ndarray:
    """Class-by-query score matrix of one episode, written as CSV + sidecar."""
    batch = np.concatenate([episode.support_images, episode.query_images])
    sets = embed(params, Tensor(batch), mode=mode)
    ns = episode.support_images.shape[0]
    pools = pools_from_support(sets[:ns], episode.support_labels, episode.way)
    cols = [classify(q, pools, mcfg).values for q in sets[ns:]]
    mat = np.stack(cols, axis=1)  # (C, C*Q)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in mat:
            writer.writerow([f"{v:.8f}" for v in row])
    sidecar = {
        "class_names": episode.class_names,
        "way": episode.way,
        "queries_per_class": episode.queries_per_class,
        "query_labels": [int(x) for x in episode.query_labels],
        "seed": seed,
        "episode_digest": episode.digest(),
    }
    Path(out_json).write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
    return mat


def write_report(path, report: EvalReport) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


def write_table_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
