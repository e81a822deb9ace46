"""Episodic training of the embedding through the class-similarity scores,
plus plain classifier pretraining for the frozen-feature baselines.

One optimizer step per episode: embed the episode's support and query images
in a single batch, pool support descriptors by class, score every query
against every class, and descend the cross-entropy of the score rows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (AugmentConfig, ClassSplit, DatasetManifest, augment_batch,
                   sample_episode)
from .embedding import (EmbeddingConfig, EmbeddingParams, HeadParams, embed,
                        embed_global, init_embedding, init_head)
from .errors import ConfigurationError, TrainingDiverged
from .measure import MeasureConfig, episode_score_matrix, pools_from_support
from .rng import substream
from .tensor import Tensor

__all__ = [
    "TrainConfig", "PretrainConfig", "AdamState", "adam_step", "lr_at",
    "episode_loss", "run_episode_forward", "train", "TrainResult",
    "pretrain_classifier", "PretrainResult",
]


@dataclass(frozen=True)
class TrainConfig:
    way: int = 5
    shot: int = 1
    queries_per_class: int = 15
    episodes_total: int = 30_000
    learning_rate: float = 1e-3
    lr_halve_every: int = 10_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    k_neighbors: int = 3
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    val_every: int = 500
    val_episodes: int = 100
    measure_variant: str = "dn4"
    score_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.episodes_total < 0:
            raise ConfigurationError("episodes_total must be nonnegative")
        if self.lr_halve_every < 1:
            raise ConfigurationError("lr_halve_every must be positive")
        if self.val_every < 1:
            raise ConfigurationError("val_every must be positive")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def lr_at(episode_index: int, cfg: TrainConfig) -> float:
    """Initial rate halved once per lr_halve_every episodes."""
    return cfg.learning_rate * 0.5 ** (episode_index // cfg.lr_halve_every)


def adam_step(params: list[Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; missing grads count as zero.

    All gradients are validated before anything mutates, so a divergence
    leaves parameters and state exactly as they were.
    """
    grads = []
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            finite = g[np.isfinite(g)]
            peak = float(np.abs(finite).max()) if finite.size else float("nan")
            raise TrainingDiverged(
                f"non-finite gradient in parameter {i} at step {state.step + 1} "
                f"(finite |g| peak {peak:.3e})")
        grads.append(g)
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * (g * g)
        mhat = state.m[i] / (1 - beta1 ** t)
        vhat = state.v[i] / (1 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def episode_loss(scores: Tensor, labels: np.ndarray, score_scale: float = 1.0) -> Tensor:
    """Mean cross-entropy of the (Q, C) class-score matrix under softmax."""
    z = T.scale(scores, score_scale) if score_scale != 1.0 else scores
    return T.softmax_cross_entropy(z, labels)


def run_episode_forward(params: EmbeddingParams, episode, mcfg: MeasureConfig,
                        variant: str = "dn4", mode: str = "batch") -> Tensor:
    """(Q, C) score matrix of an episode; support and queries share one batch."""
    batch = np.concatenate([episode.support_images, episode.query_images])
    sets = embed(params, Tensor(batch), mode=mode)
    n_support = episode.support_images.shape[0]
    pools = pools_from_support(sets[:n_support], episode.support_labels,
                               episode.way)
    return episode_score_matrix(sets[n_support:], pools, mcfg, variant)


def _episode_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float((scores.argmax(axis=1) == labels).mean())


@dataclass
class TrainResult:
    params: EmbeddingParams          # best-on-validation weights
    final_params: EmbeddingParams    # weights after the last episode
    log: list[dict]
    best_val_accuracy: float
    episodes_run: int
    diverged: bool = False
    divergence_reason: str = ""


def _snapshot(params: EmbeddingParams) -> EmbeddingParams:
    out = init_embedding(params.config, seed=0)
    for src, dst in zip(params.blocks, out.blocks):
        dst.weight.data = src.weight.data.copy()
        dst.bias.data = src.bias.data.copy()
        dst.gamma.data = src.gamma.data.copy()
        dst.beta.data = src.beta.data.copy()
        dst.running_mean = src.running_mean.copy()
        dst.running_var = src.running_var.copy()
    return out


def _validate(params: EmbeddingParams, manifest: DatasetManifest,
              classes, cfg: TrainConfig, mcfg: MeasureConfig) -> float:
    """Accuracy over a fixed stream of validation episodes."""
    accs = []
    for i in range(cfg.val_episodes):
        gen = substream(cfg.seed, "val-episode", i)
        ep = sample_episode(manifest, classes, cfg.way, cfg.shot,
                            cfg.queries_per_class, gen)
        scores = run_episode_forward(params, ep, mcfg, cfg.measure_variant)
        accs.append(_episode_accuracy(scores.data, ep.query_labels))
    return float(np.mean(accs)) if accs else 0.0


def train(cfg: TrainConfig, emb_cfg: EmbeddingConfig,
          manifest: DatasetManifest, split: ClassSplit,
          log_fh=None) -> TrainResult:
    """Episodic training loop with best-on-validation checkpoint selection.

    A non-finite loss or gradient stops the loop; the best (or initial)
    weights survive in the result with diverged=True.
    """
    if not split.train:
        raise ConfigurationError("split has no training classes")
    mcfg = MeasureConfig(k_neighbors=cfg.k_neighbors)
    params = init_embedding(emb_cfg, cfg.seed)
    opt_params = params.parameters()
    adam = AdamState.for_params(opt_params)
    best = _snapshot(params)
    best_acc = -1.0
    log: list[dict] = []
    diverged = False
    reason = ""
    episodes_run = 0
    use_val = bool(split.val) and cfg.val_episodes > 0

    def emit(entry: dict):
        log.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()

    for ep_idx in range(cfg.episodes_total):
        gen = substream(cfg.seed, "train-episode", ep_idx)
        episode = sample_episode(manifest, split.train, cfg.way, cfg.shot,
                                 cfg.queries_per_class, gen)
        if cfg.augment.enabled:
            agen = substream(cfg.seed, "augment", ep_idx)
            episode.support_images = augment_batch(episode.support_images,
                                                   cfg.augment, agen)
            episode.query_images = augment_batch(episode.query_images,
                                                 cfg.augment, agen)
        for p in opt_params:
            p.grad = None
        with T.Tape() as tape:
            scores = run_episode_forward(params, episode, mcfg,
                                         cfg.measure_variant)
            loss = episode_loss(scores, episode.query_labels, cfg.score_scale)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                diverged = True
                reason = f"non-finite loss at episode {ep_idx}"
                break
            tape.backward(loss)
        try:
            adam_step(opt_params, adam, lr_at(ep_idx, cfg),
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        except TrainingDiverged as exc:
            diverged = True
            reason = f"episode {ep_idx}: {exc}"
            break
        episodes_run = ep_idx + 1
        last = ep_idx == cfg.episodes_total - 1
        if ep_idx % cfg.val_every == cfg.val_every - 1 or last:
            entry = {"episode": ep_idx, "loss": round(loss_val, 6),
                     "lr": lr_at(ep_idx, cfg)}
            if use_val:
                val_acc = _validate(params, manifest, split.val, cfg, mcfg)
                entry["val_acc"] = round(val_acc, 6)
                if val_acc > best_acc:
                    best_acc = val_acc
                    best = _snapshot(params)
            emit(entry)

    if best_acc < 0:
        # nothing ever validated: the latest weights are the checkpoint
        best = _snapshot(params)
    if diverged:
        emit({"episode": episodes_run, "event": "diverged", "reason": reason})
    return TrainResult(params=best, final_params=params, log=log,
                       best_val_accuracy=best_acc, episodes_run=episodes_run,
                       diverged=diverged, divergence_reason=reason)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")


@dataclass
class PretrainResult:
    params: EmbeddingParams
    head: HeadParams
    classes: list[str]
    log: list[dict]
    final_train_accuracy: float


def pretrain_classifier(cfg: PretrainConfig, emb_cfg: EmbeddingConfig,
                        manifest: DatasetManifest, split: ClassSplit,
                        log_fh=None) -> PretrainResult:
    """Ordinary softmax classification over every training class.

    Batch statistics drive normalization during training while the running
    buffers track them, so the frozen checkpoint can embed single images.
    """
    classes = sorted(split.train)
    if not classes:
        raise ConfigurationError("split has no training classes")
    class_to_label = {c: i for i, c in enumerate(classes)}
    indices = [i for i, (_, cls) in enumerate(manifest.entries)
               if cls in class_to_label]
    labels_all = np.array([class_to_label[manifest.entries[i][1]] for i in indices],
                          dtype=np.int64)
    images_all = np.stack([manifest.images[i] for i in indices]).astype(np.float32)

    params = init_embedding(emb_cfg, cfg.seed)
    head = init_head(emb_cfg, len(classes), cfg.seed)
    opt_params = params.parameters() + head.parameters()
    adam = AdamState.for_params(opt_params)
    log: list[dict] = []
    acc = 0.0
    order_gen = substream(cfg.seed, "pretrain-order")
    n = len(indices)
    for epoch in range(cfg.epochs):
        order = order_gen.permutation(n)
        losses, hits = [], 0
        for start in range(0, n, cfg.batch_size):
            take = order[start:start + cfg.batch_size]
            if take.size < 2:
                continue  # batch statistics need at least two samples
            xb = Tensor(images_all[take])
            yb = labels_all[take]
            for p in opt_params:
                p.grad = None
            with T.Tape() as tape:
                _, logits = embed_global(params, head, xb, mode="batch",
                                         update_running=True)
                loss = T.softmax_cross_entropy(logits, yb)
                tape.backward(loss)
            adam_step(opt_params, adam, cfg.learning_rate,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            losses.append(loss.item())
            hits += int((logits.data.argmax(axis=1) == yb).sum())
        acc = hits / n
        entry = {"epoch": epoch, "loss": round(float(np.mean(losses)), 6),
                 "train_acc": round(acc, 6)}
        log.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()
    return PretrainResult(params=params, head=head, classes=classes,
                          log=log, final_train_accuracy=acc)
