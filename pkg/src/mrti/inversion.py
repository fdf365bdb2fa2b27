"""Pretraining the toy text-to-image model and learning pseudo-word embeddings.

Inversion never touches the model weights: gradients are requested only for
the pseudo-word matrix, and the optimizer only ever sees that matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .conditioning import MultiResEmbeddingSet, Vocabulary, bucket_indices
from .corpus import SHAPES, TEXTURES, ConceptSet, Corpus
from .diffusion import (NULL_ID, Batch, ModelConfig, ModelParams, NoiseSchedule, check_finite,
                        loss_gradient)
from .errors import ConfigurationError, NumericError, TrainingAborted

log = logging.getLogger(__name__)


class Adam:
    """Adam over a dict of arrays, updated in place.

    With ``sparse_rows=True`` a row whose gradient is exactly zero is left
    alone (no moment decay, no step), so each row behaves as if it were
    optimized on its own.
    """

    def __init__(self, arrays: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 sparse_rows: bool = False):
        self.arrays = arrays
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.sparse_rows = sparse_rows
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        if sparse_rows:
            self.t = {k: np.zeros(v.shape[0], dtype=np.int64) for k, v in arrays.items()}
        else:
            self.t = {k: 0 for k in arrays}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            p, m, v = self.arrays[name], self.m[name], self.v[name]
            if self.sparse_rows:
                rows = np.flatnonzero(np.any(g.reshape(g.shape[0], -1) != 0, axis=1))
                if rows.size == 0:
                    continue
                self.t[name][rows] += 1
                step = self.t[name][rows].astype(np.float64).reshape((-1,) + (1,) * (g.ndim - 1))
                m[rows] = self.b1 * m[rows] + (1 - self.b1) * g[rows]
                v[rows] = self.b2 * v[rows] + (1 - self.b2) * g[rows] ** 2
                mhat = m[rows] / (1 - self.b1 ** step)
                vhat = v[rows] / (1 - self.b2 ** step)
                p[rows] -= lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                self.t[name] += 1
                k = self.t[name]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                p -= lr * (m / (1 - self.b1 ** k)) / (np.sqrt(v / (1 - self.b2 ** k)) + self.eps)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 128
    learning_rate: float = 2e-3
    warmup: int = 200
    cond_dropout: float = 0.1
    word_dropout: float = 0.15
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    ema_decay: float = 0.999


def caption_ids(vocab: Vocabulary, captions: Sequence[str], max_len: int) -> np.ndarray:
    ids = np.full((len(captions), max_len), NULL_ID, dtype=np.int64)
    for i, cap in enumerate(captions):
        toks = vocab.tokenize(cap)
        if len(toks) > max_len:
            raise ConfigurationError(f"caption {cap!r} longer than max_len {max_len}")
        ids[i, :len(toks)] = toks
    return ids


def drop_conditioning(ids: np.ndarray, rng: np.random.Generator, cond_dropout: float,
                      word_dropout: float, content_ids: np.ndarray) -> np.ndarray:
    """Replace whole captions (prob ``cond_dropout``) or single content words with NULL.

    A dropped caption becomes the all-NULL sequence, i.e. exactly the input of
    :func:`null_conditioning`.
    """
    ids = ids.copy()
    drop_all = rng.random(ids.shape[0]) < cond_dropout
    drop_word = (rng.random(ids.shape) < word_dropout) & np.isin(ids, content_ids)
    ids[drop_word] = NULL_ID
    ids[drop_all] = NULL_ID
    return ids


def _lr_at(step: int, cfg) -> float:
    if step < cfg.warmup:
        return cfg.learning_rate * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class TrainingLog:
    seed: int
    losses: list[float] = field(default_factory=list)
    buckets: list[list[int]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "losses": self.losses, **self.extra}
        if self.buckets:
            out["buckets"] = self.buckets
        return out


def pretrain(corpus: Corpus, arch: ModelConfig, sched: NoiseSchedule, cfg: PretrainConfig = PretrainConfig(),
             progress: Optional[Callable[[int, float], None]] = None) -> tuple[ModelParams, TrainingLog]:
    """Fit the denoiser, encoder and token table on the corpus (all weights trainable).

    The returned weights are an exponential moving average of the iterates
    (``cfg.ema_decay``; 0 returns the last iterate).
    """
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.init(arch, seed=cfg.seed)
    X = np.stack([it.image for it in corpus.train])
    if X.shape[1] != arch.data_dim:
        raise ConfigurationError(f"corpus images have {X.shape[1]} pixels, model expects {arch.data_dim}")
    vocab = Vocabulary(arch.vocab)
    ids = caption_ids(vocab, [it.caption for it in corpus.train], arch.max_len)
    content = np.array([vocab.id(w) for w in SHAPES + TEXTURES if w in vocab])

    names = params.names()
    adam = Adam({n: params[n] for n in names}, cfg.learning_rate)
    trace = TrainingLog(seed=cfg.seed)
    ema = params.flat.copy()
    initial = None
    over = 0
    for step in range(cfg.steps):
        idx = rng.integers(0, len(X), size=cfg.batch_size)
        t = rng.random(cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, arch.data_dim))
        tok = drop_conditioning(ids[idx], rng, cfg.cond_dropout, cfg.word_dropout, content)
        try:
            loss, grads = loss_gradient(params, names, Batch(X[idx], t, eps, tok), sched)
        except NumericError as exc:
            raise TrainingAborted(f"pretraining step {step}: {exc}") from None
        grads["token_table"][NULL_ID] = 0.0  # the NULL row stays at zero
        adam.step(grads, _lr_at(step, cfg))
        decay = min(cfg.ema_decay, (1.0 + step) / (10.0 + step))
        ema *= decay
        ema += (1.0 - decay) * params.flat
        trace.losses.append(loss)
        if initial is None:
            initial = loss
        over = over + 1 if loss > cfg.divergence_factor * initial else 0
        if over >= cfg.divergence_patience:
            raise TrainingAborted(f"loss above {cfg.divergence_factor}x initial for {over} steps (step {step})")
        if progress is not None and (step % 500 == 0 or step == cfg.steps - 1):
            progress(step, float(np.mean(trace.losses[-500:])))
    check_finite("pretrained weights", ema)
    lineage = {"init_seed": cfg.seed, "pretrain_seed": cfg.seed, "pretrain_steps": cfg.steps,
               "ema_decay": cfg.ema_decay}
    return ModelParams(arch, ema, lineage), trace


def evaluate_loss(params: ModelParams, sched: NoiseSchedule, images: np.ndarray, captions: Sequence[str] | None,
                  seed: int = 0, draws: int = 8) -> float:
    """Mean denoising loss over ``images`` with shared (t, eps) draws.

    ``captions=None`` evaluates with the all-NULL prompt.
    """
    cfg = params.config
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(cfg.vocab)
    if captions is None:
        ids = np.full((len(images), cfg.max_len), NULL_ID, dtype=np.int64)
    else:
        ids = caption_ids(vocab, captions, cfg.max_len)
    total = 0.0
    for _ in range(draws):
        t = rng.random(len(images))
        eps = rng.standard_normal(images.shape)
        loss, _ = loss_gradient(params, [], Batch(images, t, eps, ids), sched)
        total += loss
    return total / draws


# ---------------------------------------------------------------------------
# Inversion
# ---------------------------------------------------------------------------


@dataclass
class InversionConfig:
    T: int = 10
    steps: int = 5000
    batch_size: int = 8
    learning_rate: float = 5e-3
    seed: int = 0
    init_word: Optional[str] = None
    init_std: float = 0.02
    objective: str = "multires"

    def __post_init__(self):
        if self.steps < 1 or self.T < 1 or self.batch_size < 1:
            raise ConfigurationError("steps, T and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.objective not in ("vanilla", "multires"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")


def template_ids(vocab: Vocabulary, template: str) -> np.ndarray:
    """Token ids for a caption template; the ``{}`` slot becomes -1."""
    out = []
    for word in template.split():
        out.append(-1 if word == "{}" else vocab.id(word))
    if out.count(-1) != 1:
        raise ConfigurationError(f"template {template!r} must contain one '{{}}' slot")
    return np.array(out, dtype=np.int64)


def initial_embeddings(model: ModelParams, cfg: InversionConfig, T: int) -> np.ndarray:
    d = model.config.embed_dim
    if cfg.init_word is not None:
        vocab = Vocabulary(model.config.vocab)
        row = model["token_table"][vocab.id(cfg.init_word)]
        return np.tile(row, (T, 1)).astype(np.float64)
    rng = np.random.default_rng([cfg.seed, 1])
    return rng.normal(0.0, cfg.init_std, size=(T, d))


def _invert(model: ModelParams, sched: NoiseSchedule, concept: ConceptSet, cfg: InversionConfig, T: int,
            pick_rows: Callable[[np.ndarray], np.ndarray]) -> tuple[MultiResEmbeddingSet, TrainingLog]:
    X = concept.array
    if X.shape[1] != model.config.data_dim:
        raise ConfigurationError(f"concept images have {X.shape[1]} pixels, model expects {model.config.data_dim}")
    vocab = Vocabulary(model.config.vocab)
    templates = [template_ids(vocab, tmpl) for tmpl in concept.templates]
    E = initial_embeddings(model, cfg, T)
    adam = Adam({"concept": E}, cfg.learning_rate, sparse_rows=True)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainingLog(seed=cfg.seed, extra={"objective": cfg.objective, "T": T})
    B = cfg.batch_size
    for step in range(cfg.steps):
        xi = rng.integers(0, len(X), size=B)
        t = rng.random(B)
        eps = rng.standard_normal((B, X.shape[1]))
        tmpl = templates[step % len(templates)]
        rows = pick_rows(t)
        tok = np.tile(tmpl, (B, 1))
        crow = np.where(tok < 0, rows[:, None], -1)
        try:
            loss, grads = loss_gradient(model, ["concept"], Batch(X[xi], t, eps, tok, crow), sched, concept=E)
        except NumericError as exc:
            raise TrainingAborted(f"inversion step {step} (t={t.tolist()}): {exc}") from None
        adam.step(grads)
        trace.losses.append(loss)
        trace.buckets.append(rows.tolist())
    try:
        check_finite("concept embeddings", E)
    except NumericError as exc:
        raise TrainingAborted(str(exc)) from None
    return MultiResEmbeddingSet(concept.name, E), trace


def invert_single(model: ModelParams, sched: NoiseSchedule, concept: ConceptSet,
                  cfg: InversionConfig) -> tuple[MultiResEmbeddingSet, TrainingLog]:
    """Vanilla Textual Inversion: one embedding shared by every noise level."""
    if cfg.T != 1:
        raise ConfigurationError("invert_single learns a single embedding; set T=1")
    return _invert(model, sched, concept, cfg, 1, lambda t: np.zeros(len(t), dtype=np.int64))


def invert_multires(model: ModelParams, sched: NoiseSchedule, concept: ConceptSet,
                    cfg: InversionConfig) -> tuple[MultiResEmbeddingSet, TrainingLog]:
    """One embedding per time bucket; a draw at time t trains bucket ``floor(t*T)``."""
    T = cfg.T
    return _invert(model, sched, concept, cfg, T, lambda t: bucket_indices(t, T))


def invert(model: ModelParams, sched: NoiseSchedule, concept: ConceptSet, cfg: InversionConfig):
    if cfg.objective == "vanilla":
        return invert_single(model, sched, concept, cfg)
    return invert_multires(model, sched, concept, cfg)
