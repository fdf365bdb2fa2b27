"""Forward diffusion, the MLP denoiser, the text encoder and hand-written backprop.

All trainable state lives in one flat float64 vector (:class:`ModelParams`);
named entries are views into it, laid out by a shape manifest.  The
conditioning path is ``encode(embed(tokens))``: token rows are mean-pooled and
sent through a two-layer network, and the denoiser sees
``concat(z, time_features(t), cond)`` and its output gets a time-gated copy of
``z`` added, since two SiLU layers alone reproduce the identity map poorly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, CorruptFile, NumericError

CHECKPOINT_FORMAT = "mrti-checkpoint/1"

DEFAULT_VOCAB = (
    "<null>", "a", "photo", "of",
    "flat", "stripes", "checker", "speckle",
    "circle", "square", "cross", "triangle",
)
NULL_ID = 0
_STEP_GUARD = 1e-9


# ---------------------------------------------------------------------------
# Noise schedule and forward process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, num_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.2) -> "NoiseSchedule":
        if num_steps < 2:
            raise ConfigurationError("noise schedule needs at least 2 steps")
        beta = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
        if not (np.all(beta > 0) and np.all(beta < 1)):
            raise ConfigurationError("beta values must lie in (0, 1)")
        return cls(beta=beta, alpha_bar=np.cumprod(1.0 - beta))

    @property
    def num_steps(self) -> int:
        return len(self.beta)

    def step_index(self, t: float) -> int:
        """Map diffusion time in [0, 1] to ``floor(t * (N - 1))``.

        The sampler feeds ``t = k / (N - 1)`` back in; a small guard keeps
        products like ``(27 / 99) * 99 = 26.999...`` on step k.
        """
        if not 0.0 <= t <= 1.0:
            raise ConfigurationError(f"diffusion time {t!r} outside [0, 1]")
        return min(int(math.floor(t * (self.num_steps - 1) + _STEP_GUARD)), self.num_steps - 1)

    def alpha_bar_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any((t < 0) | (t > 1)):
            raise ConfigurationError("diffusion time outside [0, 1]")
        k = np.minimum(np.floor(t * (self.num_steps - 1) + _STEP_GUARD).astype(np.int64), self.num_steps - 1)
        return self.alpha_bar[k]

    def posterior_variance(self, k: int) -> float:
        """Variance of q(x_{k-1} | x_k, x_0); zero at the first step."""
        if k == 0:
            return 0.0
        return float(self.beta[k] * (1.0 - self.alpha_bar[k - 1]) / (1.0 - self.alpha_bar[k]))

    def to_dict(self) -> dict:
        return {"num_steps": self.num_steps, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


@dataclass(frozen=True)
class DiffusedSample:
    z: np.ndarray
    t: float
    eps: np.ndarray


def diffuse(x, t: float, eps, sched: NoiseSchedule, alpha_bar: float | None = None) -> DiffusedSample:
    """Corrupt ``x`` to time ``t``: ``sqrt(ab) * x + sqrt(1 - ab) * eps``.

    ``alpha_bar`` overrides the schedule lookup (used by closed-form checks).
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ConfigurationError(f"image shape {x.shape} does not match noise shape {eps.shape}")
    ab = sched.alpha_bar_at(t) if alpha_bar is None else alpha_bar
    z = math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps
    return DiffusedSample(z=z, t=t, eps=eps)


# ---------------------------------------------------------------------------
# Architecture and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    embed_dim: int = 16
    cond_dim: int = 32
    time_dim: int = 16
    hidden: int = 256
    enc_hidden: int = 64
    max_len: int = 8
    vocab: tuple[str, ...] = DEFAULT_VOCAB

    def __post_init__(self):
        if self.time_dim % 2:
            raise ConfigurationError("time_dim must be even")
        if self.vocab[NULL_ID] != "<null>":
            raise ConfigurationError("vocabulary must start with the <null> token")
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigurationError("vocabulary tokens must be unique")

    @property
    def data_dim(self) -> int:
        return self.image_size * self.image_size

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        D, d, c, h, e = self.data_dim, self.embed_dim, self.cond_dim, self.hidden, self.enc_hidden
        din = D + self.time_dim + c
        return [
            ("token_table", (len(self.vocab), d)),
            ("encoder.w1", (d, e)),
            ("encoder.b1", (e,)),
            ("encoder.w2", (e, c)),
            ("encoder.b2", (c,)),
            ("denoiser.w1", (din, h)),
            ("denoiser.b1", (h,)),
            ("denoiser.w2", (h, h)),
            ("denoiser.b2", (h,)),
            ("denoiser.w3", (h, D)),
            ("denoiser.b3", (D,)),
            ("denoiser.skip_w", (self.time_dim,)),
            ("denoiser.skip_b", (1,)),
        ]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["vocab"] = list(self.vocab)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        data = dict(data)
        data["vocab"] = tuple(data["vocab"])
        return cls(**data)


class ModelParams:
    """Flat float64 weight vector plus named views.

    Instances are treated as immutable once built; trainers work on a copy
    and wrap the result in a fresh instance.
    """

    def __init__(self, config: ModelConfig, flat: np.ndarray, lineage: Mapping | None = None):
        self.config = config
        self.manifest = config.manifest()
        size = sum(int(np.prod(s)) for _, s in self.manifest)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ConfigurationError(f"expected {size} weights, got {flat.shape}")
        self.flat = flat
        self.lineage = dict(lineage or {})
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.manifest:
            n = int(np.prod(shape))
            self._views[name] = flat[offset:offset + n].reshape(shape)
            offset += n
        self._null_cond: np.ndarray | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._views[name]
        except KeyError:
            raise ConfigurationError(f"no parameter entry named {name!r}") from None

    def names(self) -> list[str]:
        return [n for n, _ in self.manifest]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy(), self.lineage)

    def checksum(self) -> str:
        return hashlib.sha256(self.flat.tobytes()).hexdigest()

    @property
    def vocab(self) -> tuple[str, ...]:
        return self.config.vocab

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in config.manifest():
            if name == "token_table":
                w = rng.standard_normal(shape)
                w[NULL_ID] = 0.0
            elif name.endswith((".b1", ".b2", ".b3", "skip_w", "skip_b")):
                w = np.zeros(shape)
            else:
                w = rng.standard_normal(shape) / math.sqrt(shape[0])
                if name == "denoiser.w3":
                    w *= 0.1
            parts.append(w.ravel())
        return cls(config, np.concatenate(parts), lineage={"init_seed": seed})


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericError(f"non-finite value in {name} at index {tuple(int(i) for i in bad)}")


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _silu(a):
    return a * _sigmoid(a)


def _silu_grad(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


def time_features(t, width: int) -> np.ndarray:
    """Sinusoidal features of diffusion time; shape (B, width)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.exp(np.linspace(0.0, math.log(300.0), width // 2))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def encode_batch(params: ModelParams, rows: np.ndarray) -> np.ndarray:
    """Mean-pool (B, L, d) rows and map to (B, cond_dim)."""
    m = rows.mean(axis=1)
    h = _silu(m @ params["encoder.w1"] + params["encoder.b1"])
    return h @ params["encoder.w2"] + params["encoder.b2"]


def denoiser_batch(params: ModelParams, z: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
    cfg = params.config
    z = np.atleast_2d(z)
    cond = np.broadcast_to(np.atleast_2d(cond), (z.shape[0], cfg.cond_dim))
    tf = time_features(np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],)), cfg.time_dim)
    inp = np.concatenate([z, tf, cond], axis=1)
    h1 = _silu(inp @ params["denoiser.w1"] + params["denoiser.b1"])
    h2 = _silu(h1 @ params["denoiser.w2"] + params["denoiser.b2"])
    gate = tf @ params["denoiser.skip_w"] + params["denoiser.skip_b"]
    return h2 @ params["denoiser.w3"] + params["denoiser.b3"] + gate[:, None] * z


def denoiser_apply(params: ModelParams, z, t: float, cond) -> np.ndarray:
    """Predict the noise residual for one (z, t, cond); returns a vector of size D."""
    cfg = params.config
    z = np.asarray(z, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if z.shape != (cfg.data_dim,):
        raise ConfigurationError(f"z must have shape ({cfg.data_dim},), got {z.shape}")
    if cond.shape != (cfg.cond_dim,):
        raise ConfigurationError(f"cond must have shape ({cfg.cond_dim},), got {cond.shape}")
    if not 0.0 <= t <= 1.0:
        raise ConfigurationError(f"diffusion time {t!r} outside [0, 1]")
    check_finite("z", z)
    check_finite("cond", cond)
    check_finite("weights", params.flat)
    return denoiser_batch(params, z[None, :], t, cond[None, :])[0]


def denoise_loss(params: ModelParams, x, t: float, eps, cond, sched: NoiseSchedule) -> float:
    """Squared error between predicted and true noise for one draw."""
    d = diffuse(x, t, eps, sched)
    pred = denoiser_apply(params, d.z, t, cond)
    return float(np.sum((pred - d.eps) ** 2))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

CONCEPT_ENTRY = "concept"


@dataclass
class Batch:
    """A mini-batch for :func:`loss_gradient`.

    ``token_ids`` holds vocabulary ids, with ``-1`` marking pseudo-word slots;
    for those slots ``concept_rows`` says which row of the concept matrix to
    substitute.  Rows are re-derived from the current embeddings on every call.
    """

    x: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    token_ids: np.ndarray
    concept_rows: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=np.float64))
        self.t = np.atleast_1d(np.asarray(self.t, dtype=np.float64))
        self.token_ids = np.atleast_2d(np.asarray(self.token_ids, dtype=np.int64))
        if self.concept_rows is None:
            self.concept_rows = np.full_like(self.token_ids, -1)
        self.concept_rows = np.atleast_2d(np.asarray(self.concept_rows, dtype=np.int64))
        B = self.x.shape[0]
        if not (self.eps.shape == self.x.shape and self.t.shape == (B,)
                and self.token_ids.shape[0] == B and self.concept_rows.shape == self.token_ids.shape):
            raise ConfigurationError("inconsistent batch shapes")

    def __len__(self):
        return self.x.shape[0]


def gather_rows(params: ModelParams, token_ids: np.ndarray, concept_rows: np.ndarray,
                concept: np.ndarray | None) -> np.ndarray:
    """Build (B, L, d) embedding rows, padding short sequences with NULL."""
    cfg = params.config
    table = params["token_table"]
    B, n = token_ids.shape
    if n > cfg.max_len:
        raise ConfigurationError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    ids = np.full((B, cfg.max_len), NULL_ID, dtype=np.int64)
    ids[:, :n] = token_ids
    crow = np.full((B, cfg.max_len), -1, dtype=np.int64)
    crow[:, :n] = concept_rows
    pseudo = ids < 0
    if np.any(ids >= len(cfg.vocab)):
        raise ConfigurationError("token id outside vocabulary")
    rows = table[np.where(pseudo, NULL_ID, ids)]
    if np.any(pseudo):
        if concept is None:
            raise ConfigurationError("batch references a pseudo-word but no concept embeddings were given")
        if np.any(crow[pseudo] < 0) or np.any(crow[pseudo] >= len(concept)):
            raise ConfigurationError("pseudo-word slot references a nonexistent concept row")
        rows[pseudo] = concept[crow[pseudo]]
    return rows


def loss_gradient(params: ModelParams, selector: Iterable[str], batch: Batch, sched: NoiseSchedule,
                  concept: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and its exact gradient for the selected entries.

    ``selector`` names manifest entries and/or ``"concept"`` (the T x d
    pseudo-word matrix passed as ``concept``).  Entries outside the selector
    are neither differentiated nor returned.
    """
    selector = set(selector)
    known = set(params.names()) | {CONCEPT_ENTRY}
    unknown = selector - known
    if unknown:
        raise ConfigurationError(f"selector references nonexistent entries: {sorted(unknown)}")
    if CONCEPT_ENTRY in selector and concept is None:
        raise ConfigurationError("selector asks for concept gradients but no concept was given")

    cfg = params.config
    B = len(batch)
    L = cfg.max_len

    ab = sched.alpha_bar_at(batch.t)
    z = np.sqrt(ab)[:, None] * batch.x + np.sqrt(1.0 - ab)[:, None] * batch.eps

    rows = gather_rows(params, batch.token_ids, batch.concept_rows, concept)
    m = rows.mean(axis=1)
    ea = m @ params["encoder.w1"] + params["encoder.b1"]
    eh = _silu(ea)
    cond = eh @ params["encoder.w2"] + params["encoder.b2"]

    tf = time_features(batch.t, cfg.time_dim)
    inp = np.concatenate([z, tf, cond], axis=1)
    a1 = inp @ params["denoiser.w1"] + params["denoiser.b1"]
    h1 = _silu(a1)
    a2 = h1 @ params["denoiser.w2"] + params["denoiser.b2"]
    h2 = _silu(a2)
    gate = tf @ params["denoiser.skip_w"] + params["denoiser.skip_b"]
    out = h2 @ params["denoiser.w3"] + params["denoiser.b3"] + gate[:, None] * z

    resid = out - batch.eps
    loss = float(np.sum(resid ** 2) / B)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")

    grads: dict[str, np.ndarray] = {}
    g_out = 2.0 * resid / B
    if "denoiser.w3" in selector:
        grads["denoiser.w3"] = h2.T @ g_out
    if "denoiser.b3" in selector:
        grads["denoiser.b3"] = g_out.sum(axis=0)
    if "denoiser.skip_w" in selector or "denoiser.skip_b" in selector:
        g_gate = np.sum(g_out * z, axis=1)
        if "denoiser.skip_w" in selector:
            grads["denoiser.skip_w"] = tf.T @ g_gate
        if "denoiser.skip_b" in selector:
            grads["denoiser.skip_b"] = np.array([g_gate.sum()])
    g_a2 = (g_out @ params["denoiser.w3"].T) * _silu_grad(a2)
    if "denoiser.w2" in selector:
        grads["denoiser.w2"] = h1.T @ g_a2
    if "denoiser.b2" in selector:
        grads["denoiser.b2"] = g_a2.sum(axis=0)
    g_a1 = (g_a2 @ params["denoiser.w2"].T) * _silu_grad(a1)
    if "denoiser.w1" in selector:
        grads["denoiser.w1"] = inp.T @ g_a1
    if "denoiser.b1" in selector:
        grads["denoiser.b1"] = g_a1.sum(axis=0)

    upstream = {"encoder.w1", "encoder.b1", "encoder.w2", "encoder.b2", "token_table", CONCEPT_ENTRY}
    if selector & upstream:
        D = cfg.data_dim
        g_cond = g_a1 @ params["denoiser.w1"][D + cfg.time_dim:].T
        if "encoder.w2" in selector:
            grads["encoder.w2"] = eh.T @ g_cond
        if "encoder.b2" in selector:
            grads["encoder.b2"] = g_cond.sum(axis=0)
        g_ea = (g_cond @ params["encoder.w2"].T) * _silu_grad(ea)
        if "encoder.w1" in selector:
            grads["encoder.w1"] = m.T @ g_ea
        if "encoder.b1" in selector:
            grads["encoder.b1"] = g_ea.sum(axis=0)
        g_row = (g_ea @ params["encoder.w1"].T) / L  # same for every row of a sequence
        n = batch.token_ids.shape[1]
        ids = np.full((B, L), NULL_ID, dtype=np.int64)
        ids[:, :n] = batch.token_ids
        crow = np.full((B, L), -1, dtype=np.int64)
        crow[:, :n] = batch.concept_rows
        g_rows = np.broadcast_to(g_row[:, None, :], (B, L, cfg.embed_dim))
        pseudo = ids < 0
        if "token_table" in selector:
            g_table = np.zeros_like(params["token_table"])
            np.add.at(g_table, ids[~pseudo], g_rows[~pseudo])
            grads["token_table"] = g_table
        if CONCEPT_ENTRY in selector:
            g_concept = np.zeros_like(concept, dtype=np.float64)
            np.add.at(g_concept, crow[pseudo], g_rows[pseudo])
            grads[CONCEPT_ENTRY] = g_concept
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------


def _write_blob_file(path, header: dict, blob: np.ndarray) -> None:
    data = np.ascontiguousarray(blob, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(data)


def read_blob_file(path) -> tuple[dict, np.ndarray]:
    """Read any of the package's header-plus-float64 files."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CorruptFile(f"{path}: missing JSON header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    if (len(raw) - nl - 1) % 8:
        raise CorruptFile(f"{path}: payload is not a whole number of float64 values")
    blob = np.frombuffer(raw[nl + 1:], dtype="<f8").astype(np.float64)
    return header, blob


def save_checkpoint(params: ModelParams, path, schedule: NoiseSchedule) -> None:
    cfg = params.config
    header = {
        "format": CHECKPOINT_FORMAT,
        "D": cfg.data_dim,
        "d": cfg.embed_dim,
        "cond_dim": cfg.cond_dim,
        "N": schedule.num_steps,
        "schedule": schedule.to_dict(),
        "config": cfg.to_dict(),
        "manifest": [[n, list(s)] for n, s in params.manifest],
        "lineage": params.lineage,
        "sha256": params.checksum(),
    }
    _write_blob_file(path, header, params.flat)


def load_checkpoint(path) -> tuple[ModelParams, NoiseSchedule]:
    header, blob = read_blob_file(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a model checkpoint (format {header.get('format')!r})")
    cfg = ModelConfig.from_dict(header["config"])
    if [[n, list(s)] for n, s in cfg.manifest()] != header["manifest"]:
        raise CorruptFile(f"{path}: shape manifest does not match configuration")
    params = ModelParams(cfg, blob, header.get("lineage"))
    if header.get("sha256") not in (None, params.checksum()):
        raise CorruptFile(f"{path}: weight checksum mismatch, file is corrupt")
    s = header["schedule"]
    return params, NoiseSchedule.linear(s["num_steps"], s["beta_start"], s["beta_end"])
