"""Time-dependent conditioning policies and the ancestral reverse-diffusion loop."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .conditioning import MultiResEmbeddingSet, bucket_index, embedding_at
from .diffusion import NULL_ID, ModelParams, NoiseSchedule, denoiser_batch
from .errors import DomainError, NumericError


class PolicyKind(str, enum.Enum):
    FIXED = "fixed"
    SEMI = "semi"
    FULL = "full"
    STATIC = "static"


@dataclass(frozen=True)
class ConditioningPolicy:
    kind: PolicyKind
    t_fixed: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if not 0.0 <= self.t_fixed <= 1.0:
            raise DomainError(f"t_fixed={self.t_fixed!r} outside [0, 1]")

    @classmethod
    def fixed(cls, t):
        return cls(PolicyKind.FIXED, float(t))

    @classmethod
    def semi(cls, t):
        return cls(PolicyKind.SEMI, float(t))

    @classmethod
    def full(cls, t):
        return cls(PolicyKind.FULL, float(t))

    @classmethod
    def static(cls):
        return cls(PolicyKind.STATIC, 0.0)


def _lookup(emb_set: MultiResEmbeddingSet, t: float, bucketed: bool) -> tuple[np.ndarray, str]:
    if bucketed:
        k = bucket_index(t, emb_set.T)
        return emb_set.embeddings[k].copy(), f"bucket-{k}"
    return embedding_at(emb_set, t), f"interpolated({t:.6g})"


def resolve_policy(emb_set: MultiResEmbeddingSet, policy: ConditioningPolicy, t: float,
                   null_row: np.ndarray, bucketed: bool = False) -> tuple[np.ndarray, str]:
    """Embedding for the pseudo-word slot at sampling time ``t`` plus its source tag."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"diffusion time {t!r} outside [0, 1]")
    kind, tf = policy.kind, policy.t_fixed
    if kind is PolicyKind.STATIC:
        return emb_set.embeddings[0].copy(), "static"
    if kind is PolicyKind.FIXED:
        return _lookup(emb_set, tf, bucketed)
    if t >= tf:
        return _lookup(emb_set, t, bucketed)
    if kind is PolicyKind.SEMI:
        return np.array(null_row, dtype=np.float64), "null"
    return _lookup(emb_set, tf, bucketed)


def policy_embedding(emb_set: MultiResEmbeddingSet, policy: ConditioningPolicy, t: float,
                     params: ModelParams, bucketed: bool = False) -> np.ndarray:
    """Fixed: emb(t_f) always.  Semi: emb(t) for t >= t_f, NULL row below.
    Full: emb(t) for t >= t_f, emb(t_f) below.  Static: the first bucket."""
    return resolve_policy(emb_set, policy, t, params["token_table"][NULL_ID], bucketed)[0]


@dataclass
class StepRecord:
    step: int
    t: float
    sources: list[str]
    rng_checksum: Optional[str]


@dataclass
class SampleTrace:
    seed: int
    n: int
    init_checksum: str
    records: list[StepRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n": self.n,
            "init_checksum": self.init_checksum,
            "records": [r.__dict__ for r in self.records],
        }


def _crc(arr: np.ndarray) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(arr).tobytes()):08x}"


def ancestral_sample(model: Optional[ModelParams], sched: NoiseSchedule, prompt_schedule, seed: int,
                     n: int = 1, return_trace: bool = False,
                     denoiser: Optional[Callable[[np.ndarray, float, Optional[np.ndarray]], np.ndarray]] = None,
                     data_dim: Optional[int] = None, clip: bool = True):
    """Draw ``n`` samples by ancestral DDPM updates from step N-1 down to 0.

    At step k the sampling time is ``t = k / (N - 1)``; the prompt schedule is
    resolved at t, encoded, and fed to the denoiser.  ``denoiser`` replaces the
    model's network (used for closed-form checks); with it, ``model`` and
    ``prompt_schedule`` may be None and ``data_dim`` must be given.  Returns
    ``(samples, trace)`` where trace is None unless requested.
    """
    if denoiser is None:
        if model is None:
            raise ValueError("either model or denoiser is required")

        def denoiser(z, t, cond):
            return denoiser_batch(model, z, t, cond)

    D = model.config.data_dim if model is not None else data_dim
    if D is None:
        raise ValueError("data_dim is required without a model")
    rng = np.random.default_rng(seed)
    N = sched.num_steps
    z = rng.standard_normal((n, D))
    trace = SampleTrace(seed=seed, n=n, init_checksum=_crc(z)) if return_trace else None

    for k in range(N - 1, -1, -1):
        t = k / (N - 1)
        if prompt_schedule is not None:
            cond = prompt_schedule.conditioning(t)
            sources = prompt_schedule.sources(t)
        else:
            cond, sources = None, []
        eps_hat = denoiser(z, t, cond)
        beta = sched.beta[k]
        ab = sched.alpha_bar[k]
        mean = (z - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
        if k > 0:
            noise = rng.standard_normal((n, D))
            z = mean + np.sqrt(sched.posterior_variance(k)) * noise
            checksum = _crc(noise)
        else:
            z = mean
            checksum = None
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite sampler state at step {k}")
        if trace is not None:
            trace.records.append(StepRecord(step=k, t=t, sources=sources, rng_checksum=checksum))

    if clip:
        z = np.clip(z, -1.0, 1.0)
    return z, trace
