"""Agreement metrics between generated samples and a concept set."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .conditioning import MultiResEmbeddingSet
from .corpus import SHAPES, TEXTURES, ConceptSet, Corpus
from .diffusion import ModelParams, NoiseSchedule
from .errors import ConfigurationError
from .prompt import Pseudo, Word, compile_prompt
from .samplers import ConditioningPolicy, PolicyKind, ancestral_sample

DEFAULT_T_GRID = (0.0, 0.2, 0.4, 0.5, 0.7, 0.8)
MASK_THRESHOLD = -0.6


def energy_distance(A, B) -> float:
    """``2 E|a-b| - E|a-a'| - E|b-b'|`` with all pairs (diagonals included)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if len(A) < 2 or len(B) < 2:
        raise ConfigurationError("energy distance needs at least two points per set")
    if A.shape[1] != B.shape[1]:
        raise ConfigurationError("sets must share a dimension")
    ab = cdist(A, B).mean()
    aa = cdist(A, A).mean()
    bb = cdist(B, B).mean()
    return float(max(2.0 * ab - aa - bb, 0.0))


def downsample(images: np.ndarray, factor: int = 4) -> np.ndarray:
    images = np.atleast_2d(images)
    n = int(round(np.sqrt(images.shape[1])))
    m = n // factor
    return images.reshape(-1, m, factor, m, factor).mean(axis=(2, 4)).reshape(len(images), -1)


def texture_features(images: np.ndarray) -> np.ndarray:
    """Mean |horizontal| and |vertical| neighbour difference inside the foreground mask."""
    images = np.atleast_2d(images)
    n = int(round(np.sqrt(images.shape[1])))
    img = images.reshape(-1, n, n)
    fg = img > MASK_THRESHOLD
    feats = np.zeros((len(img), 2))
    for axis, col in ((2, 0), (1, 1)):
        diff = np.abs(np.diff(img, axis=axis))
        both = fg[:, :, 1:] & fg[:, :, :-1] if axis == 2 else fg[:, 1:, :] & fg[:, :-1, :]
        cnt = both.sum(axis=(1, 2))
        feats[:, col] = np.where(cnt > 0, (diff * both).sum(axis=(1, 2)) / np.maximum(cnt, 1), 0.0)
    return feats


class ShapeClassifier:
    """5-nearest-neighbour shape vote on 4x4 block means."""

    def __init__(self, images: np.ndarray, labels: Sequence[str], k: int = 5):
        self.ref = downsample(np.asarray(images))
        self.labels = np.asarray(labels)
        self.k = k

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "ShapeClassifier":
        items = corpus.items
        return cls(np.stack([it.image for it in items]), [it.spec.shape for it in items])

    def predict(self, images: np.ndarray, exclude_self: bool = False) -> np.ndarray:
        dist = cdist(downsample(images), self.ref)
        if exclude_self:
            np.fill_diagonal(dist, np.inf)
        nn = np.argsort(dist, axis=1, kind="stable")[:, :self.k]
        votes = self.labels[nn]
        out = []
        for row in votes:
            names, counts = np.unique(row, return_counts=True)
            best = counts.max()
            # ties go to the nearest neighbour among the tied labels
            out.append(next(v for v in row if counts[names == v][0] == best))
        return np.array(out)


class TextureClassifier:
    """Nearest centroid in high-frequency feature space."""

    def __init__(self, images: np.ndarray, labels: Sequence[str]):
        feats = texture_features(np.asarray(images))
        labels = np.asarray(labels)
        self.names = np.array([t for t in TEXTURES if t in set(labels)])
        self.centroids = np.stack([feats[labels == t].mean(axis=0) for t in self.names])

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "TextureClassifier":
        items = corpus.items
        return cls(np.stack([it.image for it in items]), [it.spec.texture for it in items])

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.names[np.argmin(cdist(texture_features(images), self.centroids), axis=1)]


@dataclass
class AgreementRow:
    policy: str
    t_fixed: Optional[float]
    energy_distance: float
    per_seed_energy: list[float]
    shape_match: float
    texture_match: float
    samples: int
    seeds: list[int]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AgreementReport:
    concept: str
    rows: list[AgreementRow] = field(default_factory=list)
    samples: dict = field(default_factory=dict)  # (policy, t_fixed, seed) -> array, not serialized

    def to_dict(self) -> dict:
        return {"concept": self.concept, "rows": [r.to_dict() for r in self.rows]}

    def row(self, policy: str, t_fixed: Optional[float] = None) -> AgreementRow:
        for r in self.rows:
            if r.policy == policy and (t_fixed is None or r.t_fixed == t_fixed):
                return r
        raise KeyError((policy, t_fixed))

    def curve(self, policy: str) -> list[AgreementRow]:
        return [r for r in self.rows if r.policy == policy]


def concept_prompt(name: str, policy: ConditioningPolicy, template: str = "a photo of a {}") -> list:
    return [Pseudo(name, policy) if w == "{}" else Word(w) for w in template.split()]


def agreement_curve(model: ModelParams, sched: NoiseSchedule, emb_set: MultiResEmbeddingSet, concept: ConceptSet,
                    policies: Sequence[str] = ("fixed", "semi", "full"), t_grid: Sequence[float] = DEFAULT_T_GRID,
                    samples_per_point: int = 500, seeds: Sequence[int] = (0, 1, 2),
                    shape_clf: Optional[ShapeClassifier] = None, texture_clf: Optional[TextureClassifier] = None,
                    template: str = "a photo of a {}", workers: int = 1, min_samples: int = 2,
                    uncond_full_prompt: bool = False, bucketed_lookup: bool = False) -> AgreementReport:
    """Sample under each (policy, t_fixed) and measure agreement with the concept set.

    The unconditional (all-NULL prompt) baseline is always the first row.
    Every row reuses the same sampling seeds, so rows differ only through the
    conditioning schedule.
    """
    if isinstance(policies, str):
        policies = [policies]
    if samples_per_point < min_samples:
        raise ConfigurationError(f"samples_per_point must be at least {min_samples}")
    reference = concept.array
    registry = {emb_set.name: emb_set}

    jobs = [("unconditional", None)]
    for kind in policies:
        for tf in t_grid:
            jobs.append((PolicyKind(kind).value, float(tf)))

    def schedule_for(kind, tf):
        if kind == "unconditional":
            return compile_prompt([], registry, model)
        ast = concept_prompt(emb_set.name, ConditioningPolicy(kind, tf), template)
        return compile_prompt(ast, registry, model, uncond_full_prompt=uncond_full_prompt,
                              bucketed_lookup=bucketed_lookup)

    def run(job):
        (kind, tf), seed = job
        x, _ = ancestral_sample(model, sched, schedule_for(kind, tf), seed, n=samples_per_point)
        return x

    tasks = [(job, s) for job in jobs for s in seeds]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(task) for task in tasks]

    target_shape = target_texture = None
    if shape_clf is not None:
        target_shape = _majority(shape_clf.predict(reference))
    if texture_clf is not None:
        target_texture = _majority(texture_clf.predict(reference))

    report = AgreementReport(concept=emb_set.name)
    for ji, (kind, tf) in enumerate(jobs):
        per_seed = results[ji * len(seeds):(ji + 1) * len(seeds)]
        for s, x in zip(seeds, per_seed):
            report.samples[(kind, tf, s)] = x
        pooled = np.concatenate(per_seed)
        report.rows.append(AgreementRow(
            policy=kind,
            t_fixed=tf,
            energy_distance=energy_distance(pooled, reference),
            per_seed_energy=[energy_distance(x, reference) for x in per_seed],
            shape_match=float(np.mean(shape_clf.predict(pooled) == target_shape)) if shape_clf else float("nan"),
            texture_match=float(np.mean(texture_clf.predict(pooled) == target_texture)) if texture_clf else float("nan"),
            samples=len(pooled),
            seeds=list(seeds),
        ))
    return report


def _majority(labels: np.ndarray) -> str:
    names, counts = np.unique(labels, return_counts=True)
    return str(names[np.argmax(counts)])


def spearman(values: Sequence[float], positions: Sequence[float] | None = None) -> float:
    from scipy.stats import spearmanr

    positions = np.arange(len(values)) if positions is None else positions
    return float(spearmanr(positions, values).statistic)
