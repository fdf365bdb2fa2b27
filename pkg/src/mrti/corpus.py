"""Synthetic captioned shapes: coarse structure is the shape, fine structure the texture."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditioning import Vocabulary
from .diffusion import DEFAULT_VOCAB
from .errors import ConfigurationError

SHAPES = ("circle", "square", "cross", "triangle")
TEXTURES = ("flat", "stripes", "checker", "speckle")
CAPTION_TEMPLATE = "a photo of a {texture} {shape}"
MAX_SHIFT = 2


@dataclass(frozen=True)
class ConceptSpec:
    shape: str
    texture: str
    scale: float = 0.75
    contrast: float = 1.0
    size: int = 16

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigurationError(f"unknown shape {self.shape!r}")
        if self.texture not in TEXTURES:
            raise ConfigurationError(f"unknown texture {self.texture!r}")
        if not (0 < self.scale <= 1 and 0 < self.contrast <= 1):
            raise ConfigurationError("scale and contrast must lie in (0, 1]")


DEFAULT_HELDOUT = ConceptSpec("triangle", "stripes", scale=0.6, contrast=0.9)


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return xx ** 2 + yy ** 2 <= r ** 2
    if shape == "square":
        return np.maximum(np.abs(xx), np.abs(yy)) <= 0.8 * r
    if shape == "cross":
        arm = np.minimum(np.abs(xx), np.abs(yy)) <= 0.3 * r
        return arm & (np.maximum(np.abs(xx), np.abs(yy)) <= r)
    # apex up: the half-width grows linearly from the top edge
    return (yy >= -r) & (yy <= r) & (np.abs(xx) <= (yy + r) / 2.0)


def fill_levels(contrast: float) -> tuple[float, float, float]:
    """(high, low, flat) intensities; flat is the average so 4x4 pooling hides texture."""
    hi = -1.0 + 2.0 * contrast
    lo = -1.0 + 0.8 * contrast
    return hi, lo, 0.5 * (hi + lo)


def render_concept(spec: ConceptSpec, seed: int) -> np.ndarray:
    """Render one jittered image as a flat vector of length size*size in [-1, 1]."""
    rng = np.random.default_rng(seed)
    dy, dx = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
    n = spec.size
    iy, ix = np.mgrid[0:n, 0:n]
    half = (n - 1) / 2.0
    yy = iy - half - dy
    xx = ix - half - dx
    mask = _shape_mask(spec.shape, yy, xx, spec.scale * n / 2.0)

    hi, lo, flat = fill_levels(spec.contrast)
    # texture coordinates move with the object
    ty, tx = iy - dy, ix - dx
    if spec.texture == "flat":
        tex = np.full((n, n), flat)
    elif spec.texture == "stripes":
        tex = np.where(tx % 2 == 0, hi, lo)
    elif spec.texture == "checker":
        tex = np.where((tx + ty) % 2 == 0, hi, lo)
    else:
        tex = np.where(rng.random((n, n)) < 0.5, hi, lo)
    img = np.where(mask, tex, -1.0)
    return img.ravel().astype(np.float64)


def caption_for(spec: ConceptSpec, template: str = CAPTION_TEMPLATE) -> str:
    return template.format(texture=spec.texture, shape=spec.shape)


@dataclass
class CorpusItem:
    image: np.ndarray
    caption: str
    spec: ConceptSpec
    seed: int


@dataclass
class Corpus:
    train: list[CorpusItem]
    heldout: list[CorpusItem]
    vocabulary: Vocabulary

    @property
    def items(self) -> list[CorpusItem]:
        return self.train + self.heldout

    def __len__(self):
        return len(self.train) + len(self.heldout)


def default_grid(scale: float = 0.75, contrast: float = 1.0) -> list[ConceptSpec]:
    return [ConceptSpec(s, t, scale, contrast) for s, t in itertools.product(SHAPES, TEXTURES)]


def make_corpus(grid: Sequence[ConceptSpec] | None = None, jitters: int = 32,
                templates: Sequence[str] = (CAPTION_TEMPLATE,), seed: int = 0,
                heldout_fraction: float = 0.1, vocab: Sequence[str] = DEFAULT_VOCAB) -> Corpus:
    """Render every spec at ``jitters`` jitter seeds and caption it.

    Jitter seeds are shared across specs, so the k-th render of every spec has
    the same translation.  Items are split into train/held-out by ``seed``.
    """
    grid = list(grid) if grid is not None else default_grid()
    if not grid or jitters < 1:
        raise ConfigurationError("corpus grid must be non-empty")
    vocabulary = Vocabulary(tuple(vocab))
    items = []
    for gi, spec in enumerate(grid):
        for j in range(jitters):
            template = templates[(gi * jitters + j) % len(templates)]
            caption = caption_for(spec, template)
            for word in caption.split():
                if word not in vocabulary:
                    raise ConfigurationError(f"vocabulary overflow: caption word {word!r} not in vocabulary")
            jseed = 1000 + j
            items.append(CorpusItem(render_concept(spec, jseed), caption, spec, jseed))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    n_held = int(round(heldout_fraction * len(items)))
    held = set(order[:n_held].tolist())
    train = [it for i, it in enumerate(items) if i not in held]
    heldout = [it for i, it in enumerate(items) if i in held]
    return Corpus(train, heldout, vocabulary)


@dataclass
class ConceptSet:
    name: str
    images: list[np.ndarray]
    spec: ConceptSpec | None = None
    templates: tuple[str, ...] = ("a photo of a {}",)

    def __post_init__(self):
        if len(self.images) < 1:
            raise ConfigurationError("concept set needs at least one image")
        dims = {np.asarray(im).shape for im in self.images}
        if len(dims) != 1:
            raise ConfigurationError("concept images must share one dimension")
        for tmpl in self.templates:
            if tmpl.count("{}") != 1:
                raise ConfigurationError(f"template {tmpl!r} needs exactly one slot")

    @property
    def array(self) -> np.ndarray:
        return np.stack(self.images)


def make_concept(spec: ConceptSpec = DEFAULT_HELDOUT, N: int = 4, seed: int = 0, name: str = "concept") -> ConceptSet:
    """``N`` jittered renders of one spec (four by default, like re-croppings of a photo)."""
    if N < 1:
        raise ConfigurationError("N must be at least 1")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31, size=N)
    return ConceptSet(name, [render_concept(spec, int(s)) for s in seeds], spec)


def to_png(image: np.ndarray, path, size: int | None = None) -> None:
    from PIL import Image

    n = size or int(round(np.sqrt(image.size)))
    pix = np.clip((np.asarray(image).reshape(n, n) + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    Image.fromarray(pix, mode="L").save(path, format="PNG")


def export_items(items: Sequence[CorpusItem], out_dir, split: str | None = None) -> Path:
    """Write PNGs plus a manifest.json describing each file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, it in enumerate(items):
        fname = f"{i:05d}.png"
        to_png(it.image, out / fname)
        entry = {"filename": fname, "caption": it.caption, "spec": asdict(it.spec), "seed": it.seed}
        if split:
            entry["split"] = split
        manifest.append(entry)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out / "manifest.json"


def export_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_items(corpus.train, out / "train", "train")
    export_items(corpus.heldout, out / "heldout", "heldout")
    return out


def export_concept(concept: ConceptSet, out_dir) -> Path:
    items = [CorpusItem(im, f"<{concept.name}>", concept.spec, i) for i, im in enumerate(concept.images)]
    return export_items(items, out_dir)
