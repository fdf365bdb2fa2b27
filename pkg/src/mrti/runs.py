"""Run directories: config snapshots, sample dumps, reports and the full pipeline."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .conditioning import MultiResEmbeddingSet
from .config import RunConfig, dump_config
from .corpus import ConceptSet, Corpus, default_grid, export_concept, make_concept, make_corpus, to_png
from .diffusion import ModelParams, NoiseSchedule, _write_blob_file, read_blob_file, save_checkpoint
from .errors import ConfigurationError
from .evaluation import AgreementReport, ShapeClassifier, TextureClassifier, agreement_curve
from .inversion import invert, pretrain
from .prompt import compile_prompt, parse
from .samplers import ancestral_sample

log = logging.getLogger(__name__)

SAMPLES_FORMAT = "mrti-samples/1"


def prepare_run_dir(run_dir, cfg: RunConfig, command: dict) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    (out / "command.json").write_text(json.dumps(command, indent=2, sort_keys=True) + "\n")
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def save_samples(path, samples: np.ndarray, meta: dict) -> None:
    """Raw float64 tensor with a one-line JSON header (same layout as checkpoints)."""
    samples = np.atleast_2d(samples)
    header = {"format": SAMPLES_FORMAT, "shape": list(samples.shape), **meta}
    _write_blob_file(path, header, samples)


def load_samples(path) -> tuple[dict, np.ndarray]:
    header, blob = read_blob_file(path)
    if header.get("format") != SAMPLES_FORMAT:
        raise ConfigurationError(f"{path}: not a samples file")
    return header, blob.reshape(header["shape"])


def save_sample_pngs(samples: np.ndarray, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(samples):
        to_png(x, out / f"{i:04d}.png")


def build_corpus(cfg: RunConfig) -> Corpus:
    grid = default_grid()
    if cfg.corpus.exclude_concept:
        grid = [g for g in grid if (g.shape, g.texture) != (cfg.concept.shape, cfg.concept.texture)]
    return make_corpus(grid, jitters=cfg.corpus.jitters, seed=cfg.corpus.seed,
                       heldout_fraction=cfg.corpus.heldout_fraction)


def build_concept(cfg: RunConfig) -> ConceptSet:
    c = cfg.concept
    return make_concept(c.spec(), N=c.N, seed=c.seed, name=c.name)


def run_agreement(model: ModelParams, sched: NoiseSchedule, emb: MultiResEmbeddingSet, concept: ConceptSet,
                  corpus: Corpus, cfg: RunConfig) -> AgreementReport:
    e = cfg.eval
    return agreement_curve(model, sched, emb, concept, policies=e.policies, t_grid=e.t_grid,
                           samples_per_point=e.samples_per_point, seeds=e.seeds,
                           shape_clf=ShapeClassifier.from_corpus(corpus),
                           texture_clf=TextureClassifier.from_corpus(corpus), workers=e.workers,
                           uncond_full_prompt=e.uncond_full_prompt, bucketed_lookup=e.bucketed_lookup)


def save_report(report: AgreementReport, run_dir, dump_samples: bool = True) -> Path:
    out = Path(run_dir)
    write_json(out / "report.json", report.to_dict())
    if dump_samples:
        keys = list(report.samples)
        stacked = np.concatenate([report.samples[k] for k in keys])
        index, offset = [], 0
        for (policy, tf, seed) in keys:
            n = len(report.samples[(policy, tf, seed)])
            index.append({"policy": policy, "t_fixed": tf, "seed": seed, "start": offset, "count": n})
            offset += n
        save_samples(out / "eval_samples.f8", stacked, {"rows": index})
    return out / "report.json"


def run_pipeline(cfg: RunConfig, run_dir, progress: Optional[Callable[[str], None]] = None) -> dict:
    """corpus -> pretrain -> invert -> sample -> evaluate, all under ``run_dir``.

    Binary outputs depend only on ``cfg``; wall-clock timings go to a
    separate ``timings.json``.
    """
    say = progress or (lambda msg: log.info(msg))
    out = prepare_run_dir(run_dir, cfg, {"command": "pipeline"})
    timings = {}
    sched = cfg.schedule.build()

    corpus = build_corpus(cfg)
    concept = build_concept(cfg)
    export_concept(concept, out / "concept_images")
    say(f"corpus: {len(corpus.train)} train / {len(corpus.heldout)} held-out items")

    t0 = time.perf_counter()
    model, plog = pretrain(corpus, cfg.model.build(), sched, cfg.pretrain.build())
    timings["pretrain_s"] = time.perf_counter() - t0
    save_checkpoint(model, out / "model.ckpt", sched)
    write_json(out / "pretrain_log.json", plog.to_dict())
    say(f"pretrain: {timings['pretrain_s']:.1f}s, final loss {np.mean(plog.losses[-100:]):.3f}")

    before = model.checksum()
    t0 = time.perf_counter()
    emb, ilog = invert(model, sched, concept, cfg.inversion.build())
    timings["invert_s"] = time.perf_counter() - t0
    after = model.checksum()
    if after != before:
        raise RuntimeError("inversion modified the model weights")
    emb.save(out / f"{concept.name}.concept")
    write_json(out / "invert_log.json", ilog.to_dict())
    say(f"invert: {timings['invert_s']:.1f}s")

    registry = {emb.name: emb}
    sample_dir = out / "samples"
    sample_dir.mkdir(exist_ok=True)
    for i, prompt in enumerate(cfg.sample.prompts):
        sch = compile_prompt(parse(prompt, registry), registry, model)
        x, _ = ancestral_sample(model, sched, sch, cfg.sample.seed, n=cfg.sample.n)
        meta = {"prompt": prompt, "seed": cfg.sample.seed, "checkpoint_sha256": model.checksum()}
        save_samples(sample_dir / f"prompt{i}.f8", x, meta)
        save_sample_pngs(x, sample_dir / f"prompt{i}")

    t0 = time.perf_counter()
    report = run_agreement(model, sched, emb, concept, corpus, cfg)
    timings["eval_s"] = time.perf_counter() - t0
    save_report(report, out)
    write_json(out / "timings.json", timings)
    say(f"eval: {timings['eval_s']:.1f}s")
    return {"run_dir": out, "model": model, "checksums": (before, after), "embeddings": emb, "report": report, "timings": timings,
            "concept": concept, "corpus": corpus}
