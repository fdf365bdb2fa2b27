"""Command-line entry point.

Exit codes: 0 success, 2 usage error (bad arguments, unknown words or
pseudo-words, invalid config), 3 runtime failure (divergence, non-finite
values, missing or corrupt files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .conditioning import MultiResEmbeddingSet
from .config import RunConfig, load_config
from .corpus import export_concept, export_corpus
from .diffusion import CHECKPOINT_FORMAT, load_checkpoint, read_blob_file, save_checkpoint
from .errors import ConfigurationError, CorruptFile, DomainError, LookupFailure, MrtiError
from .inversion import invert, pretrain
from .prompt import PromptError, compile_prompt, parse
from .runs import (build_concept, build_corpus, prepare_run_dir, run_agreement, run_pipeline, save_report,
                   save_sample_pngs, save_samples, write_json)
from .samplers import ancestral_sample

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
USAGE_ERRORS = (PromptError, LookupFailure, ConfigurationError, DomainError)

log = logging.getLogger("mrti")


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _override(cfg: RunConfig, section: str, **values) -> RunConfig:
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    part = getattr(cfg, section).model_copy(update=values)
    # re-validate so overrides obey the same schema as files
    return RunConfig.model_validate({**cfg.model_dump(), section: part.model_dump()})


def _load_concepts(paths) -> dict:
    registry = {}
    for p in paths or []:
        emb = MultiResEmbeddingSet.load(p)
        registry[emb.name] = emb
    return registry


def _single_thread():
    # one BLAS thread keeps reductions in a fixed order
    return threadpool_limits(1)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_corpus_generate(args) -> int:
    cfg = _override(_config(args), "corpus", jitters=args.jitters, seed=args.seed)
    out = prepare_run_dir(args.out, cfg, vars_json(args))
    corpus = build_corpus(cfg)
    export_corpus(corpus, out / "corpus")
    export_concept(build_concept(cfg), out / "concept_images")
    print(f"wrote {len(corpus)} corpus items and {cfg.concept.N} concept images to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _override(_config(args), "pretrain", steps=args.steps, seed=args.seed)
    out = prepare_run_dir(args.run_dir, cfg, vars_json(args))
    sched = cfg.schedule.build()

    def progress(step, loss):
        log.info("step %d loss %.4f", step, loss)

    model, tlog = pretrain(build_corpus(cfg), cfg.model.build(), sched, cfg.pretrain.build(), progress)
    save_checkpoint(model, out / "model.ckpt", sched)
    write_json(out / "pretrain_log.json", tlog.to_dict())
    print(f"checkpoint {out / 'model.ckpt'} sha256={model.checksum()}")
    return EXIT_OK


def cmd_invert(args) -> int:
    cfg = _override(_config(args), "inversion", objective=args.objective, T=args.buckets, steps=args.steps,
                    seed=args.seed)
    if args.name:
        cfg = _override(cfg, "concept", name=args.name)
    out = prepare_run_dir(args.run_dir, cfg, vars_json(args))
    model, sched = load_checkpoint(args.checkpoint)
    before = model.checksum()
    emb, ilog = invert(model, sched, build_concept(cfg), cfg.inversion.build())
    if model.checksum() != before:
        raise RuntimeError("inversion modified the model weights")
    path = out / f"{emb.name}.concept"
    emb.save(path)
    write_json(out / "invert_log.json", ilog.to_dict())
    print(f"concept {path} T={emb.T} d={emb.d}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, sched = load_checkpoint(args.checkpoint)
    registry = _load_concepts(args.concept)
    ast = parse(args.prompt, registry)
    schedule = compile_prompt(ast, registry, model, uncond_full_prompt=args.uncond_full_prompt,
                              bucketed_lookup=args.bucketed_lookup)
    out = prepare_run_dir(args.run_dir, _config(args), vars_json(args))
    x, trace = ancestral_sample(model, sched, schedule, args.seed, n=args.n, return_trace=args.trace is not None)
    meta = {"prompt": args.prompt, "seed": args.seed, "checkpoint_sha256": model.checksum()}
    save_samples(out / "samples.f8", x, meta)
    save_sample_pngs(x, out / "samples")
    if trace is not None:
        write_json(args.trace, trace.to_dict())
    print(f"wrote {len(x)} samples to {out}")
    return EXIT_OK


def cmd_eval_agreement(args) -> int:
    cfg = _override(_config(args), "eval", samples_per_point=args.samples_per_point, seeds=args.seeds,
                    workers=args.workers)
    out = prepare_run_dir(args.run_dir, cfg, vars_json(args))
    model, sched = load_checkpoint(args.checkpoint)
    emb = MultiResEmbeddingSet.load(args.concept)
    concept = build_concept(_override(cfg, "concept", name=emb.name))
    ctx = _single_thread() if cfg.eval.workers == 1 else nullcontext()
    with ctx:
        report = run_agreement(model, sched, emb, concept, build_corpus(cfg), cfg)
    save_report(report, out, dump_samples=not args.no_dump)
    for r in report.rows:
        tf = "-" if r.t_fixed is None else f"{r.t_fixed:g}"
        print(f"{r.policy:13s} t_fixed={tf:5s} energy={r.energy_distance:.4f} "
              f"shape={r.shape_match:.2f} texture={r.texture_match:.2f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    header, blob = read_blob_file(args.path)
    fmt = header.get("format")
    if fmt == CHECKPOINT_FORMAT:
        model, sched = load_checkpoint(args.path)
        info = {"format": fmt, "D": header["D"], "d": header["d"], "N": header["N"],
                "parameters": int(model.flat.size), "sha256": model.checksum(), "lineage": header["lineage"]}
    elif fmt and fmt.startswith("mrti-concept"):
        emb = MultiResEmbeddingSet.load(args.path)
        info = {"format": fmt, "name": emb.name, "T": emb.T, "d": emb.d,
                "row_norms": [round(float(v), 6) for v in np.linalg.norm(emb.embeddings, axis=1)]}
    else:
        info = {k: v for k, v in header.items() if k != "rows"}
        info["values"] = int(blob.size)
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_compile(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    registry = _load_concepts(args.concept)
    schedule = compile_prompt(parse(args.prompt, registry), registry, model,
                              uncond_full_prompt=args.uncond_full_prompt, bucketed_lookup=args.bucketed_lookup)
    if args.emit_json:
        print(schedule.dumps())
    else:
        for t in (1.0, 0.5, 0.0):
            print(f"t={t:g}: {schedule.sources(t)}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    ctx = _single_thread() if cfg.eval.workers == 1 else nullcontext()
    with ctx:
        result = run_pipeline(cfg, args.run_dir, progress=print)
    print(f"report {Path(result['run_dir']) / 'report.json'}")
    return EXIT_OK


def vars_json(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrti", description="Multiresolution textual inversion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="synthetic corpus tools")
    csub = corpus.add_subparsers(dest="corpus_command", required=True)
    gen = csub.add_parser("generate", help="render the corpus and concept set to PNG + manifest")
    gen.add_argument("--out", required=True)
    gen.add_argument("--config")
    gen.add_argument("--jitters", type=int)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_corpus_generate)

    pre = sub.add_parser("pretrain", help="train the base model")
    pre.add_argument("--run-dir", required=True)
    pre.add_argument("--config")
    pre.add_argument("--steps", type=int)
    pre.add_argument("--seed", type=int)
    pre.set_defaults(func=cmd_pretrain)

    inv = sub.add_parser("invert", help="learn pseudo-word embeddings for the concept set")
    inv.add_argument("--run-dir", required=True)
    inv.add_argument("--checkpoint", required=True)
    inv.add_argument("--config")
    inv.add_argument("--objective", choices=("vanilla", "multires"))
    inv.add_argument("--buckets", type=int)
    inv.add_argument("--steps", type=int)
    inv.add_argument("--seed", type=int)
    inv.add_argument("--name")
    inv.set_defaults(func=cmd_invert)

    smp = sub.add_parser("sample", help="generate images for a prompt")
    smp.add_argument("--run-dir", required=True)
    smp.add_argument("--checkpoint", required=True)
    smp.add_argument("--concept", action="append", help="concept file; may be repeated")
    smp.add_argument("--prompt", required=True)
    smp.add_argument("--n", type=int, default=16)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--trace")
    smp.add_argument("--uncond-full-prompt", action="store_true")
    smp.add_argument("--bucketed-lookup", action="store_true")
    smp.add_argument("--config")
    smp.set_defaults(func=cmd_sample)

    ev = sub.add_parser("eval", help="evaluation suites")
    esub = ev.add_subparsers(dest="eval_command", required=True)
    agr = esub.add_parser("agreement", help="energy distance / match rates per policy and t_fixed")
    agr.add_argument("--run-dir", required=True)
    agr.add_argument("--checkpoint", required=True)
    agr.add_argument("--concept", required=True)
    agr.add_argument("--config")
    agr.add_argument("--samples-per-point", type=int)
    agr.add_argument("--seeds", type=int, nargs="+")
    agr.add_argument("--workers", type=int)
    agr.add_argument("--no-dump", action="store_true", help="skip writing eval_samples.f8")
    agr.set_defaults(func=cmd_eval_agreement)

    ins = sub.add_parser("inspect", help="print the header of a checkpoint, concept or samples file")
    ins.add_argument("path")
    ins.set_defaults(func=cmd_inspect)

    comp = sub.add_parser("compile", help="compile a prompt against a checkpoint")
    comp.add_argument("--checkpoint", required=True)
    comp.add_argument("--concept", action="append")
    comp.add_argument("--prompt", required=True)
    comp.add_argument("--emit-json", action="store_true")
    comp.add_argument("--uncond-full-prompt", action="store_true")
    comp.add_argument("--bucketed-lookup", action="store_true")
    comp.set_defaults(func=cmd_compile)

    pipe = sub.add_parser("pipeline", help="corpus, pretrain, invert, sample and evaluate from one config")
    pipe.add_argument("--config", required=True)
    pipe.add_argument("--run-dir", required=True)
    pipe.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CorruptFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MrtiError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
