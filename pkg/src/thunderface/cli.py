"""Command-line entry point: ``thunderface <command> [options]``.

Exit status is 0 on success, 1 when an input is invalid (bad config key,
missing prerequisite, lineage mismatch, malformed file) and 2 when a run
fails at runtime (e.g. training diverged).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, audio
from .ablation import (DESCRIPTOR_KEYS, check_prerequisites, delta_summary, parse_ablation_spec,
                       run_ablation, train_options)
from .config import ConfigError, RunConfig, load_config
from .corpus import build_corpus, load_corpus, persist_corpus
from .diffusion import diffusion_sampler, load_thunder, sample_many, save_thunder, train_thunder
from .errors import FormatError, InvalidArgument, NotFound, ThunderError
from .face_model import decode_sequence
from .mesh2speech import (M2SConfig, analysis_by_audio_synthesis, check_lineage, eval_m2s,
                          load_m2s, save_m2s, train_m2s)
from .metrics import lip_distance, reports_csv, reports_table

COMMANDS = ("gen-corpus", "fit-units", "train-m2s", "eval-m2s", "train-thunder", "sample",
            "evaluate", "ablate", "abas")


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _lineage(corpus) -> dict:
    return {"corpus_id": corpus.corpus_id, "codebook_id": corpus.codebook_id}


def _manifest(args, cfg: RunConfig, lineage: dict, artifacts: list[str], extra=None):
    doc = {"command": args.command, "version": __version__, "seed": cfg.seed,
           "config_hash": cfg.config_hash(), "config": cfg.to_dict(), "lineage": lineage,
           "artifacts": sorted(artifacts)}
    doc.update(extra or {})
    _write(Path(args.out) / f"run-{args.command}.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _need(args, name: str):
    value = getattr(args, name)
    if value is None:
        raise InvalidArgument(f"--{name.replace('_', '-')} is required for {args.command}")
    if not Path(value).exists():
        raise InvalidArgument(f"--{name.replace('_', '-')}: {value} does not exist")
    return Path(value)


def _record(corpus, seq_id: int):
    for rec in corpus.records:
        if rec.index == seq_id:
            return rec
    raise NotFound(f"--audio: no sequence with id {seq_id} in the corpus")


def _m2s_config(cfg: RunConfig, corpus) -> M2SConfig:
    m = cfg.m2s
    return M2SConfig(input_space=m.input_space, hidden=m.hidden, blocks=m.blocks, heads=m.heads,
                     kernel=m.kernel, n_units=corpus.codebook.n_units)


# -- commands -------------------------------------------------------------------------


def cmd_gen_corpus(args, cfg):
    corpus = build_corpus(cfg.corpus)
    path = persist_corpus(corpus, Path(args.out) / "corpus")
    sizes = {s: len(corpus.split(s)) for s in ("train", "val", "test")}
    _log(f"corpus {corpus.corpus_id} written to {path} ({sizes})")
    _manifest(args, cfg, _lineage(corpus), ["corpus"], {"splits": sizes})


def cmd_fit_units(args, cfg):
    from scipy.optimize import linear_sum_assignment

    corpus = load_corpus(_need(args, "corpus"))
    train = corpus.split("train")
    mels = np.concatenate([r.mel for r in train])
    book = audio.fit_unit_codebook(mels, corpus.codebook.n_units, seed=cfg.seed)
    new = np.concatenate([audio.quantize_units(r.mel, book) for r in train])
    old = np.concatenate([r.units for r in train])
    counts = np.zeros((book.n_units, corpus.codebook.n_units))
    np.add.at(counts, (new, old), 1)
    rows, cols = linear_sum_assignment(-counts)
    agreement = float(counts[rows, cols].sum() / len(new))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "codebook.npz", centroids=book.centroids)
    _write(out / "units.json", json.dumps({"n_units": book.n_units, "agreement": agreement},
                                           indent=2, sort_keys=True) + "\n")
    _log(f"fitted {book.n_units} units on {len(new)} frames; agreement with corpus units {agreement:.4f}")
    _manifest(args, cfg, _lineage(corpus), ["codebook.npz", "units.json"])


def cmd_train_m2s(args, cfg):
    corpus = load_corpus(_need(args, "corpus"))
    m = cfg.m2s
    model, history = train_m2s(corpus, _m2s_config(cfg, corpus), lr=m.lr, batch_size=m.batch_size,
                               max_window=m.max_window, epochs=m.epochs, seed=cfg.seed, log=_log)
    out = Path(args.out)
    save_m2s(out / "m2s.npz", model)
    _write(out / "m2s_history.json", json.dumps(history.epochs, indent=2) + "\n")
    _manifest(args, cfg, _lineage(corpus), ["m2s.npz", "m2s_history.json"])


def cmd_eval_m2s(args, cfg):
    corpus = load_corpus(_need(args, "corpus"))
    model = load_m2s(_need(args, "m2s"), expect_lineage=_lineage(corpus))
    report = eval_m2s(model, corpus.split(cfg.eval.split), corpus.template)
    report["split"] = cfg.eval.split
    _write(Path(args.out) / "m2s_eval.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    _manifest(args, cfg, _lineage(corpus), ["m2s_eval.json"])


def cmd_train_thunder(args, cfg):
    corpus = load_corpus(_need(args, "corpus"))
    m2s = None
    if cfg.diffusion.with_m2s:
        m2s = load_m2s(_need(args, "m2s"), expect_lineage=_lineage(corpus))
    model, history = train_thunder(corpus, m2s, cfg.denoiser_config(), train_options(cfg), log=_log)
    out = Path(args.out)
    save_thunder(out / "thunder.npz", model)
    _manifest(args, cfg, _lineage(corpus), ["thunder.npz"],
              {"null_condition_steps": history.null_steps, "train_steps": len(history.steps)})


def _load_model_for(args, corpus):
    model = load_thunder(_need(args, "model"))
    check_lineage(model.lineage, _lineage(corpus), f"denoiser checkpoint {args.model}")
    return model


def cmd_sample(args, cfg):
    corpus = load_corpus(_need(args, "corpus"))
    model = _load_model_for(args, corpus)
    if args.audio is None:
        raise InvalidArgument("--audio is required for sample")
    rec = _record(corpus, args.audio)
    n = args.num_samples or cfg.eval.n_samples
    with torch.no_grad():
        feats = model.features(rec.mel)[0]
    params = sample_many(model, feats, n, cfg.seed, guidance=cfg.eval.guidance)
    name = f"samples_{rec.index:05d}.npz"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / name, expressions=params, ground_truth=rec.expressions)
    _log(f"wrote {n} samples of sequence {rec.index} ({rec.n_frames} frames) to {out / name}")
    _manifest(args, cfg, _lineage(corpus), [name])


def cmd_evaluate(args, cfg):
    from .metrics import evaluate_model

    corpus = load_corpus(_need(args, "corpus"))
    model = _load_model_for(args, corpus)
    report = evaluate_model(diffusion_sampler(model, guidance=cfg.eval.guidance),
                            corpus.split(cfg.eval.split), corpus.template,
                            n_samples=cfg.eval.n_samples, seed=cfg.seed)
    rows = [({"model": Path(args.model).name}, report)]
    out = Path(args.out)
    _write(out / "report.csv", reports_csv(rows, ("model",)))
    _write(out / "report.txt", reports_table(rows, ("model",)) + "\n")
    print(reports_table(rows, ("model",)))
    _manifest(args, cfg, _lineage(corpus), ["report.csv", "report.txt"])


def cmd_ablate(args, cfg):
    spec_path = _need(args, "spec")
    variants = parse_ablation_spec(spec_path.read_text(), cfg, str(spec_path))
    corpus = load_corpus(_need(args, "corpus"))
    m2s_models = {}
    for path in args.m2s_checkpoints or []:
        if not Path(path).exists():
            raise InvalidArgument(f"--m2s: {path} does not exist")
        model = load_m2s(path, expect_lineage=_lineage(corpus))
        m2s_models[model.config.input_space] = model
    check_prerequisites(variants, m2s_models)
    rows = run_ablation(variants, corpus, m2s_models, cfg, log=_log)
    out = Path(args.out)
    _write(out / "ablation.csv", reports_csv(rows, DESCRIPTOR_KEYS))
    table = reports_table(rows, DESCRIPTOR_KEYS)
    _write(out / "ablation.txt", table + "\n")
    print(table)
    deltas = delta_summary(rows)
    artifacts = ["ablation.csv", "ablation.txt"]
    if deltas:
        keys = list(deltas[0])
        lines = [",".join(keys)] + [",".join(str(d[k]) if isinstance(d[k], str) else repr(d[k])
                                             for k in keys) for d in deltas]
        _write(out / "deltas.csv", "\n".join(lines) + "\n")
        artifacts.append("deltas.csv")
        print("\nwith-m2s minus without-m2s:")
        for d in deltas:
            print(f"  {d['variant']}: " + " ".join(f"{k}={d[k]:+.5f}" for k in keys[2:]))
    _manifest(args, cfg, _lineage(corpus), artifacts, {"variants": [v.descriptor() for v in variants]})


def cmd_abas(args, cfg):
    corpus = load_corpus(_need(args, "corpus"))
    model = load_m2s(_need(args, "m2s"), expect_lineage=_lineage(corpus))
    if args.audio is None:
        raise InvalidArgument("--audio is required for abas")
    rec = _record(corpus, args.audio)
    m = cfg.m2s
    result = analysis_by_audio_synthesis(model, rec.mel, rec.units, rec.n_frames, corpus.template,
                                         spk=audio.speaker_embedding(rec.mel), lr=m.abas_lr,
                                         steps=m.abas_steps, smoothness=m.abas_smoothness)
    gt = lip_distance(decode_sequence(corpus.template, rec.expressions), corpus.template)
    got = lip_distance(decode_sequence(corpus.template, result.expressions.frames), corpus.template)
    pcc = float(np.corrcoef(gt, got)[0, 1]) if got.std() > 0 and gt.std() > 0 else 0.0
    summary = {"sequence": rec.index, "initial_objective": result.initial_objective,
               "best_objective": result.best_objective,
               "reduction": 1.0 - result.best_objective / result.initial_objective,
               "lip_distance_pcc": pcc}
    name = f"abas_{rec.index:05d}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / f"{name}.npz", expressions=result.expressions.frames,
             history=np.asarray(result.history))
    _write(out / f"{name}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    _manifest(args, cfg, _lineage(corpus), [f"{name}.npz", f"{name}.json"])


HANDLERS = {
    "gen-corpus": cmd_gen_corpus, "fit-units": cmd_fit_units, "train-m2s": cmd_train_m2s,
    "eval-m2s": cmd_eval_m2s, "train-thunder": cmd_train_thunder, "sample": cmd_sample,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "abas": cmd_abas,
}


SUMMARIES = {
    "gen-corpus": "synthesize the paired animation/audio corpus",
    "fit-units": "refit the speech-unit codebook on the train split",
    "train-m2s": "train the mesh-to-speech model",
    "eval-m2s": "score an M2S checkpoint (mel L1, unit accuracy)",
    "train-thunder": "train the audio-conditioned diffusion model",
    "sample": "sample animations for one sequence's audio",
    "evaluate": "score a diffusion checkpoint on the eval split",
    "ablate": "train and score every variant of an ablation spec",
    "abas": "invert M2S: fit an animation to one sequence's audio",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thunderface", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=SUMMARIES[name])
        p.add_argument("--config", help="TOML run config (overrides shipped defaults)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--out", required=True, help="output directory")
        if name != "gen-corpus":
            p.add_argument("--corpus", help="corpus directory written by gen-corpus")
        if name in ("eval-m2s", "train-thunder", "abas"):
            p.add_argument("--m2s", help="M2S checkpoint")
        if name in ("sample", "evaluate"):
            p.add_argument("--model", help="denoiser checkpoint")
        if name in ("sample", "abas"):
            p.add_argument("--audio", type=int, help="sequence id whose audio conditions the run")
        if name == "sample":
            p.add_argument("--num-samples", type=int, help="number of samples (default: eval.n_samples)")
        if name == "train-thunder":
            g = p.add_mutually_exclusive_group()
            g.add_argument("--with-m2s", dest="with_m2s", action="store_true", default=None)
            g.add_argument("--no-m2s", dest="with_m2s", action="store_false")
            p.add_argument("--m2s-weight", type=float, help="cycle-loss weight w_m2s")
            g = p.add_mutually_exclusive_group()
            g.add_argument("--freeze-audio", dest="encoder_mode", action="store_const", const="frozen")
            g.add_argument("--train-audio", dest="encoder_mode", action="store_const", const="trainable")
        if name == "ablate":
            p.add_argument("--spec", help="ablation spec (TOML with [[variant]] tables)")
            p.add_argument("--m2s", dest="m2s_checkpoints", action="append",
                           help="M2S checkpoint; repeat for several input spaces")
    return parser


def _apply_flags(args, cfg: RunConfig) -> RunConfig:
    if getattr(args, "with_m2s", None) is not None:
        cfg.diffusion.with_m2s = args.with_m2s
    if getattr(args, "m2s_weight", None) is not None:
        cfg.diffusion.w_m2s = args.m2s_weight
    if getattr(args, "encoder_mode", None) is not None:
        cfg.diffusion.encoder_mode = args.encoder_mode
    if getattr(args, "num_samples", None) is not None and args.num_samples < 1:
        raise ConfigError("--num-samples", "must be >= 1")
    return cfg.validate()


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = _apply_flags(args, load_config(args.config, args.seed))
        torch.set_num_threads(1)
        HANDLERS[args.command](args, cfg)
    except (InvalidArgument, NotFound, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ThunderError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_command())
