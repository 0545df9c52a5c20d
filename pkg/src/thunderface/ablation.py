"""Variant sweeps over the denoiser's cycle-loss settings.

An ablation spec is a TOML file of ``[[variant]]`` tables::

    [[variant]]
    name = "with_m2s"
    with_m2s = true
    input_space = "mouth"   # which M2S checkpoint supplies the cycle loss
    w_m2s = 1.0
    encoder_mode = "frozen"

Missing fields fall back to the run config. Every variant is trained with
the same seed and budget and scored on the same split.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from .config import RunConfig, _parse
from .diffusion import TrainOptions, diffusion_sampler, train_thunder
from .errors import InvalidArgument
from .mesh2speech import INPUT_SPACES
from .metrics import MetricReport, evaluate_model

DESCRIPTOR_KEYS = ("name", "with_m2s", "input_space", "w_m2s", "encoder_mode")


@dataclass(frozen=True)
class Variant:
    name: str
    with_m2s: bool
    input_space: str
    w_m2s: float
    encoder_mode: str

    def descriptor(self) -> dict:
        return asdict(self)


def parse_ablation_spec(text: str, cfg: RunConfig, name: str = "ablation spec") -> list[Variant]:
    doc = _parse(text, name)
    unknown = set(doc) - {"variant"}
    if unknown:
        raise InvalidArgument(f"{name}: unknown key {sorted(unknown)[0]!r}")
    items = doc.get("variant", [])
    if not isinstance(items, list) or not items:
        raise InvalidArgument(f"{name}: needs at least one [[variant]]")
    variants, seen = [], set()
    for i, item in enumerate(items):
        extra = set(item) - set(DESCRIPTOR_KEYS)
        if extra:
            raise InvalidArgument(f"{name}: variant {i}: unknown key {sorted(extra)[0]!r}")
        if "name" not in item:
            raise InvalidArgument(f"{name}: variant {i}: missing name")
        v = Variant(
            name=str(item["name"]),
            with_m2s=bool(item.get("with_m2s", cfg.diffusion.with_m2s)),
            input_space=str(item.get("input_space", cfg.m2s.input_space)),
            w_m2s=float(item.get("w_m2s", cfg.diffusion.w_m2s)),
            encoder_mode=str(item.get("encoder_mode", cfg.diffusion.encoder_mode)),
        )
        if v.name in seen:
            raise InvalidArgument(f"{name}: duplicate variant name {v.name!r}")
        if v.input_space not in INPUT_SPACES:
            raise InvalidArgument(f"{name}: variant {v.name!r}: input_space must be one of {INPUT_SPACES}")
        if v.encoder_mode not in ("frozen", "trainable"):
            raise InvalidArgument(f"{name}: variant {v.name!r}: encoder_mode must be frozen or trainable")
        if v.w_m2s < 0:
            raise InvalidArgument(f"{name}: variant {v.name!r}: w_m2s must be >= 0")
        seen.add(v.name)
        variants.append(v)
    return variants


def train_options(cfg: RunConfig) -> TrainOptions:
    d = cfg.diffusion
    return TrainOptions(lr=d.lr, batch_size=d.batch_size, epochs=d.epochs, window=d.window,
                        seed=cfg.seed, max_steps=d.max_steps or None)


def check_prerequisites(variants, m2s_models: dict):
    for v in variants:
        if v.with_m2s and v.input_space not in m2s_models:
            raise InvalidArgument(f"variant {v.name!r}: no M2S checkpoint for input space {v.input_space!r}")


def run_variant(v: Variant, corpus, m2s_models: dict, cfg: RunConfig, log=None):
    dcfg = replace(cfg.denoiser_config(v.input_space), with_m2s=v.with_m2s, w_m2s=v.w_m2s,
                   encoder_mode=v.encoder_mode)
    m2s = m2s_models.get(v.input_space) if v.with_m2s else None
    model, _ = train_thunder(corpus, m2s, dcfg, train_options(cfg), log=log)
    report = evaluate_model(diffusion_sampler(model, guidance=cfg.eval.guidance),
                            corpus.split(cfg.eval.split), corpus.template,
                            n_samples=cfg.eval.n_samples, seed=cfg.seed)
    return model, report


def run_ablation(variants, corpus, m2s_models: dict, cfg: RunConfig, log=None):
    """Train and score each variant; returns ``[(descriptor, MetricReport)]``."""
    check_prerequisites(variants, m2s_models)
    rows = []
    for v in variants:
        if log:
            log(f"variant {v.name}")
        _, report = run_variant(v, corpus, m2s_models, cfg, log)
        rows.append((v.descriptor(), report))
    return rows


def delta_summary(rows) -> list[dict]:
    """Metric differences of every with-m2s variant minus the single
    without-m2s variant; empty when there is no unique baseline."""
    baselines = [(d, r) for d, r in rows if not d["with_m2s"]]
    if len(baselines) != 1:
        return []
    base = baselines[0][1].as_dict()
    out = []
    for desc, rep in rows:
        if desc["with_m2s"]:
            vals = rep.as_dict()
            out.append({"variant": desc["name"], "baseline": baselines[0][0]["name"]}
                       | {k: vals[k] - base[k] for k in MetricReport.field_names()})
    return out
