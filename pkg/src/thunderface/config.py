"""Run configuration: a TOML document with [corpus], [m2s], [diffusion] and
[eval] sections plus a global ``seed``.

Precedence is command-line flags > config file > the shipped
``defaults.toml``. Unknown keys and ill-typed values are rejected with the
dotted key name in the message.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import CorpusConfig
from .diffusion import DenoiserConfig
from .errors import InvalidArgument
from .mesh2speech import INPUT_SPACES


class ConfigError(InvalidArgument):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class M2SSection:
    input_space: str = "mouth"
    hidden: int = 96
    blocks: int = 2
    heads: int = 4
    kernel: int = 5
    lr: float = 1e-3
    batch_size: int = 16
    max_window: int = 125
    epochs: int = 60
    abas_lr: float = 0.05
    abas_steps: int = 500
    abas_smoothness: float = 0.1


@dataclass
class DiffusionSection:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    d_s: int = 64
    cond_dropout: float = 0.2
    w_m2s: float = 1.0
    with_m2s: bool = True
    encoder_mode: str = "frozen"
    steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 120
    window: int = 70
    max_steps: int = 0  # 0: no cap beyond epochs


@dataclass
class EvalSection:
    n_samples: int = 32
    guidance: float = 1.0
    split: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    m2s: M2SSection = field(default_factory=M2SSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"].pop("seed")
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def denoiser_config(self, m2s_space: str | None = None) -> DenoiserConfig:
        d = self.diffusion
        return DenoiserConfig(
            layers=d.layers, heads=d.heads, dim=d.dim, d_s=d.d_s, cond_dropout=d.cond_dropout,
            w_m2s=d.w_m2s, with_m2s=d.with_m2s, encoder_mode=d.encoder_mode,
            m2s_space=m2s_space or self.m2s.input_space, steps=d.steps,
            beta_start=d.beta_start, beta_end=d.beta_end, encoder_seed=self.seed,
        )

    def validate(self) -> "RunConfig":
        positive = {
            "m2s": ("hidden", "blocks", "heads", "kernel", "batch_size", "max_window"),
            "diffusion": ("layers", "heads", "dim", "d_s", "steps", "batch_size", "window"),
            "eval": ("n_samples",),
        }
        for section, keys in positive.items():
            for key in keys:
                if getattr(getattr(self, section), key) < 1:
                    raise ConfigError(f"{section}.{key}", "must be >= 1")
        nonneg = {"m2s": ("epochs", "abas_steps", "abas_smoothness"),
                  "diffusion": ("epochs", "max_steps", "w_m2s"), "eval": ("guidance",)}
        for section, keys in nonneg.items():
            for key in keys:
                if getattr(getattr(self, section), key) < 0:
                    raise ConfigError(f"{section}.{key}", "must be >= 0")
        for section, key in (("m2s", "lr"), ("m2s", "abas_lr"), ("diffusion", "lr")):
            if getattr(getattr(self, section), key) <= 0:
                raise ConfigError(f"{section}.{key}", "must be > 0")
        if self.m2s.input_space not in INPUT_SPACES:
            raise ConfigError("m2s.input_space", f"must be one of {INPUT_SPACES}")
        if self.m2s.hidden % self.m2s.heads:
            raise ConfigError("m2s.hidden", "must be divisible by m2s.heads")
        if self.diffusion.dim % self.diffusion.heads:
            raise ConfigError("diffusion.dim", "must be divisible by diffusion.heads")
        if self.diffusion.encoder_mode not in ("frozen", "trainable"):
            raise ConfigError("diffusion.encoder_mode", "must be 'frozen' or 'trainable'")
        if not 0.0 <= self.diffusion.cond_dropout <= 1.0:
            raise ConfigError("diffusion.cond_dropout", "must lie in [0, 1]")
        if not 0.0 < self.diffusion.beta_start <= self.diffusion.beta_end < 1.0:
            raise ConfigError("diffusion.beta_end", "need 0 < beta_start <= beta_end < 1")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("eval.split", "must be train, val or test")
        if self.seed < 0:
            raise ConfigError("seed", "must be >= 0")
        try:
            self.corpus.validate()
        except InvalidArgument as exc:
            raise ConfigError("corpus", str(exc)) from None
        return self


_SECTIONS = {"corpus": CorpusConfig, "m2s": M2SSection, "diffusion": DiffusionSection,
             "eval": EvalSection}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def merge(cfg: RunConfig, doc: dict) -> RunConfig:
    """Apply a parsed TOML document on top of ``cfg`` (in place)."""
    for key, value in doc.items():
        if key == "seed":
            cfg.seed = _coerce("seed", value, 0)
            continue
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown key")
        if not isinstance(value, dict):
            raise ConfigError(key, "expected a table")
        section = getattr(cfg, key)
        names = {f.name for f in fields(section)} - ({"seed"} if key == "corpus" else set())
        for sub, v in value.items():
            dotted = f"{key}.{sub}"
            if sub not in names:
                raise ConfigError(dotted, "unknown key")
            setattr(section, sub, _coerce(dotted, v, getattr(section, sub)))
    cfg.corpus.seed = cfg.seed
    return cfg


def _parse(text: str, name: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(name, f"not valid TOML ({exc})") from None


def defaults_text() -> str:
    return resources.files(__package__).joinpath("defaults.toml").read_text()


def load_config(path=None, seed: int | None = None) -> RunConfig:
    cfg = merge(RunConfig(), _parse(defaults_text(), "defaults.toml"))
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("--config", f"{path} does not exist")
        merge(cfg, _parse(path.read_text(), str(path)))
    if seed is not None:
        cfg.seed = cfg.corpus.seed = seed
    return cfg.validate()
