"""Audio-conditioned diffusion over expression-parameter sequences.

The denoiser is a transformer decoder that predicts the clean sequence
directly. Queries are the noisy parameters (self-attention with ALiBi
biases); keys/values are the per-frame audio features plus one diffusion-step
token, with a diagonal cross-attention mask so frame t only sees audio frame t
and the step token. Training adds reconstruction and velocity losses in
parameter and vertex space, and optionally the frozen M2S loss on the
predicted mesh.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import audio
from .checkpoint import load_checkpoint, parameter_hash, save_checkpoint
from .corpus import derive_seed
from .errors import InvalidArgument, TrainingDiverged
from .face_model import ExpressionSequence, TorchFace
from .mesh2speech import M2SModel, check_lineage, m2s_loss, to_input_space

ENCODER_MODES = ("frozen", "trainable")
# Channels that barely move in training data (e.g. the jaw's y/z axes) get this
# std, so normalized-space losses strongly pin them to their training value.
STD_FLOOR = 1e-3


# -- schedule and forward process ------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (D,)
    alpha: np.ndarray  # (D+1,), alpha[0] == 1

    @property
    def D(self) -> int:
        return len(self.betas)


def make_linear_schedule(D: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if D < 1:
        raise InvalidArgument(f"D must be >= 1, got {D}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidArgument("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, D)
    alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas, alpha)


def noising(x, d: int, schedule: NoiseSchedule, noise):
    """sqrt(alpha_d) x + sqrt(1 - alpha_d) noise, elementwise."""
    if not 0 <= d <= schedule.D:
        raise InvalidArgument(f"step {d} outside [0, {schedule.D}]")
    if np.shape(noise) != np.shape(x):
        raise InvalidArgument("noise shape must match x")
    a = schedule.alpha[d]
    return math.sqrt(a) * x + math.sqrt(1.0 - a) * noise


def velocity(seq):
    if seq.shape[-2] < 2:
        raise InvalidArgument("velocity needs at least 2 frames")
    return seq[..., 1:, :] - seq[..., :-1, :]


# -- denoiser -------------------------------------------------------------------


def alibi_slopes(heads: int) -> torch.Tensor:
    return torch.tensor([2.0 ** (-8.0 * h / heads) for h in range(1, heads + 1)])


def timestep_embedding(d: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = d.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, memory, bias):
        B, T, C = x.shape
        H = self.heads
        q = self.q(x).view(B, T, H, C // H).transpose(1, 2)
        k, v = self.kv(memory).view(B, memory.shape[1], 2, H, C // H).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(C // H) + bias
        out = scores.softmax(-1) @ v
        return self.out(out.transpose(1, 2).reshape(B, T, C))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, h, memory, self_bias, cross_bias):
        n = self.self_norm(h)
        h = h + self.self_attn(n, n, self_bias)
        h = h + self.cross_attn(self.cross_norm(h), memory, cross_bias)
        return h + self.ff(self.ff_norm(h))


@dataclass
class DenoiserConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 64
    d_s: int = 64
    param_dim: int = 19
    cond_dropout: float = 0.2
    w_m2s: float = 1.0
    with_m2s: bool = True
    encoder_mode: str = "frozen"
    m2s_space: str = "mouth"
    steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    encoder_seed: int = 0

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.steps, self.beta_start, self.beta_end)

    def validate(self):
        if self.dim % self.heads:
            raise InvalidArgument("dim must be divisible by heads")
        if self.encoder_mode not in ENCODER_MODES:
            raise InvalidArgument(f"encoder_mode must be one of {ENCODER_MODES}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise InvalidArgument("cond_dropout must lie in [0, 1]")
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise InvalidArgument("need 0 < beta_start <= beta_end < 1")
        return self


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.x_proj = nn.Linear(cfg.param_dim, cfg.dim)
        self.audio_proj = nn.Linear(cfg.d_s, cfg.dim)
        self.time_proj = nn.Linear(cfg.dim, cfg.dim)
        self.null_cond = nn.Parameter(torch.zeros(cfg.d_s))
        self.layers = nn.ModuleList(DecoderLayer(cfg.dim, cfg.heads) for _ in range(cfg.layers))
        self.out_norm = nn.LayerNorm(cfg.dim)
        self.out_proj = nn.Linear(cfg.dim, cfg.param_dim)
        self.register_buffer("slopes", alibi_slopes(cfg.heads), persistent=False)
        nn.init.normal_(self.null_cond, std=0.5)

    def biases(self, T: int, dtype):
        pos = torch.arange(T)
        dist = (pos[:, None] - pos[None, :]).abs().to(dtype)
        self_bias = -self.slopes.to(dtype)[:, None, None] * dist
        allowed = torch.cat([torch.eye(T, dtype=torch.bool), torch.ones(T, 1, dtype=torch.bool)], 1)
        cross_bias = torch.zeros(T, T + 1, dtype=dtype).masked_fill(~allowed, float("-inf"))
        return self_bias, cross_bias

    def forward(self, x_noisy, d, feats, null_mask=None):
        """(B, T, P), (B,), (B, T, d_s) or None -> predicted clean (B, T, P).

        ``feats=None`` runs every sample unconditionally; ``null_mask`` (B,)
        swaps the condition for selected samples only.
        """
        B, T, _ = x_noisy.shape
        if feats is None:
            feats = self.null_cond.expand(B, T, -1)
        else:
            if feats.shape[:2] != (B, T):
                raise InvalidArgument(
                    f"audio features cover {tuple(feats.shape[:2])} frames, noisy sequence {(B, T)}"
                )
            if null_mask is not None:
                feats = torch.where(null_mask[:, None, None], self.null_cond.expand_as(feats), feats)
        dtype = x_noisy.dtype
        step_tok = self.time_proj(timestep_embedding(d, self.cfg.dim).to(dtype))[:, None, :]
        memory = torch.cat([self.audio_proj(feats), step_tok], dim=1)
        self_bias, cross_bias = self.biases(T, dtype)
        h = self.x_proj(x_noisy)
        for layer in self.layers:
            h = layer(h, memory, self_bias, cross_bias)
        return self.out_proj(self.out_norm(h))


class ThunderModel(nn.Module):
    """Audio encoder + denoiser + expression normalization statistics."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg.validate()
        self.encoder = audio.AudioEncoder(cfg.d_s, cfg.encoder_mode == "trainable", cfg.encoder_seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.denoiser = Denoiser(cfg)
        self.register_buffer("x_mean", torch.zeros(cfg.param_dim))
        self.register_buffer("x_std", torch.ones(cfg.param_dim))
        self.lineage: dict = {}

    def features(self, mel) -> torch.Tensor:
        """(B, 2T, 80) or (2T, 80) mel -> (B, T, d_s)."""
        mel = torch.as_tensor(np.asarray(mel) if not isinstance(mel, torch.Tensor) else mel,
                              dtype=self.x_mean.dtype)
        if mel.dim() == 2:
            mel = mel[None]
        if mel.shape[1] % 2:
            raise InvalidArgument("mel length must be even")
        return self.encoder(mel)

    def normalize(self, x):
        return (x - self.x_mean) / self.x_std

    def denormalize(self, z):
        return z * self.x_std + self.x_mean


def denoise(model: ThunderModel, noisy, d: int, cond):
    """Predicted clean sequence (normalized space) for one noisy sequence.

    ``cond`` is a (T, d_s) feature array or None for the null condition.
    """
    noisy = torch.as_tensor(noisy, dtype=model.x_mean.dtype)
    if cond is not None:
        cond = torch.as_tensor(cond, dtype=model.x_mean.dtype)
        if cond.shape[0] != noisy.shape[0]:
            raise InvalidArgument(f"condition has {cond.shape[0]} frames, sequence has {noisy.shape[0]}")
        cond = cond[None]
    with torch.no_grad():
        out = model.denoiser(noisy[None], torch.tensor([d]), cond)
    return out[0].numpy()


# -- training ---------------------------------------------------------------------


@dataclass
class TrainOptions:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    window: int = 70
    seed: int = 0
    max_steps: int | None = None


@dataclass
class ThunderHistory:
    steps: list = field(default_factory=list)
    null_steps: int = 0


class _DiffusionData:
    def __init__(self, records):
        self.x = [torch.as_tensor(r.expressions, dtype=torch.float32) for r in records]
        self.mel = [torch.as_tensor(r.mel, dtype=torch.float32) for r in records]
        self.units = [torch.as_tensor(r.units, dtype=torch.long) for r in records]
        self.spk = [torch.as_tensor(audio.speaker_embedding(r.mel), dtype=torch.float32) for r in records]

    def __len__(self):
        return len(self.x)

    def batch(self, idx, rng, window):
        length = min(window, min(self.x[i].shape[0] for i in idx))
        xs, mels, units = [], [], []
        for i in idx:
            off = int(rng.integers(0, self.x[i].shape[0] - length + 1))
            xs.append(self.x[i][off:off + length])
            mels.append(self.mel[i][2 * off:2 * (off + length)])
            units.append(self.units[i][2 * off:2 * (off + length)])
        return (torch.stack(xs), torch.stack(mels), torch.stack(units),
                torch.stack([self.spk[i] for i in idx]))


def _mse(a, b):
    return ((a - b) ** 2).mean()


def thunder_losses(model: ThunderModel, face: TorchFace, x_hat_norm, x_norm, *, m2s=None,
                   mel=None, units=None, spk=None):
    """Loss terms for one batch of predictions; returns a dict of scalars.

    Parameter terms are in normalized units, the vertex term in model units.
    """
    psi_dim = face.psi_dim
    x_hat = model.denormalize(x_hat_norm)
    x = model.denormalize(x_norm)
    verts_hat = face.decode(x_hat)
    with torch.no_grad():
        verts = face.decode(x)

    def rec(v_a, v_b, p_a, p_b):
        return (_mse(v_a, v_b) + _mse(p_a[..., :psi_dim], p_b[..., :psi_dim])
                + _mse(p_a[..., psi_dim:], p_b[..., psi_dim:]))

    out = {
        "rec": rec(verts_hat, verts, x_hat_norm, x_norm),
        "vel": rec(velocity(verts_hat.flatten(-2)), velocity(verts.flatten(-2)),
                   velocity(x_hat_norm), velocity(x_norm)),
    }
    out["total"] = out["rec"] + out["vel"]
    if m2s is not None:
        inp = to_input_space(face, x_hat, m2s.config.input_space)
        mel_hat, logits = m2s(inp, spk)
        out["m2s"] = m2s_loss(mel_hat, logits, mel, units)[2]
        out["total"] = out["total"] + model.cfg.w_m2s * out["m2s"]
    return out


def init_thunder(corpus, cfg: DenoiserConfig | None = None, seed: int = 0) -> ThunderModel:
    cfg = cfg or DenoiserConfig()
    cfg.param_dim = corpus.template.param_dim
    model = ThunderModel(cfg, seed)
    frames = np.concatenate([r.expressions for r in corpus.split("train")]).astype(np.float64)
    std = np.maximum(frames.std(0), STD_FLOOR)
    model.x_mean.copy_(torch.as_tensor(frames.mean(0)))
    model.x_std.copy_(torch.as_tensor(std))
    model.lineage = {"corpus_id": corpus.corpus_id, "codebook_id": corpus.codebook_id}
    return model


def train_thunder(corpus, m2s: M2SModel | None = None, cfg: DenoiserConfig | None = None,
                  opts: TrainOptions | None = None, log=None):
    """Train the denoiser; returns ``(model, history)``.

    The M2S model is only required (and only evaluated) when
    ``cfg.with_m2s`` is set. It and a frozen audio encoder never change.
    """
    cfg = (cfg or DenoiserConfig()).validate()
    opts = opts or TrainOptions()
    records = corpus.split("train")
    if not records:
        raise InvalidArgument("corpus has no training sequences")
    if cfg.with_m2s:
        if m2s is None:
            raise InvalidArgument("with_m2s is set but no M2S model was given")
        check_lineage(m2s.lineage, {"corpus_id": corpus.corpus_id,
                                    "codebook_id": corpus.codebook_id}, "m2s model")
        cfg.m2s_space = m2s.config.input_space
        m2s.freeze()
    model = init_thunder(corpus, cfg, opts.seed)
    face = TorchFace(corpus.template, torch.float32)
    data = _DiffusionData(records)
    schedule = cfg.schedule()
    sqrt_a = torch.as_tensor(np.sqrt(schedule.alpha), dtype=torch.float32)
    sqrt_1ma = torch.as_tensor(np.sqrt(1.0 - schedule.alpha), dtype=torch.float32)

    params = list(model.denoiser.parameters())
    if cfg.encoder_mode == "trainable":
        params += list(model.encoder.parameters())
    opt = torch.optim.Adam(params, lr=opts.lr)
    rng = np.random.default_rng(opts.seed)
    gen = torch.Generator().manual_seed(derive_seed(opts.seed, 7))
    history = ThunderHistory()

    steps_per_epoch = math.ceil(len(data) / opts.batch_size)
    total_steps = opts.epochs * steps_per_epoch
    if opts.max_steps is not None:
        total_steps = min(total_steps, opts.max_steps)
    model.train()
    for step in range(total_steps):
        idx = rng.choice(len(data), size=min(opts.batch_size, len(data)), replace=False)
        x, mel, units, spk = data.batch(idx, rng, opts.window)
        x_norm = model.normalize(x)
        d = torch.randint(1, cfg.steps + 1, (len(idx),), generator=gen)
        noise = torch.randn(x_norm.shape, generator=gen)
        x_noisy = sqrt_a[d][:, None, None] * x_norm + sqrt_1ma[d][:, None, None] * noise
        use_null = bool(rng.random() < cfg.cond_dropout)
        history.null_steps += use_null
        if use_null:
            feats = None
        elif cfg.encoder_mode == "trainable":
            feats = model.encoder(mel)
        else:
            with torch.no_grad():
                feats = model.encoder(mel)
        x_hat = model.denoiser(x_noisy, d, feats)
        losses = thunder_losses(model, face, x_hat, x_norm,
                                m2s=m2s if cfg.with_m2s else None, mel=mel, units=units, spk=spk)
        total = losses["total"]
        if not torch.isfinite(total):
            raise TrainingDiverged(step, float(total.detach()))
        opt.zero_grad()
        total.backward()
        opt.step()
        history.steps.append({k: float(v.detach()) for k, v in losses.items()} | {"null": use_null})
        if log and (step % 200 == 0 or step == total_steps - 1):
            log(f"thunder step {step}/{total_steps}: " +
                " ".join(f"{k} {float(v.detach()):.4f}" for k, v in losses.items()))
    model.eval()
    return model, history


# -- sampling ----------------------------------------------------------------------


@dataclass
class SampleConfig:
    guidance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.guidance < 0:
            raise InvalidArgument("guidance scale must be >= 0")


def _sample_batch(model: ThunderModel, feats: torch.Tensor, noise_gens, schedule: NoiseSchedule,
                  guidance: float) -> torch.Tensor:
    S = len(noise_gens)
    T = feats.shape[0]
    P = model.cfg.param_dim
    dtype = model.x_mean.dtype
    cond = feats[None].expand(S, -1, -1)
    x = torch.stack([torch.randn(T, P, generator=g, dtype=dtype) for g in noise_gens])
    x_hat = x
    with torch.no_grad():
        for d in range(schedule.D, 0, -1):
            steps = torch.full((S,), d, dtype=torch.long)
            x_hat = model.denoiser(x, steps, cond)
            if guidance != 1.0:
                x_hat = guidance * x_hat + (1.0 - guidance) * model.denoiser(x, steps, None)
            if d > 1:
                a = schedule.alpha[d - 1]
                fresh = torch.stack([torch.randn(T, P, generator=g, dtype=dtype) for g in noise_gens])
                x = math.sqrt(a) * x_hat + math.sqrt(1.0 - a) * fresh
    return model.denormalize(x_hat)


def sample_many(model: ThunderModel, feats, n_samples: int, seed: int,
                schedule: NoiseSchedule | None = None, guidance: float = 1.0) -> np.ndarray:
    """S independent samples, (S, T, P), sample i seeded by derive_seed(seed, i)."""
    schedule = schedule or model.cfg.schedule()
    feats = torch.as_tensor(np.asarray(feats) if not isinstance(feats, torch.Tensor) else feats,
                            dtype=model.x_mean.dtype)
    if feats.dim() != 2 or feats.shape[1] != model.cfg.d_s:
        raise InvalidArgument(f"audio features must be (T, {model.cfg.d_s})")
    gens = [torch.Generator().manual_seed(derive_seed(seed, i)) for i in range(n_samples)]
    model.eval()
    return _sample_batch(model, feats, gens, schedule, guidance).numpy().astype(np.float64)


def sample(model: ThunderModel, feats, schedule: NoiseSchedule | None = None,
           cfg: SampleConfig | None = None) -> ExpressionSequence:
    cfg = cfg or SampleConfig()
    schedule = schedule or model.cfg.schedule()
    feats = torch.as_tensor(np.asarray(feats) if not isinstance(feats, torch.Tensor) else feats,
                            dtype=model.x_mean.dtype)
    if feats.dim() != 2 or feats.shape[1] != model.cfg.d_s:
        raise InvalidArgument(f"audio features must be (T, {model.cfg.d_s})")
    model.eval()
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, 0))
    out = _sample_batch(model, feats, [gen], schedule, cfg.guidance)[0]
    return ExpressionSequence(out.numpy().astype(np.float64))


def diffusion_sampler(model: ThunderModel, schedule: NoiseSchedule | None = None,
                      guidance: float = 1.0):
    """Sampler handle for :func:`metrics.evaluate_model`."""
    schedule = schedule or model.cfg.schedule()

    def run(record, n_samples, seed):
        with torch.no_grad():
            feats = model.features(record.mel)[0]
        return sample_many(model, feats, n_samples, seed, schedule, guidance)

    return run


# -- persistence ----------------------------------------------------------------


def save_thunder(path, model: ThunderModel, extra: dict | None = None):
    meta = {"kind": "thunder", "config": asdict(model.cfg), "lineage": model.lineage,
            "x_mean": model.x_mean.tolist(), "x_std": model.x_std.tolist()}
    meta.update(extra or {})
    return save_checkpoint(path, model, meta)


def load_thunder(path) -> ThunderModel:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "thunder":
        raise InvalidArgument(f"{path}: not a denoiser checkpoint (kind={meta.get('kind')!r})")
    model = ThunderModel(DenoiserConfig(**meta["config"]))
    model.load_state_dict(state)
    model.lineage = meta.get("lineage", {})
    model.eval()
    return model


def encoder_hash(model: ThunderModel) -> str:
    return parameter_hash(model.encoder)
