"""Mesh-to-speech regressor: 25 fps facial animation -> 50 Hz mel + units.

Input MLP, additive speaker fusion, a stack of conformer blocks, x2 temporal
upsampling, then a mel regression head and a unit classification head. The
network is differentiable in its input, which is what lets a frozen copy act
as an audio-consistency loss on generated animation, and what
:func:`analysis_by_audio_synthesis` inverts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import audio
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InvalidArgument, LineageError
from .face_model import ExpressionSequence, FaceTemplate, TorchFace

INPUT_SPACES = ("mouth", "face", "exp")
W_MEL = 10.0
W_UNIT = 1.0


@dataclass
class M2SConfig:
    input_space: str = "mouth"
    hidden: int = 96
    blocks: int = 2
    heads: int = 4
    kernel: int = 5
    n_units: int = 8
    input_dim: int = 0

    def resolve(self, template: FaceTemplate) -> "M2SConfig":
        if self.input_space not in INPUT_SPACES:
            raise InvalidArgument(f"input_space must be one of {INPUT_SPACES}, got {self.input_space!r}")
        if self.hidden % self.heads:
            raise InvalidArgument("hidden width must be divisible by heads")
        dim = {
            "mouth": 3 * len(template.mouth_idx),
            "face": 3 * template.n_v,
            "exp": template.param_dim,
        }[self.input_space]
        if self.input_dim and self.input_dim != dim:
            raise InvalidArgument(f"input_dim {self.input_dim} inconsistent with {self.input_space} space ({dim})")
        self.input_dim = dim
        return self


def to_input_space(face: TorchFace, x: torch.Tensor, space: str) -> torch.Tensor:
    """Raw expression parameters (..., T, psi+3) -> M2S input features."""
    if space == "exp":
        return x
    verts = face.decode(x)
    if space == "mouth":
        verts = verts[..., face.mouth_idx, :]
    elif space != "face":
        raise InvalidArgument(f"unknown input space {space!r}")
    return verts.reshape(*verts.shape[:-2], -1)


class ConformerBlock(nn.Module):
    """Pre-norm self-attention and depthwise-conv sublayers, each residual."""

    def __init__(self, dim: int, heads: int, kernel: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.conv_norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.pointwise_out = nn.Linear(dim, dim)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x):
        h = self.attn_norm(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        h = F.glu(self.pointwise_in(self.conv_norm(x)), dim=-1)
        h = F.silu(self.depthwise(h.transpose(1, 2)).transpose(1, 2))
        x = x + self.pointwise_out(h)
        return self.out_norm(x)


class M2SModel(nn.Module):
    def __init__(self, config: M2SConfig, seed: int = 0):
        super().__init__()
        if not config.input_dim:
            raise InvalidArgument("resolve the config against a template first")
        self.config = config
        H = config.hidden
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.in_mlp = nn.Sequential(nn.Linear(config.input_dim, H), nn.GELU(), nn.Linear(H, H))
            self.spk_proj = nn.Linear(audio.SPK_DIM, H)
            self.blocks = nn.ModuleList(
                ConformerBlock(H, config.heads, config.kernel) for _ in range(config.blocks)
            )
            self.upsample = nn.Conv1d(H, H, 3, padding=1)
            self.mel_head = nn.Linear(H, audio.N_MELS)
            self.unit_head = nn.Linear(H, config.n_units)
        self.register_buffer("in_mean", torch.zeros(config.input_dim))
        self.register_buffer("in_std", torch.ones(config.input_dim))
        self.register_buffer("mel_mean", torch.zeros(audio.N_MELS))
        self.register_buffer("mel_std", torch.ones(audio.N_MELS))
        self.lineage: dict = {}

    def forward(self, inp: torch.Tensor, spk: torch.Tensor):
        """(B, T, input_dim), (B, 16) -> mel (B, 2T, 80), logits (B, 2T, n_U)."""
        if inp.shape[-1] != self.config.input_dim:
            raise InvalidArgument(f"expected input width {self.config.input_dim}, got {inp.shape[-1]}")
        h = self.in_mlp((inp - self.in_mean) / self.in_std)
        h = h + self.spk_proj(spk)[:, None, :]
        for block in self.blocks:
            h = block(h)
        h = h.repeat_interleave(2, dim=1)
        h = F.gelu(self.upsample(h.transpose(1, 2))).transpose(1, 2)
        mel = self.mel_head(h) * self.mel_std + self.mel_mean
        return mel, self.unit_head(h)

    def freeze(self) -> "M2SModel":
        self.requires_grad_(False)
        self.eval()
        return self


@dataclass
class M2SOutput:
    mel_hat: np.ndarray
    unit_logits: np.ndarray


def m2s_forward(model: M2SModel, input_seq, spk) -> M2SOutput:
    """Single-sequence forward pass on numpy inputs."""
    inp = np.asarray(input_seq)
    if inp.ndim != 2 or inp.shape[1] != model.config.input_dim:
        raise InvalidArgument(f"input must be (T, {model.config.input_dim}), got {inp.shape}")
    dtype = model.mel_mean.dtype
    with torch.no_grad():
        mel, logits = model(torch.as_tensor(inp, dtype=dtype)[None],
                            torch.as_tensor(np.asarray(spk), dtype=dtype)[None])
    return M2SOutput(mel[0].numpy(), logits[0].numpy())


def m2s_loss(mel_hat, unit_logits, mel, units):
    """Return ``(L_mel, L_unit, L_m2s)`` with L_m2s = 10 L_mel + L_unit.

    Accepts tensors with an optional leading batch axis; numpy inputs give
    python floats.
    """
    as_numpy = not isinstance(mel_hat, torch.Tensor)
    mel_hat, unit_logits, mel, units = (torch.as_tensor(np.asarray(a)) if as_numpy else a
                                        for a in (mel_hat, unit_logits, mel, units))
    if mel_hat.shape != mel.shape or unit_logits.shape[:-1] != units.shape:
        raise InvalidArgument(
            f"length mismatch: mel_hat {tuple(mel_hat.shape)} vs mel {tuple(mel.shape)}, "
            f"logits {tuple(unit_logits.shape)} vs units {tuple(units.shape)}"
        )
    l_mel = (mel_hat - mel.to(mel_hat.dtype)).abs().mean()
    l_unit = F.cross_entropy(unit_logits.reshape(-1, unit_logits.shape[-1]), units.reshape(-1).long())
    total = W_MEL * l_mel + W_UNIT * l_unit
    if as_numpy:
        return float(l_mel), float(l_unit), float(total)
    return l_mel, l_unit, total


# -- training ----------------------------------------------------------------


class _M2SData:
    """Per-record tensors in the model's input space."""

    def __init__(self, records, template: FaceTemplate, space: str):
        face = TorchFace(template, torch.float32)
        self.inputs, self.mels, self.units, self.spks = [], [], [], []
        with torch.no_grad():
            for r in records:
                x = torch.as_tensor(r.expressions, dtype=torch.float32)
                self.inputs.append(to_input_space(face, x, space))
                self.mels.append(torch.as_tensor(r.mel, dtype=torch.float32))
                self.units.append(torch.as_tensor(r.units, dtype=torch.long))
                self.spks.append(torch.as_tensor(audio.speaker_embedding(r.mel), dtype=torch.float32))

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx, rng, max_window):
        length = min(max_window, min(self.inputs[i].shape[0] for i in idx))
        inp, mel, units = [], [], []
        for i in idx:
            off = int(rng.integers(0, self.inputs[i].shape[0] - length + 1))
            inp.append(self.inputs[i][off:off + length])
            mel.append(self.mels[i][2 * off:2 * (off + length)])
            units.append(self.units[i][2 * off:2 * (off + length)])
        spk = torch.stack([self.spks[i] for i in idx])
        return torch.stack(inp), spk, torch.stack(mel), torch.stack(units)


def _mean_loss(model, data: _M2SData) -> float:
    total, frames = 0.0, 0
    with torch.no_grad():
        for i in range(len(data)):
            mel, logits = model(data.inputs[i][None], data.spks[i][None])
            loss = m2s_loss(mel[0], logits[0], data.mels[i], data.units[i])[2]
            total += float(loss) * data.mels[i].shape[0]
            frames += data.mels[i].shape[0]
    return total / frames


def init_m2s(corpus, config: M2SConfig | None = None, seed: int = 0) -> M2SModel:
    config = (config or M2SConfig(n_units=corpus.codebook.n_units)).resolve(corpus.template)
    model = M2SModel(config, seed)
    train = _M2SData(corpus.split("train"), corpus.template, config.input_space)
    if len(train) == 0:
        raise InvalidArgument("corpus has no training sequences")
    inputs = torch.cat(train.inputs)
    mels = torch.cat(train.mels)
    model.in_mean.copy_(inputs.mean(0))
    std = inputs.std(0)
    if config.input_space == "exp":
        std = std.clamp_min(1e-2)
    else:
        # Vertex coordinates share units: one pooled scale keeps near-static
        # coordinates from being blown up into hypersensitive inputs.
        std = torch.full_like(std, float(std.pow(2).mean().sqrt()))
    model.in_std.copy_(std)
    model.mel_mean.copy_(mels.mean(0))
    model.mel_std.copy_(mels.std(0).clamp_min(1e-2))
    model.lineage = {"corpus_id": corpus.corpus_id, "codebook_id": corpus.codebook_id}
    return model


@dataclass
class M2SHistory:
    epochs: list = field(default_factory=list)

    @property
    def best_val(self) -> float:
        return min((e["val_loss"] for e in self.epochs), default=math.inf)


def train_m2s(corpus, config: M2SConfig | None = None, *, lr: float = 1e-3, batch_size: int = 16,
              max_window: int = 125, epochs: int = 20, seed: int = 0, log=None):
    """Adam on L_m2s over the train split; keeps the lowest-validation epoch.

    Returns ``(model, history)``; the model comes back frozen.
    """
    model = init_m2s(corpus, config, seed)
    history = M2SHistory()
    if epochs <= 0:
        return model.freeze(), history
    space = model.config.input_space
    train = _M2SData(corpus.split("train"), corpus.template, space)
    val_records = corpus.split("val") or corpus.split("train")
    val = _M2SData(val_records, corpus.template, space)

    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    best_state, best_val = None, math.inf
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch_size):
            inp, spk, mel, units = train.batch(order[start:start + batch_size], rng, max_window)
            mel_hat, logits = model(inp, spk)
            loss = m2s_loss(mel_hat, logits, mel, units)[2]
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        model.eval()
        val_loss = _mean_loss(model, val)
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        history.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                               "val_loss": val_loss, "best_val": best_val})
        if log:
            log(f"m2s epoch {epoch}: train {np.mean(losses):.4f} val {val_loss:.4f}")
    model.load_state_dict(best_state)
    return model.freeze(), history


def predict_records(model: M2SModel, records, template: FaceTemplate):
    """Per-record ``(mel_hat, logits)`` numpy pairs."""
    data = _M2SData(records, template, model.config.input_space)
    out = []
    with torch.no_grad():
        for i in range(len(data)):
            mel, logits = model(data.inputs[i][None], data.spks[i][None])
            out.append((mel[0].numpy(), logits[0].numpy()))
    return out


def score_m2s(outputs, records) -> dict:
    """Pooled mel L1 and unit accuracy over all 50 Hz frames."""
    if not records:
        raise InvalidArgument("cannot evaluate on an empty split")
    abs_err, n_vals, hits, n_frames = 0.0, 0, 0, 0
    for (mel_hat, logits), r in zip(outputs, records):
        abs_err += float(np.abs(np.asarray(mel_hat, dtype=np.float64) - r.mel).sum())
        n_vals += r.mel.size
        hits += int((np.asarray(logits).argmax(-1) == r.units).sum())
        n_frames += r.units.size
    return {"mel_L1": abs_err / n_vals, "unit_accuracy": hits / n_frames, "frames": n_frames}


def eval_m2s(model: M2SModel, records, template: FaceTemplate) -> dict:
    if not records:
        raise InvalidArgument("cannot evaluate on an empty split")
    return score_m2s(predict_records(model, records, template), records)


# -- analysis by audio synthesis ------------------------------------------------


@dataclass
class ABASResult:
    expressions: ExpressionSequence
    initial_objective: float
    best_objective: float
    history: list


def abas_objective(model, face, x, spk, mel, units, smoothness):
    inp = to_input_space(face, x, model.config.input_space)
    mel_hat, logits = model(inp[None], spk[None])
    l_m2s = m2s_loss(mel_hat[0], logits[0], mel, units)[2]
    if x.shape[0] > 1:
        l_m2s = l_m2s + smoothness * ((x[1:] - x[:-1]) ** 2).mean()
    return l_m2s


def analysis_by_audio_synthesis(model: M2SModel, target_mel, target_units, n_frames: int,
                                template: FaceTemplate, *, spk=None, lr: float = 0.05,
                                steps: int = 500, smoothness: float = 0.1) -> ABASResult:
    """Fit expression parameters whose M2S audio matches a target.

    Starts from the neutral face (all zeros), runs Adam on the M2S loss plus
    ``smoothness`` times the mean squared frame-to-frame velocity, and returns
    the iterate with the lowest objective. The model is not modified.
    """
    target_mel = np.asarray(target_mel)
    target_units = np.asarray(target_units)
    if target_mel.shape[0] != 2 * n_frames or target_units.shape[0] != 2 * n_frames:
        raise InvalidArgument(
            f"target must have 2*T={2 * n_frames} frames, got {target_mel.shape[0]}/{target_units.shape[0]}"
        )
    dtype = model.mel_mean.dtype
    face = TorchFace(template, dtype)
    mel = torch.as_tensor(target_mel, dtype=dtype)
    units = torch.as_tensor(target_units, dtype=torch.long)
    if spk is None:
        spk = audio.speaker_embedding(target_mel)
    spk = torch.as_tensor(np.asarray(spk), dtype=dtype)

    grad_flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    was_training = model.training
    model.eval()
    try:
        x = torch.zeros(n_frames, template.param_dim, dtype=dtype, requires_grad=True)
        opt = torch.optim.Adam([x], lr=lr)
        best_x = x.detach().clone()
        with torch.no_grad():
            initial = float(abas_objective(model, face, x, spk, mel, units, smoothness))
        best, history = initial, [initial]
        for _ in range(steps):
            obj = abas_objective(model, face, x, spk, mel, units, smoothness)
            opt.zero_grad()
            obj.backward()
            opt.step()
            with torch.no_grad():
                value = float(abas_objective(model, face, x, spk, mel, units, smoothness))
            history.append(value)
            if value < best:
                best, best_x = value, x.detach().clone()
    finally:
        for p, flag in zip(model.parameters(), grad_flags):
            p.requires_grad_(flag)
        model.train(was_training)
    frames = best_x.numpy().astype(np.float64)
    return ABASResult(ExpressionSequence(frames), initial, best, history)


# -- persistence ---------------------------------------------------------------


def save_m2s(path, model: M2SModel):
    meta = {"kind": "m2s", "config": asdict(model.config), "lineage": model.lineage}
    return save_checkpoint(path, model, meta)


def load_m2s(path, expect_lineage: dict | None = None) -> M2SModel:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "m2s":
        raise InvalidArgument(f"{path}: not an M2S checkpoint (kind={meta.get('kind')!r})")
    model = M2SModel(M2SConfig(**meta["config"]))
    model.load_state_dict(state)
    model.lineage = meta.get("lineage", {})
    if expect_lineage is not None:
        check_lineage(model.lineage, expect_lineage, str(path))
    return model.freeze()


def check_lineage(found: dict, expected: dict, what: str):
    for key in ("corpus_id", "codebook_id"):
        if found.get(key) != expected.get(key):
            raise LineageError(
                f"{what}: {key} {found.get(key)!r} does not match {expected.get(key)!r}"
            )
