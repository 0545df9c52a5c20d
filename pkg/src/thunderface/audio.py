"""Audio front end: log-mel extraction, speech units, speaker embedding and
the 25 Hz conditioning encoder.

All of these replace pretrained components with small local ones that keep
the same interfaces: mel frames at 50 Hz, discrete units at 50 Hz, a unit-norm
speaker vector, and a feature sequence at the 25 fps animation rate.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument

SAMPLE_RATE = 16000
WIN = 640
HOP = 320
N_MELS = 80
F_MAX = 8000.0
LOG_FLOOR = -10.0
SPK_DIM = 16
_SPK_PROJ_SEED = 16_000_080


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_edges() -> np.ndarray:
    """The N_MELS + 2 triangle edge frequencies in Hz."""
    return _mel_to_hz(np.linspace(0.0, _hz_to_mel(F_MAX), N_MELS + 2))


def mel_centers() -> np.ndarray:
    return mel_edges()[1:-1]


def mel_filterbank() -> np.ndarray:
    """Triangular filters (N_MELS, WIN // 2 + 1), unit peak height."""
    edges = mel_edges()
    freqs = np.fft.rfftfreq(WIN, d=1.0 / SAMPLE_RATE)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _check_wave(wave_):
    w = np.asarray(wave_, dtype=np.float64)
    if w.ndim != 1:
        raise InvalidArgument("waveform must be one-dimensional")
    if not np.all(np.isfinite(w)):
        raise InvalidArgument("waveform must be finite")
    return w


def mel_power(wave_) -> np.ndarray:
    """Linear mel energies (frames, N_MELS) before the log, not truncated."""
    w = _check_wave(wave_)
    if w.size < WIN:
        raise InvalidArgument(f"waveform shorter than one window ({w.size} < {WIN} samples)")
    padded = np.pad(w, WIN // 2)
    n_frames = 1 + (padded.size - WIN) // HOP
    frames = np.lib.stride_tricks.sliding_window_view(padded, WIN)[::HOP][:n_frames]
    spec = np.abs(np.fft.rfft(frames * np.hanning(WIN + 1)[:-1], axis=1)) ** 2
    return spec @ mel_filterbank().T


def stft_mel(wave_) -> np.ndarray:
    """Log-mel spectrogram at 50 Hz, (T50, 80), T50 even.

    Centered 640-sample periodic Hann frames with a 320-sample hop: ``n * 320``
    samples give ``n + 1`` frames, then the last frame is dropped if odd.
    """
    power = mel_power(wave_)
    power = power[: power.shape[0] - power.shape[0] % 2]
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(power), LOG_FLOOR)


def check_mel(mel, name="mel") -> np.ndarray:
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise InvalidArgument(f"{name} must be (frames, {N_MELS}), got {mel.shape}")
    if mel.shape[0] < 2 or mel.shape[0] % 2:
        raise InvalidArgument(f"{name} needs an even number of frames >= 2, got {mel.shape[0]}")
    return mel


@dataclass(frozen=True)
class UnitCodebook:
    centroids: np.ndarray  # (n_U, n_bins)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise InvalidArgument("centroids must be (n_U, n_bins)")
        if not np.all(np.isfinite(c)):
            raise InvalidArgument("centroids must be finite")
        if len(np.unique(c, axis=0)) != c.shape[0]:
            raise InvalidArgument("centroids must be pairwise distinct")
        object.__setattr__(self, "centroids", c)

    @property
    def n_units(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeans_once(data, n_units, rng, max_iter, tol):
    centroids = [data[rng.integers(data.shape[0])]]
    d2 = ((data - centroids[0]) ** 2).sum(1)
    for _ in range(1, n_units):
        total = d2.sum()
        if total <= 0:
            raise InvalidArgument("data has fewer distinct frames than requested units")
        centroids.append(data[rng.choice(data.shape[0], p=d2 / total)])
        d2 = np.minimum(d2, ((data - centroids[-1]) ** 2).sum(1))
    centroids = np.array(centroids)

    for _ in range(max_iter):
        dist = _sq_dists(data, centroids)
        labels = dist.argmin(1)
        new = centroids.copy()
        for k in range(n_units):
            members = data[labels == k]
            if len(members):
                new[k] = members.mean(0)
            else:
                # empty cluster: restart it on the worst-served frame
                far = dist[np.arange(len(data)), labels].argmax()
                new[k] = data[far]
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break
    inertia = _sq_dists(data, centroids).min(1).sum()
    return centroids, inertia


def fit_unit_codebook(mels, n_units: int = 8, seed: int = 0, max_iter: int = 100,
                      tol: float = 1e-6, n_init: int = 10) -> UnitCodebook:
    """k-means over all frames of ``mels``.

    Each of the ``n_init`` restarts uses k-means++ seeding and at most
    ``max_iter`` Lloyd iterations; the lowest-inertia result is kept.
    """
    if isinstance(mels, np.ndarray) and mels.ndim == 2:
        mels = [mels]
    data = np.concatenate([np.asarray(m, dtype=np.float64) for m in mels], axis=0)
    if n_units < 1:
        raise InvalidArgument("n_units must be positive")
    if data.shape[0] < 10 * n_units:
        raise InvalidArgument(
            f"need at least {10 * n_units} frames for {n_units} units, got {data.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(max(1, n_init)):
        centroids, inertia = _kmeans_once(data, n_units, rng, max_iter, tol)
        if inertia < best_inertia:
            best, best_inertia = centroids, inertia
    return UnitCodebook(best)


def quantize_units(mel, codebook: UnitCodebook) -> np.ndarray:
    """Nearest-centroid ids; ties go to the lowest index."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != codebook.centroids.shape[1]:
        raise InvalidArgument(
            f"mel has {mel.shape[-1]} bins, codebook expects {codebook.centroids.shape[1]}"
        )
    return _sq_dists(mel, codebook.centroids).argmin(1).astype(np.int64)


def _speaker_projection() -> np.ndarray:
    rng = np.random.default_rng(_SPK_PROJ_SEED)
    return rng.normal(size=(2 * N_MELS, SPK_DIM)) / np.sqrt(2 * N_MELS)


def speaker_embedding(mel) -> np.ndarray:
    """Unit-norm 16-d projection of per-bin temporal mean and std.

    Frames are sorted per bin before reducing so the result is exactly
    invariant to frame order.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise InvalidArgument(f"mel must be (frames, {N_MELS})")
    if mel.shape[0] < 2:
        raise InvalidArgument("speaker embedding needs at least 2 frames")
    ordered = np.sort(mel, axis=0)
    stats = np.concatenate([ordered.mean(0), ordered.std(0)])
    v = stats @ _speaker_projection()
    return v / np.linalg.norm(v)


class AudioEncoder(nn.Module):
    """Three temporal conv layers, 50 Hz mel in, 25 Hz features out.

    ``trainable=False`` is the frozen variant: parameters keep their seeded
    initialization and never receive gradients.
    """

    def __init__(self, d_s: int = 64, trainable: bool = False, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.conv1 = nn.Conv1d(N_MELS, d_s, kernel_size=4, stride=2, padding=1)
            self.conv2 = nn.Conv1d(d_s, d_s, kernel_size=3, padding=1)
            self.conv3 = nn.Conv1d(d_s, d_s, kernel_size=3, padding=1)
        self.d_s = d_s
        self.trainable = trainable
        self.requires_grad_(trainable)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, T50, 80) -> (B, T50 // 2, d_s)."""
        h = (mel / 5.0).transpose(1, 2)
        h = nn.functional.gelu(self.conv1(h))
        h = nn.functional.gelu(self.conv2(h))
        h = self.conv3(h)
        return h.transpose(1, 2)


def encode_audio(mel, encoder: AudioEncoder) -> np.ndarray:
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise InvalidArgument(f"mel must be (frames, {N_MELS})")
    if mel.shape[0] % 2:
        raise InvalidArgument(f"mel length must be even, got {mel.shape[0]}")
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        out = encoder(torch.as_tensor(mel, dtype=dtype)[None])
    return out[0].numpy()


def oscillator_bank(mel) -> np.ndarray:
    """Un-normalized sinusoid-bank rendering of a log-mel spectrogram."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise InvalidArgument(f"mel must be (frames, {N_MELS})")
    n_frames = mel.shape[0]
    n = np.arange(n_frames * HOP)
    amps = np.maximum(np.exp(mel) - np.exp(LOG_FLOOR), 0.0)
    knots = np.arange(n_frames) * HOP
    out = np.zeros(n.size)
    for k, f in enumerate(mel_centers()):
        if not amps[:, k].any():
            continue
        out += np.interp(n, knots, amps[:, k]) * np.sin(2 * np.pi * f * n / SAMPLE_RATE)
    return out


def synth_waveform(mel) -> np.ndarray:
    """Audible stand-in for a vocoder; peak-normalized to 0.9."""
    out = oscillator_bank(mel)
    peak = np.abs(out).max()
    return out * (0.9 / peak) if peak > 0 else out


def write_wav(path, samples) -> None:
    """16-bit PCM mono at 16 kHz."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())
