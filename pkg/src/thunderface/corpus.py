"""Procedural talking-face corpus with planted phoneme -> viseme -> mel ties.

Mouth channels and jaw are a deterministic function of the utterance; the
upper-face channels are smooth noise drawn from the sequence seed alone, so
lip motion is audio-determined and upper-face motion is not.

On disk a corpus is a directory::

    manifest.json          UTF-8 JSON: bank, speakers, splits, sequence index
    template.npz           face template arrays
    codebook.npz           unit centroids
    sequences/seq_NNNNN.thsq

Sequence files are little-endian: a 32-byte header (magic ``THSQ``, u32
version, u32 T, u32 psi_dim, u32 mel_frames, u32 mel_bins, u32 n_units,
u16 speaker_id, u16 reserved) followed by float32 expressions
``T x (psi_dim + 3)``, float32 mel ``mel_frames x mel_bins`` and u16 unit ids.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import audio
from .errors import FormatError, InvalidArgument, NotFound
from .face_model import FaceTemplate, make_synthetic_template

MAGIC = b"THSQ"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIHH")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PhonemeSpec:
    id: int
    viseme: np.ndarray  # mouth-channel targets followed by jaw opening (rad)
    mel_template: np.ndarray  # (80,)
    unit_id: int

    @property
    def is_silence(self) -> bool:
        return bool(np.all(self.mel_template == audio.LOG_FLOOR))


@dataclass(frozen=True)
class Utterance:
    phoneme_ids: tuple
    durations: tuple

    def __post_init__(self):
        object.__setattr__(self, "phoneme_ids", tuple(int(p) for p in self.phoneme_ids))
        object.__setattr__(self, "durations", tuple(int(d) for d in self.durations))
        if len(self.phoneme_ids) != len(self.durations) or not self.durations:
            raise InvalidArgument("utterance needs matching, non-empty phoneme and duration lists")
        if any(d < 1 for d in self.durations):
            raise InvalidArgument("durations must be positive frame counts")

    @property
    def n_frames(self) -> int:
        return sum(self.durations)

    def frame_phonemes(self) -> np.ndarray:
        return np.repeat(self.phoneme_ids, self.durations)


@dataclass
class SequenceRecord:
    expressions: np.ndarray  # (T, psi_dim + 3) float32
    mel: np.ndarray  # (2T, 80) float32
    units: np.ndarray  # (2T,) int
    speaker_id: int
    utterance: Utterance | None = None
    seed: int = 0
    index: int = 0
    split: str = "train"

    def __post_init__(self):
        T = self.expressions.shape[0]
        if self.mel.shape[0] != 2 * T or self.units.shape[0] != 2 * T:
            raise InvalidArgument(
                f"mel/units must have 2*T={2 * T} frames, got {self.mel.shape[0]}/{self.units.shape[0]}"
            )

    @property
    def n_frames(self) -> int:
        return self.expressions.shape[0]


@dataclass
class CorpusConfig:
    seed: int = 0
    n_phonemes: int = 8
    n_units: int = 8
    n_speakers: int = 4
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    min_frames: int = 40
    max_frames: int = 70
    n_vertices: int = 300
    psi_dim: int = 16
    mel_noise: float = 0.1
    tilt_scale: float = 12.0
    tilt_jitter: float = 2.0
    template_scale: float = 25.0
    mouth_sigma: float = 1.5
    upper_sigma: float = 6.0
    upper_amplitude: float = 0.3
    jaw_lateral: float = 0.01
    silence_prob: float = 0.1

    def validate(self):
        if not 2 <= self.n_phonemes <= self.n_units:
            raise InvalidArgument("n_phonemes must lie in [2, n_units]")
        if self.n_speakers < 3:
            raise InvalidArgument("n_speakers must be >= 3 to form disjoint splits")
        if not 6 <= self.min_frames <= self.max_frames:
            raise InvalidArgument("need 6 <= min_frames <= max_frames")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if self.mel_noise < 0 or self.tilt_jitter < 0 or self.jaw_lateral < 0:
            raise InvalidArgument("noise levels must be non-negative")


@dataclass
class CorpusManifest:
    config: CorpusConfig
    bank: list
    speaker_tilts: np.ndarray  # (n_speakers, 80)
    speaker_embeddings: np.ndarray  # (n_speakers, 16)
    tilt_patterns: np.ndarray  # (n_speakers, 80) orthonormal rows
    splits: dict  # split -> list of speaker ids
    template_id: str = ""
    codebook_id: str = ""
    sequences: list = field(default_factory=list)
    corpus_id: str = ""

    def split_of(self, speaker_id: int) -> str:
        for name, spk in self.splits.items():
            if speaker_id in spk:
                return name
        raise NotFound(f"speaker {speaker_id} not in manifest")


@dataclass
class Corpus:
    template: FaceTemplate
    codebook: audio.UnitCodebook
    manifest: CorpusManifest
    records: list

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise InvalidArgument(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    @property
    def corpus_id(self) -> str:
        return self.manifest.corpus_id

    @property
    def codebook_id(self) -> str:
        return self.manifest.codebook_id


def derive_seed(base_seed: int, *path: int) -> int:
    """Stable child seed, e.g. ``derive_seed(seed, sequence_index)``."""
    return int(np.random.SeedSequence([base_seed, *path]).generate_state(1)[0])


def array_id(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def _min_pairwise(vectors) -> float:
    v = np.asarray(vectors)
    d = np.sqrt(((v[:, None] - v[None]) ** 2).sum(-1))
    return d[np.triu_indices(len(v), 1)].min() if len(v) > 1 else np.inf


def make_phoneme_bank(K: int = 8, seed: int = 0, n_units: int = 8, n_mouth_channels: int = 6,
                      template_scale: float = 25.0) -> list:
    """K phonemes, id 0 is silence (closed mouth, floor mel).

    Voiced mel templates are mutually orthogonal directions scaled by
    ``template_scale`` so every pair sits at the same distance.
    """
    if not 2 <= K <= n_units:
        raise InvalidArgument(f"K must lie in [2, {n_units}], got {K}")
    rng = np.random.default_rng(seed)
    visemes = [np.zeros(n_mouth_channels + 1)]
    while len(visemes) < K:
        cand = np.append(rng.uniform(-1.2, 1.2, n_mouth_channels), rng.uniform(0.02, 0.15))
        if min(np.linalg.norm(cand - v) for v in visemes) >= 0.5:
            visemes.append(cand)
    q, _ = np.linalg.qr(rng.normal(size=(audio.N_MELS, max(K - 1, 1))))
    dirs = q.T[: K - 1]
    if K > 2:
        dirs = dirs - dirs.mean(0)
    mels = [np.full(audio.N_MELS, audio.LOG_FLOOR)] + list(template_scale * dirs)
    return [PhonemeSpec(i, visemes[i], np.asarray(mels[i]), i) for i in range(K)]


def make_utterance(rng, bank, min_frames=40, max_frames=70, silence_prob=0.1) -> Utterance:
    target = int(rng.integers(min_frames, max_frames + 1))
    ids, durs = [], []
    voiced = [p.id for p in bank if not p.is_silence]
    silent = [p.id for p in bank if p.is_silence]
    while True:
        remaining = target - sum(durs)
        if remaining <= 10:
            durs.append(remaining)
        else:
            durs.append(int(rng.integers(3, min(10, remaining - 3) + 1)))
        while True:
            pool = silent if silent and rng.random() < silence_prob else voiced
            p = int(pool[rng.integers(len(pool))])
            if not ids or p != ids[-1]:
                break
        ids.append(p)
        if sum(durs) == target:
            return Utterance(tuple(ids), tuple(durs))


def _tilt_patterns(n: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, audio.N_MELS)
    raw = np.array([np.cos((k + 1) * np.pi * x) for k in range(n)])
    q, _ = np.linalg.qr(raw.T)
    return q.T


def _smooth(values, sigma):
    return gaussian_filter1d(values, sigma, axis=0, mode="nearest", truncate=4.0)


def _streams(seed: int):
    upper, mel_noise, jitter = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(upper), np.random.default_rng(mel_noise), np.random.default_rng(jitter)


def _sequence_tilt(manifest: CorpusManifest, speaker_id: int, jitter_rng) -> np.ndarray:
    coeff = jitter_rng.normal(0.0, manifest.config.tilt_jitter, len(manifest.tilt_patterns))
    return manifest.speaker_tilts[speaker_id] + coeff @ manifest.tilt_patterns


def clean_mel(utt: Utterance, speaker_id: int, manifest: CorpusManifest, seed: int) -> np.ndarray:
    """Template + speaker tilt before additive noise, (2T, 80)."""
    if not 0 <= speaker_id < len(manifest.speaker_tilts):
        raise NotFound(f"speaker {speaker_id} not in manifest")
    _, _, jitter_rng = _streams(seed)
    tilt = _sequence_tilt(manifest, speaker_id, jitter_rng)
    frames = utt.frame_phonemes().repeat(2)
    bank = manifest.bank
    mel = np.stack([bank[p].mel_template for p in frames])
    voiced = np.array([not bank[p].is_silence for p in frames])
    mel[voiced] += tilt
    return np.maximum(mel, audio.LOG_FLOOR)


def synth_expressions(utt: Utterance, template: FaceTemplate, manifest: CorpusManifest,
                      seed: int) -> np.ndarray:
    cfg = manifest.config
    upper_rng, _, _ = _streams(seed)
    T = utt.n_frames
    frames = utt.frame_phonemes()
    targets = np.stack([manifest.bank[p].viseme for p in frames])
    targets = _smooth(targets, cfg.mouth_sigma)
    x = np.zeros((T, template.param_dim))
    x[:, template.mouth_channels] = targets[:, :-1]
    x[:, -3] = targets[:, -1]

    upper = template.upper_channels
    half = int(4 * cfg.upper_sigma + 0.5)
    kernel = np.exp(-0.5 * (np.arange(-half, half + 1) / cfg.upper_sigma) ** 2)
    kernel /= kernel.sum()
    white = upper_rng.normal(size=(T + 2 * half, len(upper)))
    smooth = np.stack([np.convolve(white[:, j], kernel, mode="valid") for j in range(len(upper))], 1)
    x[:, upper] = smooth * (cfg.upper_amplitude / np.linalg.norm(kernel))
    # Sideways/twisting jaw motion, unrelated to speech like the upper face.
    white = upper_rng.normal(size=(T + 2 * half, 2))
    lateral = np.stack([np.convolve(white[:, j], kernel, mode="valid") for j in range(2)], 1)
    x[:, -2:] = lateral * (cfg.jaw_lateral / np.linalg.norm(kernel))
    return x


def synth_sequence(utt: Utterance, speaker_id: int, manifest: CorpusManifest, seed: int,
                   template: FaceTemplate, codebook: audio.UnitCodebook,
                   noise_sigma: float | None = None) -> SequenceRecord:
    if not 0 <= speaker_id < len(manifest.speaker_tilts):
        raise NotFound(f"speaker {speaker_id} not in manifest")
    if noise_sigma is None:
        noise_sigma = manifest.config.mel_noise
    _, noise_rng, _ = _streams(seed)
    clean = clean_mel(utt, speaker_id, manifest, seed)
    noisy = np.maximum(clean + noise_rng.normal(0.0, 1.0, clean.shape) * noise_sigma, audio.LOG_FLOOR)
    units = audio.quantize_units(clean, codebook)
    expr = synth_expressions(utt, template, manifest, seed)
    return SequenceRecord(
        expressions=expr.astype(np.float32),
        mel=noisy.astype(np.float32),
        units=units,
        speaker_id=int(speaker_id),
        utterance=utt,
        seed=int(seed),
    )


def _assign_splits(n_speakers: int) -> dict:
    n_test = max(1, round(0.15 * n_speakers))
    n_val = max(1, round(0.15 * n_speakers))
    n_train = n_speakers - n_val - n_test
    ids = list(range(n_speakers))
    return {"train": ids[:n_train], "val": ids[n_train:n_train + n_val],
            "test": ids[n_train + n_val:]}


def build_corpus(config: CorpusConfig | None = None) -> Corpus:
    """Template, bank, speakers, codebook and all sequence records."""
    cfg = config or CorpusConfig()
    cfg.validate()
    template = make_synthetic_template(cfg.seed, cfg.n_vertices, cfg.psi_dim)
    bank = make_phoneme_bank(cfg.n_phonemes, cfg.seed, cfg.n_units,
                             len(template.mouth_channels), cfg.template_scale)
    patterns = _tilt_patterns(cfg.n_speakers)
    tilts = cfg.tilt_scale * (patterns - patterns.mean(0))
    manifest = CorpusManifest(
        config=cfg,
        bank=bank,
        speaker_tilts=tilts,
        speaker_embeddings=np.zeros((cfg.n_speakers, audio.SPK_DIM)),
        tilt_patterns=patterns,
        splits=_assign_splits(cfg.n_speakers),
        template_id=array_id(*template.arrays().values()),
    )

    rng = np.random.default_rng(derive_seed(cfg.seed, 1, 0))
    plan = []
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        speakers = manifest.splits[split]
        for j in range(count):
            utt = make_utterance(rng, bank, cfg.min_frames, cfg.max_frames, cfg.silence_prob)
            plan.append((split, speakers[j % len(speakers)], utt))

    seeds = [derive_seed(cfg.seed, i) for i in range(len(plan))]
    train_clean = [clean_mel(utt, spk, manifest, s)
                   for (split, spk, utt), s in zip(plan, seeds) if split == "train"]
    codebook = audio.fit_unit_codebook(train_clean, cfg.n_units, cfg.seed)
    manifest.codebook_id = array_id(codebook.centroids)

    # unit id of a phoneme = majority unit over its clean training frames
    votes = np.zeros((len(bank), codebook.n_units), dtype=int)
    for (split, spk, utt), s, mel in zip([p for p in plan if p[0] == "train"],
                                         [s for p, s in zip(plan, seeds) if p[0] == "train"],
                                         train_clean):
        np.add.at(votes, (utt.frame_phonemes().repeat(2), audio.quantize_units(mel, codebook)), 1)
    manifest.bank = [replace(p, unit_id=int(votes[p.id].argmax())) for p in bank]

    records = []
    for i, ((split, spk, utt), s) in enumerate(zip(plan, seeds)):
        rec = synth_sequence(utt, spk, manifest, s, template, codebook)
        rec.index, rec.split = i, split
        records.append(rec)

    ref = make_reference_utterance(manifest.bank)
    manifest.speaker_embeddings = np.stack([
        audio.speaker_embedding(clean_mel(ref, k, manifest, derive_seed(cfg.seed, 2, 0)))
        for k in range(cfg.n_speakers)
    ])
    manifest.sequences = [_sequence_entry(r) for r in records]
    manifest.corpus_id = _corpus_id(manifest, records)
    return Corpus(template, codebook, manifest, records)


def make_reference_utterance(bank) -> Utterance:
    voiced = [p.id for p in bank if not p.is_silence]
    return Utterance(tuple(voiced * 2), tuple([5] * (2 * len(voiced))))


def _sequence_entry(rec: SequenceRecord) -> dict:
    return {
        "file": f"sequences/seq_{rec.index:05d}.thsq",
        "speaker": rec.speaker_id,
        "split": rec.split,
        "seed": rec.seed,
        "phoneme_ids": list(rec.utterance.phoneme_ids) if rec.utterance else [],
        "durations": list(rec.utterance.durations) if rec.utterance else [],
    }


def _corpus_id(manifest: CorpusManifest, records) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(_manifest_core(manifest), sort_keys=True).encode())
    for r in records:
        h.update(encode_sequence(r, manifest.config.psi_dim, manifest.config.n_units))
    return h.hexdigest()[:16]


# -- persistence ---------------------------------------------------------------


def encode_sequence(rec: SequenceRecord, psi_dim: int, n_units: int) -> bytes:
    expr = np.ascontiguousarray(rec.expressions, dtype="<f4")
    mel = np.ascontiguousarray(rec.mel, dtype="<f4")
    units = np.ascontiguousarray(rec.units, dtype="<u2")
    if expr.shape[1] != psi_dim + 3:
        raise InvalidArgument("expression width does not match psi_dim")
    header = _HEADER.pack(MAGIC, VERSION, expr.shape[0], psi_dim, mel.shape[0], mel.shape[1],
                          n_units, rec.speaker_id, 0)
    return header + expr.tobytes() + mel.tobytes() + units.tobytes()


def decode_sequence_file(data: bytes, name: str = "<bytes>") -> SequenceRecord:
    if len(data) < _HEADER.size:
        raise FormatError(f"{name}: truncated header ({len(data)} bytes)")
    magic, version, T, psi_dim, mel_frames, mel_bins, n_units, spk, _ = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    n_expr = T * (psi_dim + 3)
    n_mel = mel_frames * mel_bins
    expected = _HEADER.size + 4 * n_expr + 4 * n_mel + 2 * mel_frames
    if len(data) != expected:
        raise FormatError(f"{name}: expected {expected} bytes, found {len(data)} (truncated or padded)")
    off = _HEADER.size
    expr = np.frombuffer(data, "<f4", n_expr, off).reshape(T, psi_dim + 3).astype(np.float32)
    off += 4 * n_expr
    mel = np.frombuffer(data, "<f4", n_mel, off).reshape(mel_frames, mel_bins).astype(np.float32)
    off += 4 * n_mel
    units = np.frombuffer(data, "<u2", mel_frames, off).astype(np.int64)
    try:
        return SequenceRecord(expr, mel, units, int(spk))
    except InvalidArgument as exc:
        raise FormatError(f"{name}: {exc}") from None


def _bank_to_json(bank):
    return [{"id": p.id, "viseme": p.viseme.tolist(), "mel_template": p.mel_template.tolist(),
             "unit_id": p.unit_id} for p in bank]


def _bank_from_json(items):
    return [PhonemeSpec(int(d["id"]), np.array(d["viseme"]), np.array(d["mel_template"]),
                        int(d["unit_id"])) for d in items]


def _manifest_core(m: CorpusManifest) -> dict:
    return {
        "format": "thunderface-corpus",
        "version": VERSION,
        "config": asdict(m.config),
        "bank": _bank_to_json(m.bank),
        "speakers": [
            {"id": k, "tilt": m.speaker_tilts[k].tolist(),
             "embedding": m.speaker_embeddings[k].tolist()}
            for k in range(len(m.speaker_tilts))
        ],
        "tilt_patterns": m.tilt_patterns.tolist(),
        "splits": m.splits,
        "template": {"file": "template.npz", "id": m.template_id},
        "codebook": {"file": "codebook.npz", "id": m.codebook_id},
        "sequences": m.sequences,
    }


def manifest_to_json(m: CorpusManifest) -> str:
    core = _manifest_core(m)
    core["corpus_id"] = m.corpus_id
    return json.dumps(core, indent=1, sort_keys=True)


def manifest_from_json(text: str, name="manifest.json") -> CorpusManifest:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}: not valid JSON ({exc})") from None
    if d.get("format") != "thunderface-corpus":
        raise FormatError(f"{name}: not a thunderface corpus manifest")
    if d.get("version") != VERSION:
        raise FormatError(f"{name}: unsupported version {d.get('version')}")
    try:
        speakers = sorted(d["speakers"], key=lambda s: s["id"])
        return CorpusManifest(
            config=CorpusConfig(**d["config"]),
            bank=_bank_from_json(d["bank"]),
            speaker_tilts=np.array([s["tilt"] for s in speakers]),
            speaker_embeddings=np.array([s["embedding"] for s in speakers]),
            tilt_patterns=np.array(d["tilt_patterns"]),
            splits={k: [int(x) for x in v] for k, v in d["splits"].items()},
            template_id=d["template"]["id"],
            codebook_id=d["codebook"]["id"],
            sequences=d["sequences"],
            corpus_id=d["corpus_id"],
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{name}: missing or malformed field {exc}") from None


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _save_npz(path: Path, arrays: dict):
    import io
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write(path, buf.getvalue())


def persist_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    (path / "sequences").mkdir(parents=True, exist_ok=True)
    cfg = corpus.manifest.config
    for rec, entry in zip(corpus.records, corpus.manifest.sequences):
        _atomic_write(path / entry["file"], encode_sequence(rec, cfg.psi_dim, cfg.n_units))
    _save_npz(path / "template.npz", corpus.template.arrays())
    _save_npz(path / "codebook.npz", {"centroids": corpus.codebook.centroids})
    _atomic_write(path / "manifest.json", manifest_to_json(corpus.manifest).encode("utf-8"))
    return path


def _load_npz(path: Path) -> dict:
    try:
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: unreadable array container ({exc})") from None


def load_corpus(path) -> Corpus:
    path = Path(path)
    mpath = path / "manifest.json"
    manifest = manifest_from_json(mpath.read_text(encoding="utf-8"), str(mpath))
    template = FaceTemplate.from_arrays(_load_npz(path / "template.npz"))
    if array_id(*template.arrays().values()) != manifest.template_id:
        raise FormatError(f"{path / 'template.npz'}: template id does not match manifest")
    codebook = audio.UnitCodebook(_load_npz(path / "codebook.npz")["centroids"])
    if array_id(codebook.centroids) != manifest.codebook_id:
        raise FormatError(f"{path / 'codebook.npz'}: codebook id does not match manifest")
    records = []
    for i, entry in enumerate(manifest.sequences):
        fpath = path / entry["file"]
        rec = decode_sequence_file(fpath.read_bytes(), str(fpath))
        if rec.speaker_id != entry["speaker"]:
            raise FormatError(f"{fpath}: speaker id disagrees with manifest")
        rec.utterance = Utterance(entry["phoneme_ids"], entry["durations"]) if entry["durations"] else None
        rec.seed, rec.index, rec.split = int(entry["seed"]), i, entry["split"]
        records.append(rec)
    split_sets = [set(v) for v in manifest.splits.values()]
    if sum(len(s) for s in split_sets) != len(set().union(*split_sets)):
        raise FormatError(f"{mpath}: speaker splits overlap")
    return Corpus(template, codebook, manifest, records)
