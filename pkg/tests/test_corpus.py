import filecmp
import itertools

import numpy as np
import pytest

from thunderface.audio import LOG_FLOOR, quantize_units
from thunderface.corpus import (MAGIC, Utterance, build_corpus, decode_sequence_file, derive_seed,
                                load_corpus, make_phoneme_bank, make_utterance, persist_corpus,
                                synth_sequence)
from thunderface.errors import FormatError, InvalidArgument, NotFound


def pairwise(vs):
    return [np.linalg.norm(a - b) for a, b in itertools.combinations(vs, 2)]


def test_phoneme_bank():
    a, b = make_phoneme_bank(8, seed=0), make_phoneme_bank(8, seed=0)
    for p, q in zip(a, b):
        assert np.array_equal(p.viseme, q.viseme) and np.array_equal(p.mel_template, q.mel_template)
    assert min(pairwise([p.viseme for p in a])) >= 0.5
    assert min(pairwise([p.mel_template for p in a])) >= 2.0
    silent = [p for p in a if p.is_silence]
    assert len(silent) == 1 and np.all(silent[0].mel_template == LOG_FLOOR)
    assert np.all(silent[0].viseme == 0)
    assert len({p.unit_id for p in a}) == 8
    for K in (1, 9):
        with pytest.raises(InvalidArgument):
            make_phoneme_bank(K, seed=0, n_units=8)


def test_utterance_shape(rng):
    bank = make_phoneme_bank(8, 0)
    for _ in range(50):
        utt = make_utterance(rng, bank, 40, 70)
        assert 40 <= utt.n_frames <= 70
        assert all(3 <= d <= 10 for d in utt.durations)
        assert all(a != b for a, b in zip(utt.phoneme_ids, utt.phoneme_ids[1:]))


def test_default_corpus_layout(corpus):
    assert [len(corpus.split(s)) for s in ("train", "val", "test")] == [200, 40, 40]
    splits = corpus.manifest.splits
    assert (len(splits["train"]), len(splits["val"]), len(splits["test"])) == (2, 1, 1)
    seen = [set(r.speaker_id for r in corpus.split(s)) for s in ("train", "val", "test")]
    assert all(not (a & b) for a, b in itertools.combinations(seen, 2))
    for r in corpus.records:
        assert 40 <= r.n_frames <= 70
        assert r.mel.shape == (2 * r.n_frames, 80) and r.units.shape == (2 * r.n_frames,)
    # planted unit ids are distinct after the codebook vote
    assert len({p.unit_id for p in corpus.manifest.bank}) == 8


def test_sequence_determinism(small_corpus):
    rec = small_corpus.records[3]
    again = synth_sequence(rec.utterance, rec.speaker_id, small_corpus.manifest, rec.seed,
                           small_corpus.template, small_corpus.codebook)
    for name in ("expressions", "mel", "units"):
        assert np.array_equal(getattr(rec, name), getattr(again, name))
    with pytest.raises(NotFound):
        synth_sequence(rec.utterance, 99, small_corpus.manifest, rec.seed,
                       small_corpus.template, small_corpus.codebook)


def test_noise_free_units_recover_plan(small_corpus):
    bank = small_corpus.manifest.bank
    for rec in small_corpus.records:
        clean = synth_sequence(rec.utterance, rec.speaker_id, small_corpus.manifest, rec.seed,
                               small_corpus.template, small_corpus.codebook, noise_sigma=0.0)
        planted = np.array([bank[p].unit_id for p in rec.utterance.frame_phonemes()]).repeat(2)
        assert np.array_equal(clean.units, planted)
        assert np.array_equal(quantize_units(clean.mel, small_corpus.codebook), planted)


def test_mouth_is_audio_determined(small_corpus):
    tpl, manifest = small_corpus.template, small_corpus.manifest
    rec = small_corpus.records[0]
    runs = np.stack([
        synth_sequence(rec.utterance, rec.speaker_id, manifest, derive_seed(99, k), tpl,
                       small_corpus.codebook).expressions.astype(np.float64)
        for k in range(10)
    ])
    mouth = np.r_[tpl.mouth_channels, tpl.param_dim - 3]
    upper = tpl.upper_channels
    cross = runs.var(0).mean(0)
    temporal = runs.var(1).mean(0)
    assert np.all(cross[mouth] < 0.01 * temporal[mouth])
    assert np.all(cross[upper] >= 0.5 * temporal[upper])


def test_round_trip_is_bit_exact(small_corpus, tmp_path):
    a = persist_corpus(small_corpus, tmp_path / "a")
    loaded = load_corpus(a)
    b = persist_corpus(loaded, tmp_path / "b")
    cmp = filecmp.dircmp(a, b)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    seq = filecmp.dircmp(a / "sequences", b / "sequences")
    assert not seq.diff_files and not seq.left_only and not seq.right_only
    assert all(filecmp.cmp(a / f, b / f, shallow=False) for f in ("manifest.json", "template.npz", "codebook.npz"))
    for r, s in zip(small_corpus.records, loaded.records):
        for name in ("expressions", "mel", "units"):
            assert np.array_equal(getattr(r, name), getattr(s, name))
        assert (r.speaker_id, r.split, r.seed, r.utterance) == (s.speaker_id, s.split, s.seed, s.utterance)
    assert loaded.corpus_id == small_corpus.corpus_id
    assert loaded.manifest.splits == small_corpus.manifest.splits


def test_corrupt_files_are_rejected(small_corpus, tmp_path):
    path = persist_corpus(small_corpus, tmp_path / "c")
    f = path / "sequences" / "seq_00000.thsq"
    data = f.read_bytes()
    assert data[:4] == MAGIC
    with pytest.raises(FormatError, match="seq_00000"):
        decode_sequence_file(b"XXXX" + data[4:], str(f))
    with pytest.raises(FormatError, match="truncated"):
        decode_sequence_file(data[:-3], str(f))
    with pytest.raises(FormatError):
        decode_sequence_file(data[:10], str(f))
    f.write_bytes(b"THSX" + data[4:])
    with pytest.raises(FormatError, match="seq_00000"):
        load_corpus(path)


def test_config_validation():
    from thunderface.corpus import CorpusConfig
    for bad in (dict(n_phonemes=9), dict(n_speakers=2), dict(min_frames=5), dict(mel_noise=-1.0)):
        with pytest.raises(InvalidArgument):
            build_corpus(CorpusConfig(**bad))
    with pytest.raises(InvalidArgument):
        Utterance((1, 2), (3,))
