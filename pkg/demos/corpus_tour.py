"""A tour of the synthetic corpus.

The mouth follows the phonemes; the upper face does its own thing. Generate
one utterance twice with different seeds and compare the channels, then look
at how the audio side lines up with the animation.

    python demos/corpus_tour.py
"""

import numpy as np

from thunderface.audio import quantize_units, speaker_embedding
from thunderface.corpus import CorpusConfig, build_corpus, derive_seed, synth_sequence
from thunderface.face_model import decode_sequence
from thunderface.metrics import lip_distance

corpus = build_corpus(CorpusConfig(n_train=20, n_val=5, n_test=5))
tpl = corpus.template
print(f"template: {tpl.n_v} vertices, {tpl.psi_dim} expression channels "
      f"({len(tpl.mouth_channels)} mouth) + 3 jaw angles")
print(f"records: " + ", ".join(f"{s}={len(corpus.split(s))}" for s in ("train", "val", "test")))

rec = corpus.split("train")[0]
print(f"\nsequence {rec.index}: {rec.n_frames} frames at 25 fps, mel {rec.mel.shape}, units {rec.units.shape}")
print("phonemes:", rec.utterance.phoneme_ids, "durations:", rec.utterance.durations)

# Same words, two different seeds.
a, b = (synth_sequence(rec.utterance, rec.speaker_id, corpus.manifest, derive_seed(7, k), tpl,
                       corpus.codebook).expressions for k in (0, 1))
corr = [np.corrcoef(a[:, c], b[:, c])[0, 1] for c in range(tpl.psi_dim)]
print("\ncross-seed correlation per channel")
for c, r in enumerate(corr):
    kind = "mouth" if c in tpl.mouth_channels else "upper"
    print(f"  psi[{c:2d}] {kind:5s} {r:+.3f}")
# A few dozen frames of slowly varying noise hold only a handful of
# independent values, so single upper-face correlations can be large --
# but their sign is a coin flip and they average out.
print(f"  mean upper correlation {np.mean([corr[c] for c in tpl.upper_channels]):+.3f}")

# The lips open and close with the phonemes.
opening = lip_distance(decode_sequence(tpl, rec.expressions), tpl)
print("\nlip opening (first 20 frames):", np.round(opening[:20], 3))

# Units are recoverable from the audio alone.
print("unit agreement with the codebook:", np.mean(quantize_units(rec.mel, corpus.codebook) == rec.units))

# Speakers are separable from their audio.
embs = {s: np.mean([speaker_embedding(r.mel) for r in corpus.records if r.speaker_id == s], 0)
        for s in range(4)}
print("\nspeaker embedding cosines")
for s in embs:
    print("  ", " ".join(f"{embs[s] @ embs[t] / np.linalg.norm(embs[s]) / np.linalg.norm(embs[t]):+.2f}"
                          for t in embs))
