"""Train a mesh-to-speech model, then run it backwards.

M2S reads the mouth region of an animation and predicts the mel spectrogram
and speech units. Because it is differentiable in its input, we can also
start from a neutral face and optimize the animation until M2S "says" a
target sentence (analysis by audio synthesis).

    python demos/mesh_to_speech.py   # ~1 minute on one CPU
"""

import numpy as np
import torch

from thunderface.audio import speaker_embedding
from thunderface.corpus import build_corpus
from thunderface.face_model import TorchFace, decode_sequence
from thunderface.mesh2speech import (analysis_by_audio_synthesis, eval_m2s, init_m2s, m2s_forward,
                                     to_input_space, train_m2s)
from thunderface.metrics import lip_distance

corpus = build_corpus()
test = corpus.split("test")

print("untrained:", eval_m2s(init_m2s(corpus), test, corpus.template))
model, history = train_m2s(corpus, epochs=60, log=print)
print("trained:  ", eval_m2s(model, test, corpus.template))

# Invert: find a face whose M2S audio matches the model's reading of a held-out face.
face = TorchFace(corpus.template)
for rec in test[:3]:
    spk = speaker_embedding(rec.mel)
    target = m2s_forward(model, to_input_space(face, torch.as_tensor(rec.expressions, dtype=torch.float32),
                                               "mouth").numpy(), spk)
    res = analysis_by_audio_synthesis(model, target.mel_hat, target.unit_logits.argmax(-1), rec.n_frames,
                                      corpus.template, spk=spk, steps=300)
    gt = lip_distance(decode_sequence(corpus.template, rec.expressions), corpus.template)
    got = lip_distance(decode_sequence(corpus.template, res.expressions), corpus.template)
    print(f"sequence {rec.index}: objective {res.initial_objective:.2f} -> {res.best_objective:.3f}, "
          f"lip-opening PCC {np.corrcoef(gt, got)[0, 1]:+.3f}")
