"""Does the mesh-to-speech loss help the diffusion model?

Trains the audio-conditioned denoiser twice on the same corpus, seed and
budget -- once with the frozen M2S loss on its predicted mesh, once without
-- and compares lip accuracy and sample diversity on held-out audio.
A reduced budget keeps this to a few minutes; the acceptance suite runs the
full desk configuration over three seeds.

    python demos/cycle_loss_ablation.py
"""

from thunderface.ablation import Variant, delta_summary, run_ablation
from thunderface.config import load_config
from thunderface.corpus import build_corpus
from thunderface.mesh2speech import train_m2s
from thunderface.metrics import reports_table

cfg = load_config()
cfg.diffusion.epochs = 30
cfg.eval.n_samples = 8

corpus = build_corpus()
m2s, _ = train_m2s(corpus, epochs=cfg.m2s.epochs)

variants = [Variant("without", False, "mouth", 1.0, "frozen"),
            Variant("with", True, "mouth", 1.0, "frozen")]
rows = run_ablation(variants, corpus, {"mouth": m2s}, cfg, log=print)
print()
print(reports_table(rows, ("name",)))
for d in delta_summary(rows):
    print(f"\n{d['variant']} - {d['baseline']}: LVE {d['lve']:+.5f}, S-DIV-L {d['s_div_l']:+.5f}, "
          f"S-DIV-U {d['s_div_u']:+.5f}")
