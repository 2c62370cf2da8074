"""
Running an experiment grid
==========================

Configs are YAML key-trees. ``run_experiment`` runs every
(algorithm, attack, seed) cell and writes a bundle of CSV traces, a JSON
summary and a markdown report. The same flow is available from the shell
as ``byzcomp run``, ``byzcomp preset`` and ``byzcomp summarize``.
"""

import tempfile
from pathlib import Path

from byzcomp.harness import (ExperimentConfig, ReportBundle, emit_summary, main,
                             preset_paper_fig, run_experiment)

text = """
dataset:
  synthetic: {J: 100, p: 10, noise: 0.5, seed: 0}
topology: {W: 7, R: 5, B: 2}
attacks: [gaussian, sign_flip]
algorithms:
  - {method: plain_sgd, T: 1500}
  - {method: br_compressed_saga, T: 1500}
  - {name: broadcast, method: broadcast, beta: 0.1, T: 1500,
     compressor: {variant: rand_k, ratio: 0.2}, byzantine_follows_protocol: true}
seeds: [0, 1]
stride: 10
"""
cfg = ExperimentConfig.from_text(text)
out = Path(tempfile.mkdtemp()) / "bundle"
bundle = run_experiment(cfg, out)
print(emit_summary(bundle))

# %%
# Bundles reload from disk; the config hash is checked on the way in.
again = ReportBundle.load(out)
print(sorted(p.name for p in (out / "traces").iterdir())[:3], "...")
print("hash", again.config_hash[:16])

# %%
# Presets reproduce the published comparisons at desk scale. Writing one
# to a file is what ``byzcomp preset noise_reduction desk -o fig1.yaml`` does.
fig1 = preset_paper_fig("noise_reduction", "desk")
print([a["name"] for a in fig1.tree["algorithms"]])
main(["preset", "baseline_comparison", "desk", "-o", str(out.parent / "fig2.yaml")])
print((out.parent / "fig2.yaml").read_text().splitlines()[:6])
