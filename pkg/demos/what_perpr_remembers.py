"""Which episodes does perplexity-based replay keep?

After training on one domain, every training episode is scored by its
action perplexity: exp of the mean negative log-probability the policy
assigns to the demonstrated actions. PerpR keeps the hardest ones, the
reversed ablation keeps the easiest.
"""

from __future__ import annotations

import numpy as np

from cvln import harness as hx
from cvln.clstrategies import ReplayMemory, action_perplexities, perpr_memory_update, train_domain

cfg = hx.ExperimentConfig.from_dict({"generation": {"num_domains": 2, "train_episodes": 120,
                                                    "val_episodes": 20}})
domains = hx.build_benchmark(cfg)
vanilla = cfg.strategy("vanilla")
state = hx.initial_state(cfg, vanilla, hx.Curriculum(0, (0, 1)))
train_domain(vanilla, state, domains[0], cfg.training, total_domains=2)
params = state.params
d = domains[0]
aps = action_perplexities(params, d.train_episodes, d.scene_map())
print(f"AP over {len(aps)} training episodes: min {aps.min():.2f}, median {np.median(aps):.2f}, "
      f"max {aps.max():.2f}")

for reverse in (False, True):
    mem = perpr_memory_update(ReplayMemory(6), d, params, reverse=reverse, quota=6)
    name = "PerpR-Rev." if reverse else "PerpR"
    kept = sorted((e.ap, len(e.episode.path)) for e in mem.entries)
    print(f"{name:10s} keeps APs {[round(a, 2) for a, _ in kept]}  path lengths {[n for _, n in kept]}")

lengths = np.array([len(e.path) for e in d.train_episodes])
print(f"corr(AP, path length) = {np.corrcoef(aps, lengths)[0, 1]:.2f}")
