"""Watch a policy forget, then see how much rehearsal buys back.

A four-domain benchmark is small enough to train in well under a minute.
Each strategy is trained through the same curriculum and the lower
triangle of its SR matrix is printed: row s holds the success rate on
every domain seen so far, measured right after domain s was learned.
"""

from __future__ import annotations

import numpy as np

from cvln import harness as hx

cfg = hx.ExperimentConfig.from_dict({
    "generation": {"num_domains": 4, "train_episodes": 120, "val_episodes": 60},
    "memory_capacity": 20,
})
domains = hx.build_benchmark(cfg)
curriculum = hx.Curriculum.from_seed(0, len(domains))
print(f"domain order {curriculum.domain_order}, memory {cfg.default_capacity}\n")

for kind in ("vanilla", "randr", "esr", "joint"):
    res = hx.run_curriculum(cfg, cfg.strategy(kind), curriculum, domains)
    sr = res.matrix.values["SR"]
    print(f"{res.label}  (AvgSR {res.matrix.average('SR'):.1f})")
    for s, row in enumerate(sr, 1):
        cells = " ".join("  .  " if np.isnan(v) else f"{v:5.1f}" for v in row)
        print(f"  after domain {s}: {cells}")
    print()

# Vanilla's first column decays as later domains overwrite it; the rehearsal
# strategies keep part of it, and Joint (one pass over everything) shows the ceiling.
