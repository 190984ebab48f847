"""Miniature end-to-end run of the desk-scale pipeline to catch wiring bugs."""
import sys

import torch

sys.path.insert(0, "/root/pkg/src")
sys.path.insert(0, "/root/pkg/tests")

import acceptance_helpers as H

torch.set_num_threads(4)

H.DESK_RECIPE.update(
    per_category=6, novel_per_category=8,
    stage1_steps=10, stage2_steps=10, single_stage_steps=20,
    episodes_per_category=2, queries_per_episode=3,
)
H.CACHE = H.CACHE.parent / ".cache-smoke"

metrics = H.desk_artifacts(progress=lambda m: print(f"[smoke] {m}", flush=True))
for name, m in metrics.items():
    print(name, m)
print("SMOKE OK")
