"""Classify the residual errors of the saved overfit model.

For every misassigned point, measure its distance to the nearest point of
the part it was (wrongly) assigned to: small distance = boundary bleed,
large distance = symmetry/identity confusion.
"""
import sys

import numpy as np
import torch

sys.path.insert(0, "/root/pkg/src")
from anseg.evaluation import assign_points
from anseg.shapes import generate_scene
from anseg.train import load_checkpoint, subsample_scene

model, cfg, _ = load_checkpoint("/tmp/crit5_model.anck")
model.eval()

scenes = [generate_scene(c, s)
          for c in ("chair", "table_lamp", "mug", "bottle")
          for s in range(5)]

rng = np.random.default_rng(1234)
near, far, total = 0, 0, 0
far_by = {}
with torch.no_grad():
    for scene in scenes:
        for ann in scene.levels:
            sub = subsample_scene(scene, cfg.train_points, rng)
            pred = model(sub.points, memories=[(sub, ann.level)])
            pids = sub.level(ann.level).part_ids
            assign = assign_points(pred)
            pts = np.asarray(sub.points, dtype=np.float64)
            wrong = np.nonzero(assign != pids)[0]
            total += len(pids)
            for i in wrong:
                q = int(assign[i])
                target = pts[pids == q]
                if len(target) == 0:
                    d = np.inf  # assigned to a parametric / absent part
                else:
                    d = np.sqrt(((target - pts[i]) ** 2).sum(1)).min()
                if d < 0.08:
                    near += 1
                else:
                    far += 1
                    key = (scene.category, ann.level)
                    far_by[key] = far_by.get(key, 0) + 1

print(f"total points {total}, errors {near + far} "
      f"({100 * (near + far) / total:.2f}%)")
print(f"boundary (<0.08) {near} = {100 * near / max(1, near + far):.1f}% of errors")
print(f"far {far}")
for k, v in sorted(far_by.items(), key=lambda kv: -kv[1]):
    print("  far errors", k, v)
