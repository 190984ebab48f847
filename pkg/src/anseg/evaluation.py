"""Per-point assignment, segmentation metrics and report aggregation.

ARI follows the permutation-model adjusted Rand index over annotated points.
mAP uses greedy confidence-ordered matching at point-set IoU >= 0.5 with
all-point precision-recall interpolation, averaged over semantic classes
present in the ground truth.
"""

import dataclasses
import json
import os
import subprocess

import numpy as np
import torch

from .dataset import UNANNOTATED
from .modulator import LayerPrediction, SegmentationPrediction

UNLABELED = "unlabeled"


def assign_points(prediction: SegmentationPrediction) -> np.ndarray:
    """Assign each point to its best query: sigmoid(logit) x confidence.

    Non-decodable query columns (memory queries in re_detr3d mode) are
    excluded; ties go to the lowest query index.
    """
    layer = prediction.final
    with torch.no_grad():
        score = torch.sigmoid(layer.mask_logits) * layer.confidences[None, :]
        score = score.to(torch.float64).numpy()
    score[:, ~prediction.decodable] = -np.inf
    return score.argmax(axis=1)


def ari(pred_labels, gt_labels) -> float:
    """Adjusted Rand index in [-1, 1]; points with gt id -1 are excluded."""
    gt = np.asarray(gt_labels)
    pred = np.asarray(pred_labels)
    keep = gt != UNANNOTATED
    gt, pred = gt[keep], pred[keep]
    n = len(gt)
    if n < 2:
        raise ValueError("ARI needs at least 2 annotated points")
    _, gt_i = np.unique(gt, return_inverse=True)
    _, pr_i = np.unique(pred, return_inverse=True)
    table = np.zeros((gt_i.max() + 1, pr_i.max() + 1), dtype=np.int64)
    np.add.at(table, (gt_i, pr_i), 1)

    def comb2(x):
        return x * (x - 1) // 2

    sum_ij = comb2(table).sum()
    a = comb2(table.sum(axis=1)).sum()
    b = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = a * b / total
    max_index = (a + b) / 2.0
    if max_index == expected:
        # both partitions trivial in the same way (e.g. single cluster each)
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def propagate_labels(assignment, provenance) -> list:
    """Copy each decoding memory part's semantic label onto its points."""
    labels = []
    for q in assignment:
        p = provenance[int(q)]
        labels.append(p.semantic_label if p.kind == "memory" else UNLABELED)
    return labels


def miou(pred_labels, gt_labels) -> float:
    """Mean IoU (percent) over semantic classes present in the ground truth."""
    gt = np.asarray(gt_labels, dtype=object)
    pred = np.asarray(pred_labels, dtype=object)
    classes = sorted(set(gt.tolist()))
    ious = []
    for c in classes:
        gm, pm = gt == c, pred == c
        union = (gm | pm).sum()
        ious.append((gm & pm).sum() / union if union else 0.0)
    return float(np.mean(ious)) * 100.0


def map_per_part(predictions, gt_instances, iou_threshold=0.5) -> float:
    """Mean average precision (percent) over semantic classes.

    predictions: [(mask, confidence, label)]; gt_instances: [(mask, label)].
    A prediction is a true positive if its point-set IoU with a so-far
    unmatched ground-truth instance of the same class reaches the threshold,
    processed in descending confidence order.
    """
    classes = sorted({label for _, label in gt_instances})
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        gts = [np.asarray(m, dtype=bool) for m, label in gt_instances if label == c]
        preds = sorted(
            ((np.asarray(m, dtype=bool), conf) for m, conf, label in predictions
             if label == c),
            key=lambda t: -t[1])
        if not preds:
            aps.append(0.0)
            continue
        matched = [False] * len(gts)
        tp = np.zeros(len(preds))
        for i, (mask, _) in enumerate(preds):
            best_iou, best_j = 0.0, -1
            for j, g in enumerate(gts):
                if matched[j]:
                    continue
                union = (mask | g).sum()
                iou = (mask & g).sum() / union if union else 0.0
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_threshold:
                matched[best_j] = True
                tp[i] = 1.0
        cum_tp = np.cumsum(tp)
        precision = cum_tp / np.arange(1, len(preds) + 1)
        recall = cum_tp / len(gts)
        # all-point interpolation: precision envelope over increasing recall
        ap = 0.0
        prev_r = 0.0
        for i in range(len(preds)):
            if tp[i]:
                p_interp = precision[i:].max()
                ap += (recall[i] - prev_r) * p_interp
                prev_r = recall[i]
        aps.append(ap)
    return float(np.mean(aps)) * 100.0


def prediction_instances(prediction: SegmentationPrediction, assignment):
    """Instance masks, confidences and propagated labels from an assignment."""
    layer: LayerPrediction = prediction.final
    conf = layer.confidences.detach().to(torch.float64).numpy()
    out = []
    for q in np.unique(assignment):
        p = prediction.queries.provenance[int(q)]
        label = p.semantic_label if p.kind == "memory" else UNLABELED
        out.append((assignment == q, float(conf[int(q)]), label))
    return out


def memory_query_decode_ratio(per_scene) -> float:
    """Fraction of gt parts whose majority-assigned query is memory-kind.

    per_scene: iterable of (assignment, provenance, gt_part_ids).
    """
    total, memory_decoded = 0, 0
    for assignment, provenance, part_ids in per_scene:
        part_ids = np.asarray(part_ids)
        for pid in np.unique(part_ids[part_ids != UNANNOTATED]):
            qs = assignment[part_ids == pid]
            vals, counts = np.unique(qs, return_counts=True)
            majority = int(vals[np.argmax(counts)])  # lowest query id on ties
            total += 1
            if provenance[majority].kind == "memory":
                memory_decoded += 1
    return memory_decoded / total if total else 0.0


@dataclasses.dataclass
class MetricReport:
    ari_x100: float
    miou_percent: float
    map_percent: float
    memory_query_decode_ratio: float
    per_category: dict = dataclasses.field(default_factory=dict)
    episode_mean: dict = None
    episode_std: dict = None
    episodes: list = None

    def to_dict(self):
        return dataclasses.asdict(self)


def aggregate_episode_reports(reports) -> MetricReport:
    """Mean and population std over per-episode metric reports."""
    if not reports:
        raise ValueError("need at least one episode report")
    keys = ("ari_x100", "miou_percent", "map_percent", "memory_query_decode_ratio")
    values = {k: np.array([getattr(r, k) for r in reports]) for k in keys}
    mean = {k: float(v.mean()) for k, v in values.items()}
    std = {k: float(v.std()) for k, v in values.items()}
    return MetricReport(
        ari_x100=mean["ari_x100"], miou_percent=mean["miou_percent"],
        map_percent=mean["map_percent"],
        memory_query_decode_ratio=mean["memory_query_decode_ratio"],
        episode_mean=mean, episode_std=std,
        episodes=[r.to_dict() for r in reports])


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_report(report: MetricReport, path, config_hash="", seed=None):
    doc = {"format_version": 1, "config_hash": config_hash, "seed": seed,
           "git_describe": _git_describe()}
    doc.update(report.to_dict())
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, default=float)
        f.write("\n")
    return doc
