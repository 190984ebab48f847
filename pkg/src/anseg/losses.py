"""Hungarian matching and training losses.

Matching cost per (query, part): (1 - softIoU) + (1 - confidence). The
segmentation loss is a per-point softmax cross-entropy over the matched query
columns (a binary cross-entropy mode is kept behind a flag); confidences get
binary cross-entropy with target 1 for matched and 0 for unmatched queries.
Losses are summed over decoder layers, with matching recomputed per layer.
"""

import dataclasses

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .dataset import UNANNOTATED
from .modulator import MODE_DETR3D, SegmentationPrediction


class CapacityError(ValueError):
    """More ground-truth parts than queries available to match them."""


class InvalidPairingError(ValueError):
    pass


@dataclasses.dataclass
class MatchResult:
    pairs: list              # [(query index, gt part index)], sorted by gt index
    unmatched: list          # query indices left without a part
    total_cost: float


@dataclasses.dataclass
class LossBreakdown:
    segmentation: torch.Tensor
    objectness: torch.Tensor
    semantic: torch.Tensor = None
    per_layer: list = None

    @property
    def total(self):
        t = self.segmentation + self.objectness
        if self.semantic is not None:
            t = t + self.semantic
        return t


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost injection of gt parts (columns) into queries (rows).

    Among equal-cost optima the assignment with the lexicographically
    smallest query tuple (ordered by gt index) wins; that path only runs when
    the cost matrix contains duplicate values, since ties are impossible
    otherwise.
    """
    cost = np.asarray(cost, dtype=np.float64)
    qn, g = cost.shape
    if qn < g:
        raise CapacityError(f"{g} ground-truth parts but only {qn} queries")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    opt = float(cost[rows, cols].sum())
    assigned = {int(c): int(r) for r, c in zip(rows, cols)}
    if len(np.unique(cost)) < cost.size:
        assigned = _lexicographic_optimum(cost, opt)
    pairs = sorted(((assigned[c], c) for c in range(g)), key=lambda p: p[1])
    matched_q = {q for q, _ in pairs}
    unmatched = [q for q in range(qn) if q not in matched_q]
    return MatchResult(pairs=pairs, unmatched=unmatched, total_cost=opt)


def _lexicographic_optimum(cost, opt):
    qn, g = cost.shape
    tol = 1e-9 * max(1.0, abs(opt))
    fixed = {}
    used = np.zeros(qn, dtype=bool)
    fixed_cost = 0.0
    for col in range(g):
        rest_cols = list(range(col + 1, g))
        for q in range(qn):
            if used[q]:
                continue
            free = [r for r in range(qn) if not used[r] and r != q]
            sub = cost[np.ix_(free, rest_cols)] if rest_cols else np.zeros((0, 0))
            tail = float(sub[linear_sum_assignment(sub)].sum()) if rest_cols else 0.0
            if fixed_cost + cost[q, col] + tail <= opt + tol:
                fixed[col] = q
                used[q] = True
                fixed_cost += cost[q, col]
                break
    return fixed


def gt_part_masks(part_ids) -> np.ndarray:
    """Binary masks (G, Np) for parts 0..G-1; unannotated points in no mask."""
    part_ids = np.asarray(part_ids)
    annotated = part_ids[part_ids != UNANNOTATED]
    g = int(annotated.max()) + 1 if len(annotated) else 0
    return np.stack([part_ids == i for i in range(g)]) if g else np.zeros((0, len(part_ids)), bool)


@torch.no_grad()
def match_cost(mask_logits, confidences, gt_masks):
    """Cost matrix (num queries, num parts), entries in [0, 2]; lower is better."""
    probs = torch.sigmoid(mask_logits)                          # (Np, Nq)
    m = torch.as_tensor(np.asarray(gt_masks), dtype=probs.dtype)  # (G, Np)
    inter = m @ probs                                           # (G, Nq)
    union = m.sum(dim=1, keepdim=True) + probs.sum(dim=0, keepdim=True) - inter
    soft_iou = inter / union.clamp(min=1e-12)
    cost = (1.0 - soft_iou.T) + (1.0 - confidences[:, None])
    return cost.numpy()


def segmentation_loss(mask_logits, pairs, part_ids, mode="softmax"):
    """Per-point loss over the matched query columns.

    softmax mode: cross-entropy assigning each annotated point to the query
    matched to its part. bce mode: mean per-point binary cross-entropy of
    each matched query's mask against its part mask.
    """
    part_ids = np.asarray(part_ids)
    annotated = part_ids != UNANNOTATED
    if not annotated.any():
        return mask_logits.sum() * 0.0
    matched_q = [q for q, _ in pairs]
    gt_of_part = {g: i for i, (_, g) in enumerate(pairs)}
    present = set(part_ids[annotated].tolist())
    missing = present - set(gt_of_part)
    if missing:
        raise InvalidPairingError(f"ground-truth parts {sorted(missing)} are unmatched")
    cols = mask_logits[:, matched_q]
    if mode in ("softmax", "softmax_balanced"):
        target = torch.as_tensor(
            np.array([gt_of_part[p] for p in part_ids[annotated]]), dtype=torch.long)
        sel = cols[torch.as_tensor(annotated)]
        if mode == "softmax":
            return torch.nn.functional.cross_entropy(sel, target)
        # balanced: every part contributes equally regardless of its point count
        per_point = torch.nn.functional.cross_entropy(sel, target, reduction="none")
        counts = torch.bincount(target, minlength=len(pairs)).clamp(min=1)
        weights = (1.0 / counts.to(per_point.dtype))[target]
        return (per_point * weights).sum() / len(pairs)
    if mode == "bce":
        masks = torch.as_tensor(
            np.stack([part_ids == g for _, g in pairs], axis=1), dtype=mask_logits.dtype)
        ann = torch.as_tensor(annotated)
        return torch.nn.functional.binary_cross_entropy_with_logits(
            cols[ann], masks[ann])
    raise ValueError(f"unknown segmentation loss mode {mode!r}")


def objectness_loss(confidences, matched_queries, eligible=None):
    """Binary cross-entropy pushing matched queries to 1 and the rest to 0."""
    target = torch.zeros_like(confidences)
    for q in matched_queries:
        target[q] = 1.0
    conf = confidences.clamp(1e-7, 1.0 - 1e-7)
    bce = -(target * conf.log() + (1 - target) * (1 - conf).log())
    if eligible is not None:
        bce = bce[torch.as_tensor(np.asarray(eligible, dtype=bool))]
    return bce.mean()


def semantic_loss(query_features, class_ids, head):
    """Cross-entropy of the semantic classifier head on matched queries."""
    logits = head(query_features)
    v = logits.shape[-1]
    ids = torch.as_tensor(np.asarray(class_ids), dtype=torch.long)
    if len(ids) and (ids.min() < 0 or ids.max() >= v):
        raise ValueError(f"class id out of range [0, {v})")
    return torch.nn.functional.cross_entropy(logits, ids)


def within_scene_loss(prediction: SegmentationPrediction, part_ids,
                      seg_mode="softmax") -> LossBreakdown:
    """Fixed identity correspondence: memory query i decodes gt part i.

    The memory and the input must come from the same scene and level, so the
    part counts must agree; parametric queries are pushed to confidence 0.
    """
    part_ids = np.asarray(part_ids)
    num_parts = gt_part_masks(part_ids).shape[0]
    num_memory = prediction.queries.num_memory
    if num_memory != num_parts:
        raise InvalidPairingError(
            f"memory has {num_memory} part queries but input has {num_parts} parts")
    pairs = [(i, i) for i in range(num_parts)]
    seg_terms, obj_terms = [], []
    for layer in prediction.layers:
        seg_terms.append(segmentation_loss(layer.mask_logits, pairs, part_ids, seg_mode))
        obj_terms.append(objectness_loss(layer.confidences, [q for q, _ in pairs]))
    seg = sum(seg_terms)
    obj = sum(obj_terms)
    return LossBreakdown(segmentation=seg, objectness=obj,
                         per_layer=[s + o for s, o in zip(seg_terms, obj_terms)])


def total_loss(prediction: SegmentationPrediction, part_ids, mode,
               semantics=None, semantic_head=None, vocab_index=None,
               seg_mode="softmax") -> LossBreakdown:
    """Hungarian-matched loss summed over decoder layers.

    Matching runs independently per layer over the decodable query columns.
    The semantic term applies only in detr3d mode (semantics, semantic_head
    and vocab_index must then be given).
    """
    part_ids = np.asarray(part_ids)
    gt_masks = gt_part_masks(part_ids)
    decodable_idx = np.flatnonzero(prediction.decodable)
    use_semantic = mode == MODE_DETR3D and semantic_head is not None
    seg_terms, obj_terms, sem_terms, per_layer = [], [], [], []
    for layer in prediction.layers:
        cost = match_cost(layer.mask_logits[:, torch.as_tensor(decodable_idx)],
                          layer.confidences[torch.as_tensor(decodable_idx)], gt_masks)
        match = hungarian_match(cost)
        pairs = [(int(decodable_idx[q]), g) for q, g in match.pairs]
        seg = segmentation_loss(layer.mask_logits, pairs, part_ids, seg_mode)
        obj = objectness_loss(layer.confidences, [q for q, _ in pairs],
                              eligible=prediction.decodable)
        layer_total = seg + obj
        seg_terms.append(seg)
        obj_terms.append(obj)
        if use_semantic:
            class_ids = [vocab_index[semantics[g]] for _, g in pairs]
            qf = layer.query_features
            sem = semantic_loss(qf[torch.as_tensor([q for q, _ in pairs])],
                                class_ids, semantic_head)
            sem_terms.append(sem)
            layer_total = layer_total + sem
        per_layer.append(layer_total)
    return LossBreakdown(
        segmentation=sum(seg_terms), objectness=sum(obj_terms),
        semantic=sum(sem_terms) if sem_terms else None, per_layer=per_layer)
