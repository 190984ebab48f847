"""Hierarchical set-abstraction point encoder.

Each stage: farthest point sampling -> radius grouping -> shared MLP on
(relative offset [+ carried feature]) -> per-group max pool. Only relative
offsets enter the network, so features are translation invariant. A small
inverse-distance upsampler maps coarse features back to full resolution.
"""

import dataclasses
import hashlib

import numpy as np
import torch
import torch.nn as nn

from . import geom


class CloudTooSmallError(ValueError):
    pass


@dataclasses.dataclass
class StageConfig:
    sample_fraction: float
    radius: float
    max_neighbors: int
    mlp: tuple


@dataclasses.dataclass
class EncoderConfig:
    channels: int = 96
    stages: tuple = (
        StageConfig(0.25, 0.25, 32, (64, 64, 96)),
        StageConfig(0.5, 0.45, 32, (96, 96, 96)),
    )
    interp_k: int = 3

    def __post_init__(self):
        if self.stages[-1].mlp[-1] != self.channels:
            raise ValueError("last stage width must equal channels")


def _shared_mlp(in_ch, widths):
    layers = []
    for w in widths:
        layers += [nn.Linear(in_ch, w), nn.ReLU()]
        in_ch = w
    return nn.Sequential(*layers)


def _group_indices(positions, centers, radius, max_neighbors):
    """Vectorized radius grouping. Returns (idx (M, K), mask (M, K))."""
    d = np.linalg.norm(positions[centers][:, None, :] - positions[None, :, :], axis=2)
    m, n = d.shape
    k = min(max_neighbors, n)
    idx = np.zeros((m, k), dtype=np.int64)
    mask = np.zeros((m, k), dtype=bool)
    col = np.arange(n)
    for i in range(m):
        eligible = col[d[i] <= radius]
        order = np.lexsort((eligible, d[i][eligible]))
        sel = eligible[order][:k]
        if centers[i] not in sel:
            sel = np.concatenate([[centers[i]], sel[: k - 1]])
        idx[i, : len(sel)] = sel
        mask[i, : len(sel)] = True
        if len(sel) < k:
            idx[i, len(sel):] = sel[0]  # padded entries masked out below
    return idx, mask


class PointFeatures:
    """Subsampled positions with per-point features and original-index provenance."""

    def __init__(self, positions, features, provenance):
        self.positions = positions      # (N, 3) float64 numpy
        self.features = features        # (N, C) torch
        self.provenance = provenance    # (N,) int64 numpy, indices into the input cloud


class PointEncoder(nn.Module):
    def __init__(self, config: EncoderConfig = None):
        super().__init__()
        self.config = config or EncoderConfig()
        mlps = []
        in_ch = 3  # first stage sees relative offsets only
        for stage in self.config.stages:
            mlps.append(_shared_mlp(in_ch, stage.mlp))
            in_ch = stage.mlp[-1] + 3  # next stage: carried feature + offset
        self.stage_mlps = nn.ModuleList(mlps)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def forward(self, points) -> PointFeatures:
        pos = np.asarray(points, dtype=np.float64)
        if len(pos) < 4:
            raise CloudTooSmallError(f"need at least 4 points, got {len(pos)}")
        provenance = np.arange(len(pos), dtype=np.int64)
        feats = None
        for stage, mlp in zip(self.config.stages, self.stage_mlps):
            n_out = max(1, int(round(stage.sample_fraction * len(pos))))
            centers = geom.farthest_point_sample(pos, n_out)
            idx, mask = _group_indices(pos, centers, stage.radius, stage.max_neighbors)
            rel = pos[idx] - pos[centers][:, None, :]                    # (M, K, 3)
            rel_t = torch.as_tensor(rel, dtype=self.dtype)
            if feats is None:
                grouped = rel_t
            else:
                grouped = torch.cat([rel_t, feats[torch.as_tensor(idx)]], dim=-1)
            out = mlp(grouped)                                           # (M, K, W)
            out = out.masked_fill(~torch.as_tensor(mask)[:, :, None], float("-inf"))
            feats = out.max(dim=1).values
            provenance = provenance[centers]
            pos = pos[centers]
        return PointFeatures(pos, feats, provenance)


class FeatureUpsampler(nn.Module):
    """Inverse-distance interpolation to full resolution, then a pointwise linear map."""

    def __init__(self, channels):
        super().__init__()
        self.proj = nn.Linear(channels, channels)

    def forward(self, coarse: PointFeatures, full_points):
        full = np.asarray(full_points, dtype=np.float64)
        idx, w = geom.interp_weights(full, coarse.positions, k=min(3, len(coarse.positions)))
        w_t = torch.as_tensor(w, dtype=coarse.features.dtype)
        gathered = coarse.features[torch.as_tensor(idx)]                 # (Np, k, C)
        interp = (w_t[:, :, None] * gathered).sum(dim=1)
        return self.proj(interp)


def global_embed(feats: PointFeatures) -> torch.Tensor:
    """Mean over points, L2 normalized; always unit norm (eps-guarded)."""
    v = feats.features.mean(dim=0)
    return v / (v.norm() + 1e-12)


def part_pool(feats: PointFeatures, part_mask, full_points=None) -> torch.Tensor:
    """Average the coarse features whose source points fall inside the part.

    part_mask is a boolean array over the original full-resolution cloud. If
    no coarse point maps into the part, falls back to the coarse point
    nearest the part centroid (full_points required for that).
    """
    part_mask = np.asarray(part_mask, dtype=bool)
    if not part_mask.any():
        raise ValueError("empty part mask")
    sel = part_mask[feats.provenance]
    if sel.any():
        return feats.features[torch.as_tensor(sel.nonzero()[0])].mean(dim=0)
    if full_points is None:
        raise ValueError("part has no coarse points and no full cloud was given")
    centroid = np.asarray(full_points, dtype=np.float64)[part_mask].mean(axis=0)
    nearest = int(np.argmin(np.linalg.norm(feats.positions - centroid, axis=1)))
    return feats.features[nearest]


def encoder_fingerprint(encoder: PointEncoder) -> str:
    """Hash of the encoder parameters (dtype-independent)."""
    h = hashlib.sha256()
    for name, p in sorted(encoder.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().to(torch.float64).numpy().tobytes())
    return h.hexdigest()
