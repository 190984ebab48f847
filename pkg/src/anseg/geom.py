"""Point cloud primitives: normalization, augmentations, sampling, grouping, interpolation.

All functions are pure (rng state passed explicitly) and operate on float64
numpy arrays of shape (N, 3) unless noted otherwise.
"""

import dataclasses

import numpy as np


class InvalidInputError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RigidRotation:
    """Proper rotation, stored as a 3x3 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidInputError(f"rotation matrix must be 3x3, got {m.shape}")
        if np.abs(m.T @ m - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(m) - 1.0) > 1e-6:
            raise InvalidInputError("matrix is not a proper rotation")
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity():
        return RigidRotation(np.eye(3))


@dataclasses.dataclass(frozen=True)
class DeformationField:
    """Anchor-based smooth deformation.

    Each anchor carries a local affine map (rotation, scale, translation).
    A point's displacement is the Gaussian-kernel weighted blend of the
    per-anchor displacements, with weights normalized to sum to one.
    """

    anchors: np.ndarray            # (A, 3)
    rotations: np.ndarray          # (A, 3, 3)
    scales: np.ndarray             # (A,)
    translations: np.ndarray       # (A, 3)
    bandwidth: float

    def __post_init__(self):
        if len(self.anchors) < 1:
            raise InvalidInputError("need at least one anchor")
        if self.bandwidth <= 0:
            raise InvalidInputError("bandwidth must be positive")


def _check_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise InvalidInputError(f"expected (N, 3) points with N >= 1, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise InvalidInputError("non-finite coordinate in point cloud")
    return pts


def normalize_cloud(points):
    """Center at the origin and scale so the farthest point has norm 1.

    Returns (normalized_points, centroid, scale) where
    original = normalized * scale + centroid. If all points coincide the
    scale is forced to 1.
    """
    pts = _check_cloud(points)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale <= 0.0:
        scale = 1.0
    return centered / scale, centroid, scale


def apply_rotation(points, rot: RigidRotation):
    pts = _check_cloud(points)
    return pts @ rot.matrix.T


def sample_rotation(rng, yaw_range=(0.0, 2.0 * np.pi), max_tilt=np.deg2rad(10.0)) -> RigidRotation:
    """Random yaw about the gravity (z) axis plus a small tilt.

    rng may be a numpy Generator or an integer seed.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    yaw = rng.uniform(yaw_range[0], yaw_range[1])
    cy, sy = np.cos(yaw), np.sin(yaw)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    if max_tilt > 0:
        tilt = rng.uniform(0.0, max_tilt)
        axis_angle = rng.uniform(0.0, 2.0 * np.pi)
        # tilt axis lies in the xy plane
        axis = np.array([np.cos(axis_angle), np.sin(axis_angle), 0.0])
        rt = _axis_angle_matrix(axis, tilt)
    else:
        rt = np.eye(3)
    return RigidRotation(rt @ rz)


def _axis_angle_matrix(axis, angle):
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def sample_deformation(points, rng, num_anchors=4, max_rotation=np.deg2rad(15.0),
                       max_scale=0.10, max_translation=0.10, bandwidth=0.5) -> DeformationField:
    """Sample a deformation field with anchors placed by farthest point sampling."""
    pts = _check_cloud(points)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    num_anchors = min(num_anchors, len(pts))
    anchor_idx = farthest_point_sample(pts, num_anchors)
    rotations = []
    for _ in range(num_anchors):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(-max_rotation, max_rotation)
        rotations.append(_axis_angle_matrix(axis, angle))
    scales = rng.uniform(1.0 - max_scale, 1.0 + max_scale, size=num_anchors)
    translations = rng.uniform(-max_translation, max_translation, size=(num_anchors, 3))
    return DeformationField(
        anchors=pts[anchor_idx],
        rotations=np.stack(rotations),
        scales=scales,
        translations=translations,
        bandwidth=bandwidth,
    )


def deform(points, field: DeformationField):
    """Blend per-anchor affine displacements with a normalized Gaussian kernel."""
    pts = _check_cloud(points)
    rel = pts[:, None, :] - field.anchors[None, :, :]                    # (N, A, 3)
    # displacement each anchor would apply to each point
    moved = np.einsum("aij,naj->nai", field.rotations, rel)
    moved = moved * field.scales[None, :, None] + field.anchors[None, :, :] + field.translations[None, :, :]
    disp = moved - pts[:, None, :]                                       # (N, A, 3)
    d2 = (rel ** 2).sum(axis=2)
    w = np.exp(-d2 / (2.0 * field.bandwidth ** 2))
    w = w / w.sum(axis=1, keepdims=True)
    return pts + (w[:, :, None] * disp).sum(axis=1)


def farthest_point_sample(points, k: int) -> np.ndarray:
    """Deterministic farthest point sampling.

    Seed = point farthest from the centroid (lowest index on ties); each
    subsequent pick maximizes the min distance to the chosen set, ties
    broken by lowest index. Returns the k selected indices in pick order.
    """
    pts = _check_cloud(points)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidInputError(f"k={k} out of range [1, {n}]")
    centroid = pts.mean(axis=0)
    d0 = np.linalg.norm(pts - centroid, axis=1)
    first = int(np.argmax(d0))  # argmax returns the lowest index on ties
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    min_d = np.linalg.norm(pts - pts[first], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        min_d = np.minimum(min_d, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def radius_group(points, centers, radius: float, max_neighbors: int):
    """Indices within `radius` of each center, nearest-first, capped at max_neighbors.

    The center itself is always a member, so lists are never empty. Distance
    ties are broken by lower index.
    """
    pts = _check_cloud(points)
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    if max_neighbors < 1:
        raise InvalidInputError("max_neighbors must be >= 1")
    groups = []
    for c in centers:
        d = np.linalg.norm(pts - pts[c], axis=1)
        eligible = np.flatnonzero(d <= radius)
        order = np.lexsort((eligible, d[eligible]))  # distance, then index
        sel = eligible[order][:max_neighbors]
        if c not in sel:
            sel = np.concatenate([[c], sel[: max_neighbors - 1]])
        groups.append(sel.astype(np.int64))
    return groups


def interp_weights(targets, sources, k: int, eps: float = 1e-8):
    """Inverse-distance weights of the k nearest sources for each target.

    Returns (indices (T, k), weights (T, k)); weights are nonnegative and
    each row sums to 1.
    """
    tgt = _check_cloud(targets)
    src = _check_cloud(sources)
    if k > len(src):
        raise InvalidInputError(f"k={k} exceeds source count {len(src)}")
    d = np.linalg.norm(tgt[:, None, :] - src[None, :, :], axis=2)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    dk = np.take_along_axis(d, idx, axis=1)
    w = 1.0 / (dk + eps)
    w = w / w.sum(axis=1, keepdims=True)
    return idx.astype(np.int64), w
