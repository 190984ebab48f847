"""ASCII PLY export of segmentations.

Memory part i and the input points decoded by its query share a palette
color, so a side-by-side view shows the analogy directly. Points decoded by
parametric queries are black.
"""

import numpy as np

# fixed palette, cycled when a scene has more parts than entries
PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
    (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180),
)
PARAMETRIC_COLOR = (0, 0, 0)


def part_color(index: int) -> tuple:
    return PALETTE[index % len(PALETTE)]


def write_ply(path, points, colors):
    """ASCII PLY with per-vertex uchar red/green/blue."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.int64)
    if points.shape[0] != colors.shape[0]:
        raise ValueError("points and colors must have the same length")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(points, colors):
        lines.append(f"{np.float32(x)} {np.float32(y)} {np.float32(z)} {r} {g} {b}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def segmentation_colors(assignment, provenance):
    """Per-point colors: memory query i -> palette[i], parametric -> black."""
    memory_ids = [i for i, p in enumerate(provenance) if p.kind == "memory"]
    slot = {q: memory_ids.index(q) for q in memory_ids}
    colors = []
    for q in assignment:
        q = int(q)
        colors.append(part_color(slot[q]) if q in slot else PARAMETRIC_COLOR)
    return np.array(colors, dtype=np.int64)


def memory_colors(part_ids):
    """Memory scene colors: part i (by sorted part id order) -> palette[i]."""
    part_ids = np.asarray(part_ids)
    order = {int(p): i for i, p in enumerate(np.unique(part_ids[part_ids >= 0]))}
    return np.array(
        [part_color(order[int(p)]) if p >= 0 else PARAMETRIC_COLOR for p in part_ids],
        dtype=np.int64)


def export_segmentation(path, points, assignment, provenance):
    write_ply(path, points, segmentation_colors(assignment, provenance))


def export_memory(path, scene, level):
    write_ply(path, scene.points, memory_colors(scene.level(level).part_ids))
