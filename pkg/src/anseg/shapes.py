"""Procedural part-annotated object generator.

Eight categories are assembled from boxes, cylinders and spheres with
randomized dimensions. Every object carries three nested annotation levels;
level l+1 refines level l. Base categories: chair, table_lamp, mug, bottle,
clock, cabinet. Novel categories: bed, stool.
"""

import dataclasses
import hashlib

import numpy as np

from .dataset import LabeledScene, LevelAnnotation

BASE_CATEGORIES = ("chair", "table_lamp", "mug", "bottle", "clock", "cabinet")
NOVEL_CATEGORIES = ("bed", "stool")
ALL_CATEGORIES = BASE_CATEGORIES + NOVEL_CATEGORIES

POINTS_PER_SCENE = 2048


class UnknownCategoryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# surface primitives: each returns (area, sampler(rng, n) -> (n, 3))


def _box(center, size):
    center = np.asarray(center, dtype=np.float64)
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])

    def sampler(rng, n):
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 2))
        pts = np.zeros((n, 3))
        for f in range(6):
            m = face == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            pts[m, axis] = sign * 0.5
            pts[m, others[0]] = u[m, 0]
            pts[m, others[1]] = u[m, 1]
        return pts * np.array([sx, sy, sz]) + center

    return areas.sum(), sampler


def _cylinder(p0, p1, radius, caps=True):
    """Cylinder surface; `caps` is a bool or a (bottom, top) pair.

    Stacked pieces should cap only their exposed ends: coincident caps at a
    junction would place points with identical coordinates in both parts,
    making the labels unresolvable.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    cap_bottom, cap_top = (caps, caps) if isinstance(caps, bool) else caps
    axis = p1 - p0
    h = np.linalg.norm(axis)
    axis = axis / h
    # orthonormal frame around the axis
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    side_area = 2.0 * np.pi * radius * h
    cap_area = np.pi * radius ** 2
    areas = np.array([side_area,
                      cap_area if cap_bottom else 0.0,
                      cap_area if cap_top else 0.0])
    total = areas.sum()

    def sampler(rng, n):
        pts = np.zeros((n, 3))
        which = rng.choice(3, size=n, p=areas / total)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        m = which == 0
        t = rng.uniform(0.0, h, size=int(m.sum()))
        pts[m] = (p0 + t[:, None] * axis
                  + radius * np.cos(theta[m])[:, None] * u
                  + radius * np.sin(theta[m])[:, None] * v)
        m = which > 0
        if m.any():
            r = radius * np.sqrt(rng.uniform(size=int(m.sum())))
            ends = np.where(which[m] == 1, 0.0, h)
            pts[m] = (p0 + ends[:, None] * axis
                      + r[:, None] * np.cos(theta[m])[:, None] * u
                      + r[:, None] * np.sin(theta[m])[:, None] * v)
        return pts

    return total, sampler


def _sphere(center, radius):
    center = np.asarray(center, dtype=np.float64)

    def sampler(rng, n):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return center + radius * d

    return 4.0 * np.pi * radius ** 2, sampler


@dataclasses.dataclass
class Piece:
    """One primitive surface plus its part key at each level.

    A key is (instance_name, semantic_label); pieces sharing a key at some
    level belong to the same part instance at that level.
    """

    area: float
    sampler: object
    keys: tuple  # ((l1_name, l1_sem), (l2_name, l2_sem), (l3_name, l3_sem))


def _piece(prim, l1, l2, l3):
    area, sampler = prim
    return Piece(area, sampler, (l1, l2, l3))


# ---------------------------------------------------------------------------
# category builders: rng -> list[Piece]


def _legs_and_stretchers(rng, cat, top_z, spread, leg_radius, l1_name_sem):
    """Legs under a seat/top plus horizontal stretcher bars between them."""
    pieces = []
    n_legs = int(rng.choice([3, 4]))
    angles = np.arange(n_legs) * 2.0 * np.pi / n_legs + rng.uniform(0, 2 * np.pi / n_legs)
    feet = np.stack([spread * np.cos(angles), spread * np.sin(angles), np.zeros(n_legs)], axis=1)
    tops = feet.copy()
    tops[:, 2] = top_z
    tops[:, :2] *= rng.uniform(0.7, 1.0)
    for i in range(n_legs):
        pieces.append(_piece(
            _cylinder(feet[i], tops[i], leg_radius),
            l1_name_sem,
            ("legs_group", f"{cat}/legs_group"),
            (f"leg_{i}", f"{cat}/leg"),
        ))
    z_bar = rng.uniform(0.25, 0.5) * top_z
    for i in range(n_legs):
        j = (i + 1) % n_legs
        a = feet[i] * (1 - z_bar / top_z) + tops[i] * (z_bar / top_z)
        b = feet[j] * (1 - z_bar / top_z) + tops[j] * (z_bar / top_z)
        a[2] = b[2] = z_bar
        pieces.append(_piece(
            _cylinder(a, b, leg_radius * 0.7),
            l1_name_sem,
            ("stretchers", f"{cat}/stretchers"),
            ("stretchers", f"{cat}/stretcher"),
        ))
    return pieces


def _build_chair(rng):
    seat_w = rng.uniform(0.8, 1.2)
    seat_d = rng.uniform(0.8, 1.2)
    seat_z = rng.uniform(0.8, 1.1)
    seat_t = rng.uniform(0.08, 0.15)
    back_h = rng.uniform(0.8, 1.3)
    pieces = [
        _piece(_box([0, 0, seat_z], [seat_w, seat_d, seat_t]),
               ("seat", "chair/seat"), ("seat", "chair/seat"), ("seat", "chair/seat")),
        _piece(_box([0, -seat_d / 2 + 0.05, seat_z + back_h / 2], [seat_w, 0.1, back_h]),
               ("back", "chair/back"), ("back", "chair/back"), ("back", "chair/back")),
    ]
    pieces += _legs_and_stretchers(
        rng, "chair", seat_z - seat_t / 2, 0.45 * (seat_w + seat_d) / 2,
        rng.uniform(0.04, 0.07), ("base", "chair/base"))
    return pieces


def _build_stool(rng):
    seat_r = rng.uniform(0.4, 0.6)
    seat_z = rng.uniform(0.7, 1.1)
    seat_t = rng.uniform(0.08, 0.15)
    pieces = [
        _piece(_cylinder([0, 0, seat_z - seat_t], [0, 0, seat_z], seat_r),
               ("seat", "stool/seat"), ("seat", "stool/seat"), ("seat", "stool/seat")),
    ]
    pieces += _legs_and_stretchers(
        rng, "stool", seat_z - seat_t, seat_r * rng.uniform(0.75, 0.95),
        rng.uniform(0.04, 0.07), ("base", "stool/base"))
    return pieces


def _build_table_lamp(rng):
    base_r = rng.uniform(0.35, 0.55)
    base_t = rng.uniform(0.06, 0.12)
    col_h = rng.uniform(0.1, 0.2)
    pole_h = rng.uniform(1.0, 1.6)
    shade_r = rng.uniform(0.35, 0.55)
    shade_h = rng.uniform(0.4, 0.6)
    top = base_t + col_h + pole_h
    return [
        _piece(_cylinder([0, 0, 0], [0, 0, base_t], base_r),
               ("base", "table_lamp/base"), ("base", "table_lamp/base"),
               ("base_plate", "table_lamp/base_plate")),
        _piece(_cylinder([0, 0, base_t], [0, 0, base_t + col_h], base_r * 0.4,
                         caps=(False, True)),
               ("base", "table_lamp/base"), ("base", "table_lamp/base"),
               ("base_column", "table_lamp/base_column")),
        _piece(_cylinder([0, 0, base_t + col_h], [0, 0, top], rng.uniform(0.04, 0.08),
                         caps=(False, True)),
               ("body", "table_lamp/body"), ("pole", "table_lamp/pole"),
               ("pole", "table_lamp/pole")),
        _piece(_sphere([0, 0, top + 0.08], rng.uniform(0.10, 0.16)),
               ("body", "table_lamp/body"), ("bulb", "table_lamp/bulb"),
               ("bulb", "table_lamp/bulb")),
        _piece(_cylinder([0, 0, top - shade_h * 0.2], [0, 0, top + shade_h * 0.8], shade_r, caps=False),
               ("shade", "table_lamp/shade"), ("shade", "table_lamp/shade"),
               ("shade", "table_lamp/shade")),
    ]


def _build_mug(rng):
    body_r = rng.uniform(0.4, 0.55)
    body_h = rng.uniform(0.9, 1.3)
    rim_h = body_h * rng.uniform(0.1, 0.15)
    pieces = [
        _piece(_cylinder([0, 0, 0], [0, 0, body_h - rim_h], body_r, caps=(True, False)),
               ("body", "mug/body"), ("body", "mug/body"), ("body", "mug/body")),
        _piece(_cylinder([0, 0, body_h - rim_h], [0, 0, body_h], body_r, caps=False),
               ("body", "mug/body"), ("rim", "mug/rim"), ("rim", "mug/rim")),
    ]
    # handle: a C of short cylinders on the +x side
    n_seg = 6
    arc_r = body_h * rng.uniform(0.28, 0.38)
    cz = body_h / 2
    handle_r = rng.uniform(0.05, 0.08)
    ang = np.linspace(-np.pi / 2, np.pi / 2, n_seg + 1)
    for i in range(n_seg):
        a = [body_r + arc_r * np.cos(ang[i]), 0, cz + arc_r * np.sin(ang[i])]
        b = [body_r + arc_r * np.cos(ang[i + 1]), 0, cz + arc_r * np.sin(ang[i + 1])]
        half = "handle_upper" if (ang[i] + ang[i + 1]) / 2 > 0 else "handle_lower"
        pieces.append(_piece(
            _cylinder(a, b, handle_r, caps=False),
            ("handle", "mug/handle"), ("handle", "mug/handle"),
            (half, f"mug/{half}")))
    return pieces


def _build_bottle(rng):
    body_r = rng.uniform(0.35, 0.5)
    body_h = rng.uniform(1.2, 1.8)
    neck_r = body_r * rng.uniform(0.3, 0.45)
    neck_h = rng.uniform(0.3, 0.5)
    cap_h = rng.uniform(0.1, 0.18)
    return [
        _piece(_cylinder([0, 0, 0], [0, 0, 0.02], body_r, caps=(True, False)),
               ("body", "bottle/body"), ("body", "bottle/body"),
               ("body_base", "bottle/body_base")),
        _piece(_cylinder([0, 0, 0.02], [0, 0, body_h], body_r, caps=(False, True)),
               ("body", "bottle/body"), ("body", "bottle/body"),
               ("body_wall", "bottle/body_wall")),
        _piece(_cylinder([0, 0, body_h], [0, 0, body_h + neck_h], neck_r, caps=False),
               ("top", "bottle/top"), ("neck", "bottle/neck"), ("neck", "bottle/neck")),
        _piece(_cylinder([0, 0, body_h + neck_h], [0, 0, body_h + neck_h + cap_h], neck_r * 1.15),
               ("top", "bottle/top"), ("cap", "bottle/cap"), ("cap", "bottle/cap")),
    ]


def _build_clock(rng):
    frame_r = rng.uniform(0.8, 1.1)
    frame_t = rng.uniform(0.12, 0.2)
    face_r = frame_r * rng.uniform(0.8, 0.9)
    hand_len = face_r * rng.uniform(0.55, 0.75)
    hour_ang = rng.uniform(0.0, 2 * np.pi)
    minute_ang = rng.uniform(0.0, 2 * np.pi)
    z_face = frame_t / 2 + 0.01

    def hand(angle, length, name):
        d = np.array([np.cos(angle), np.sin(angle), 0.0])
        mid = d * length / 2 + np.array([0, 0, z_face + 0.02])
        prim = _box(mid, [max(abs(d[0]) * length, 0.05), max(abs(d[1]) * length, 0.05), 0.03])
        return _piece(prim, ("face", "clock/face"), ("hands", "clock/hands"),
                      (name, f"clock/{name}"))

    return [
        _piece(_cylinder([0, 0, -frame_t / 2], [0, 0, frame_t / 2], frame_r),
               ("frame", "clock/frame"), ("frame", "clock/frame"), ("frame", "clock/frame")),
        _piece(_cylinder([0, 0, z_face - 0.005], [0, 0, z_face + 0.005], face_r, caps=True),
               ("face", "clock/face"), ("face", "clock/face"), ("face", "clock/face")),
        hand(hour_ang, hand_len * 0.6, "hand_hour"),
        hand(minute_ang, hand_len, "hand_minute"),
    ]


def _build_cabinet(rng):
    w = rng.uniform(1.0, 1.6)
    d = rng.uniform(0.5, 0.8)
    h = rng.uniform(1.2, 2.0)
    n_doors = int(rng.choice([1, 2]))
    pieces = [
        _piece(_box([0, 0, h / 2], [w, d, h]),
               ("body", "cabinet/body"), ("body", "cabinet/body"), ("body", "cabinet/body")),
    ]
    door_w = w / n_doors * 0.9
    for i in range(n_doors):
        cx = (i - (n_doors - 1) / 2) * w / n_doors
        pieces.append(_piece(
            _box([cx, d / 2 + 0.03, h / 2], [door_w, 0.05, h * 0.9]),
            ("front", "cabinet/front"), ("doors", "cabinet/doors"),
            (f"door_{i}", "cabinet/door")))
        hx = cx + (0.35 if n_doors == 1 else (0.3 if i == 0 else -0.3)) * door_w
        pieces.append(_piece(
            _cylinder([hx, d / 2 + 0.06, h * 0.45], [hx, d / 2 + 0.06, h * 0.55],
                      rng.uniform(0.03, 0.05)),
            ("front", "cabinet/front"), ("handles", "cabinet/handles"),
            (f"handle_{i}", "cabinet/handle")))
    return pieces


def _build_bed(rng):
    w = rng.uniform(1.4, 2.0)
    length = rng.uniform(2.2, 3.0)
    frame_z = rng.uniform(0.35, 0.5)
    frame_t = rng.uniform(0.15, 0.25)
    mat_t = rng.uniform(0.25, 0.4)
    head_h = rng.uniform(0.6, 1.0)
    pieces = [
        _piece(_box([0, 0, frame_z], [w, length, frame_t]),
               ("frame", "bed/frame"), ("frame_rails", "bed/frame_rails"),
               ("frame_rails", "bed/frame_rails")),
        _piece(_box([0, 0, frame_z + frame_t / 2 + mat_t / 2], [w * 0.95, length * 0.95, mat_t]),
               ("mattress", "bed/mattress"), ("mattress", "bed/mattress"),
               ("mattress", "bed/mattress")),
        _piece(_box([0, -length / 2 + 0.05, frame_z + head_h / 2], [w, 0.1, head_h]),
               ("headboard", "bed/headboard"), ("headboard", "bed/headboard"),
               ("headboard", "bed/headboard")),
    ]
    leg_r = rng.uniform(0.05, 0.09)
    for i, (sx, sy) in enumerate([(-1, -1), (-1, 1), (1, -1), (1, 1)]):
        foot = [sx * (w / 2 - 0.1), sy * (length / 2 - 0.1), 0.0]
        top = [foot[0], foot[1], frame_z]
        pieces.append(_piece(
            _cylinder(foot, top, leg_r),
            ("frame", "bed/frame"), ("legs_group", "bed/legs_group"),
            (f"leg_{i}", "bed/leg")))
    return pieces


_BUILDERS = {
    "chair": _build_chair,
    "table_lamp": _build_table_lamp,
    "mug": _build_mug,
    "bottle": _build_bottle,
    "clock": _build_clock,
    "cabinet": _build_cabinet,
    "bed": _build_bed,
    "stool": _build_stool,
}


# ---------------------------------------------------------------------------


def _category_seed(category, seed):
    digest = hashlib.sha256(f"{category}:{seed}".encode()).digest()
    return list(digest[:8])


def _allocate_points(pieces, total, rng):
    """Area-proportional allocation; every level-3 part instance keeps >= 2 points."""
    areas = np.array([p.area for p in pieces])
    quota = areas / areas.sum() * total
    counts = np.floor(quota).astype(int)
    frac_order = np.argsort(-(quota - counts), kind="stable")
    for i in frac_order[: total - counts.sum()]:
        counts[i] += 1
    # make sure no L3 instance is starved
    l3_of = [p.keys[2] for p in pieces]
    for key in dict.fromkeys(l3_of):
        members = [i for i, k in enumerate(l3_of) if k == key]
        need = 2 - counts[members].sum()
        while need > 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[members[0]] += 1
            need -= 1
    return counts


def generate_scene(category: str, seed: int, num_points: int = POINTS_PER_SCENE) -> LabeledScene:
    """Deterministically build a labelled scene for (category, seed)."""
    if category not in _BUILDERS:
        raise UnknownCategoryError(f"unknown category {category!r}; known: {sorted(_BUILDERS)}")
    rng = np.random.default_rng(_category_seed(category, seed))
    pieces = _BUILDERS[category](rng)
    counts = _allocate_points(pieces, num_points, rng)

    points = np.concatenate([
        p.sampler(rng, int(c)) if c > 0 else np.zeros((0, 3)) for p, c in zip(pieces, counts)
    ])
    # part ids: contiguous from 0 per level, first-appearance order over pieces
    level_ids = []
    level_parts = []
    for lvl in range(3):
        keys = [p.keys[lvl] for p in pieces]
        ordered = list(dict.fromkeys(keys))
        id_of = {k: i for i, k in enumerate(ordered)}
        pid = np.concatenate([
            np.full(int(c), id_of[p.keys[lvl]], dtype=np.int64) for p, c in zip(pieces, counts)
        ])
        level_ids.append(pid)
        level_parts.append({i: k[1] for i, k in enumerate(ordered)})

    # canonical object frame
    centroid = points.mean(axis=0)
    points = points - centroid
    scale = np.linalg.norm(points, axis=1).max()
    if scale > 0:
        points = points / scale

    return LabeledScene(
        scene_id=f"{category}_{seed:06d}",
        category=category,
        points=points.astype(np.float32),
        levels=[
            LevelAnnotation(level=lvl + 1, part_ids=level_ids[lvl], semantics=level_parts[lvl])
            for lvl in range(3)
        ],
    )
