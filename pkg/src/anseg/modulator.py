"""Memory-modulated set-prediction decoder.

Retrieved memory scenes are encoded into per-part pooled features that act
as decoding queries, concatenated with learnable scene-agnostic queries.
Queries and input point features are contextualized by interleaved cross and
self attention with rotary 3D positional encodings, and every decoder layer
emits full-resolution mask logits plus per-query confidences.
"""

import dataclasses

import numpy as np
import torch
import torch.nn as nn

from .encoder import EncoderConfig, FeatureUpsampler, PointEncoder, part_pool

MODE_ANALOGICAL = "analogical"
MODE_DETR3D = "detr3d"
MODE_RE_DETR3D = "re_detr3d"
MODES = (MODE_ANALOGICAL, MODE_DETR3D, MODE_RE_DETR3D)


class ConfigurationError(ValueError):
    pass


class InvalidMemoryError(ValueError):
    pass


@dataclasses.dataclass
class ModulatorConfig:
    layers: int = 6
    heads: int = 4
    parametric_queries: int = 32
    temperature_init: float = 10.0
    mode: str = MODE_ANALOGICAL
    memories_per_forward: int = 1
    rope_base: float = 100.0
    num_levels: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.layers < 1 or self.parametric_queries < 1:
            raise ConfigurationError("layers and parametric query count must be >= 1")


def rope3d_encode(positions, features, base=100.0):
    """Rotate channel pairs by position-dependent angles.

    Channels split into three equal axis groups; within a group, pair j is
    rotated by angle coord_axis * base**(-j / num_pairs). Norm preserving,
    and dot products of encoded query/key pairs depend only on the relative
    position: <rope(x, q), rope(y, k)> = <rope(x + t, q), rope(y + t, k)>.
    """
    c = features.shape[-1]
    if c % 6 != 0:
        raise ConfigurationError(f"channel width {c} not divisible by 6")
    pos = torch.as_tensor(np.asarray(positions, dtype=np.float64), dtype=features.dtype)
    group = c // 3
    pairs = group // 2
    freqs = base ** (-torch.arange(pairs, dtype=features.dtype) / pairs)
    angles = pos[:, :, None] * freqs[None, None, :]          # (M, 3, pairs)
    angles = angles.reshape(len(pos), 3 * pairs)             # axis-major pair order
    cos, sin = torch.cos(angles), torch.sin(angles)
    f = features.reshape(*features.shape[:-1], c // 2, 2)
    out = torch.empty_like(f)
    out[..., 0] = f[..., 0] * cos - f[..., 1] * sin
    out[..., 1] = f[..., 0] * sin + f[..., 1] * cos
    return out.reshape(features.shape)


@dataclasses.dataclass
class QueryProvenance:
    kind: str                    # "memory" | "parametric"
    memory_scene_id: str = None
    part_id: int = None
    semantic_label: str = None
    level: int = None


@dataclasses.dataclass
class QuerySet:
    features: torch.Tensor       # (Nq, C)
    anchors: np.ndarray          # (Nq, 3)
    provenance: list             # [QueryProvenance], memory queries first

    @property
    def num_memory(self):
        return sum(1 for p in self.provenance if p.kind == "memory")

    def decodable(self, mode):
        """Which query columns may decode parts (memory columns masked in re_detr3d)."""
        if mode == MODE_RE_DETR3D:
            return np.array([p.kind != "memory" for p in self.provenance])
        return np.ones(len(self.provenance), dtype=bool)


@dataclasses.dataclass
class LayerPrediction:
    mask_logits: torch.Tensor    # (Np, Nq)
    confidences: torch.Tensor    # (Nq,)
    query_features: torch.Tensor = None  # (Nq, C), post-layer


@dataclasses.dataclass
class SegmentationPrediction:
    layers: list                 # [LayerPrediction], one per decoder layer
    queries: QuerySet
    decodable: np.ndarray        # (Nq,) bool

    @property
    def final(self) -> LayerPrediction:
        return self.layers[-1]


class RopeAttention(nn.Module):
    """Multi-head attention with rotary position encoding on queries and keys."""

    def __init__(self, channels, heads, base):
        super().__init__()
        if channels % heads != 0 or (channels // heads) % 2 != 0:
            raise ConfigurationError("channels must split into heads with even head width")
        self.heads = heads
        self.base = base
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(self, x_q, x_kv, pos_q, pos_kv):
        c = x_q.shape[-1]
        q = rope3d_encode(pos_q, self.q_proj(x_q), self.base)
        k = rope3d_encode(pos_kv, self.k_proj(x_kv), self.base)
        v = self.v_proj(x_kv)
        hd = c // self.heads
        q = q.reshape(-1, self.heads, hd).transpose(0, 1)
        k = k.reshape(-1, self.heads, hd).transpose(0, 1)
        v = v.reshape(-1, self.heads, hd).transpose(0, 1)
        att = torch.softmax(q @ k.transpose(1, 2) / hd ** 0.5, dim=-1)
        out = (att @ v).transpose(0, 1).reshape(-1, c)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    """One modulation round; every sublayer is pre-norm residual.

    points <- cross-attn(points, queries); queries <- cross-attn(queries,
    points); self-attn on each; then a feedforward on the queries.
    """

    def __init__(self, channels, heads, base):
        super().__init__()
        self.x_from_y = RopeAttention(channels, heads, base)
        self.y_from_x = RopeAttention(channels, heads, base)
        self.x_self = RopeAttention(channels, heads, base)
        self.y_self = RopeAttention(channels, heads, base)
        self.ln = nn.ModuleList([nn.LayerNorm(channels) for _ in range(7)])
        self.ffn = nn.Sequential(nn.Linear(channels, 2 * channels), nn.ReLU(),
                                 nn.Linear(2 * channels, channels))

    def forward(self, x, y, pos_x, pos_y):
        x = x + self.x_from_y(self.ln[0](x), self.ln[1](y), pos_x, pos_y)
        y = y + self.y_from_x(self.ln[2](y), self.ln[3](x), pos_y, pos_x)
        x = x + self.x_self(self.ln[4](x), self.ln[4](x), pos_x, pos_x)
        y = y + self.y_self(self.ln[5](y), self.ln[5](y), pos_y, pos_y)
        y = y + self.ffn(self.ln[6](y))
        return x, y


def decode_masks(point_features, query_features, temperature):
    """Temperature-scaled cosine similarity between points and queries."""
    pn = point_features / (point_features.norm(dim=-1, keepdim=True) + 1e-12)
    qn = query_features / (query_features.norm(dim=-1, keepdim=True) + 1e-12)
    return temperature * (pn @ qn.T)


class SegmentationModel(nn.Module):
    """Encoder + modulator + mask/confidence heads."""

    def __init__(self, encoder_config: EncoderConfig = None,
                 config: ModulatorConfig = None, semantic_vocab=None):
        super().__init__()
        self.config = config or ModulatorConfig()
        self.encoder = PointEncoder(encoder_config or EncoderConfig())
        c = self.encoder.config.channels
        if c % 6 != 0:
            raise ConfigurationError("channels must be divisible by 6 for rotary encoding")
        self.upsampler = FeatureUpsampler(c)
        self.decoder = nn.ModuleList([
            DecoderLayer(c, self.config.heads, self.config.rope_base)
            for _ in range(self.config.layers)
        ])
        # centered-frame position embedding: lets the mask decoder separate
        # geometrically identical parts (e.g. four legs) by location while
        # staying translation invariant, since every cloud is centered first
        self.pos_embed = nn.Sequential(nn.Linear(3, c), nn.ReLU(), nn.Linear(c, c))
        # point-wise nonlinearity on the full-resolution decode features:
        # upsampled context is interpolated (smooth), so without it mask
        # boundaries between adjacent parts cannot be sharp
        self.decode_head = nn.Sequential(nn.LayerNorm(c), nn.Linear(c, 2 * c),
                                         nn.ReLU(), nn.Linear(2 * c, c))
        self.parametric = nn.Parameter(torch.randn(self.config.parametric_queries, c) * 0.02)
        self.temperature = nn.Parameter(torch.tensor(float(self.config.temperature_init)))
        self.conf_head = nn.Linear(c, 1)
        self.level_embed = nn.Embedding(self.config.num_levels, c)
        self.semantic_vocab = list(semantic_vocab) if semantic_vocab else None
        if self.semantic_vocab:
            self.semantic_head = nn.Linear(c, len(self.semantic_vocab))
        else:
            self.semantic_head = None

    @property
    def channels(self):
        return self.encoder.config.channels

    def init_queries(self, memories, input_points, level=None) -> QuerySet:
        """Build memory part queries followed by parametric queries.

        memories: list of (LabeledScene, level) pairs; empty in detr3d mode.
        """
        mode = self.config.mode
        if mode == MODE_DETR3D:
            if memories:
                raise InvalidMemoryError("detr3d mode takes no memories")
        elif not memories:
            raise InvalidMemoryError(f"{mode} mode needs at least one memory")
        feat_rows, anchors, provenance = [], [], []
        for scene, lvl in memories:
            ann = scene.level(lvl)
            if ann.num_parts() < 1:
                raise InvalidMemoryError(f"memory {scene.scene_id} level {lvl} has no parts")
            mem_points = np.asarray(scene.points, dtype=np.float64)
            mem_center = mem_points.mean(axis=0)
            mem_feats = self.encoder(scene.points)
            for pid in sorted(ann.semantics):
                mask = ann.part_ids == pid
                if not mask.any():
                    raise InvalidMemoryError(
                        f"memory {scene.scene_id} part {pid} has no points")
                feat_rows.append(part_pool(mem_feats, mask, scene.points))
                # anchors live in each scene's own centered frame so that the
                # whole pipeline is invariant to translating any one cloud
                anchors.append(mem_points[mask].mean(axis=0) - mem_center)
                provenance.append(QueryProvenance(
                    "memory", memory_scene_id=scene.scene_id, part_id=pid,
                    semantic_label=ann.semantics[pid], level=lvl))
        par = self.parametric
        if mode == MODE_DETR3D:
            if level is None:
                raise ConfigurationError("detr3d mode requires a target level")
            par = par + self.level_embed(torch.tensor(level - 1))
        for _ in range(len(par)):
            anchors.append(np.zeros(3))  # the input object's center, in its centered frame
            provenance.append(QueryProvenance("parametric"))
        features = torch.cat([torch.stack(feat_rows), par]) if feat_rows else par
        return QuerySet(features=features, anchors=np.stack(anchors), provenance=provenance)

    def forward(self, input_points, memories=(), level=None) -> SegmentationPrediction:
        """Run the full pipeline, recording a prediction after every layer."""
        input_points = np.asarray(input_points)
        point_feats = self.encoder(input_points)
        queries = self.init_queries(list(memories), input_points, level=level)
        center = np.asarray(input_points, dtype=np.float64).mean(axis=0)
        pos_x = point_feats.positions - center
        pos_y = queries.anchors
        dtype = point_feats.features.dtype
        x = point_feats.features + self.pos_embed(torch.as_tensor(pos_x, dtype=dtype))
        y = queries.features + self.pos_embed(torch.as_tensor(pos_y, dtype=dtype))
        full_pos = self.pos_embed(
            torch.as_tensor(np.asarray(input_points, dtype=np.float64) - center,
                            dtype=dtype))
        records = []
        for layer in self.decoder:
            x, y = layer(x, y, pos_x, pos_y)
            contextual = type(point_feats)(point_feats.positions, x, point_feats.provenance)
            full = self.upsampler(contextual, input_points) + full_pos
            full = full + self.decode_head(full)
            logits = decode_masks(full, y, self.temperature)
            conf = torch.sigmoid(self.conf_head(y)).squeeze(-1)
            records.append(LayerPrediction(mask_logits=logits, confidences=conf, query_features=y))
        final_queries = QuerySet(features=y, anchors=queries.anchors,
                                 provenance=queries.provenance)
        return SegmentationPrediction(
            layers=records, queries=final_queries,
            decodable=queries.decodable(self.config.mode))
