"""Procedural scenes, surround camera rigs and a frozen-feature renderer.

Stands in for a pretrained multi-view encoder: every pixel's feature is a
fixed random linear embedding of what its ray hits first (class one-hot,
inverse depth, ray direction), or a background token if the ray leaves
the grid without hitting anything.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CameraModel, look_from
from .objective import FREE, label_pyramid

CLASS_NAMES = ("free", "ground", "vehicle", "pole", "vegetation")


@dataclass
class Primitive:
    kind: str  # "box" or "sphere"
    center: tuple[float, float, float]
    extents: tuple[float, float, float]  # box side lengths; sphere uses extents[0] as diameter
    class_id: int

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        half = np.asarray(self.extents) / 2.0
        if self.kind == "box":
            return np.all(np.abs(d) < half - 1e-9, axis=-1)
        if self.kind == "sphere":
            return np.sum(d * d, axis=-1) < (half[0] - 1e-9) ** 2
        raise ValueError(f"unknown primitive {self.kind!r}")


@dataclass
class SceneSpec:
    seed: int = 0
    bounds: tuple[tuple[float, float], ...] = ((-5.0, 5.0), (-5.0, 5.0), (0.0, 2.0))
    dims: tuple[int, int, int] = (20, 20, 4)
    primitives: list[Primitive] = field(default_factory=list)
    ground_class: int = 1
    n_classes: int = 5

    def __post_init__(self):
        self.bounds = tuple(tuple(float(v) for v in b) for b in self.bounds)
        self.dims = tuple(int(d) for d in self.dims)
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        for p in self.primitives:
            if not 1 <= p.class_id < self.n_classes:
                raise ValueError(f"class id {p.class_id} out of range")
            if any(not lo <= c <= hi for c, (lo, hi) in zip(p.center, self.bounds)):
                raise ValueError(f"primitive center {p.center} outside bounds")
        if self.ground_class is not None and not 1 <= self.ground_class < self.n_classes:
            raise ValueError("ground class out of range")

    @property
    def pitch(self) -> np.ndarray:
        return np.array([(hi - lo) / n for (lo, hi), n in zip(self.bounds, self.dims)])

    def voxel_centers(self) -> np.ndarray:
        axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for (lo, hi), n in zip(self.bounds, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = [asdict(p) for p in self.primitives]
        return d


def random_scene_spec(seed: int, n_primitives: tuple[int, int] = (4, 8), **kw) -> SceneSpec:
    """Objects scattered on an annulus around the rig, sitting on the ground."""
    rng = np.random.default_rng(seed)
    spec = SceneSpec(seed=seed, **kw)
    prims = []
    for _ in range(int(rng.integers(n_primitives[0], n_primitives[1] + 1))):
        r = rng.uniform(1.5, 4.5)
        phi = rng.uniform(0, 2 * np.pi)
        x, y = r * np.cos(phi), r * np.sin(phi)
        kind = rng.choice(["vehicle", "pole", "vegetation"])
        if kind == "vehicle":
            ext = (rng.uniform(1.0, 2.0), rng.uniform(1.0, 2.0), rng.uniform(0.8, 1.6))
            prims.append(Primitive("box", (x, y, ext[2] / 2), ext, 2))
        elif kind == "pole":
            h = rng.uniform(1.5, 2.0)
            prims.append(Primitive("box", (x, y, h / 2), (0.5, 0.5, h), 3))
        else:
            d = rng.uniform(1.0, 2.0)
            prims.append(Primitive("sphere", (x, y, d / 2), (d, d, d), 4))
    prims = [Primitive(p.kind, tuple(float(c) for c in p.center), tuple(float(e) for e in p.extents),
                       p.class_id) for p in prims]
    spec.primitives = prims
    spec.__post_init__()
    return spec


def generate_scene(seed: int, spec: SceneSpec | None = None) -> np.ndarray:
    """Voxelize a scene into an (X, Y, Z) uint8 label grid.

    Later primitives win overlaps; unclaimed voxels of the bottom layer get
    the ground class; everything else is free.
    """
    spec = spec if spec is not None else random_scene_spec(seed)
    centers = spec.voxel_centers()
    labels = np.full(spec.dims, FREE, dtype=np.uint8)
    for p in spec.primitives:
        labels[p.contains(centers)] = p.class_id
    if spec.ground_class is not None:
        bottom = labels[:, :, 0]
        bottom[bottom == FREE] = spec.ground_class
    return labels


# --------------------------------------------------------------------- rig

@dataclass
class RigSpec:
    n_cameras: int = 6
    radius: float = 0.3
    height: float = 1.0
    yaws: tuple[float, ...] | None = None  # radians; evenly spaced when None
    pitch: float = 0.15  # radians, positive tilts down
    hfov_deg: float = 75.0
    levels: tuple[tuple[int, int], ...] = ((32, 48), (16, 24))  # (H, W) per pyramid level
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.levels = tuple(tuple(int(v) for v in lv) for lv in self.levels)
        if self.yaws is not None:
            self.yaws = tuple(float(y) for y in self.yaws)
            if len(self.yaws) != self.n_cameras:
                raise ValueError("need one yaw per camera")


def make_rig(spec: RigSpec) -> list[CameraModel]:
    """Cameras at level-0 resolution, on a ring looking outward."""
    H, W = spec.levels[0]
    fx = (W / 2) / np.tan(np.radians(spec.hfov_deg) / 2)
    yaws = spec.yaws if spec.yaws is not None else [2 * np.pi * i / spec.n_cameras
                                                    for i in range(spec.n_cameras)]
    cams = []
    for yaw in yaws:
        c = (spec.center[0] + spec.radius * np.cos(yaw), spec.center[1] + spec.radius * np.sin(yaw),
             spec.height)
        R, t = look_from(c, yaw, spec.pitch)
        cams.append(CameraModel(fx, fx, W / 2, H / 2, W, H, R, t))
    return cams


# --------------------------------------------------------------- rendering

@dataclass(frozen=True)
class FeatureEmbedding:
    """Fixed random linear map from hit descriptors to feature channels."""

    matrix: np.ndarray
    background: np.ndarray

    @classmethod
    def create(cls, seed: int, n_classes: int, feat_dim: int) -> "FeatureEmbedding":
        rng = np.random.default_rng(seed)
        m = rng.normal(0, 1, size=(n_classes + 4, feat_dim))
        bg = rng.normal(0, 1, size=feat_dim)
        return cls(m, bg)

    def embed(self, class_id, inv_depth, direction) -> np.ndarray:
        n_classes = self.matrix.shape[0] - 4
        class_id = np.asarray(class_id)
        onehot = np.eye(n_classes)[class_id]
        raw = np.concatenate([onehot, np.asarray(inv_depth)[..., None], np.asarray(direction)], axis=-1)
        return raw @ self.matrix


@dataclass
class RayHits:
    class_id: np.ndarray  # FREE where nothing is hit
    depth: np.ndarray  # camera-frame Z of the entry point, inf when free
    direction: np.ndarray  # unit world direction


def cast_rays(labels: np.ndarray, bounds, cam: CameraModel) -> RayHits:
    """Amanatides-Woo voxel traversal for every pixel center of ``cam``."""
    H, W = cam.height, cam.width
    px, py = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d_cam = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], axis=-1)
    d = (d_cam @ cam.R).reshape(-1, 3)  # parameter t along d equals camera depth
    o = cam.center
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    dims = np.array(labels.shape)
    pitch = (hi - lo) / dims
    n = d.shape[0]

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.where(d != 0, np.minimum(t1, t2), np.where((o >= lo) & (o <= hi), -np.inf, np.inf))
    tmax = np.where(d != 0, np.maximum(t1, t2), np.where((o >= lo) & (o <= hi), np.inf, -np.inf))
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = tmax.min(axis=1)
    active = t_enter < t_exit

    p = o + (t_enter[:, None] + 1e-9) * d
    idx = np.clip(np.floor((p - lo) / pitch).astype(np.int64), 0, dims - 1)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_b = lo + (idx + (step > 0)) * pitch
        t_next = np.where(d != 0, (next_b - o) * inv, np.inf)
        t_delta = np.where(d != 0, pitch * np.abs(inv), np.inf)
    t_cur = t_enter.copy()
    hit_cls = np.zeros(n, dtype=np.int64)
    hit_t = np.full(n, np.inf)
    for _ in range(int(dims.sum()) + 3):
        if not active.any():
            break
        a = np.nonzero(active)[0]
        lab = labels[idx[a, 0], idx[a, 1], idx[a, 2]]
        hit = lab != FREE
        hit_cls[a[hit]] = lab[hit]
        hit_t[a[hit]] = t_cur[a[hit]]
        active[a[hit]] = False
        a = a[~hit]
        ax = np.argmin(t_next[a], axis=1)
        t_cur[a] = t_next[a, ax]
        idx[a, ax] += step[a, ax]
        t_next[a, ax] += t_delta[a, ax]
        out = (idx[a, ax] < 0) | (idx[a, ax] >= dims[ax]) | (t_cur[a] >= t_exit[a])
        active[a[out]] = False
    unit = d / np.linalg.norm(d, axis=1, keepdims=True)
    return RayHits(hit_cls.reshape(H, W), hit_t.reshape(H, W), unit.reshape(H, W, 3))


def render_features(labels: np.ndarray, bounds, cam: CameraModel, level_hw: tuple[int, int],
                    embedding: FeatureEmbedding) -> np.ndarray:
    """(H_l, W_l, F) feature map of ``labels`` seen by ``cam`` at one pyramid level."""
    Hl, Wl = level_hw
    hits = cast_rays(labels, bounds, cam.scaled(Wl, Hl))
    occupied = hits.class_id != FREE
    inv_depth = np.where(occupied, 1.0 / np.maximum(hits.depth, 1e-6), 0.0)
    feats = embedding.embed(hits.class_id, inv_depth, hits.direction)
    feats[~occupied] = embedding.background
    return feats


# ----------------------------------------------------------------- dataset

SPLIT_OFFSET = {"train": 0, "val": 5_000_000}


def scene_seed(seed: int, index: int, split: str = "train") -> int:
    return seed * 10_000_000 + SPLIT_OFFSET[split] + index


@dataclass
class Sample:
    seed: int
    spec: SceneSpec
    labels: list[np.ndarray]  # coarse -> fine
    pyramid: list[np.ndarray]  # per level: (N, H_l, W_l, F) float32
    cameras: list[CameraModel]


def render_pyramid(labels: np.ndarray, bounds, cameras: Sequence[CameraModel],
                   levels: Sequence[tuple[int, int]], embedding: FeatureEmbedding) -> list[np.ndarray]:
    return [np.stack([render_features(labels, bounds, c, lv, embedding) for c in cameras])
            .astype(np.float32) for lv in levels]


def make_sample(sseed: int, rig: RigSpec, embedding: FeatureEmbedding, n_scales: int = 3,
                scene_kw: dict | None = None) -> Sample:
    spec = random_scene_spec(sseed, **(scene_kw or {}))
    labels = generate_scene(sseed, spec)
    cams = make_rig(rig)
    pyr = render_pyramid(labels, spec.bounds, cams, rig.levels, embedding)
    return Sample(sseed, spec, label_pyramid(labels, n_scales), pyr, cams)


def dataset(seed: int, n_scenes: int, rig: RigSpec, split: str = "train", feat_dim: int = 32,
            embed_seed: int = 1234, n_classes: int = 5, scene_kw: dict | None = None) -> list[Sample]:
    emb = FeatureEmbedding.create(embed_seed, n_classes, feat_dim)
    kw = dict(scene_kw or {})
    kw.setdefault("n_classes", n_classes)
    return [make_sample(scene_seed(seed, i, split), rig, emb, scene_kw=kw) for i in range(n_scenes)]
