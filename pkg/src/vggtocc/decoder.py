"""Sequential three-scale occupancy head.

A learnable embedding at the coarsest scale is refined block by block;
patch splitting turns each scale's output into the next scale's queries,
and coarse-guided gated fusion blends upsampled coarse features into the
finer grid.  Cross-attention (PA-DA) only runs at the two coarse scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .geometry import CameraModel
from .pada import PadaConfig, init_pada_params, pada_layer

FUSION_VARIANTS = ("unet", "none", "direct_add", "scalar_gate", "channel_gate", "channel_gate_dw")
SCALE_WEIGHTS = (0.5, 0.75, 1.0)


@dataclass
class ScaleSpec:
    dims: tuple[int, int, int]
    channels: int
    blocks: tuple[str, ...]

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.blocks = tuple(self.blocks)
        if any(b not in ("cross", "conv") for b in self.blocks):
            raise ValueError(f"unknown block kind in {self.blocks}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))


def _toy_scales():
    return (
        ScaleSpec((5, 5, 1), 64, ("cross", "conv", "cross", "conv")),
        ScaleSpec((10, 10, 2), 64, ("cross", "conv", "conv")),
        ScaleSpec((20, 20, 4), 32, ("conv", "conv")),
    )


@dataclass
class HeadConfig:
    scales: tuple[ScaleSpec, ...] = field(default_factory=_toy_scales)
    bounds: tuple[tuple[float, float], ...] = ((-5.0, 5.0), (-5.0, 5.0), (0.0, 2.0))
    n_classes: int = 5
    feat_dim: int = 32
    pada: PadaConfig = field(default_factory=PadaConfig)
    gate_hidden: int = 32
    fusion: str = "channel_gate_dw"
    fuse_s0_s1: bool = True

    def __post_init__(self):
        self.scales = tuple(s if isinstance(s, ScaleSpec) else ScaleSpec(**s) for s in self.scales)
        self.bounds = tuple(tuple(b) for b in self.bounds)
        if isinstance(self.pada, dict):
            self.pada = PadaConfig(**self.pada)
        if self.fusion not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion!r}")
        for a, b in zip(self.scales, self.scales[1:]):
            if tuple(2 * d for d in a.dims) != b.dims:
                raise ValueError("successive scales must double every spatial dim")
        if "cross" in self.scales[-1].blocks:
            raise ValueError("the fine scale may not contain cross-attention blocks")

    @classmethod
    def full_size(cls, **kw) -> "HeadConfig":
        """Full-size dims (used for parameter and FLOP reports only)."""
        scales = (
            ScaleSpec((50, 50, 4), 256, ("cross", "conv", "cross", "conv")),
            ScaleSpec((100, 100, 8), 256, ("cross", "conv", "conv")),
            ScaleSpec((200, 200, 16), 64, ("conv", "conv")),
        )
        base = dict(scales=scales, bounds=((-50.0, 50.0), (-50.0, 50.0), (-5.0, 3.0)),
                    n_classes=17, feat_dim=1024, gate_hidden=64)
        base.update(kw)
        return cls(**base)

    def pitch(self, s: int) -> np.ndarray:
        dims = np.array(self.scales[s].dims)
        ext = np.array([hi - lo for lo, hi in self.bounds])
        return ext / dims

    def pada_for(self, s: int) -> PadaConfig:
        return replace(self.pada, query_dim=self.scales[s].channels, feat_dim=self.feat_dim,
                       offset_range=float(2.0 * self.pitch(s).mean()))

    def voxel_centers(self, s: int) -> np.ndarray:
        """(X*Y*Z, 3) world centers in row-major (x, y, z) order."""
        dims = self.scales[s].dims
        axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for (lo, hi), n in zip(self.bounds, dims)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, axis=-1).reshape(-1, 3)


@dataclass
class HeadTrace:
    """Instrumentation: block kinds executed per scale, in order."""

    blocks: dict[int, list[str]] = field(default_factory=dict)

    def record(self, scale: int, kind: str) -> None:
        self.blocks.setdefault(scale, []).append(kind)

    def count(self, scale: int, kind: str) -> int:
        return self.blocks.get(scale, []).count(kind)


@dataclass
class HeadOutput:
    logits: list[Node]
    gates: list[np.ndarray]
    trace: HeadTrace


# ------------------------------------------------------------------ blocks

def init_conv_block(rng, C: int, dtype=np.float64) -> dict:
    return {
        "dw": dc.param(rng.normal(0, 1 / np.sqrt(27), size=(3, 3, 3, C)), dtype=dtype),
        "dw_b": dc.param(np.zeros(C), dtype=dtype),
        "norm": dc.init_norm(C, dtype),
        "pw1": dc.init_linear(rng, C, 4 * C, dtype=dtype),
        "pw2": dc.init_linear(rng, 4 * C, C, zero=True, dtype=dtype),
    }


def conv_block(grid: Node, p: dict) -> Node:
    """dwconv -> layernorm -> pointwise MLP (C -> 4C -> C) -> residual."""
    h = dc.dwconv3d(grid, p["dw"], p["dw_b"])
    h = dc.apply_norm(h, p["norm"])
    h = dc.activation(dc.apply_linear(h, p["pw1"]), "silu")
    h = dc.apply_linear(h, p["pw2"])
    return dc.add(grid, h)


def init_patch_split(rng, c_in: int, c_out: int, dtype=np.float64) -> dict:
    return dc.init_linear(rng, c_in, 8 * c_out, dtype=dtype)


def patch_split(grid: Node, p: dict) -> Node:
    """(X, Y, Z, C_in) -> (2X, 2Y, 2Z, C_out); each parent feeds its 2x2x2 children."""
    X, Y, Z, _ = grid.shape
    c_out = p["w"].shape[1] // 8
    h = dc.apply_linear(grid, p)
    h = dc.reshape(h, (X, Y, Z, 2, 2, 2, c_out))
    h = dc.transpose(h, (0, 3, 1, 4, 2, 5, 6))
    return dc.reshape(h, (2 * X, 2 * Y, 2 * Z, c_out))


def init_fusion(rng, c_prev: int, c_curr: int, hidden: int, variant: str, dtype=np.float64) -> dict:
    if variant == "none":
        return {}
    if variant == "unet":
        return {
            "deconv": init_patch_split(rng, c_prev, c_curr, dtype),
            "conv": dc.param(rng.normal(0, 1 / np.sqrt(27 * c_curr), size=(3, 3, 3, c_curr, c_curr)),
                             dtype=dtype),
            "conv_b": dc.param(np.zeros(c_curr), dtype=dtype),
            "norm": dc.init_norm(c_curr, dtype),
        }
    p = {"proj": dc.init_linear(rng, c_prev, c_curr, dtype=dtype)}
    if variant in ("scalar_gate", "channel_gate", "channel_gate_dw"):
        out = 1 if variant == "scalar_gate" else c_curr
        p["gate1"] = dc.init_linear(rng, c_prev, hidden, dtype=dtype)
        p["gate2"] = dc.init_linear(rng, hidden, out, dtype=dtype)
    if variant == "channel_gate_dw":
        p["dw"] = dc.param(rng.normal(0, 1 / np.sqrt(27), size=(3, 3, 3, c_curr)), dtype=dtype)
        p["dw_b"] = dc.param(np.zeros(c_curr), dtype=dtype)
        p["norm"] = dc.init_norm(c_curr, dtype)
    return p


@dataclass
class FuseAux:
    gate: Node | None = None
    pre_smooth: Node | None = None
    upsampled: Node | None = None


def coarse_gated_fuse(h_prev: Node, h_curr: Node, p: dict, variant: str = "channel_gate_dw",
                      aux: FuseAux | None = None) -> Node:
    """Blend upsampled coarse features into a grid of twice the resolution.

    Gates are computed at coarse resolution and upsampled; the projection
    also runs before upsampling.
    """
    if tuple(2 * d for d in h_prev.shape[:3]) != tuple(h_curr.shape[:3]):
        raise ValueError(f"coarse dims {h_prev.shape[:3]} are not half of {h_curr.shape[:3]}")
    if variant == "none":
        return h_curr
    if variant == "unet":
        up = patch_split(h_prev, p["deconv"])
        h = dc.conv3d(dc.add(up, h_curr), p["conv"], p["conv_b"])
        return dc.apply_norm(h, p["norm"])
    up = dc.trilinear_upsample(dc.apply_linear(h_prev, p["proj"]))
    if aux is not None:
        aux.upsampled = up
    if variant == "direct_add":
        return dc.add(h_curr, up)
    g = dc.activation(dc.apply_linear(h_prev, p["gate1"]), "silu")
    g = dc.activation(dc.apply_linear(g, p["gate2"]), "sigmoid")
    g_up = dc.trilinear_upsample(g)
    fused = dc.add(dc.mul(g_up, up), dc.mul(dc.sub(1.0, g_up), h_curr))
    if aux is not None:
        aux.gate, aux.pre_smooth = g, fused
    if variant != "channel_gate_dw":
        return fused
    return dc.apply_norm(dc.dwconv3d(fused, p["dw"], p["dw_b"]), p["norm"])


# -------------------------------------------------------------------- head

def init_head_params(cfg: HeadConfig, seed: int = 0, dtype=np.float64) -> dict:
    rng = np.random.default_rng(seed)
    s0 = cfg.scales[0]
    params: dict = {"embed": dc.param(rng.normal(0, 1, size=s0.dims + (s0.channels,)), dtype=dtype)}
    for s, spec in enumerate(cfg.scales):
        blocks = {}
        for i, kind in enumerate(spec.blocks):
            if kind == "cross":
                blocks[f"b{i}"] = init_pada_params(cfg.pada_for(s), rng, dtype)
            else:
                blocks[f"b{i}"] = init_conv_block(rng, spec.channels, dtype)
        scale_p: dict = {"blocks": blocks}
        if s > 0:
            prev = cfg.scales[s - 1].channels
            scale_p["split"] = init_patch_split(rng, prev, spec.channels, dtype)
            variant = _variant_at(cfg, s)
            scale_p["fuse"] = init_fusion(rng, prev, spec.channels, cfg.gate_hidden, variant, dtype)
        scale_p["cls"] = dc.init_linear(rng, spec.channels, cfg.n_classes, dtype=dtype)
        params[f"s{s}"] = scale_p
    return params


def _variant_at(cfg: HeadConfig, s: int) -> str:
    if s == len(cfg.scales) - 1:
        return cfg.fusion
    return "channel_gate_dw" if cfg.fuse_s0_s1 else "none"


def head_forward(params: dict, cfg: HeadConfig, pyramid: Sequence[np.ndarray],
                 cameras: Sequence[CameraModel], trace: HeadTrace | None = None,
                 sigma_mode: str = "detached", sigma_store: dict | None = None) -> HeadOutput:
    """Run all scales.  ``pyramid[l]`` holds (N, H_l, W_l, F) feature maps
    for the N cameras."""
    trace = trace if trace is not None else HeadTrace()
    logits, gates = [], []
    prev_out = None
    for s, spec in enumerate(cfg.scales):
        sp = params[f"s{s}"]
        h = params["embed"] if s == 0 else patch_split(prev_out, sp["split"])
        X, Y, Z, C = h.shape
        refs = cfg.voxel_centers(s)
        pcfg = cfg.pada_for(s)
        for i, kind in enumerate(spec.blocks):
            trace.record(s, kind)
            bp = sp["blocks"][f"b{i}"]
            if kind == "cross":
                q = dc.reshape(h, (X * Y * Z, C))
                q = pada_layer(q, refs, pyramid, cameras, bp, pcfg, sigma_mode=sigma_mode,
                               sigma_store=sigma_store, store_key=f"s{s}.b{i}")
                h = dc.reshape(q, (X, Y, Z, C))
            else:
                h = conv_block(h, bp)
        if s > 0:
            fa = FuseAux()
            h = coarse_gated_fuse(prev_out, h, sp["fuse"], _variant_at(cfg, s), fa)
            if fa.gate is not None:
                gates.append(np.array(fa.gate.value))
        logits.append(dc.apply_linear(h, sp["cls"]))
        prev_out = h
    return HeadOutput(logits, gates, trace)


def count_parameters(params: dict, frozen: Sequence[str] = ()) -> dict[str, int]:
    """Trainable parameter counts grouped by top two name components.

    Names starting with any prefix in ``frozen`` are excluded.
    """
    out: dict[str, int] = {}
    for name, p in dc.flatten_params(params).items():
        if any(name.startswith(f) for f in frozen):
            continue
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0].startswith("s") and len(parts) > 3 else ".".join(parts[:2])
        out[key] = out.get(key, 0) + int(p.value.size)
    return out
