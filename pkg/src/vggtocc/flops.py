"""Analytical FLOP accounting for the decoder.

Convention: 1 multiply-accumulate = 2 FLOPs; bias additions count 1 FLOP
each; activations, normalizations and trilinear upsampling count 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .pada import PadaConfig

if TYPE_CHECKING:
    from .decoder import HeadConfig

CONVENTION = ("1 MAC = 2 FLOPs; bias adds counted (1 FLOP each); activations, "
              "normalizations and trilinear upsampling counted as 0")

UNET_NOTE = ("U-Net baseline modeled as transposed conv k=2^3 stride 2 (C_in->C_out) + add + "
             "dense 3^3 conv (C_out->C_out) at fine resolution; channel widths are an "
             "interpretation and do not reproduce the quoted ~73.4G")


@dataclass
class FlopItem:
    name: str
    flops: int
    path: str = "fusion"


@dataclass
class FlopReport:
    title: str
    items: list[FlopItem] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(i.flops for i in self.items)

    def subtotal(self, path: str) -> int:
        return sum(i.flops for i in self.items if i.path == path)

    def add(self, name: str, flops: int, path: str = "fusion") -> None:
        self.items.append(FlopItem(name, int(flops), path))

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "convention": CONVENTION,
            "items": [{"name": i.name, "flops": i.flops, "path": i.path} for i in self.items],
            "total": self.total,
            "notes": self.notes,
        }

    def to_text(self) -> str:
        width = max([len(i.name) for i in self.items] + [5])
        lines = [f"# {self.title}", f"# convention: {CONVENTION}"]
        for i in self.items:
            lines.append(f"{i.name:<{width}}  {i.flops:>16,d}  {i.flops / 1e9:9.4f} G")
        lines.append(f"{'total':<{width}}  {self.total:>16,d}  {self.total / 1e9:9.4f} G")
        lines.extend(f"# note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def linear_flops(n: int, c_in: int, c_out: int, bias: bool = True) -> int:
    return n * (2 * c_in * c_out + (c_out if bias else 0))


FUSION_VARIANTS = ("unet", "none", "direct_add", "scalar_gate", "channel_gate", "channel_gate_dw")


@dataclass(frozen=True)
class FusionDims:
    """One scale transition: coarse grid -> grid doubled in each axis."""

    coarse: tuple[int, int, int] = (100, 100, 8)
    c_in: int = 256
    c_out: int = 64
    gate_hidden: int = 64

    @property
    def n_coarse(self) -> int:
        x, y, z = self.coarse
        return x * y * z

    @property
    def n_fine(self) -> int:
        return 8 * self.n_coarse


def count_fusion_variant(variant: str, dims: FusionDims = FusionDims()) -> FlopReport:
    if variant not in FUSION_VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}")
    nc, nf = dims.n_coarse, dims.n_fine
    rep = FlopReport(f"fusion[{variant}] coarse={dims.coarse} {dims.c_in}->{dims.c_out}")
    if variant == "none":
        return rep
    if variant == "unet":
        # every fine voxel receives exactly one tap of the stride-2 2^3 kernel
        rep.add("deconv k=2^3 s=2", linear_flops(nf, dims.c_in, dims.c_out))
        rep.add("skip add", nf * dims.c_out)
        rep.add("conv 3^3", nf * (2 * 27 * dims.c_out * dims.c_out + dims.c_out))
        rep.notes.append(UNET_NOTE)
        return rep
    rep.add("projection (coarse)", linear_flops(nc, dims.c_in, dims.c_out))
    rep.add("trilinear upsample", 0)
    if variant == "direct_add":
        rep.notes.append("fine-resolution elementwise add not counted")
        return rep
    if variant == "scalar_gate":
        rep.add("gate MLP c_in->1 (coarse)", linear_flops(nc, dims.c_in, 1))
    else:
        rep.add("gate MLP layer 1 (coarse)", linear_flops(nc, dims.c_in, dims.gate_hidden))
        rep.add("gate MLP layer 2 (coarse)", linear_flops(nc, dims.gate_hidden, dims.c_out))
    if variant == "channel_gate_dw":
        rep.add("depthwise conv 3^3 (fine)", nf * (2 * 27 * dims.c_out + dims.c_out))
    return rep


def fusion_table(dims: FusionDims = FusionDims()) -> dict[str, FlopReport]:
    return {v: count_fusion_variant(v, dims) for v in FUSION_VARIANTS}


def fusion_ratio(dims: FusionDims = FusionDims()) -> float:
    return count_fusion_variant("unet", dims).total / count_fusion_variant("channel_gate_dw", dims).total


def count_pada_layer(cfg: PadaConfig, grid_dims: tuple[int, ...], n_cameras: int) -> FlopReport:
    """Itemized cost of one cross-attention layer.

    Items on the "query" path are camera independent; the "attention"
    path scales with the number of cameras.  Bilinear sampling is charged
    8 MACs per sample per channel (4 taps, weight + accumulate), projection
    12 MACs per point per camera (3x4 transform) plus 4 for the pinhole
    division/scale.
    """
    C, F = cfg.query_dim, cfg.feat_dim
    H, L, K = cfg.n_heads, cfg.n_levels, cfg.n_points
    Q, N = int(np.prod(grid_dims)), n_cameras
    S = H * L * K
    odim = 3 if cfg.stage1 else 2
    rep = FlopReport(f"pada Q={Q} N={N} C={C} H={H} L={L} K={K}")
    rep.add("offset MLP", linear_flops(Q, C, C) + linear_flops(Q, C, S * odim), "query")
    rep.add("attention logits", linear_flops(Q, C, S), "query")
    rep.add("projection", 2 * 16 * Q * S * N, "attention")
    if cfg.stage2:
        rep.add("jacobian bias", 2 * Q * S * N, "attention")
    rep.add("bilinear sampling", 2 * 8 * Q * S * N * F, "attention")
    rep.add("weighted aggregation", 2 * Q * S * N * F, "attention")
    rep.add("value projection", N * Q * H * (2 * F * (C // H) + C // H), "attention")
    if cfg.stage3:
        rep.add("geo MLP", linear_flops(N * Q, 6, C) + linear_flops(N * Q, C, C), "attention")
        rep.add("gate MLP", linear_flops(N * Q, 2 * C, C) + linear_flops(N * Q, C, C), "attention")
    rep.add("camera fusion", 2 * N * Q * C, "attention")
    rep.add("output projection", linear_flops(Q, C, C), "query")
    return rep


# -------------------------------------------------------------- parameters

def _lin(i: int, o: int) -> int:
    return i * o + o


def pada_parameters(cfg: PadaConfig) -> int:
    C, F = cfg.query_dim, cfg.feat_dim
    S = cfg.n_heads * cfg.n_levels * cfg.n_points
    odim = 3 if cfg.stage1 else 2
    return (_lin(C, C) + _lin(C, S * odim) + _lin(C, S) + cfg.n_heads * cfg.n_levels + _lin(F, C)
            + _lin(6, C) + 2 * C + _lin(C, C) + _lin(2 * C, C) + 2 * C + _lin(C, C) + _lin(C, C) + 2 * C)


def conv_block_parameters(C: int) -> int:
    return 27 * C + C + 2 * C + _lin(C, 4 * C) + _lin(4 * C, C)


def fusion_parameters(variant: str, c_prev: int, c_curr: int, hidden: int) -> int:
    if variant == "none":
        return 0
    if variant == "unet":
        return _lin(c_prev, 8 * c_curr) + 27 * c_curr * c_curr + c_curr + 2 * c_curr
    n = _lin(c_prev, c_curr)
    if variant in ("scalar_gate", "channel_gate", "channel_gate_dw"):
        n += _lin(c_prev, hidden) + _lin(hidden, 1 if variant == "scalar_gate" else c_curr)
    if variant == "channel_gate_dw":
        n += 27 * c_curr + c_curr + 2 * c_curr
    return n


def report_parameters(cfg: "HeadConfig", frozen: tuple[str, ...] = ()) -> dict[str, int]:
    """Trainable parameter count per module, computed from the config alone.

    Keys: "embed", then "s{i}.cross", "s{i}.conv", "s{i}.split", "s{i}.fuse",
    "s{i}.cls" per scale.  Modules whose key starts with an entry of
    ``frozen`` are left out.
    """
    from .decoder import _variant_at

    out: dict[str, int] = {"embed": int(np.prod(cfg.scales[0].dims)) * cfg.scales[0].channels}
    for s, spec in enumerate(cfg.scales):
        C = spec.channels
        n_cross = spec.blocks.count("cross")
        n_conv = spec.blocks.count("conv")
        if n_cross:
            out[f"s{s}.cross"] = n_cross * pada_parameters(cfg.pada_for(s))
        if n_conv:
            out[f"s{s}.conv"] = n_conv * conv_block_parameters(C)
        if s > 0:
            prev = cfg.scales[s - 1].channels
            out[f"s{s}.split"] = _lin(prev, 8 * C)
            fuse = fusion_parameters(_variant_at(cfg, s), prev, C, cfg.gate_hidden)
            if fuse:
                out[f"s{s}.fuse"] = fuse
        out[f"s{s}.cls"] = _lin(C, cfg.n_classes)
    return {k: v for k, v in out.items() if not any(k.startswith(f) for f in frozen)}


def dumps_reports(reports: dict[str, FlopReport]) -> str:
    return json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True)
