"""Projection-aware deformable attention.

One layer lifts multi-camera 2D feature pyramids into a set of 3D voxel
queries in three steps:

1. an MLP predicts 3D offsets around each query's reference point; the
   shifted points are projected into every camera with the pinhole model
   and those projections are the sampling locations (no 2D offsets);
2. attention logits get an additive ``s * log(sigma_min + eps)`` bias,
   where ``sigma_min`` is the weakest singular value of the projection
   Jacobian at the sample, treated as a constant for backprop;
3. per-camera, per-channel gates computed from the query and the
   reference-point Jacobian replace plain averaging across cameras.

Every stage can be switched off for ablations: without stage 1 the
layer falls back to learned 2D offsets in normalized image coordinates
shared by all cameras; without stage 2 the bias is dropped; without
stage 3 cameras are averaged uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .geometry import Z_NEAR, CameraModel, project, world_to_camera

INVALID_LOGIT = -1e4


@dataclass
class PadaConfig:
    n_heads: int = 4
    n_points: int = 4
    n_levels: int = 2
    query_dim: int = 64
    feat_dim: int = 32
    bias_scale_init: float = 0.1
    eps: float = 1e-5
    jacobian_input_scale: float = 1000.0
    offset_range: float = 1.0  # meters; the decoder sets 2 voxel pitches
    offset_range_2d: float = 0.05  # normalized image units, stage 1 off
    stage1: bool = True
    stage2: bool = True
    stage3: bool = True

    def __post_init__(self):
        for name in ("n_heads", "n_points", "n_levels", "query_dim", "feat_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def init_pada_params(cfg: PadaConfig, rng: np.random.Generator, dtype=np.float64) -> dict:
    C, H, L, K = cfg.query_dim, cfg.n_heads, cfg.n_levels, cfg.n_points
    odim = 3 if cfg.stage1 else 2
    return {
        "offset1": dc.init_linear(rng, C, C, dtype=dtype),
        "offset2": dc.init_linear(rng, C, H * L * K * odim, zero=True, dtype=dtype),
        "attn": dc.init_linear(rng, C, H * L * K, dtype=dtype),
        "bias_scale": dc.param(np.full((H, L), cfg.bias_scale_init), dtype=dtype),
        "value": dc.init_linear(rng, cfg.feat_dim, C, dtype=dtype),
        "geo1": dc.init_linear(rng, 6, C, dtype=dtype),
        "geo_norm": dc.init_norm(C, dtype),
        "geo2": dc.init_linear(rng, C, C, dtype=dtype),
        "gate1": dc.init_linear(rng, 2 * C, C, dtype=dtype),
        "gate_norm": dc.init_norm(C, dtype),
        "gate2": dc.init_linear(rng, C, C, dtype=dtype),
        "out": dc.init_linear(rng, C, C, zero=True, dtype=dtype),
        "norm": dc.init_norm(C, dtype),
    }


# ------------------------------------------------------------------- stage 1

def predict_offsets(query: Node, params: dict, cfg: PadaConfig) -> Node:
    """(Q, C) queries -> (Q, H, L, K, 3) offsets in meters, |offset| <= range."""
    hid = dc.activation(dc.apply_linear(query, params["offset1"]), "silu")
    raw = dc.apply_linear(hid, params["offset2"])
    bounded = dc.scale(dc.tanh(raw), cfg.offset_range)
    return dc.reshape(bounded, (query.shape[0], cfg.n_heads, cfg.n_levels, cfg.n_points, 3))


def predict_offsets_2d(query: Node, params: dict, cfg: PadaConfig) -> Node:
    hid = dc.activation(dc.apply_linear(query, params["offset1"]), "silu")
    raw = dc.apply_linear(hid, params["offset2"])
    bounded = dc.scale(dc.tanh(raw), cfg.offset_range_2d)
    return dc.reshape(bounded, (query.shape[0], cfg.n_heads, cfg.n_levels, cfg.n_points, 2))


@dataclass
class SampleProjection:
    """Projections of points (..., 3) into N cameras.

    ``uv`` is differentiable w.r.t. the points; the rest are arrays with a
    leading camera axis.  ``jacobian`` is w.r.t. world coordinates.
    """

    uv: Node
    depth: np.ndarray
    in_front: np.ndarray
    in_image: np.ndarray
    jacobian: np.ndarray
    sigma: np.ndarray


def project_samples(points: Node, cameras: Sequence[CameraModel]) -> SampleProjection:
    p = points.value.astype(np.float64)
    uvs, depth, jac, sig, inim = [], [], [], [], []
    for cam in cameras:
        res = project(world_to_camera(p, cam), cam)
        uvs.append(np.stack([res.u, res.v], axis=-1))
        depth.append(res.depth)
        jac.append(res.jacobian @ cam.R)
        sig.append(res.sigma_min)
        inim.append(res.valid)
    n = len(cameras)
    shape = (n,) + p.shape[:-1]
    uv = np.array(uvs).reshape(shape + (2,))
    J = np.array(jac).reshape(shape + (2, 3))
    depth = np.array(depth).reshape(shape)
    dtype = points.value.dtype

    def bw(g):
        return (np.einsum("n...i,n...ij->...j", g, J).astype(dtype),)

    uv_node = dc.custom(uv.astype(dtype), (points,), bw, "project")
    return SampleProjection(uv_node, depth, depth > Z_NEAR, np.array(inim).reshape(shape), J,
                            np.array(sig).reshape(shape))


def sigma_min_node(points: Node, cameras: Sequence[CameraModel]) -> Node:
    """Differentiable sigma_min of the world-frame projection Jacobian,
    shape (N, ...).  Rotation does not change singular values, so the
    camera-frame closed form is used:
    sigma_min^2 = det(J J^T) / lambda_max(J J^T)."""
    out = []
    dtype = points.value.dtype
    for cam in cameras:
        pc = dc.add(dc.linear(points, dc.const(cam.R.T, dtype)), dc.const(cam.t, dtype))
        X, Y, Z = pc[..., 0], pc[..., 1], pc[..., 2]
        front = (Z.value > Z_NEAR).astype(dtype)
        Z = dc.add(dc.mul(Z, front), 1.0 - front)
        ax, ay = cam.fx / cam.width, cam.fy / cam.height
        iz = dc.div(1.0, Z)
        iz2 = dc.mul(iz, iz)
        x = dc.mul(X, iz)
        y = dc.mul(Y, iz)
        a = dc.scale(dc.mul(iz2, dc.add(dc.mul(x, x), 1.0)), ax * ax)
        c = dc.scale(dc.mul(iz2, dc.add(dc.mul(y, y), 1.0)), ay * ay)
        b = dc.scale(dc.mul(iz2, dc.mul(x, y)), ax * ay)
        det = dc.scale(dc.mul(dc.mul(iz2, iz2), dc.add(dc.add(dc.mul(x, x), dc.mul(y, y)), 1.0)),
                       (ax * ay) ** 2)
        half_diff = dc.scale(dc.sub(a, c), 0.5)
        lam_max = dc.add(dc.scale(dc.add(a, c), 0.5),
                         dc.sqrt(dc.add(dc.mul(half_diff, half_diff), dc.mul(b, b))))
        out.append(dc.mul(dc.sqrt(dc.div(det, lam_max)), front))
    stacked = [dc.reshape(o, (1,) + o.shape) for o in out]
    return dc.concat(stacked, axis=0)


# ------------------------------------------------------------------- stage 2

def attention_weights(query: Node, sigma: np.ndarray | Node, valid: np.ndarray, params: dict,
                      cfg: PadaConfig) -> Node:
    """Softmax weights of shape (N, Q, H, L, K), normalized over (L, K)
    per (camera, query, head).

    ``sigma`` holds sigma_min per sample; passing a Node lets callers
    choose between a detached graph value and a live one.  ``valid``
    marks samples that may receive weight.
    """
    Q = query.shape[0]
    H, L, K = cfg.n_heads, cfg.n_levels, cfg.n_points
    N = valid.shape[0]
    dtype = query.value.dtype
    logits = dc.reshape(dc.apply_linear(query, params["attn"]), (1, Q, H, L, K))
    if cfg.stage2:
        sig = sigma if isinstance(sigma, Node) else dc.const(sigma, dtype)
        log_obs = dc.log(dc.add(sig, cfg.eps))
        s = dc.reshape(params["bias_scale"], (1, 1, H, L, 1))
        logits = dc.add(logits, dc.mul(s, log_obs))
    mask = np.where(valid, 0.0, INVALID_LOGIT).astype(dtype)
    logits = dc.add(logits, mask)
    if logits.shape[0] != N:
        logits = dc.broadcast_to(logits, (N, Q, H, L, K))
    w = dc.softmax(dc.reshape(logits, (N, Q, H, L * K)), axis=-1)
    return dc.reshape(w, (N, Q, H, L, K))


# ----------------------------------------------------------------- sampling

def _head_linear(x: Node, lin: dict, n_heads: int) -> Node:
    """Per-head value projection: x (..., H, F) -> (..., H*Ch) where head h
    uses columns h*Ch:(h+1)*Ch of the (F, C) weight."""
    W, b = lin["w"], lin["b"]
    F, C = W.shape
    Ch = C // n_heads
    Wh = W.value.reshape(F, n_heads, Ch)
    out = np.einsum("...hf,fhc->...hc", x.value, Wh)
    out = out.reshape(x.shape[:-2] + (C,)) + b.value

    def bw(g):
        gh = g.reshape(g.shape[:-1] + (n_heads, Ch))
        gx = np.einsum("...hc,fhc->...hf", gh, Wh)
        xf = x.value.reshape(-1, n_heads, F)
        gW = np.einsum("mhf,mhc->fhc", xf, gh.reshape(-1, n_heads, Ch)).reshape(F, C)
        return gx, gW, g.reshape(-1, C).sum(axis=0)

    return dc.custom(out, (x, W, b), bw, "head_linear")


def sample_values(pyramid: Sequence[np.ndarray | Node], uv: Node, weights: Node, params: dict,
                  cfg: PadaConfig) -> Node:
    """Weighted deformable aggregation per camera.

    pyramid[l]: (N, H_l, W_l, F) feature maps; uv: (N, Q, H, L, K, 2);
    weights: (N, Q, H, L, K).  Returns v of shape (N, Q, C).
    """
    N, Q, H, L, K, _ = uv.shape
    acc = None
    for lvl in range(L):
        fmap = pyramid[lvl] if isinstance(pyramid[lvl], Node) else dc.const(pyramid[lvl], uv.value.dtype)
        pts = dc.reshape(uv[:, :, :, lvl], (N, Q * H * K, 2))
        feats = dc.reshape(dc.bilinear_sample(fmap, pts), (N, Q, H, K, fmap.shape[-1]))
        w = dc.reshape(weights[:, :, :, lvl], (N, Q, H, K, 1))
        part = dc.sum(dc.mul(feats, w), axis=3)
        acc = part if acc is None else dc.add(acc, part)
    return _head_linear(acc, params["value"], H)


# ------------------------------------------------------------------- stage 3

def view_gate(query: Node, jac_world: np.ndarray, params: dict, cfg: PadaConfig) -> Node:
    """Per-camera, per-channel gates in (0, 1): (Q, C) x (N, Q, 2, 3) -> (N, Q, C).

    The Jacobian enters as a constant (no gradient reaches camera pose).
    """
    N, Q = jac_world.shape[:2]
    C = query.shape[-1]
    dtype = query.value.dtype
    jin = dc.const((jac_world.reshape(N, Q, 6) * cfg.jacobian_input_scale).astype(dtype))
    g = dc.apply_linear(jin, params["geo1"])
    g = dc.activation(dc.apply_norm(g, params["geo_norm"]), "relu")
    g = dc.apply_linear(g, params["geo2"])
    f = dc.broadcast_to(query, (N, Q, C))
    h = dc.apply_linear(dc.concat([f, g], axis=-1), params["gate1"])
    h = dc.activation(dc.apply_norm(h, params["gate_norm"]), "relu")
    return dc.activation(dc.apply_linear(h, params["gate2"]), "sigmoid")


def fuse_cameras(gammas: Node, values: Node) -> Node:
    """sum_n gamma_n * v_n / sum_n gamma_n along the leading camera axis.

    The denominator is clamped at EPS_DIV, so all-zero gates give 0.
    """
    num = dc.sum(dc.mul(gammas, values), axis=0)
    den = dc.sum(gammas, axis=0)
    if den.shape != num.shape:
        den = dc.broadcast_to(den, num.shape)
    return dc.div(num, den, guard=dc.EPS_DIV)


# -------------------------------------------------------------------- layer

@dataclass
class PadaAux:
    offsets: Node | None = None
    uv: Node | None = None
    valid: np.ndarray | None = None
    weights: Node | None = None
    values: Node | None = None
    gammas: Node | None = None
    fused: Node | None = None
    extras: dict = field(default_factory=dict)


def pada_layer(query: Node, ref_points: np.ndarray, pyramid: Sequence[np.ndarray | Node],
               cameras: Sequence[CameraModel], params: dict, cfg: PadaConfig,
               sigma_mode: str = "detached", aux: PadaAux | None = None,
               sigma_store: dict | None = None, store_key: str = "pada") -> Node:
    """One cross-attention layer over (Q, C) queries with world-space
    reference points (Q, 3).  Returns layernorm(query + out_proj(fused)).

    sigma_mode: "detached" builds sigma_min in the graph and detaches it,
    "const" computes it outside the graph, "live" keeps the gradient path
    (only meaningful as a control in tests).

    ``sigma_store``: when given, sigma_min values are cached under
    ``store_key`` on first use and reused afterwards.  Finite-difference
    checks need this because a detached quantity is, by definition,
    constant w.r.t. the perturbed parameters.
    """
    Q, C = query.shape
    H, L, K = cfg.n_heads, cfg.n_levels, cfg.n_points
    N = len(cameras)
    dtype = query.value.dtype
    if N == 0:
        fused = dc.const(np.zeros((Q, C), dtype=dtype))
    else:
        ref = project_samples(dc.const(ref_points.astype(dtype)), cameras)
        ref_ok = ref.in_image  # (N, Q)
        if cfg.stage1:
            offsets = predict_offsets(query, params, cfg)
            pts = dc.add(offsets, ref_points.reshape(Q, 1, 1, 1, 3).astype(dtype))
            proj = project_samples(pts, cameras)
            uv = proj.uv
            valid = proj.in_front & ref_ok[:, :, None, None, None]
            if sigma_store is not None and store_key in sigma_store:
                sigma = sigma_store[store_key]
            elif not cfg.stage2 or sigma_mode == "const":
                sigma = proj.sigma
            elif sigma_mode == "detached":
                sigma = dc.detach(sigma_min_node(pts, cameras))
            elif sigma_mode == "live":
                sigma = sigma_min_node(pts, cameras)
            else:
                raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
            if sigma_store is not None and store_key not in sigma_store:
                sigma_store[store_key] = np.array(sigma.value if isinstance(sigma, Node) else sigma)
        else:
            offsets = predict_offsets_2d(query, params, cfg)
            uv = dc.add(offsets, ref.uv.value.reshape(N, Q, 1, 1, 1, 2))
            valid = np.broadcast_to(ref_ok[:, :, None, None, None], (N, Q, H, L, K))
            sigma = np.broadcast_to(ref.sigma[:, :, None, None, None], (N, Q, H, L, K))
        weights = attention_weights(query, sigma, valid, params, cfg)
        values = sample_values(pyramid, uv, weights, params, cfg)
        cam_ok = valid.reshape(N, Q, -1).any(axis=-1)[:, :, None].astype(dtype)
        if cfg.stage3:
            gammas = dc.mul(view_gate(query, ref.jacobian, params, cfg), cam_ok)
        else:
            gammas = dc.const(cam_ok)
        fused = fuse_cameras(gammas, values)
        if aux is not None:
            aux.offsets, aux.uv, aux.valid, aux.weights = offsets, uv, valid, weights
            aux.values, aux.gammas = values, gammas
    if aux is not None:
        aux.fused = fused
    out = dc.apply_linear(fused, params["out"])
    return dc.apply_norm(dc.add(query, out), params["norm"])
