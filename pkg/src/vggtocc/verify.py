"""Finite-difference gradient suite and the detach-contract check.

Shared by the ``gradcheck`` CLI command and the tests.  Everything runs
in float64 on small shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .decoder import HeadConfig, ScaleSpec, head_forward, init_head_params
from .geometry import CameraModel, look_from
from .objective import class_weights, label_pyramid, total_loss
from .pada import PadaConfig, init_pada_params, pada_layer

OP_TOL = 1e-5
LAYER_TOL = 1e-5
HEAD_TOL = 1e-4
HEAD_REL_FLOOR = 1e-3
DETACH_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} max rel err {self.error:.3e}  (tol {self.tol:g})"


def _weighted_sum(out: dc.Node, w: np.ndarray) -> dc.Node:
    return dc.sum(dc.mul(out, w))


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    """name -> (builder(params) -> Node, params)."""
    def P(*shape, lo=None):
        v = rng.normal(size=shape)
        if lo is not None:
            v = np.abs(v) + lo
        return dc.param(v)

    cases = {}
    a, b = P(3, 4), P(4)
    cases["add"] = (lambda a, b: dc.add(a, b), [a, b])
    cases["sub"] = (lambda a, b: dc.sub(a, b), [P(3, 4), P(3, 1)])
    cases["mul"] = (lambda a, b: dc.mul(a, b), [P(3, 4), P(1, 4)])
    cases["div"] = (lambda a, b: dc.div(a, b), [P(3, 4), P(3, 4, lo=0.5)])
    cases["div_guarded"] = (lambda a, b: dc.div(a, b, guard=1e-8), [P(3, 4), P(3, 4, lo=0.5)])
    cases["scale"] = (lambda a: dc.scale(a, 2.5), [P(5)])
    cases["log"] = (lambda a: dc.log(a), [P(6, lo=0.3)])
    cases["exp"] = (lambda a: dc.exp(a), [P(6)])
    cases["sqrt"] = (lambda a: dc.sqrt(a), [P(6, lo=0.3)])
    cases["tanh"] = (lambda a: dc.tanh(a), [P(6)])
    for kind in ("relu", "sigmoid", "silu", "tanh"):
        cases[f"activation_{kind}"] = (lambda a, k=kind: dc.activation(a, k), [P(4, 5)])
    cases["sum_axis"] = (lambda a: dc.sum(a, axis=1, keepdims=True), [P(3, 4)])
    cases["mean"] = (lambda a: dc.mean(a, axis=0), [P(3, 4)])
    cases["softmax"] = (lambda a: dc.softmax(a, axis=-1), [P(3, 5)])
    cases["log_softmax"] = (lambda a: dc.log_softmax(a, axis=-1), [P(3, 5)])
    cases["logsumexp"] = (lambda a: dc.logsumexp(a, axis=-1), [P(3, 5)])
    cases["reshape"] = (lambda a: dc.reshape(a, (4, 3)), [P(3, 4)])
    cases["transpose"] = (lambda a: dc.transpose(a, (2, 0, 1)), [P(2, 3, 4)])
    cases["concat"] = (lambda a, b: dc.concat([a, b], axis=-1), [P(2, 3), P(2, 2)])
    cases["getitem"] = (lambda a: a[1:, ::2], [P(3, 5)])
    cases["broadcast_to"] = (lambda a: dc.broadcast_to(a, (3, 4)), [P(1, 4)])
    perm = np.array([[2, 0], [0, 0], [1, 2], [0, 1]])
    cases["take"] = (lambda a: dc.take(a, perm, axis=0), [P(3, 2)])
    cases["linear"] = (lambda x, w, b: dc.linear(x, w, b), [P(2, 3, 4), P(4, 5), P(5)])
    cases["layernorm"] = (lambda x, g, b: dc.layernorm(x, g, b), [P(3, 6), P(6), P(6)])
    uv0 = rng.uniform(0.1, 0.9, size=(2, 5, 2))
    cases["bilinear_sample"] = (lambda f, uv: dc.bilinear_sample(f, uv), [P(2, 4, 6, 3), dc.param(uv0)])
    cases["trilinear_upsample"] = (lambda g: dc.trilinear_upsample(g), [P(2, 3, 2, 2)])
    cases["dwconv3d"] = (lambda g, k, b: dc.dwconv3d(g, k, b), [P(3, 3, 2, 2), P(3, 3, 3, 2), P(2)])
    cases["conv3d"] = (lambda g, k, b: dc.conv3d(g, k, b), [P(3, 2, 2, 2), P(3, 3, 3, 2, 3), P(3)])
    return cases


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, params) in _op_cases(rng).items():
        y = fn(*params)
        w = rng.normal(size=y.shape)
        err = dc.grad_check(lambda: _weighted_sum(fn(*params), w), params)
        out.append(CheckResult(f"op:{name}", err, OP_TOL))
    return out


# ------------------------------------------------------------------ layers

def ring_cameras(n: int = 4, radius: float = 6.0, height: float = 1.0, width: int = 12,
                 img_height: int = 8, hfov_deg: float = 90.0) -> list[CameraModel]:
    """Cameras on a circle facing the origin, so most points are seen by several."""
    fx = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
    cams = []
    for i in range(n):
        phi = 2 * np.pi * i / n
        c = (radius * np.cos(phi), radius * np.sin(phi), height)
        R, t = look_from(c, phi + np.pi, 0.1)
        cams.append(CameraModel(fx, fx, width / 2, img_height / 2, width, img_height, R, t))
    return cams


def pada_rig(seed: int = 0, cfg: PadaConfig | None = None, n_queries: int = 5):
    rng = np.random.default_rng(seed)
    cfg = cfg or PadaConfig(n_heads=2, n_points=2, n_levels=2, query_dim=8, feat_dim=6,
                            offset_range=1.0, bias_scale_init=0.5)
    cams = ring_cameras()
    pyramid = [rng.normal(size=(len(cams), 8, 12, cfg.feat_dim)),
               rng.normal(size=(len(cams), 4, 6, cfg.feat_dim))][: cfg.n_levels]
    refs = rng.uniform(-1.5, 1.5, size=(n_queries, 3)) * np.array([1, 1, 0.3]) + np.array([0, 0, 1.0])
    params = init_pada_params(cfg, rng, np.float64)
    # zero-initialized projections would make several gradients vanish
    for p in dc.flatten_params(params).values():
        if not np.any(p.value):
            p.value = rng.normal(0, 0.3, size=p.value.shape)
    query = dc.param(rng.normal(size=(n_queries, cfg.query_dim)))
    return cfg, cams, pyramid, refs, params, query


def check_pada(seed: int = 0) -> list[CheckResult]:
    out = []
    for stages in ((True, True, True), (False, False, False)):
        base = PadaConfig(n_heads=2, n_points=2, n_levels=2, query_dim=8, feat_dim=6, offset_range=1.0,
                          bias_scale_init=0.5, stage1=stages[0], stage2=stages[1], stage3=stages[2])
        cfg, cams, pyramid, refs, params, query = pada_rig(seed, base)
        rng = np.random.default_rng(seed + 1)
        w = rng.normal(size=(refs.shape[0], cfg.query_dim))
        store: dict = {}
        fn = lambda: _weighted_sum(pada_layer(query, refs, pyramid, cams, params, cfg, sigma_store=store), w)
        allp = dict(dc.flatten_params(params))
        allp["query"] = query
        err = dc.grad_check(fn, allp)
        tag = "on" if stages[0] else "off"
        out.append(CheckResult(f"pada_layer[stages {tag}]", err, LAYER_TOL))
    return out


def tiny_head_config(**kw) -> HeadConfig:
    scales = (
        ScaleSpec((2, 2, 1), 8, ("cross", "conv", "cross", "conv")),
        ScaleSpec((4, 4, 2), 8, ("cross", "conv", "conv")),
        ScaleSpec((8, 8, 4), 4, ("conv", "conv")),
    )
    pada = PadaConfig(n_heads=2, n_points=2, n_levels=2, bias_scale_init=0.5)
    base = dict(scales=scales, bounds=((-2.0, 2.0), (-2.0, 2.0), (0.0, 2.0)), feat_dim=6, pada=pada,
                gate_hidden=8)
    base.update(kw)
    return HeadConfig(**base)


def _randomize_zeros(params: dict, rng: np.random.Generator, scale: float = 0.3) -> None:
    for p in dc.flatten_params(params).values():
        if not np.any(p.value):
            p.value = rng.normal(0, scale, size=p.value.shape)


def check_head(seed: int = 0, max_entries: int | None = 4, cfg: HeadConfig | None = None) -> CheckResult:
    """Full head + total loss against finite differences (sampled entries per tensor)."""
    rng = np.random.default_rng(seed)
    cfg = cfg or tiny_head_config()
    cams = ring_cameras(radius=5.0)
    pyramid = [rng.normal(size=(len(cams), 8, 12, cfg.feat_dim)), rng.normal(size=(len(cams), 4, 6, cfg.feat_dim))]
    params = init_head_params(cfg, seed, np.float64)
    _randomize_zeros(params, rng)
    labels = label_pyramid(rng.integers(0, cfg.n_classes, size=cfg.scales[-1].dims).astype(np.uint8))
    weights = class_weights([labels[-1]], cfg.n_classes)
    store: dict = {}

    def fn():
        out = head_forward(params, cfg, pyramid, cams, sigma_store=store)
        return total_loss(out.logits, labels, weights)[0]

    err = dc.grad_check(fn, dc.flatten_params(params), max_entries=max_entries,
                        rng=np.random.default_rng(seed + 2), rel_floor=HEAD_REL_FLOOR)
    return CheckResult("head+total_loss", err, HEAD_TOL)


def check_head_toy(seed: int = 0, max_entries: int = 2) -> CheckResult:
    """Same check at the default harness dims on a rendered synthetic scene."""
    from .synth import RigSpec, dataset

    rng = np.random.default_rng(seed)
    cfg = HeadConfig()
    sample = dataset(seed, 1, RigSpec(), feat_dim=cfg.feat_dim)[0]
    pyramid = [f.astype(np.float64) for f in sample.pyramid]
    params = init_head_params(cfg, seed, np.float64)
    _randomize_zeros(params, rng, 0.05)
    weights = class_weights([sample.labels[-1]], cfg.n_classes)
    store: dict = {}

    def fn():
        out = head_forward(params, cfg, pyramid, sample.cameras, sigma_store=store)
        return total_loss(out.logits, sample.labels, weights)[0]

    err = dc.grad_check(fn, dc.flatten_params(params), max_entries=max_entries,
                        rng=np.random.default_rng(seed + 2), rel_floor=HEAD_REL_FLOOR)
    return CheckResult("head+total_loss[toy dims]", err, HEAD_TOL)


def check_total_loss(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    dims = [(2, 2, 1), (4, 4, 2)]
    labels = label_pyramid(rng.integers(0, 4, size=dims[-1]).astype(np.uint8), 2)
    logits = [dc.param(rng.normal(size=d + (4,))) for d in dims]
    weights = class_weights(labels, 4)
    err = dc.grad_check(lambda: total_loss(logits, labels, weights, (0.75, 1.0))[0], logits)
    return CheckResult("total_loss", err, HEAD_TOL)


# ------------------------------------------------------------------ detach

def detach_contract(seed: int = 0) -> tuple[float, float]:
    """Max |grad(detached) - grad(frozen)| over offset-MLP parameters, and
    the same difference with the sigma path left live (a control that must
    be nonzero for the check to mean anything)."""
    cfg, cams, pyramid, refs, params, query = pada_rig(seed)
    w = np.random.default_rng(seed + 1).normal(size=(refs.shape[0], cfg.query_dim))
    names = [k for k in dc.flatten_params(params) if k.startswith("offset")]

    def grads(mode):
        flat = dc.flatten_params(params)
        dc.zero_grad(flat.values())
        dc.backward(_weighted_sum(pada_layer(query, refs, pyramid, cams, params, cfg, sigma_mode=mode), w))
        g = {k: np.zeros_like(flat[k].value) if flat[k].grad is None else flat[k].grad.copy() for k in names}
        dc.zero_grad(flat.values())
        return g

    frozen, detached, live = grads("const"), grads("detached"), grads("live")
    d_det = max(float(np.abs(detached[k] - frozen[k]).max()) for k in names)
    d_live = max(float(np.abs(live[k] - frozen[k]).max()) for k in names)
    return d_det, d_live


def run_all(seed: int = 0, head_entries: int | None = 4) -> list[CheckResult]:
    results = check_ops(seed)
    results += check_pada(seed)
    results.append(check_total_loss(seed))
    results.append(check_head(seed, head_entries))
    d_det, _ = detach_contract(seed)
    results.append(CheckResult("detach_contract", d_det, DETACH_TOL))
    return results
