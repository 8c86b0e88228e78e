"""Run configuration, AdamW training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .decoder import SCALE_WEIGHTS, HeadConfig, ScaleSpec, head_forward, init_head_params
from .formats import load_vocp, save_vocp
from .geometry import CameraModel, rotation_about
from .objective import FREE, LOSS_TERMS, Metrics, class_weights, iou_miou, total_loss
from .pada import PadaConfig
from .synth import RigSpec, Sample, dataset

log = logging.getLogger("vggtocc")


class DivergenceError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    min_lr: float = 1e-6
    warmup_steps: int = 50
    clip_norm: float = 35.0
    batch_size: int = 1
    steps: int = 500
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("lr", "min_lr", "clip_norm", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("invalid optimizer settings")


@dataclass
class RunConfig:
    seed: int = 0
    n_train: int = 64
    n_val: int = 16
    embed_seed: int = 1234
    rig: RigSpec = field(default_factory=RigSpec)
    head: HeadConfig = field(default_factory=HeadConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: dict = field(default_factory=lambda: {t: True for t in LOSS_TERMS})
    label_smoothing: float = 0.1
    scale_weights: tuple[float, ...] = SCALE_WEIGHTS

    def __post_init__(self):
        if isinstance(self.rig, dict):
            self.rig = RigSpec(**self.rig)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        unknown = set(self.loss) - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        self.loss = {t: bool(self.loss.get(t, True)) for t in LOSS_TERMS}
        self.scale_weights = tuple(self.scale_weights)

    def with_stages(self, stage1=None, stage2=None, stage3=None) -> "RunConfig":
        kw = {k: v for k, v in dict(stage1=stage1, stage2=stage2, stage3=stage3).items() if v is not None}
        return replace(self, head=replace(self.head, pada=replace(self.head.pada, **kw)))

    def with_fusion(self, fusion: str) -> "RunConfig":
        return replace(self, head=replace(self.head, fusion=fusion))

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "head" in d and isinstance(d["head"], dict):
            h = dict(d["head"])
            if "scales" in h:
                h["scales"] = tuple(ScaleSpec(**s) if isinstance(s, dict) else s for s in h["scales"])
            if isinstance(h.get("pada"), dict):
                h["pada"] = PadaConfig(**h["pada"])
            d["head"] = HeadConfig(**h)
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --------------------------------------------------------------- optimizer

def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``lr``, then cosine decay to ``min_lr`` at the last step."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * frac))


class AdamW:
    def __init__(self, params: dict[str, dc.Node], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k].astype(p.value.dtype, copy=False)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.cfg.eps)
            p.value = (p.value * (1 - lr * self.cfg.weight_decay) - lr * upd).astype(p.value.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ------------------------------------------------------------------- model

def param_arrays(params: dict) -> dict[str, np.ndarray]:
    return {k: np.asarray(p.value, dtype=np.float32) for k, p in dc.flatten_params(params).items()}


def init_model(cfg: RunConfig, dtype=np.float32) -> dict:
    return init_head_params(cfg.head, seed=cfg.seed, dtype=dtype)


def load_into(params: dict, arrays: dict[str, np.ndarray]) -> None:
    flat = dc.flatten_params(params)
    missing = sorted(set(flat) - set(arrays))
    extra = sorted(set(arrays) - set(flat))
    if missing or extra:
        raise CheckpointMismatch(f"checkpoint tensors do not match model: missing {missing[:5]}, "
                                 f"unexpected {extra[:5]}")
    for k, p in flat.items():
        if tuple(arrays[k].shape) != tuple(p.value.shape):
            raise CheckpointMismatch(f"tensor {k}: checkpoint shape {tuple(arrays[k].shape)} "
                                     f"!= model shape {tuple(p.value.shape)}")
        p.value = np.array(arrays[k], dtype=p.value.dtype)


def save_checkpoint(path, params: dict) -> None:
    save_vocp(path, param_arrays(params))


def load_checkpoint(path, cfg: RunConfig) -> dict:
    params = init_model(cfg)
    load_into(params, load_vocp(path))
    return params


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: dict
    history: list[dict]
    weights: np.ndarray


def make_datasets(cfg: RunConfig, splits: Sequence[str] = ("train", "val")) -> dict[str, list[Sample]]:
    n = {"train": cfg.n_train, "val": cfg.n_val}
    return {s: dataset(cfg.seed, n[s], cfg.rig, s, feat_dim=cfg.head.feat_dim, embed_seed=cfg.embed_seed,
                       n_classes=cfg.head.n_classes) for s in splits}


def sample_loss(params, cfg: RunConfig, sample: Sample, weights: np.ndarray):
    out = head_forward(params, cfg.head, sample.pyramid, sample.cameras)
    return total_loss(out.logits, sample.labels, weights, cfg.scale_weights, cfg.label_smoothing, cfg.loss)


def train(cfg: RunConfig, train_set: Sequence[Sample], log_path=None, params: dict | None = None) -> TrainResult:
    params = params if params is not None else init_model(cfg)
    flat = dc.flatten_params(params)
    weights = class_weights([s.labels[-1] for s in train_set], cfg.head.n_classes)
    opt = AdamW(flat, cfg.optim)
    order_rng = np.random.default_rng(cfg.seed + 17)
    order: list[int] = []
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.optim.steps):
            grads = {k: np.zeros_like(p.value) for k, p in flat.items()}
            parts = []
            for _ in range(cfg.optim.batch_size):
                if not order:
                    order = list(order_rng.permutation(len(train_set)))
                sample = train_set[order.pop(0)]
                dc.zero_grad(flat.values())
                loss, br = sample_loss(params, cfg, sample, weights)
                if not np.isfinite(loss.value):
                    raise DivergenceError(f"non-finite loss at step {step}")
                dc.backward(loss)
                for k, p in flat.items():
                    if p.grad is not None:
                        grads[k] += p.grad / cfg.optim.batch_size
                parts.append(br)
            gnorm = clip_by_global_norm(grads, cfg.optim.clip_norm)
            if not np.isfinite(gnorm):
                raise DivergenceError(f"non-finite gradient norm at step {step}")
            lr = lr_at(step, cfg.optim)
            opt.step(grads, lr)
            rec = {"step": step, "lr": lr, "grad_norm": gnorm}
            for k in LOSS_TERMS + ("total",):
                rec[k] = float(np.mean([getattr(b, k) for b in parts]))
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if step % 50 == 0 or step == cfg.optim.steps - 1:
                log.info("step %d loss %.4f lr %.2e |g| %.3f", step, rec["total"], lr, gnorm)
    finally:
        if fh:
            fh.close()
    dc.zero_grad(flat.values())
    return TrainResult(params, history, weights)


# -------------------------------------------------------------- evaluation

def predict(params, cfg: RunConfig, sample: Sample, cameras: Sequence[CameraModel] | None = None) -> np.ndarray:
    cams = sample.cameras if cameras is None else cameras
    out = head_forward(params, cfg.head, sample.pyramid, cams)
    return np.argmax(out.logits[-1].value, axis=-1)


def corrupt_extrinsics(cameras: Sequence[CameraModel], angle_deg: float, rng: np.random.Generator
                       ) -> list[CameraModel]:
    """Rotate each camera about its own center by ``angle_deg`` around a random axis.

    The feature maps stay as rendered, so the head now looks up features
    at the wrong pixels.
    """
    out = []
    for cam in cameras:
        axis = rng.normal(size=3)
        Q = rotation_about(axis / np.linalg.norm(axis), math.radians(angle_deg))
        R = Q @ cam.R
        out.append(cam.with_pose(R, -R @ cam.center))
    return out


def majority_occupied_class(label_grids: Sequence[np.ndarray], n_classes: int) -> int:
    counts = sum(np.bincount(np.asarray(g).ravel(), minlength=n_classes)[:n_classes] for g in label_grids)
    counts = np.asarray(counts).copy()
    counts[FREE] = -1
    return int(np.argmax(counts))


@dataclass
class EvalReport:
    model: Metrics
    all_free: Metrics
    majority: Metrics
    majority_class: int

    def as_dict(self) -> dict:
        def m(x: Metrics):
            return {"iou": x.iou, "miou": x.miou, "class_iou": [None if np.isnan(v) else float(v)
                                                                for v in x.class_iou]}
        return {"model": m(self.model), "all_free": m(self.all_free), "majority": m(self.majority),
                "majority_class": self.majority_class}


def evaluate(params, cfg: RunConfig, samples: Sequence[Sample], majority_class: int,
             corrupt_deg: float = 0.0, corrupt_seed: int = 0, threads: int = 1) -> EvalReport:
    n = cfg.head.n_classes
    rng = np.random.default_rng(corrupt_seed)
    cams = [corrupt_extrinsics(s.cameras, corrupt_deg, rng) if corrupt_deg else s.cameras for s in samples]

    def one(i):
        return predict(params, cfg, samples[i], cams[i])

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            preds = list(ex.map(one, range(len(samples))))
    else:
        preds = [one(i) for i in range(len(samples))]
    model = Metrics.empty(n)
    free = Metrics.empty(n)
    maj = Metrics.empty(n)
    for s, p in zip(samples, preds):
        gt = s.labels[-1]
        model = model + iou_miou(p, gt, n)
        free = free + iou_miou(np.full_like(gt, FREE), gt, n)
        maj = maj + iou_miou(np.full_like(gt, majority_class), gt, n)
    return EvalReport(model, free, maj, majority_class)


def config_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)

