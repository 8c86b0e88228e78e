"""Train-and-evaluate runs shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

from .train import RunConfig, evaluate, majority_occupied_class, make_datasets, train


@dataclass
class RunRecord:
    seed: int
    stages: str  # "on" or "off"
    steps: int
    lr: float
    iou: float
    miou: float
    iou_corrupt: float
    miou_corrupt: float
    majority_class: int
    majority_iou: float
    all_free_iou: float
    initial_loss: float | None
    final_loss: float | None
    train_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def run_ablation(seed: int, stages_on: bool = True, steps: int | None = None, lr: float | None = None,
                 corrupt_deg: float = 30.0, base: RunConfig | None = None) -> RunRecord:
    """Train on the default harness, then score val scenes clean and with rotated extrinsics.

    Stages off means all three PA-DA stages are disabled together.
    """
    cfg = replace(base or RunConfig(), seed=seed)
    opt = {k: v for k, v in dict(steps=steps, lr=lr).items() if v is not None}
    cfg = replace(cfg, optim=replace(cfg.optim, **opt))
    if not stages_on:
        cfg = cfg.with_stages(False, False, False)
    data = make_datasets(cfg)
    t0 = time.perf_counter()
    res = train(cfg, data["train"])
    elapsed = time.perf_counter() - t0
    maj = majority_occupied_class([s.labels[-1] for s in data["train"]], cfg.head.n_classes)
    clean = evaluate(res.params, cfg, data["val"], maj)
    bent = evaluate(res.params, cfg, data["val"], maj, corrupt_deg=corrupt_deg, corrupt_seed=seed)
    h = res.history
    return RunRecord(seed, "on" if stages_on else "off", cfg.optim.steps, cfg.optim.lr,
                     clean.model.iou, clean.model.miou, bent.model.iou, bent.model.miou,
                     maj, clean.majority.iou, clean.all_free.iou,
                     h[0]["total"] if h else None, h[-1]["total"] if h else None, round(elapsed, 2))
