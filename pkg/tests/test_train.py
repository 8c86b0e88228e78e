import json
import math

import numpy as np
import pytest

from vggtocc import diffcore as dc
from vggtocc.geometry import CameraModel
from vggtocc.synth import RigSpec
from vggtocc.train import (
    CheckpointMismatch, DivergenceError, OptimConfig, RunConfig, clip_by_global_norm, corrupt_extrinsics,
    evaluate, init_model, load_checkpoint, load_into, lr_at, majority_occupied_class, make_datasets,
    param_arrays, save_checkpoint, train,
)


def small_cfg(**kw):
    base = dict(n_train=2, n_val=1, rig=RigSpec(n_cameras=2, levels=((8, 12), (4, 6))),
                optim=OptimConfig(steps=3, warmup_steps=1))
    base.update(kw)
    return RunConfig(**base)


def test_lr_schedule():
    cfg = OptimConfig(lr=1e-3, min_lr=1e-5, warmup_steps=10, steps=110)
    assert lr_at(0, cfg) == pytest.approx(1e-4)
    assert lr_at(9, cfg) == pytest.approx(1e-3)
    assert lr_at(10, cfg) == pytest.approx(1e-3)
    assert lr_at(60, cfg) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5))
    assert lr_at(110, cfg) == pytest.approx(1e-5)
    lrs = [lr_at(s, cfg) for s in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_optim_validation():
    with pytest.raises(ValueError):
        OptimConfig(lr=0)
    with pytest.raises(ValueError):
        OptimConfig(batch_size=0)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 10.0) == pytest.approx(5.0)
    assert g["a"][0] == 3.0
    assert clip_by_global_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = small_cfg().with_stages(stage2=False).with_fusion("scalar_gate")
    d = json.loads(json.dumps(cfg.to_dict()))
    again = RunConfig.from_dict(d)
    assert again.to_dict() == cfg.to_dict()
    assert again.head.pada.stage2 is False and again.head.fusion == "scalar_gate"
    with pytest.raises(ValueError):
        RunConfig.from_dict({"sede": 1})
    with pytest.raises(ValueError):
        RunConfig(loss={"dice": True})


def test_zero_steps_returns_initial_params():
    cfg = small_cfg(optim=OptimConfig(steps=0))
    data = make_datasets(cfg, ("train",))["train"]
    res = train(cfg, data)
    init = param_arrays(init_model(cfg))
    assert res.history == []
    assert all(np.array_equal(v, init[k]) for k, v in param_arrays(res.params).items())


def test_training_is_deterministic_and_logs(tmp_path):
    cfg = small_cfg()
    data = make_datasets(cfg, ("train",))["train"]
    a = train(cfg, data, log_path=tmp_path / "a.jsonl")
    b = train(cfg, data, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    pa, pb = param_arrays(a.params), param_arrays(b.params)
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
    recs = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 1, 2]
    for r in recs:
        assert r["total"] == pytest.approx(r["ce"] + r["sem_scal"] + r["geo_scal"] + r["lovasz"], rel=1e-5)


def test_divergence_is_reported():
    cfg = small_cfg()
    data = make_datasets(cfg, ("train",))["train"]
    params = init_model(cfg)
    dc.flatten_params(params)["s2.cls.b"].value[:] = np.nan
    with pytest.raises(DivergenceError):
        train(cfg, data, params=params)


def test_checkpoint_roundtrip_and_mismatch(tmp_path):
    cfg = small_cfg()
    params = init_model(cfg)
    save_checkpoint(tmp_path / "m.vocp", params)
    loaded = load_checkpoint(tmp_path / "m.vocp", cfg)
    a, b = param_arrays(params), param_arrays(loaded)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    with pytest.raises(CheckpointMismatch, match="unexpected"):
        load_checkpoint(tmp_path / "m.vocp", small_cfg().with_fusion("scalar_gate"))
    arrays = dict(a)
    arrays["embed"] = arrays["embed"][..., :3]
    with pytest.raises(CheckpointMismatch, match="shape"):
        load_into(init_model(cfg), arrays)
    arrays = dict(a)
    arrays.pop("embed")
    with pytest.raises(CheckpointMismatch, match="missing"):
        load_into(init_model(cfg), arrays)


def test_corrupt_extrinsics_keeps_centers_and_rotates_by_angle():
    cam = CameraModel(10, 10, 5, 5, 10, 10, np.eye(3), np.array([0.3, -1.0, 2.0]))
    out = corrupt_extrinsics([cam, cam], 30.0, np.random.default_rng(0))
    for c in out:
        assert np.allclose(c.center, cam.center)
        dR = c.R @ cam.R.T
        angle = math.degrees(math.acos((np.trace(dR) - 1) / 2))
        assert angle == pytest.approx(30.0)
    assert not np.allclose(out[0].R, out[1].R)


def test_majority_occupied_class_ignores_free():
    grids = [np.array([0, 0, 0, 0, 2, 2, 1]), np.array([0, 0, 1, 2])]
    assert majority_occupied_class(grids, 5) == 2


def test_evaluate_baselines():
    cfg = small_cfg()
    val = make_datasets(cfg, ("val",))["val"]
    rep = evaluate(init_model(cfg), cfg, val, majority_class=1)
    assert rep.all_free.iou == 0.0
    assert 0 < rep.majority.iou < 1
    d = rep.as_dict()
    assert set(d) == {"model", "all_free", "majority", "majority_class"}
    threaded = evaluate(init_model(cfg), cfg, val, majority_class=1, threads=2)
    assert threaded.model.iou == rep.model.iou
