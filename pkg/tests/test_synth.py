import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vggtocc.geometry import CameraModel, look_from, project, world_to_camera
from vggtocc.objective import FREE, downsample_labels
from vggtocc.synth import (
    FeatureEmbedding, Primitive, RigSpec, SceneSpec, cast_rays, dataset, generate_scene, make_rig,
    random_scene_spec, render_features, scene_seed,
)


def test_empty_spec_is_ground_only():
    labels = generate_scene(0, SceneSpec())
    assert (labels[:, :, 0] == 1).all()
    assert (labels[:, :, 1:] == FREE).all()


def test_unit_box_on_voxel_center_labels_exactly_that_voxel():
    # pitch 0.5; voxel (12, 7, 2) has center (1.25, -1.25, 1.25)
    spec = SceneSpec(primitives=[Primitive("box", (1.25, -1.25, 1.25), (0.5, 0.5, 0.5), 3)])
    labels = generate_scene(0, spec)
    assert labels[12, 7, 2] == 3
    assert (labels[:, :, 1:] == 3).sum() == 1


def test_later_primitives_win():
    a = Primitive("box", (0.25, 0.25, 0.75), (1.0, 1.0, 1.0), 2)
    b = Primitive("sphere", (0.25, 0.25, 0.75), (0.6, 0.6, 0.6), 4)
    labels = generate_scene(0, SceneSpec(primitives=[a, b]))
    assert labels[10, 10, 1] == 4
    assert generate_scene(0, SceneSpec(primitives=[b, a]))[10, 10, 1] == 2


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(primitives=[Primitive("box", (0, 0, 1), (1, 1, 1), 9)])
    with pytest.raises(ValueError):
        SceneSpec(primitives=[Primitive("box", (50, 0, 1), (1, 1, 1), 2)])
    with pytest.raises(ValueError):
        generate_scene(0, SceneSpec(primitives=[Primitive("cone", (0, 0, 1), (1, 1, 1), 2)]))


def test_scene_generation_is_deterministic():
    a, b = generate_scene(7), generate_scene(7)
    assert a.tobytes() == b.tobytes()
    assert random_scene_spec(7).to_dict() == random_scene_spec(7).to_dict()
    assert not np.array_equal(generate_scene(7), generate_scene(8))


def test_camera_facing_free_space_sees_background():
    emb = FeatureEmbedding.create(0, 5, 8)
    labels = generate_scene(0, SceneSpec())
    R, t = look_from((0, 0, 1.0), 0.0, pitch=-1.2)  # looking up into empty air
    cam = CameraModel(20, 20, 8, 6, 16, 12, R, t)
    f = render_features(labels, SceneSpec().bounds, cam, (12, 16), emb)
    assert np.array_equal(f, np.broadcast_to(emb.background, f.shape))


def test_on_axis_voxel_lands_at_image_center():
    # 3-voxel corridor along x; only the middle voxel is occupied
    bounds = ((0.0, 3.0), (-0.5, 0.5), (-0.5, 0.5))
    labels = np.array([0, 2, 0], dtype=np.uint8).reshape(3, 1, 1)
    R, t = look_from((-1.0, 0.0, 0.0), 0.0)
    cam = CameraModel(4, 4, 2.5, 2.5, 5, 5, R, t)
    emb = FeatureEmbedding.create(3, 5, 8)
    f = render_features(labels, bounds, cam, (5, 5), emb)
    # ray march by hand: free voxel [0, 1], then the class-2 voxel entered at x = 1, depth 2
    expect = emb.embed(2, 0.5, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(f[2, 2], expect, atol=1e-12)
    assert np.array_equal(f[0, 0], emb.background)


def test_rendering_is_deterministic():
    emb = FeatureEmbedding.create(1, 5, 8)
    labels = generate_scene(3)
    cam = make_rig(RigSpec())[0]
    a = render_features(labels, SceneSpec().bounds, cam, (16, 24), emb)
    b = render_features(labels, SceneSpec().bounds, cam, (16, 24), emb)
    assert a.tobytes() == b.tobytes()


def test_hit_depth_is_camera_z_and_reprojects_to_pixel_center():
    labels = generate_scene(5)
    cam = make_rig(RigSpec())[2]
    hits = cast_rays(labels, SceneSpec().bounds, cam)
    ys, xs = np.nonzero(hits.class_id != FREE)
    assert ys.size > 0
    # undo the unit normalization: the camera-frame ray has Z = 1
    d_world = hits.direction[ys, xs]
    d_cam = d_world @ cam.R.T
    pts = cam.center + hits.depth[ys, xs, None] * d_world / d_cam[:, 2:3]
    pc = world_to_camera(pts, cam)
    assert np.allclose(pc[:, 2], hits.depth[ys, xs])
    pr = project(pc, cam)
    assert np.abs(pr.u * cam.width - (xs + 0.5)).max() < 1e-9
    assert np.abs(pr.v * cam.height - (ys + 0.5)).max() < 1e-9


@settings(max_examples=30)
@given(st.integers(0, 19), st.integers(0, 19), st.integers(1, 3), st.integers(0, 5))
def test_renderer_agrees_with_projection(ix, iy, iz, cam_i):
    spec = SceneSpec(ground_class=None)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[ix, iy, iz] = 2
    cam = make_rig(RigSpec())[cam_i]
    center = spec.voxel_centers()[ix, iy, iz]
    pr = project(world_to_camera(center, cam), cam)
    if not pr.valid:
        return
    hits = cast_rays(labels, spec.bounds, cam)
    ys, xs = np.nonzero(hits.class_id == 2)
    assert ys.size > 0
    px = np.array([pr.u * cam.width, pr.v * cam.height])
    dist = np.hypot(xs + 0.5 - px[0], ys + 0.5 - px[1]).min()
    assert dist < 1.0


def test_rig_cameras_look_outward():
    cams = make_rig(RigSpec(n_cameras=4))
    for cam in cams:
        fwd = cam.R[2]
        radial = cam.center.copy()
        radial[2] = 0
        assert fwd @ radial > 0
    with pytest.raises(ValueError):
        RigSpec(n_cameras=3, yaws=(0.0, 1.0))


def test_dataset_len_splits_and_pyramid():
    rig = RigSpec(n_cameras=2, levels=((8, 12), (4, 6)))
    train = dataset(0, 3, rig, "train", feat_dim=6)
    val = dataset(0, 2, rig, "val", feat_dim=6)
    assert len(train) == 3 and len(val) == 2
    assert len(dataset(0, 0, rig)) == 0
    assert not {s.seed for s in train} & {s.seed for s in val}
    train_seeds = {scene_seed(s, i, "train") for s in range(3) for i in range(1000)}
    val_seeds = {scene_seed(s, i, "val") for s in range(3) for i in range(1000)}
    assert not train_seeds & val_seeds
    s = train[0]
    assert [l.shape for l in s.labels] == [(5, 5, 1), (10, 10, 2), (20, 20, 4)]
    assert [p.shape for p in s.pyramid] == [(2, 8, 12, 6), (2, 4, 6, 6)]
    assert all(p.dtype == np.float32 for p in s.pyramid)
    for coarse, fine in zip(s.labels[:-1], s.labels[1:]):
        assert np.array_equal(coarse, downsample_labels(fine))
    again = dataset(0, 3, rig, "train", feat_dim=6)
    assert all(a.pyramid[0].tobytes() == b.pyramid[0].tobytes() for a, b in zip(train, again))
