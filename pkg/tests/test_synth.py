import numpy as np
import pytest
from pydantic import ValidationError

from catfield.geom import RigidPose
from catfield.io import read_mask_png, read_pfm
from catfield.synth import (
    CameraSpec,
    ObjectSpec,
    OrbitSpec,
    SceneSpec,
    UnobservedInstanceError,
    back_project,
    build_scene,
    export_frames,
    look_at,
    make_camera,
    occlusion_truncate,
    random_scene_spec,
    render_frame,
    render_sequence,
)


def box_scene(**extra):
    obj = ObjectSpec(instance_id=1, semantic_class="box", kind="box",
                     params={"size_x": 1.0, "size_y": 1.0, "size_z": 1.0}, position=(0, 0, -0.5))
    return build_scene(SceneSpec(objects=[obj], floor=False, **extra))


def camera_at(eye, target, **kw):
    return make_camera(CameraSpec(width=33, height=33, **kw), look_at(eye, target))


def test_central_pixel_depth_in_front_of_box_face():
    # box centred at the origin, camera 2 m away from the +x face's centre line
    frame = render_frame(box_scene(), camera_at([2.0, 0, 0], [0, 0, 0]))
    assert frame.depth[16, 16] == pytest.approx(1.5, abs=1e-9)
    assert frame.instance_mask[16, 16] == 1


def test_missed_pixels_are_empty():
    frame = render_frame(box_scene(), camera_at([2.0, 0, 0], [0, 0, 0], fx=10.0, fy=10.0))
    miss = frame.depth == 0
    assert miss.any()
    assert (frame.instance_mask[miss] == 0).all()
    assert (frame.semantic_mask[miss] == 0).all()
    assert (frame.depth >= 0).all()


def test_occluded_chair_mask_absent_behind_table():
    objs = [
        ObjectSpec(instance_id=1, semantic_class="table", kind="box",
                   params={"size_x": 0.3, "size_y": 1.5, "size_z": 1.5}, position=(1.0, 0, 0)),
        ObjectSpec(instance_id=2, semantic_class="chair", kind="chair", position=(0, 0, 0)),
    ]
    scene = build_scene(SceneSpec(objects=objs, floor=False))
    frame = render_frame(scene, camera_at([2.5, 0, 0.5], [0, 0, 0.5]))
    table = frame.instance_mask == 1
    assert table.any()
    assert not (frame.instance_mask == 2)[table].any()
    # the table really is the nearer surface on its pixels
    assert frame.depth[table].max() < 1.5 + 1e-9


def test_identical_chairs_share_class():
    objs = [ObjectSpec(instance_id=i, semantic_class="chair", kind="chair", position=(3.0 * i, 0, 0), yaw_deg=180.0 * i)
            for i in (1, 2)]
    scene = build_scene(SceneSpec(objects=objs))
    assert [o.semantic_class for o in scene.objects] == ["chair", "chair"]
    a, b = (o.mesh.vertices - o.pose.translation for o in scene.objects)
    assert np.allclose(np.sort(np.linalg.norm(a, axis=1)), np.sort(np.linalg.norm(b, axis=1)))


def test_empty_scene_renders_background_only():
    scene = build_scene(SceneSpec())
    frame = render_frame(scene, camera_at([2.0, 0, 1.0], [0, 0, 0]))
    assert (frame.instance_mask == 0).all()
    assert (frame.depth > 0).any()  # the floor


def test_duplicate_ids_rejected():
    obj = ObjectSpec(instance_id=1, semantic_class="box", kind="box", params={"size_x": 1, "size_y": 1, "size_z": 1})
    with pytest.raises(ValidationError):
        SceneSpec(objects=[obj, obj])


def test_nonpositive_dimension_rejected():
    with pytest.raises(ValidationError):
        ObjectSpec(instance_id=1, semantic_class="box", kind="box", params={"size_x": 0, "size_y": 1, "size_z": 1})


def test_random_room_is_reproducible():
    a = render_sequence(build_scene(random_scene_spec(7)))
    b = render_sequence(build_scene(random_scene_spec(7)))
    assert random_scene_spec(7).model_dump_json() == random_scene_spec(7).model_dump_json()
    for fa, fb in zip(a, b):
        assert fa.rgb.tobytes() == fb.rgb.tobytes()
        assert fa.depth.tobytes() == fb.depth.tobytes()


def test_single_face_cloud_is_planar():
    frame = render_frame(box_scene(), camera_at([2.0, 0, 0], [0, 0, 0], fx=60.0, fy=60.0))
    pts = back_project([frame], 1, voxel=0).cloud.points
    centered = pts - pts.mean(0)
    assert np.linalg.svd(centered, compute_uv=False)[-1] / np.sqrt(len(pts)) < 1e-6


def test_opposing_views_span_box():
    scene = box_scene()
    frames = [render_frame(scene, camera_at(e, [0, 0, 0])) for e in ([2.0, 0.3, 0.4], [-2.0, -0.3, -0.4])]
    pts = back_project(frames, 1).cloud.points
    assert np.ptp(pts[:, 0]) == pytest.approx(1.0, abs=0.01)


def test_masked_out_pixels_contribute_nothing():
    scene = box_scene()
    frame = render_frame(scene, camera_at([2.0, 0, 0], [0, 0, 0]))
    frame.instance_mask[:, :16] = 0
    pts = back_project([frame], 1, voxel=0).cloud.points
    assert len(pts) == int((frame.instance_mask == 1).sum())


def test_unobserved_instance_rejected():
    frame = render_frame(box_scene(), camera_at([2.0, 0, 0], [0, 0, 0]))
    with pytest.raises(UnobservedInstanceError):
        back_project([frame], 5)


def test_cloud_points_lie_on_surface():
    scene = build_scene(SceneSpec(objects=[ObjectSpec(instance_id=1, semantic_class="chair", kind="chair")],
                                  trajectory=[OrbitSpec(instance_id=1, n_views=4)]))
    obs = back_project(render_sequence(scene), 1, scene)
    from catfield.recon import point_mesh_distance

    assert point_mesh_distance(obs.cloud.points, obs.mesh).max() < 1e-4


def test_occlusion_truncation():
    objs = [
        ObjectSpec(instance_id=1, semantic_class="table", kind="box",
                   params={"size_x": 0.2, "size_y": 0.1, "size_z": 0.1}, position=(1.0, 0, -0.05)),
        ObjectSpec(instance_id=2, semantic_class="chair", kind="box",
                   params={"size_x": 0.4, "size_y": 2.0, "size_z": 2.0}, position=(-1.0, 0, -1.0)),
    ]
    scene = build_scene(SceneSpec(objects=objs, floor=False))
    # camera looks along -x from x = 2.1: the table face sits at depth 1.0
    frame = render_frame(scene, camera_at([2.1, 0, 0], [0, 0, 0]))
    u = np.array([16, 2, 16])
    v = np.array([16, 16, 2])
    assert frame.instance_mask[16, 16] == 1 and frame.depth[16, 16] == pytest.approx(1.0)
    t_max = occlusion_truncate(frame, 2, u, v, far=8.0)
    assert t_max[0] == pytest.approx(1.02)
    own = frame.instance_mask[v[1], u[1]]
    assert own == 2 and t_max[1] == 8.0
    blank = np.argwhere(frame.instance_mask == 0)
    if len(blank):
        vv, uu = blank[0]
        assert occlusion_truncate(frame, 2, [uu], [vv], far=8.0)[0] == 8.0


def test_mask_depth_consistency():
    scene = box_scene()
    cam = camera_at([2.0, 0.2, 0.3], [0, 0, 0])
    frame = render_frame(scene, cam)
    v, u = np.nonzero(frame.instance_mask == 1)
    o, d, scale = cam.rays(u, v)
    hit = o + d * (frame.depth[v, u] * scale)[:, None]
    assert np.abs(hit).max() <= 0.5 + 1e-9
    assert np.isclose(np.abs(hit).max(axis=1), 0.5).all()


def test_frame_export_formats(tmp_path):
    frames = render_sequence(build_scene(random_scene_spec(1, n_objects=2)))[:2]
    export_frames(frames, tmp_path)
    depth = read_pfm(tmp_path / "depth_0000.pfm")
    assert np.allclose(depth, frames[0].depth.astype(np.float32))
    assert (read_mask_png(tmp_path / "instance_0001.png") == frames[1].instance_mask).all()
    assert (tmp_path / "rgb_0000.png").exists() and (tmp_path / "cameras.json").exists()


def test_orbit_coverage_limits_azimuths():
    obj = ObjectSpec(instance_id=1, semantic_class="box", kind="box", params={"size_x": 1, "size_y": 1, "size_z": 1})
    scene = build_scene(SceneSpec(objects=[obj], trajectory=[OrbitSpec(instance_id=1, n_views=6, coverage=0.25)]))
    c = scene.objects[0].center()
    az = [np.arctan2(*(cam.pose.translation - c)[[1, 0]]) for cam in scene.cameras()]
    spread = np.ptp(np.unwrap(az))
    assert spread < 2 * np.pi * 0.25
