"""Procedural desk-scale scenes and analytic RGB-D rendering with instance masks.

Scenes are built from a small set of primitives (box, cylinder, sphere and a
composite chair made of boxes). Frames are rendered by exact ray/primitive
intersection, so back-projected points lie on the ground-truth surfaces up to
floating point error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

from .geom import PointCloud3, RigidPose, rotation_about
from .io import write_json, write_mask_png, write_pfm, write_rgb_png
from .mesh import TriangleMesh, box_mesh, cylinder_mesh, merge_meshes, sphere_mesh

DELTA_STOP = 0.02
VOXEL_SIZE = 0.01
LIGHT_DIR = np.array([0.4, -0.3, 1.0]) / np.linalg.norm([0.4, -0.3, 1.0])
AMBIENT = 0.3

CHAIR_DEFAULTS = {
    "seat_width": 0.45,
    "seat_depth": 0.45,
    "seat_thickness": 0.05,
    "leg_length": 0.42,
    "leg_thickness": 0.04,
    "back_height": 0.45,
    "back_thickness": 0.04,
}
REQUIRED_PARAMS = {
    "box": ("size_x", "size_y", "size_z"),
    "cylinder": ("radius", "height"),
    "sphere": ("radius",),
    "chair": (),
}


class UnobservedInstanceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene description schema


class ObjectSpec(BaseModel):
    instance_id: int = Field(ge=1)
    semantic_class: str
    kind: Literal["box", "cylinder", "sphere", "chair"]
    params: dict[str, float] = Field(default_factory=dict)
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_deg: float = 0.0
    albedo: tuple[float, float, float] = (0.7, 0.7, 0.7)

    @field_validator("albedo")
    @classmethod
    def _albedo_range(cls, v):
        if any(c < 0 or c > 1 for c in v):
            raise ValueError("albedo components must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _check_params(self):
        missing = [p for p in REQUIRED_PARAMS[self.kind] if p not in self.params]
        if missing:
            raise ValueError(f"{self.kind} object {self.instance_id} missing params {missing}")
        merged = self.resolved_params()
        for name, value in merged.items():
            # a chair without a back (stool) is allowed
            if value < 0 or (value == 0 and name != "back_height"):
                raise ValueError(f"parameter {name} of object {self.instance_id} must be positive")
        return self

    def resolved_params(self) -> dict[str, float]:
        if self.kind == "chair":
            return {**CHAIR_DEFAULTS, **self.params}
        return dict(self.params)


class CameraSpec(BaseModel):
    width: int = Field(96, ge=16)
    height: int = Field(96, ge=16)
    fx: float = Field(90.0, gt=0)
    fy: float = Field(90.0, gt=0)
    cx: Optional[float] = None
    cy: Optional[float] = None
    max_depth: float = Field(4.0, gt=0)


class OrbitSpec(BaseModel):
    """Cameras on a horizontal arc around one object, all looking at its center.

    ``coverage`` is the fraction of the full azimuth circle spanned by the arc,
    starting ``start_deg`` degrees from the object's front direction.
    """

    instance_id: int
    n_views: int = Field(12, ge=1)
    distance: float = Field(1.6, gt=0)
    elevation_deg: float = 30.0
    start_deg: float = 0.0
    coverage: float = Field(1.0, gt=0, le=1)


class SceneSpec(BaseModel):
    name: str = "scene"
    seed: int = 0
    floor: bool = True
    classes: list[str] = Field(default_factory=list)
    objects: list[ObjectSpec] = Field(default_factory=list)
    camera: CameraSpec = Field(default_factory=CameraSpec)
    trajectory: list[OrbitSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_ids(self):
        ids = [o.instance_id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate instance ids in scene {self.name!r}")
        for orbit in self.trajectory:
            if orbit.instance_id not in ids:
                raise ValueError(f"trajectory references unknown instance {orbit.instance_id}")
        return self

    @classmethod
    def load(cls, path) -> "SceneSpec":
        text = Path(path).read_text()
        data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
        return cls.model_validate(data)


# ---------------------------------------------------------------------------
# scene geometry


@dataclass
class Part:
    kind: str
    pose: RigidPose  # part -> world
    dims: np.ndarray  # box: full size; cylinder: (radius, height); sphere: (radius,)

    def mesh(self) -> TriangleMesh:
        if self.kind == "box":
            local = box_mesh(self.dims)
        elif self.kind == "cylinder":
            local = cylinder_mesh(self.dims[0], self.dims[1])
        else:
            local = sphere_mesh(self.dims[0])
        return local.transformed(self.pose)


@dataclass
class SceneObject:
    spec: ObjectSpec
    pose: RigidPose  # object -> world
    parts: list[Part]
    class_id: int
    mesh: TriangleMesh = field(init=False)

    def __post_init__(self):
        self.mesh = merge_meshes([p.mesh() for p in self.parts], source_id=self.instance_id)

    @property
    def instance_id(self) -> int:
        return self.spec.instance_id

    @property
    def semantic_class(self) -> str:
        return self.spec.semantic_class

    def center(self) -> np.ndarray:
        v = self.mesh.vertices
        return (v.min(axis=0) + v.max(axis=0)) / 2.0

    def front(self) -> np.ndarray:
        return self.pose.rotation[:, 1]


def _local_parts(spec: ObjectSpec) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(kind, offset in object frame, dims); the object frame has z up, +y front, origin on the floor."""
    p = spec.resolved_params()
    if spec.kind == "box":
        size = np.array([p["size_x"], p["size_y"], p["size_z"]])
        return [("box", np.array([0, 0, size[2] / 2]), size)]
    if spec.kind == "cylinder":
        return [("cylinder", np.array([0, 0, p["height"] / 2]), np.array([p["radius"], p["height"]]))]
    if spec.kind == "sphere":
        return [("sphere", np.array([0, 0, p["radius"]]), np.array([p["radius"]]))]
    sw, sd, st = p["seat_width"], p["seat_depth"], p["seat_thickness"]
    ll, lt = p["leg_length"], p["leg_thickness"]
    bh, bt = p["back_height"], p["back_thickness"]
    parts = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            off = np.array([sx * (sw - lt) / 2, sy * (sd - lt) / 2, ll / 2])
            parts.append(("box", off, np.array([lt, lt, ll])))
    parts.append(("box", np.array([0, 0, ll + st / 2]), np.array([sw, sd, st])))
    if bh > 0:
        parts.append(("box", np.array([0, -(sd - bt) / 2, ll + st + bh / 2]), np.array([sw, bt, bh])))
    return parts


@dataclass
class Scene:
    spec: SceneSpec
    objects: list[SceneObject]
    classes: list[str]

    def object(self, instance_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.instance_id == instance_id:
                return obj
        raise KeyError(instance_id)

    def class_id(self, name: str) -> int:
        return self.classes.index(name) + 1

    def cameras(self) -> list["Camera"]:
        cams = []
        for orbit in self.spec.trajectory:
            cams += orbit_cameras(self.object(orbit.instance_id), orbit, self.spec.camera)
        return cams


def build_scene(spec: SceneSpec | dict) -> Scene:
    if not isinstance(spec, SceneSpec):
        spec = SceneSpec.model_validate(spec)
    classes = list(spec.classes)
    for o in spec.objects:
        if o.semantic_class not in classes:
            classes.append(o.semantic_class)
    objects = []
    for o in spec.objects:
        pose = RigidPose(rotation_about([0, 0, 1], np.deg2rad(o.yaw_deg)), np.array(o.position))
        parts = [
            Part(kind, pose.compose(RigidPose(np.eye(3), off)), dims) for kind, off, dims in _local_parts(o)
        ]
        objects.append(SceneObject(o, pose, parts, classes.index(o.semantic_class) + 1))
    return Scene(spec, objects, classes)


def random_scene_spec(seed: int, n_objects: int = 6, classes=("chair", "box")) -> SceneSpec:
    """A seeded room of ``n_objects`` objects spread over the given classes."""
    rng = np.random.default_rng(seed)
    objects, trajectory = [], []
    spacing = 4.5
    cols = int(np.ceil(np.sqrt(n_objects)))
    for i in range(n_objects):
        cls = classes[i % len(classes)]
        pos = (spacing * (i % cols) + rng.uniform(-0.3, 0.3), spacing * (i // cols) + rng.uniform(-0.3, 0.3), 0.0)
        albedo = tuple(float(c) for c in rng.uniform(0.3, 0.9, size=3))
        if cls == "chair":
            params = {
                "seat_width": float(rng.uniform(0.4, 0.5)),
                "seat_depth": float(rng.uniform(0.4, 0.5)),
                "leg_length": float(rng.uniform(0.38, 0.46)),
                "back_height": float(rng.uniform(0.3, 0.5)),
            }
            kind = "chair"
        else:
            params = {k: float(rng.uniform(0.3, 0.7)) for k in ("size_x", "size_y", "size_z")}
            kind = "box"
        objects.append(
            ObjectSpec(
                instance_id=i + 1,
                semantic_class=cls,
                kind=kind,
                params=params,
                position=pos,
                yaw_deg=float(rng.uniform(0, 360)),
                albedo=albedo,
            )
        )
        trajectory.append(
            OrbitSpec(
                instance_id=i + 1,
                n_views=8,
                coverage=float(rng.uniform(0.3, 1.0)),
                start_deg=float(rng.uniform(0, 360)),
            )
        )
    return SceneSpec(name=f"random-{seed}", seed=seed, objects=objects, trajectory=trajectory)


# ---------------------------------------------------------------------------
# cameras and rendering


@dataclass
class Camera:
    pose: RigidPose  # camera -> world; x right, y down, z forward
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    max_depth: float = 4.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 16 or self.height < 16:
            raise ValueError("images must be at least 16x16")

    def pixel_directions(self, u, v) -> np.ndarray:
        """Camera-frame directions with unit z component, through pixel centers."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy, np.ones_like(u)], -1)

    def rays(self, u, v) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World origins, unit directions, and the z-depth to ray-length factor."""
        d_cam = self.pixel_directions(u, v)
        scale = np.linalg.norm(d_cam, axis=-1)
        d = self.pose.apply_direction(d_cam / scale[..., None])
        o = np.broadcast_to(self.pose.translation, d.shape)
        return o, d, scale


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    eye, target, up = (np.asarray(x, dtype=np.float64) for x in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidPose(np.column_stack([x, y, z]), eye)


def make_camera(spec: CameraSpec, pose: RigidPose) -> Camera:
    cx = spec.width / 2.0 if spec.cx is None else spec.cx
    cy = spec.height / 2.0 if spec.cy is None else spec.cy
    return Camera(pose, spec.fx, spec.fy, cx, cy, spec.width, spec.height, spec.max_depth)


def orbit_cameras(obj: SceneObject, orbit: OrbitSpec, cam: CameraSpec) -> list[Camera]:
    center = obj.center()
    front = obj.front()
    base = np.arctan2(front[1], front[0]) + np.deg2rad(orbit.start_deg)
    span = 2 * np.pi * orbit.coverage
    el = np.deg2rad(orbit.elevation_deg)
    cams = []
    for i in range(orbit.n_views):
        az = base + span * (i + 0.5) / orbit.n_views
        offset = orbit.distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(make_camera(cam, look_at(center + offset, center)))
    return cams


def _intersect_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tlo = np.fmin(t1, t2)
    thi = np.fmax(t1, t2)
    tnear = np.max(tlo, axis=-1)
    tfar = np.min(thi, axis=-1)
    hit = (tfar >= tnear) & (tnear > 1e-9)
    axis = np.argmax(tlo, axis=-1)
    normal = np.zeros_like(o)
    rows = np.arange(len(o))
    normal[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, tnear, np.inf), normal


def _intersect_sphere(o, d, radius):
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - radius**2
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit = (disc >= 0) & (t > 1e-9)
    t = np.where(hit, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, p / radius


def _intersect_cylinder(o, d, radius, height):
    h = height / 2
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius**2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
        z_side = o[:, 2] + t_side * d[:, 2]
        side_ok = (disc >= 0) & (a > 1e-15) & (t_side > 1e-9) & (np.abs(z_side) <= h)
        t_side = np.where(side_ok, t_side, np.inf)
        t_caps = np.stack([(h - o[:, 2]) / d[:, 2], (-h - o[:, 2]) / d[:, 2]], -1)
    t_caps = np.where(np.isfinite(t_caps), t_caps, np.inf)
    cap_pts_r2 = (o[:, None, 0] + t_caps * d[:, None, 0]) ** 2 + (o[:, None, 1] + t_caps * d[:, None, 1]) ** 2
    t_caps = np.where((t_caps > 1e-9) & (cap_pts_r2 <= radius**2), t_caps, np.inf)
    t_cap = t_caps.min(axis=1)
    t = np.minimum(t_side, t_cap)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n_side = np.column_stack([p[:, 0], p[:, 1], np.zeros(len(p))]) / radius
    n_cap = np.column_stack([np.zeros(len(p)), np.zeros(len(p)), np.sign(p[:, 2])])
    normal = np.where((t_side <= t_cap)[:, None], n_side, n_cap)
    return t, normal


def intersect_part(part: Part, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ray parameter of the first hit (inf on miss) and the world surface normal."""
    o = (origins - part.pose.translation) @ part.pose.rotation
    d = dirs @ part.pose.rotation
    if part.kind == "box":
        t, n = _intersect_box(o, d, part.dims / 2)
    elif part.kind == "sphere":
        t, n = _intersect_sphere(o, d, part.dims[0])
    else:
        t, n = _intersect_cylinder(o, d, part.dims[0], part.dims[1])
    return t, n @ part.pose.rotation.T


@dataclass
class Frame:
    camera: Camera
    rgb: np.ndarray
    depth: np.ndarray  # z-depth, 0 where nothing was hit
    instance_mask: np.ndarray
    semantic_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def render_frame(scene: Scene, camera: Camera) -> Frame:
    H, W = camera.height, camera.width
    v, u = np.mgrid[0:H, 0:W]
    d_cam = camera.pixel_directions(u.reshape(-1), v.reshape(-1))
    dirs = camera.pose.apply_direction(d_cam)  # t along these is z-depth
    origins = np.broadcast_to(camera.pose.translation, dirs.shape)
    n_pix = len(dirs)
    best = np.full(n_pix, np.inf)
    inst = np.zeros(n_pix, dtype=np.int64)
    sem = np.zeros(n_pix, dtype=np.int64)
    albedo = np.zeros((n_pix, 3))
    normal = np.zeros((n_pix, 3))
    for obj in scene.objects:
        for part in obj.parts:
            t, n = intersect_part(part, origins, dirs)
            closer = t < best
            best[closer] = t[closer]
            inst[closer] = obj.instance_id
            sem[closer] = obj.class_id
            albedo[closer] = obj.spec.albedo
            normal[closer] = n[closer]
    if scene.spec.floor:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where((dirs[:, 2] < 0) & (origins[:, 2] > 0), -origins[:, 2] / dirs[:, 2], np.inf)
        closer = t < best
        best[closer] = t[closer]
        inst[closer] = 0
        sem[closer] = 0
        albedo[closer] = 0.5
        normal[closer] = [0.0, 0.0, 1.0]
    miss = ~np.isfinite(best) | (best > camera.max_depth)
    depth = np.where(miss, 0.0, best)
    inst[miss] = 0
    sem[miss] = 0
    # orient normals toward the camera before shading
    facing = np.sign(-np.einsum("ij,ij->i", normal, dirs))
    normal = normal * np.where(facing == 0, 1.0, facing)[:, None]
    shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, None)
    rgb = np.where(miss[:, None], 0.0, albedo * shade[:, None])
    return Frame(
        camera,
        rgb.reshape(H, W, 3),
        depth.reshape(H, W),
        inst.reshape(H, W),
        sem.reshape(H, W),
    )


def render_sequence(scene: Scene) -> list[Frame]:
    return [render_frame(scene, cam) for cam in scene.cameras()]


# ---------------------------------------------------------------------------
# observations


@dataclass
class FrameObservation:
    frame_index: int
    bbox: tuple[int, int, int, int]  # u0, v0, u1, v1 inclusive
    n_mask_pixels: int


@dataclass
class ObjectObservation:
    instance_id: int
    semantic_class: str
    frames: list[FrameObservation]
    cloud: PointCloud3
    mesh: Optional[TriangleMesh] = None


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Keep the first point falling in each voxel (points stay on the surface)."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


def unproject(frame: Frame, mask: np.ndarray) -> np.ndarray:
    v, u = np.nonzero(mask & (frame.depth > 0))
    z = frame.depth[v, u]
    pts_cam = frame.camera.pixel_directions(u, v) * z[:, None]
    return frame.camera.pose.apply(pts_cam)


def back_project(frames, instance_id: int, scene: Optional[Scene] = None, voxel: float = VOXEL_SIZE) -> ObjectObservation:
    obs, chunks = [], []
    for i, frame in enumerate(frames):
        mask = frame.instance_mask == instance_id
        if not mask.any():
            continue
        v, u = np.nonzero(mask)
        obs.append(FrameObservation(i, (int(u.min()), int(v.min()), int(u.max()), int(v.max())), int(mask.sum())))
        chunks.append(unproject(frame, mask))
    if not obs:
        raise UnobservedInstanceError(f"instance {instance_id} is not visible in any frame")
    pts = voxel_downsample(np.concatenate(chunks), voxel) if voxel > 0 else np.concatenate(chunks)
    mesh, cls = None, ""
    if scene is not None:
        obj = scene.object(instance_id)
        mesh, cls = obj.mesh, obj.semantic_class
    return ObjectObservation(instance_id, cls, obs, PointCloud3(pts), mesh)


def occlusion_truncate(frame: Frame, instance_id: int, u, v, far, delta: float = DELTA_STOP) -> np.ndarray:
    """Largest admissible ray length for rays through pixels (u, v).

    Rays whose pixel shows another instance stop ``delta`` behind that
    occluder; rays on the instance itself or on background keep ``far``.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    owner = frame.instance_mask[v, u]
    occluded = (owner != 0) & (owner != instance_id)
    scale = np.linalg.norm(frame.camera.pixel_directions(u, v), axis=-1)
    return np.where(occluded, frame.depth[v, u] * scale + delta, np.broadcast_to(far, np.shape(u)))


def export_frames(frames, outdir) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    cams = []
    for i, f in enumerate(frames):
        write_rgb_png(out / f"rgb_{i:04d}.png", f.rgb)
        write_pfm(out / f"depth_{i:04d}.pfm", f.depth)
        write_mask_png(out / f"instance_{i:04d}.png", f.instance_mask)
        write_mask_png(out / f"semantic_{i:04d}.png", f.semantic_mask)
        c = f.camera
        cams.append(
            {"index": i, "pose": c.pose.rows(), "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
             "width": c.width, "height": c.height, "max_depth": c.max_depth}
        )
    write_json(out / "cameras.json", cams)
