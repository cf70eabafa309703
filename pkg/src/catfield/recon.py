"""Mesh extraction from occupancy fields and reconstruction metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .field import FieldModel
from .geom import OrientedBox, nocs_to_world
from .mesh import TriangleMesh

MESH_RESOLUTION = 64
ISO_LEVEL = 0.5
N_METRIC_SAMPLES = 10_000
CR_THRESHOLD = 0.05
BRUTE_FORCE_PAIRS = 4_000_000


class EmptySurfaceError(ValueError):
    """The occupancy grid never crosses the iso-level, so there is no surface."""


@dataclass
class ObjectMetrics:
    acc_cm: float
    comp_cm: float
    completion_ratio_pct: float

    def as_dict(self) -> dict:
        return {"acc_cm": self.acc_cm, "comp_cm": self.comp_cm, "cr_pct": self.completion_ratio_pct}


# ---------------------------------------------------------------------------
# meshing


def occupancy_grid(model: FieldModel, code, resolution: int, chunk: int = 65536) -> np.ndarray:
    """Occupancy at the nodes of a resolution^3 grid spanning the cube [-1, 1]^3."""
    axis = np.linspace(-1.0, 1.0, resolution)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s : s + chunk] = model.occupancy(pts[s : s + chunk], code)
    return out.reshape(resolution, resolution, resolution)


def extract_mesh(model: FieldModel, code, box: OrientedBox, resolution: int = MESH_RESOLUTION,
                 level: float = ISO_LEVEL, source_id: int = 0) -> TriangleMesh:
    """Iso-surface of the field, mapped from the cube into the world through ``box``.

    The grid is padded with empty cells so surfaces touching the cube faces
    close up instead of leaving holes.
    """
    if resolution < 16:
        raise ValueError("mesh resolution must be at least 16 per axis")
    grid = np.pad(occupancy_grid(model, code, resolution), 1, constant_values=0.0)
    if not (grid.max() > level > grid.min()):
        raise EmptySurfaceError("occupancy never crosses the iso-level")
    step = 2.0 / (resolution - 1)
    verts, faces, _, _ = marching_cubes(grid, level=level, spacing=(step, step, step))
    nocs = verts - 1.0 - step  # undo the padding offset
    return TriangleMesh(nocs_to_world(nocs, box), faces, source_id).without_degenerate()


def crop_mesh(mesh: TriangleMesh, box: OrientedBox) -> TriangleMesh:
    """Triangles whose centroid lies inside ``box``."""
    if mesh.is_empty():
        return mesh
    return mesh.submesh(box.contains(mesh.centroids()))


# ---------------------------------------------------------------------------
# point to mesh distance


def point_triangle_distance(p, a, b, c) -> np.ndarray:
    """Exact Euclidean distance from points p to triangles (a, b, c), row by row."""
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    # default: projection inside the face
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = vb / denom
        w = vc / denom
        closest = a + ab * v[:, None] + ac * w[:, None]
        # edge regions
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    closest = np.where(on_bc[:, None], b + (c - b) * t_bc[:, None], closest)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[:, None], a + ac * t_ac[:, None], closest)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[:, None], a + ab * t_ab[:, None], closest)
    # vertex regions
    closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, closest)
    # degenerate triangles fall back to the nearest corner
    bad = ~np.isfinite(closest).all(axis=1)
    if bad.any():
        corners = np.stack([a[bad], b[bad], c[bad]], axis=1)
        k = np.argmin(np.linalg.norm(corners - p[bad, None], axis=2), axis=1)
        closest[bad] = corners[np.arange(len(k)), k]
    return np.linalg.norm(p - closest, axis=1)


def _brute_distance(points, a, b, c, chunk_pairs: int = 1_000_000) -> np.ndarray:
    n_t = len(a)
    out = np.empty(len(points))
    step = max(1, chunk_pairs // max(n_t, 1))
    for s in range(0, len(points), step):
        p = points[s : s + step]
        m = len(p)
        d = point_triangle_distance(np.repeat(p, n_t, 0), np.tile(a, (m, 1)), np.tile(b, (m, 1)), np.tile(c, (m, 1)))
        out[s : s + m] = d.reshape(m, n_t).min(axis=1)
    return out


def point_mesh_distance(points, mesh: TriangleMesh) -> np.ndarray:
    """Exact distance from each point to the nearest triangle of ``mesh``.

    Small meshes are handled by brute force. Otherwise a centroid tree finds,
    per point, an upper bound d from its nearest-centroid triangle; any closer
    triangle must have its centroid within d + (its circumradius), so only
    those are tested exactly.
    """
    if mesh.is_empty():
        raise ValueError("distance to an empty mesh")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a, b, c = mesh.corners()
    if len(points) * len(a) <= BRUTE_FORCE_PAIRS:
        return _brute_distance(points, a, b, c)
    cen = mesh.centroids()
    rad = np.max(np.linalg.norm(np.stack([a, b, c]) - cen, axis=2), axis=0)
    r_max = float(rad.max())
    tree = cKDTree(cen)
    _, first = tree.query(points)
    upper = point_triangle_distance(points, a[first], b[first], c[first])
    cand = tree.query_ball_point(points, upper + r_max + 1e-12)
    lens = np.fromiter((len(x) for x in cand), dtype=np.int64, count=len(points))
    flat = np.fromiter((j for x in cand for j in x), dtype=np.int64, count=int(lens.sum()))
    owner = np.repeat(np.arange(len(points)), lens)
    d = point_triangle_distance(points[owner], a[flat], b[flat], c[flat])
    best = upper.copy()
    np.minimum.at(best, owner, d)
    return best


# ---------------------------------------------------------------------------
# metrics


def evaluate_object(
    recon: TriangleMesh,
    gt: TriangleMesh,
    crop: Optional[OrientedBox] = None,
    n_samples: int = N_METRIC_SAMPLES,
    seed: int = 0,
    gt_region: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    threshold: float = CR_THRESHOLD,
) -> ObjectMetrics:
    """Accuracy, completion and completion ratio between area-sampled surfaces.

    ``crop`` restricts the reconstruction used for accuracy; ``gt_region``
    (a mask over gt sample points) restricts the gt samples used for
    completion and the ratio.
    """
    if recon.is_empty() or gt.is_empty():
        raise ValueError("both meshes must be non-empty")
    rng = np.random.default_rng(seed)
    gt_pts = gt.sample(n_samples, rng)
    rec_pts = recon.sample(n_samples, rng)
    acc_mesh = recon if crop is None else crop_mesh(recon, crop)
    if acc_mesh.is_empty():
        raise ValueError("cropping removed the whole reconstruction")
    acc_pts = rec_pts if crop is None else acc_mesh.sample(n_samples, rng)
    acc = point_mesh_distance(acc_pts, gt).mean()
    if gt_region is not None:
        gt_pts = gt_pts[np.asarray(gt_region(gt_pts), dtype=bool)]
        if len(gt_pts) == 0:
            raise ValueError("gt region selects no samples")
    d = point_mesh_distance(gt_pts, recon)
    return ObjectMetrics(float(acc * 100), float(d.mean() * 100), float(np.mean(d < threshold) * 100))
