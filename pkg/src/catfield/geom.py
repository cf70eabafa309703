"""Rigid transforms, oriented boxes, normalized object coordinates and Chamfer distances."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

EXTENT_EPS = 1e-6
# principal variances closer than this fraction of the largest are treated as tied
EIG_TIE_TOL = 0.1
# nearest-neighbour queries up to this many point pairs are brute forced
BRUTE_FORCE_PAIRS = 25_000_000
_BLOCK_ELEMS = 3_000_000


class DegenerateCloudError(ValueError):
    """Raised when a point set has too low rank for the requested operation."""


class EmptyCloudError(ValueError):
    pass


def as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud3) else cloud
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    return rotation_about(axis, rng.uniform(0.0, max_angle))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] *= -1
    return U @ Vt


@dataclass(frozen=True)
class RigidPose:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(R) - 1.0) > 1e-9 or not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be proper orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidPose":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def rows(self) -> list[float]:
        """Row-major 3x4 [R | t]."""
        return self.matrix()[:3].reshape(-1).tolist()

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def apply_direction(self, dirs) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply ``other`` first."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    axes: np.ndarray  # columns are the box axes
    half_extents: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        A = np.asarray(self.axes, dtype=np.float64).reshape(3, 3)
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise ValueError("half extents must be positive")
        if abs(np.linalg.det(A) - 1.0) > 1e-6 or not np.allclose(A.T @ A, np.eye(3), atol=1e-6):
            raise ValueError("box axes must be proper orthonormal")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "axes", A)
        object.__setattr__(self, "half_extents", h)

    @property
    def volume(self) -> float:
        return float(np.prod(2.0 * self.half_extents))

    def local(self, points) -> np.ndarray:
        return (as_points(points) - self.center) @ self.axes

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        loc = self.local(points)
        return np.all(np.abs(loc) <= self.half_extents + tol, axis=1)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return self.center + (signs * self.half_extents) @ self.axes.T

    def transformed(self, pose: RigidPose) -> "OrientedBox":
        return OrientedBox(pose.apply(self.center), pose.rotation @ self.axes, self.half_extents)

    def padded(self, scale: float = 1.0, margin: float = 0.0) -> "OrientedBox":
        return OrientedBox(self.center, self.axes, self.half_extents * scale + margin)

    def grown_to_cover(self, points) -> "OrientedBox":
        """Smallest box with the same axes containing both this box and ``points``."""
        loc = self.local(points)
        lo = np.minimum(-self.half_extents, loc.min(axis=0))
        hi = np.maximum(self.half_extents, loc.max(axis=0))
        return OrientedBox(self.center + self.axes @ ((lo + hi) / 2.0), self.axes, (hi - lo) / 2.0)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "axes": self.axes.tolist(),
            "half_extents": self.half_extents.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox":
        return cls(np.array(d["center"]), np.array(d["axes"]), np.array(d["half_extents"]))


@dataclass(frozen=True)
class PointCloud3:
    points: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points)
        if len(pts) < 1:
            raise EmptyCloudError("point cloud must hold at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return len(self.points)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def largest_dimension(self) -> float:
        """Longest extent of the cloud along its principal axes."""
        if self.count < 2:
            return 0.0
        centered = self.points - self.centroid()
        _, _, Vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ Vt.T
        return float((proj.max(axis=0) - proj.min(axis=0)).max())

    def transformed(self, pose: RigidPose) -> "PointCloud3":
        return PointCloud3(pose.apply(self.points))


# ---------------------------------------------------------------------------
# oriented bounding boxes


def _min_area_rect(pts2: np.ndarray) -> tuple[np.ndarray, float]:
    """Rotation (2x2, columns = rectangle axes) of the minimum-area enclosing rectangle."""
    try:
        hull = pts2[ConvexHull(pts2).vertices]
    except (QhullError, ValueError):
        return np.eye(2), np.inf
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.unique(np.round(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2), 12))
    best_rot, best_area = np.eye(2), np.inf
    for a in angles:
        c, s = np.cos(a), np.sin(a)
        rot = np.array([[c, -s], [s, c]])
        proj = hull @ rot
        area = float(np.prod(proj.max(axis=0) - proj.min(axis=0)))
        if area < best_area - 1e-15:
            best_rot, best_area = rot, area
    return best_rot, best_area


def _plane_basis(normal: np.ndarray) -> np.ndarray:
    n = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    return np.stack([u, np.cross(n, u)], axis=1)


def _axes_in_plane(centered: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    basis = _plane_basis(fixed)
    rot, _ = _min_area_rect(centered @ basis)
    in_plane = basis @ rot
    return np.column_stack([in_plane, fixed / np.linalg.norm(fixed)])


def _axes_isotropic(centered: np.ndarray) -> np.ndarray:
    try:
        hull = ConvexHull(centered)
    except (QhullError, ValueError):
        return np.eye(3)
    normals = hull.equations[:, :3]
    # antipodal faces give the same candidate
    normals = normals * np.where(normals @ np.array([0.3, 0.5, 0.8]) < 0, -1.0, 1.0)[:, None]
    normals = np.unique(np.round(normals, 9), axis=0)[:256]
    best, best_vol = np.eye(3), np.inf
    for n in normals:
        axes = _axes_in_plane(centered, n)
        proj = centered @ axes
        vol = float(np.prod(proj.max(axis=0) - proj.min(axis=0)))
        if vol < best_vol - 1e-15:
            best, best_vol = axes, vol
    return best


def _fix_signs(axes: np.ndarray) -> np.ndarray:
    out = axes.copy()
    for k in range(2):
        a = out[:, k]
        for ref in (2, 0, 1):
            if abs(a[ref]) > 1e-9:
                if a[ref] < 0:
                    out[:, k] = -a
                break
    out[:, 2] = np.cross(out[:, 0], out[:, 1])
    return out


def fit_obb(cloud, eig_tol: float = EIG_TIE_TOL) -> OrientedBox:
    """Principal-axis oriented bounding box.

    Axes are ordered by descending extent; equal extents prefer the axis
    closest to world +z, then +x. Where principal directions are not unique
    or poorly conditioned (covariance eigenvalues within ``eig_tol`` of each
    other, relative to the largest) the tightest box inside the ambiguous
    subspace is used instead. Flat clouds get their thin extent clamped to
    ``EXTENT_EPS``.
    """
    pts = as_points(cloud)
    if len(pts) < 4:
        raise DegenerateCloudError("fit_obb needs at least 4 points")
    centered = pts - pts.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered / len(pts))
    top = evals[2]
    if top <= 0 or evals[1] <= 1e-12 * top:
        raise DegenerateCloudError("point set has rank < 2")

    def close(a, b):
        return abs(a - b) <= eig_tol * top

    if close(evals[0], evals[2]):
        axes = _axes_isotropic(centered)
    elif close(evals[1], evals[2]):
        axes = _axes_in_plane(centered, evecs[:, 0])
    elif close(evals[0], evals[1]):
        axes = _axes_in_plane(centered, evecs[:, 2])
    else:
        axes = evecs

    proj = centered @ axes
    extents = proj.max(axis=0) - proj.min(axis=0)
    tie = 1e-7 * extents.max()
    order = sorted(
        range(3),
        key=lambda k: (-round(extents[k] / tie), -round(abs(axes[2, k]), 9), -round(abs(axes[0, k]), 9)),
    )
    axes = _fix_signs(axes[:, order])

    proj = centered @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    center = pts.mean(axis=0) + axes @ ((lo + hi) / 2.0)
    half = np.maximum((hi - lo) / 2.0, EXTENT_EPS)
    return OrientedBox(center, axes, half)


# ---------------------------------------------------------------------------
# normalized object coordinates


def world_to_nocs(points, box: OrientedBox) -> np.ndarray:
    """Map world points into the box's [-1, 1]^3 cube."""
    pts = np.asarray(points, dtype=np.float64)
    return ((pts - box.center) @ box.axes) / box.half_extents


def nocs_to_world(nocs, box: OrientedBox) -> np.ndarray:
    q = np.asarray(nocs, dtype=np.float64)
    return (q * box.half_extents) @ box.axes.T + box.center


# ---------------------------------------------------------------------------
# nearest neighbours and Chamfer distance


def _brute_nearest(P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist = np.empty(len(P))
    idx = np.empty(len(P), dtype=np.int64)
    block = max(1, _BLOCK_ELEMS // (3 * len(Q)))
    for s in range(0, len(P), block):
        diff = P[s : s + block, None, :] - Q[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        j = np.argmin(d2, axis=1)
        idx[s : s + block] = j
        dist[s : s + block] = np.sqrt(d2[np.arange(len(j)), j])
    return dist, idx


def nearest_neighbors(P, Q, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Distance and index of the nearest Q point for every P point."""
    P, Q = as_points(P), as_points(Q)
    if len(P) == 0 or len(Q) == 0:
        raise EmptyCloudError("nearest neighbour query on an empty cloud")
    if method == "auto":
        method = "brute" if len(P) * len(Q) <= BRUTE_FORCE_PAIRS else "tree"
    if method == "brute":
        return _brute_nearest(P, Q)
    if method == "tree":
        dist, idx = cKDTree(Q).query(P)
        return np.asarray(dist, float), np.asarray(idx, np.int64)
    raise ValueError(f"unknown method {method!r}")


def unidirectional_chamfer(P, Q, method: str = "auto") -> float:
    """Mean distance from each point of P to its nearest point of Q (meters)."""
    dist, _ = nearest_neighbors(P, Q, method)
    return float(dist.mean())


# ---------------------------------------------------------------------------
# ASCII PLY


def write_ply(path, cloud) -> None:
    pts = as_points(cloud)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud3:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    for i, line in enumerate(lines):
        tok = line.split()
        if tok[:2] == ["format", "ascii"]:
            continue
        if tok[:1] == ["format"]:
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        if tok[:1] == ["end_header"]:
            body = lines[i + 1 : i + 1 + (n or 0)]
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    pts = np.array([[float(v) for v in row.split()[:3]] for row in body], dtype=np.float64)
    return PointCloud3(pts.reshape(-1, 3))
