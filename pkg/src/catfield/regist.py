"""OBB-seeded multi-start registration to a category representative, and subcategorization."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import OrientedBox, PointCloud3, RigidPose, as_points, fit_obb
from .io import write_json

ETA_SUB = 0.12
ICP_ITERATIONS = 50
ICP_TOLERANCE = 1e-6
INLIER_FRACTION = 0.8
MAX_POINTS = 2000


def _signed_permutations() -> list[np.ndarray]:
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            P = np.zeros((3, 3))
            P[range(3), perm] = signs
            if np.linalg.det(P) > 0:
                mats.append(P)
    return mats


AXIS_ROTATIONS = _signed_permutations()  # the 24 proper rotations of the cube


def initial_poses(source_box: OrientedBox, target_box: OrientedBox) -> list[RigidPose]:
    """24 coarse poses mapping the source box frame onto the target box frame.

    Each start rotates source box axes onto a signed permutation of the target
    box axes and moves the source center onto the target center.
    """
    poses = []
    for P in AXIS_ROTATIONS:
        R = target_box.axes @ P @ source_box.axes.T
        poses.append(RigidPose(R, target_box.center - R @ source_box.center))
    return poses


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidPose:
    """Least-squares rigid transform taking src onto dst (proper rotation)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidPose(R, cd - R @ cs)


@dataclass
class AlignmentResult:
    pose: RigidPose
    cd: float
    converged: bool
    iterations: int


def _batched_kabsch(P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """kabsch() over a leading batch axis: (k, n, 3) pairs -> (k, 3, 3), (k, 3)."""
    cp, cq = P.mean(axis=1), Q.mean(axis=1)
    H = np.einsum("kni,knj->kij", P - cp[:, None], Q - cq[:, None])
    U, _, Vt = np.linalg.svd(H)
    V, Ut = np.swapaxes(Vt, 1, 2), np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    D = np.zeros_like(H)
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = np.where(d == 0, 1.0, d)
    R = V @ D @ Ut
    return R, cq - np.einsum("kij,kj->ki", R, cp)


def refine_many(
    source, target, inits: Sequence[RigidPose],
    iterations: int = ICP_ITERATIONS,
    tol: float = ICP_TOLERANCE,
    inlier_fraction: float = INLIER_FRACTION,
    target_tree: Optional[cKDTree] = None,
) -> list[AlignmentResult]:
    """Independent trimmed ICP runs from several starts, advanced in lockstep.

    Every start keeps its own iteration count and stopping test; batching
    only shares the nearest-neighbor queries and the SVDs.
    """
    src = as_points(source.points if isinstance(source, PointCloud3) else source)
    dst = as_points(target.points if isinstance(target, PointCloud3) else target)
    if len(src) < 10 or len(dst) < 10:
        raise ValueError("registration needs at least 10 points in each cloud")
    tree = target_tree if target_tree is not None else cKDTree(dst)
    n, k = len(src), len(inits)
    n_keep = max(3, int(round(inlier_fraction * n)))
    R = np.stack([p.rotation for p in inits]).astype(np.float64)
    t = np.stack([p.translation for p in inits]).astype(np.float64)
    converged = np.zeros(k, dtype=bool)
    iters = np.zeros(k, dtype=int)
    active = np.arange(k)
    for it in range(1, iterations + 1):
        moved = src @ np.swapaxes(R[active], 1, 2) + t[active, None]
        dist, idx = tree.query(moved.reshape(-1, 3), workers=-1)
        dist, idx = dist.reshape(len(active), n), idx.reshape(len(active), n)
        if n_keep < n:
            keep = np.argpartition(dist, n_keep - 1, axis=1)[:, :n_keep]
        else:
            keep = np.broadcast_to(np.arange(n), (len(active), n))
        P = np.take_along_axis(moved, keep[..., None], axis=1)
        Q = dst[np.take_along_axis(idx, keep, axis=1)]
        Rs, ts = _batched_kabsch(P, Q)
        R[active] = Rs @ R[active]
        t[active] = np.einsum("kij,kj->ki", Rs, t[active]) + ts
        iters[active] = it
        change = np.linalg.norm(Rs - np.eye(3), axis=(1, 2)) + np.linalg.norm(ts, axis=1)
        done = change < tol
        converged[active[done]] = True
        active = active[~done]
        if len(active) == 0:
            break
    dist, _ = tree.query((src @ np.swapaxes(R, 1, 2) + t[:, None]).reshape(-1, 3), workers=-1)
    cd = dist.reshape(k, n).mean(axis=1)
    return [AlignmentResult(RigidPose(R[i], t[i]), float(cd[i]), bool(converged[i]), int(iters[i])) for i in range(k)]


def refine_alignment(
    source: PointCloud3,
    target: PointCloud3,
    init: RigidPose,
    iterations: int = ICP_ITERATIONS,
    tol: float = ICP_TOLERANCE,
    inlier_fraction: float = INLIER_FRACTION,
    target_tree: Optional[cKDTree] = None,
) -> AlignmentResult:
    """Trimmed point-to-point ICP from ``init``; cd is the mean source-to-target NN distance."""
    return refine_many(source, target, [init], iterations, tol, inlier_fraction, target_tree)[0]


# ---------------------------------------------------------------------------
# registration to a representative


@dataclass
class Attempt:
    start: int
    init: RigidPose
    pose: RigidPose
    cd: float
    converged: bool


@dataclass
class RegistrationResult:
    instance_id: int
    representative: int
    pose: RigidPose  # object -> representative frame
    refined_box: OrientedBox  # in the object's (world) frame
    cd: float
    normalized_cd: float
    attempts: list[Attempt] = field(default_factory=list)

    def report(self) -> dict:
        return {"id": self.instance_id, "pose": self.pose.rows(), "normalized_cd": self.normalized_cd}


def subsample(points: np.ndarray, max_points: int = MAX_POINTS) -> np.ndarray:
    """Deterministic, evenly strided subset of at most ``max_points`` points."""
    if len(points) <= max_points:
        return points
    idx = np.linspace(0, len(points) - 1, max_points).round().astype(int)
    return points[idx]


def register_clouds(source: PointCloud3, target: PointCloud3, max_points: int = MAX_POINTS, **icp) -> tuple[AlignmentResult, list[Attempt]]:
    """Best of 24 OBB-seeded ICP runs, chosen by (cd, start index)."""
    src = PointCloud3(subsample(source.points, max_points))
    dst = PointCloud3(subsample(target.points, max_points))
    tree = cKDTree(dst.points)
    inits = initial_poses(fit_obb(src), fit_obb(dst))
    results = refine_many(src, dst, inits, target_tree=tree, **icp)
    attempts = [Attempt(k, init, r.pose, r.cd, r.converged) for k, (init, r) in enumerate(zip(inits, results))]
    best = min(range(len(results)), key=lambda k: (results[k].cd, k))
    return results[best], attempts


def register_to_representative(obj_id: int, obj_cloud: PointCloud3, rep_id: int, rep_cloud: PointCloud3,
                               rep_box: Optional[OrientedBox] = None, max_points: int = MAX_POINTS) -> RegistrationResult:
    """Align an object to its category representative and carry the representative's box over."""
    rep_box = fit_obb(rep_cloud) if rep_box is None else rep_box
    if obj_id == rep_id:
        pose = RigidPose.identity()
        return RegistrationResult(obj_id, rep_id, pose, rep_box.grown_to_cover(obj_cloud.points), 0.0, 0.0,
                                  [Attempt(0, pose, pose, 0.0, True)])
    best, attempts = register_clouds(obj_cloud, rep_cloud, max_points)
    refined = rep_box.transformed(best.pose.inverse()).grown_to_cover(obj_cloud.points)
    return RegistrationResult(obj_id, rep_id, best.pose, refined, best.cd,
                              best.cd / rep_cloud.largest_dimension(), attempts)


# ---------------------------------------------------------------------------
# subcategories


@dataclass
class SubcategoryAssignment:
    labels: dict[int, int]  # instance id -> subcategory index
    representatives: list[int]  # representative of each subcategory
    registrations: dict[int, RegistrationResult]

    def members(self, sub: int) -> list[int]:
        return sorted(i for i, s in self.labels.items() if s == sub)

    @property
    def n_subcategories(self) -> int:
        return len(self.representatives)


def subcategorize(
    clouds: dict[int, PointCloud3],
    representative: int,
    eta_sub: float = ETA_SUB,
    choose: Optional[Callable[[Sequence[int]], int]] = None,
    enabled: bool = True,
    max_points: int = MAX_POINTS,
) -> SubcategoryAssignment:
    """Split a category into shape-coherent groups by normalized registration distance.

    Objects within ``eta_sub`` of the representative join its group; the rest
    pick a new representative with ``choose`` (the uncertainty-based selector
    in the pipeline) and repeat. With ``enabled=False`` everything stays in
    one group aligned to the first representative.
    """
    if representative not in clouds:
        raise ValueError("representative is not among the objects")
    choose = choose or (lambda ids: min(ids))
    labels, reps, regs = {}, [], {}
    remaining = sorted(clouds)
    rep = representative
    while remaining:
        sub = len(reps)
        reps.append(rep)
        rep_box = fit_obb(clouds[rep])
        leftover = []
        for oid in remaining:
            r = register_to_representative(oid, clouds[oid], rep, clouds[rep], rep_box, max_points)
            if oid == rep or not enabled or r.normalized_cd <= eta_sub:
                labels[oid] = sub
                regs[oid] = r
            else:
                leftover.append(oid)
        remaining = leftover
        if remaining:
            rep = choose(remaining)
            if rep not in remaining:
                raise ValueError("representative chooser returned an object outside the leftover set")
    return SubcategoryAssignment(labels, reps, regs)


def write_registration_report(path, category: str, assignment: SubcategoryAssignment) -> None:
    objects = []
    for oid in sorted(assignment.labels):
        rec = assignment.registrations[oid].report()
        rec["subcategory"] = assignment.labels[oid]
        rec["representative"] = assignment.registrations[oid].representative
        objects.append(rec)
    write_json(path, {"category": category, "representative": assignment.representatives[0],
                      "representatives": assignment.representatives, "objects": objects})


def subcategory_boxes(assignment: SubcategoryAssignment, clouds: dict[int, PointCloud3]) -> dict[int, OrientedBox]:
    """Per-object boxes that share one canonical frame within each subcategory.

    The representative's box is grown in its own frame to cover every aligned
    member cloud, then carried back to each member through the inverse pose,
    so all members map onto the same normalized cube.
    """
    boxes = {}
    for sub, rep in enumerate(assignment.representatives):
        ids = assignment.members(sub)
        aligned = np.concatenate([assignment.registrations[i].pose.apply(clouds[i].points) for i in ids])
        shared = fit_obb(clouds[rep]).grown_to_cover(aligned)
        for i in ids:
            boxes[i] = shared.transformed(assignment.registrations[i].pose.inverse())
    return boxes
