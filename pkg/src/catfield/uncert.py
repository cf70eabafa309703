"""Ray uncertainty, reliability scores and representative selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .field import FieldModel
from .geom import DegenerateCloudError, OrientedBox, PointCloud3
from .io import write_csv
from .render import weight_profiles

N_DIRS = 512
N_EVAL_SAMPLES = 96
SPHERE_SCALE = 1.2


@dataclass(frozen=True)
class ReliabilityParams:
    alpha_u: float = 1.0
    m1: float = 0.1
    m2: float = 0.15
    M1: float = 0.57
    M2: float = 0.65
    kappa: float = 0.9
    eta_rep: float = 0.5

    def __post_init__(self):
        if not (0 < self.m1 < self.m2 < self.M1 < self.M2):
            raise ValueError("band edges must satisfy 0 < m1 < m2 < M1 < M2")
        if not (0.5 < self.kappa < 1):
            raise ValueError("kappa must lie in (0.5, 1)")
        if not (0 < self.eta_rep < 1):
            raise ValueError("eta_rep must lie in (0, 1)")
        if self.alpha_u <= 0:
            raise ValueError("alpha_u must be positive")

    @property
    def logit_kappa(self) -> float:
        return math.log(self.kappa / (1 - self.kappa))

    @property
    def alpha_m(self) -> float:
        return 2 * self.logit_kappa / (self.m2 - self.m1)

    @property
    def alpha_M(self) -> float:
        return 2 * self.logit_kappa / (self.M2 - self.M1)

    @property
    def beta_m(self) -> float:
        return (self.m1 + self.m2) / 2

    @property
    def beta_M(self) -> float:
        return (self.M1 + self.M2) / 2


def ray_entropy(weights) -> np.ndarray:
    """H = -sum w log w over the last axis (natural log, 0 log 0 = 0, weights not renormalized)."""
    w = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def ray_uncertainty(weights, alpha_u: float = 1.0) -> np.ndarray:
    """u = (sum w) * exp(-alpha_u * H)."""
    w = np.asarray(weights, dtype=np.float64)
    return w.sum(axis=-1) * np.exp(-alpha_u * ray_entropy(w))


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def reliability(u, params: ReliabilityParams = ReliabilityParams()) -> np.ndarray:
    """Band-stop score: high for empty (small u) and sharp (large u) rays, low in between."""
    u = np.asarray(u, dtype=np.float64)
    p = params
    return _logistic(-p.alpha_m * (u - p.beta_m)) + _logistic(p.alpha_M * (u - p.beta_M))


# ---------------------------------------------------------------------------
# sphere rays


@dataclass
class SphereRayBundle:
    center: np.ndarray
    radius: float
    origins: np.ndarray  # (n, 3) on the sphere
    directions: np.ndarray  # (n, 3) unit, toward the antipode
    u: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.origins)

    @property
    def chord_length(self) -> float:
        return 2.0 * self.radius


def fibonacci_sphere(n: int) -> np.ndarray:
    """n nearly uniform unit vectors on a golden-angle spiral."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def cast_sphere_rays(cloud: PointCloud3, n_dirs: int = N_DIRS, scale: float = SPHERE_SCALE) -> SphereRayBundle:
    """Rays from a sphere around the cloud to the antipodal points, passing through its center."""
    if cloud.count < 2:
        raise DegenerateCloudError("sphere rays need at least two points")
    extent = cloud.largest_dimension()
    if not extent > 0:
        raise DegenerateCloudError("cloud has zero extent")
    center = cloud.centroid()
    radius = scale * extent
    dirs = fibonacci_sphere(n_dirs)
    return SphereRayBundle(center, radius, center + radius * dirs, -dirs)


def evaluate_bundle(
    bundle: SphereRayBundle,
    model: FieldModel,
    box: OrientedBox,
    code=None,
    params: ReliabilityParams = ReliabilityParams(),
    n_samples: int = N_EVAL_SAMPLES,
) -> SphereRayBundle:
    """Fill in u and g for every ray from the model's weight profile.

    Samples are spaced evenly over the whole chord, so the spacing is the same
    for every ray of an object; the field counts as empty outside its box.
    """
    prof = weight_profiles(model, code, box, bundle.origins, bundle.directions, n_samples,
                           t_range=(0.0, bundle.chord_length))
    bundle.u = ray_uncertainty(prof.weights, params.alpha_u)
    bundle.g = reliability(bundle.u, params)
    return bundle


# ---------------------------------------------------------------------------
# representative


@dataclass
class Candidate:
    """One object of a category: its trained model, field box and observed cloud."""

    instance_id: int
    model: FieldModel
    box: OrientedBox
    cloud: PointCloud3


@dataclass
class RepresentativeChoice:
    instance_id: int
    scores: dict[int, float]
    bundles: dict[int, SphereRayBundle] = field(default_factory=dict)
    method: str = "uncertainty"


def reliable_fraction(bundle: SphereRayBundle, eta: float) -> float:
    return float(np.mean(bundle.g > eta))


def select_representative(
    candidates: Sequence[Candidate],
    params: ReliabilityParams = ReliabilityParams(),
    n_dirs: int = N_DIRS,
    n_samples: int = N_EVAL_SAMPLES,
    method: str = "uncertainty",
    rng: Optional[np.random.Generator] = None,
) -> RepresentativeChoice:
    """Pick the object whose sphere rays are most often reliable.

    Ties go to the larger observed point count, then the smaller id. With
    ``method="random"`` (ablation) a candidate is drawn uniformly instead.
    """
    if not candidates:
        raise ValueError("no candidates to choose from")
    if method == "random":
        rng = np.random.default_rng() if rng is None else rng
        ordered = sorted(candidates, key=lambda c: c.instance_id)
        pick = ordered[int(rng.integers(len(ordered)))]
        return RepresentativeChoice(pick.instance_id, {}, {}, "random")
    if method != "uncertainty":
        raise ValueError(f"unknown representative method {method!r}")
    scores, bundles = {}, {}
    for c in candidates:
        b = evaluate_bundle(cast_sphere_rays(c.cloud, n_dirs), c.model, c.box, None, params, n_samples)
        scores[c.instance_id] = reliable_fraction(b, params.eta_rep)
        bundles[c.instance_id] = b
    best = max(candidates, key=lambda c: (scores[c.instance_id], c.cloud.count, -c.instance_id))
    return RepresentativeChoice(best.instance_id, scores, bundles)


def write_uncertainty_csv(path, bundle: SphereRayBundle) -> None:
    if bundle.u is None:
        raise ValueError("bundle has not been evaluated")
    rows = [
        (i, f"{o[0]:.6f}", f"{o[1]:.6f}", f"{o[2]:.6f}", f"{u:.6f}", f"{g:.6f}")
        for i, (o, u, g) in enumerate(zip(bundle.origins, bundle.u, bundle.g))
    ]
    write_csv(path, ["ray", "x", "y", "z", "u", "g"], rows)
