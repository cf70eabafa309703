"""Ray sampling, occupancy volume rendering, losses and field training loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .field import Adam, AdamConfig, Bound, FieldModel, LatentCodes, backward
from .geom import OrientedBox, fit_obb
from .synth import DELTA_STOP, Frame, ObjectObservation, occlusion_truncate

N_SAMPLES = 10
SIGMA_D = 0.03
T_NEAR = 0.05
LAMBDA_COLOR = 5.0
LAMBDA_OPACITY = 10.0
LAMBDA_REG = 5e-4
FIELD_BOX_SCALE = 1.1
FIELD_BOX_MARGIN = 0.02


class SamplingRangeError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, record: dict):
        super().__init__(f"non-finite loss at iteration {iteration}: {record}")
        self.iteration = iteration
        self.record = record


class OwnershipError(ValueError):
    pass


def field_box(box: OrientedBox, scale: float = FIELD_BOX_SCALE, margin: float = FIELD_BOX_MARGIN) -> OrientedBox:
    """Domain of an object's field: its box enlarged so surfaces stay off the cube faces."""
    return box.padded(scale, margin)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class RaySampleSet:
    origin: np.ndarray
    direction: np.ndarray
    depths: np.ndarray
    t_max: float


def sample_depth_guided_batch(
    rng: np.random.Generator,
    t_near: np.ndarray,
    t_max: np.ndarray,
    depth: np.ndarray,
    n: int = N_SAMPLES,
    sigma: float = SIGMA_D,
) -> np.ndarray:
    """Sorted sample depths (R, n) for a batch of rays.

    Rays with a usable observed depth D get ceil(n/2) stratified samples in
    front of the surface band and floor(n/2) uniform samples in
    [D - sigma, D + sigma]; others are stratified over [t_near, t_max].
    Nothing is placed beyond t_max.
    """
    if n < 2:
        raise ValueError("need at least two samples per ray")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_max = np.asarray(t_max, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(t_max <= t_near):
        raise SamplingRangeError("t_max must exceed t_near")
    n_front = math.ceil(n / 2)
    band_lo = np.maximum(depth - sigma, t_near)
    band_hi = np.minimum(depth + sigma, t_max)
    guided = (depth > 0) & (band_hi - band_lo > 1e-4)
    # front segment ends 3 sigma before the surface; when that leaves no room
    # it ends at the band, and failing that spans up to the band's far end
    front_hi = np.maximum(depth - 3 * sigma, t_near)
    front_hi = np.where(front_hi - t_near < 1e-3, band_lo, front_hi)
    front_hi = np.where(front_hi - t_near < 1e-3, band_hi, front_hi)

    k = np.arange(n)
    in_front = guided[:, None] & (k < n_front)
    in_band = guided[:, None] & (k >= n_front)
    u = rng.random((len(t_near), n))
    # stratified columns: bin k of nb bins; band columns: plain uniform
    nb = np.where(guided, n_front, n)[:, None]
    frac = np.where(in_band, u, (k + u) / nb)
    lo = np.where(in_band, band_lo[:, None], t_near[:, None])
    hi = np.where(in_band, band_hi[:, None], np.where(in_front, front_hi[:, None], t_max[:, None]))
    out = lo + (hi - lo) * frac
    out.sort(axis=1)
    return np.minimum(out, t_max[:, None], out=out)


def sample_depth_guided(
    origin, direction, observed_depth: Optional[float], t_max: float, n: int = N_SAMPLES,
    rng: Optional[np.random.Generator] = None, t_near: float = T_NEAR, sigma: float = SIGMA_D,
) -> RaySampleSet:
    rng = np.random.default_rng() if rng is None else rng
    d = 0.0 if observed_depth is None else float(observed_depth)
    t = sample_depth_guided_batch(rng, np.array([t_near]), np.array([t_max]), np.array([d]), n, sigma)[0]
    return RaySampleSet(np.asarray(origin, float), np.asarray(direction, float), t, t_max)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class WeightProfile:
    occupancies: np.ndarray
    weights: np.ndarray
    colors: np.ndarray
    depths: np.ndarray


def compute_weights(occupancies) -> np.ndarray:
    """w_i = o_i * prod_{j<i}(1 - o_j) along the last axis."""
    return ad.termination_weights_array(occupancies)


def render_ray(profile: WeightProfile) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(color, depth, opacity) as weighted sums along the last sample axis."""
    w = profile.weights
    color = np.sum(w[..., None] * profile.colors, axis=-2)
    depth = np.sum(w * profile.depths, axis=-1)
    opacity = np.sum(w, axis=-1)
    return color, depth, opacity


def ray_box_interval(origins, dirs, box: OrientedBox) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit ray parameters of the box; exit < entry when the ray misses."""
    o = (np.asarray(origins) - box.center) @ box.axes
    d = np.asarray(dirs) @ box.axes
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-box.half_extents - o) / d
        t2 = (box.half_extents - o) / d
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    return np.max(np.fmin(t1, t2), axis=-1), np.min(np.fmax(t1, t2), axis=-1)


def to_nocs_rays(origins, dirs, box: OrientedBox) -> tuple[np.ndarray, np.ndarray]:
    """Rays expressed in the box's normalized cube (same ray parameter t)."""
    o = ((np.asarray(origins) - box.center) @ box.axes) / box.half_extents
    d = (np.asarray(dirs) @ box.axes) / box.half_extents
    return o, d


def weight_profiles(
    model: FieldModel, code, box: OrientedBox, origins, dirs, n_samples: int = 64, t_range=None
) -> WeightProfile:
    """Deterministic evaluation of the field along rays; occupancy is zero outside ``box``.

    Samples sit at the midpoints of ``n_samples`` equal bins over ``t_range``
    (per-ray arrays ``(t0, t1)``) or, by default, over the part of each ray
    inside the box. Rays missing the box get zero weights.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    e0, e1 = ray_box_interval(origins, dirs, box)
    if t_range is None:
        t0, t1 = np.maximum(e0, 0.0), e1
    else:
        t0, t1 = (np.broadcast_to(np.asarray(x, dtype=np.float64), e0.shape) for x in t_range)
    span = np.maximum(t1 - t0, 0.0)
    frac = (np.arange(n_samples) + 0.5) / n_samples
    t = t0[:, None] + span[:, None] * frac
    inside = (t >= e0[:, None]) & (t <= e1[:, None])
    o_n, d_n = to_nocs_rays(origins, dirs, box)
    occ = np.zeros(t.shape)
    rgb = np.zeros((*t.shape, 3))
    r, k = np.nonzero(inside)
    if len(r):
        pts = o_n[r] + t[r, k, None] * d_n[r]
        if model.is_category:
            zs = np.broadcast_to(np.asarray(code[0], dtype=np.float64), (len(pts), model.code_dim))
            zt = np.broadcast_to(np.asarray(code[1], dtype=np.float64), (len(pts), model.code_dim))
            occ[r, k], rgb[r, k] = model.forward_category(pts, zs, zt)
        else:
            occ[r, k], rgb[r, k] = model.forward_object(pts)
    return WeightProfile(occ, compute_weights(occ), rgb, t)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    per_object: dict[int, dict[str, float]]
    depth: float
    color: float
    opacity: float
    reg: float
    total: float
    lambdas: tuple[float, float, float] = (LAMBDA_COLOR, LAMBDA_OPACITY, LAMBDA_REG)

    def record(self, iteration: int) -> dict:
        return {"iter": iteration, "L_depth": self.depth, "L_color": self.color,
                "L_opacity": self.opacity, "L_reg": self.reg, "total": self.total}


@dataclass
class RayBatch:
    """Renders and targets for a batch of rays; ``owner`` indexes the object of each ray.

    ``render`` packs the rendered color, depth and opacity per ray as (R, 5).
    """

    render: ad.Tensor
    target_color: np.ndarray
    target_depth: np.ndarray  # 0 marks a missing measurement
    mask: np.ndarray  # M^k(r) in {0, 1}
    owner: np.ndarray

    @property
    def color(self) -> np.ndarray:
        return self.render.data[:, :3]

    @property
    def depth(self) -> np.ndarray:
        return self.render.data[:, 3]

    @property
    def opacity(self) -> np.ndarray:
        return self.render.data[:, 4]


def compute_losses(
    batch: RayBatch,
    object_ids: Sequence[int],
    bound: Optional[Bound] = None,
    lambdas=(LAMBDA_COLOR, LAMBDA_OPACITY, LAMBDA_REG),
) -> tuple[ad.Tensor, LossBreakdown]:
    """Masked L1 depth/color, opacity-vs-mask and code-regularization losses, summed over rays."""
    lam_c, lam_o, lam_r = lambdas
    mask = np.asarray(batch.mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise OwnershipError("mask values must be 0 or 1")
    owner = np.asarray(batch.owner)
    if owner.size and (owner.min() < 0 or owner.max() >= len(object_ids)):
        raise OwnershipError("ray owner outside the object list")
    dt = batch.render.data.dtype
    m = mask.astype(dt)
    target = np.empty((len(m), 5), dtype=dt)
    target[:, :3] = batch.target_color
    target[:, 3] = batch.target_depth
    target[:, 4] = m
    # per-ray weights of the five absolute residuals; no depth term without a measurement
    weight = np.empty_like(target)
    weight[:, :3] = (lam_c * m)[:, None]
    weight[:, 3] = m * (batch.target_depth > 0)
    weight[:, 4] = lam_o
    total = ad.weighted_l1(batch.render, target, weight)

    K = len(object_ids)
    reg_k = np.zeros(K)
    if bound is not None and bound.z_s is not None:
        total = ad.add(total, ad.mul(bound.code_regularizer(), lam_r))
        reg_k = np.sum(bound.z_s.data.astype(np.float64) ** 2, 1) + np.sum(bound.z_t.data.astype(np.float64) ** 2, 1)

    err = np.abs(batch.render.data - target).astype(np.float64)
    d_ray = weight[:, 3] * err[:, 3]
    c_ray = m * err[:, :3].sum(axis=1)
    dk = np.bincount(owner, d_ray, K)
    ck = np.bincount(owner, c_ray, K)
    ok = np.bincount(owner, err[:, 4], K)
    per_object = {
        int(oid): {"L_depth": float(dk[i]), "L_color": float(ck[i]), "L_opacity": float(ok[i]), "L_reg": float(reg_k[i])}
        for i, oid in enumerate(object_ids)
    }
    breakdown = LossBreakdown(
        per_object,
        float(dk.sum()),
        float(ck.sum()),
        float(ok.sum()),
        float(reg_k.sum()),
        float(dk.sum() + lam_c * ck.sum() + lam_o * ok.sum() + lam_r * reg_k.sum()),
        (lam_c, lam_o, lam_r),
    )
    return total, breakdown


def render_batch(logits: ad.Tensor, rgb: ad.Tensor, t: np.ndarray) -> ad.Tensor:
    """Packed (R, 5) color/depth/opacity for flat per-sample network outputs."""
    R, N = t.shape
    return ad.ray_render(ad.reshape(logits, (R, N)), ad.reshape(rgb, (R, N, 3)), t)


# ---------------------------------------------------------------------------
# training data


@dataclass
class RayPool:
    """Every training ray of a set of objects, already clipped to their field boxes."""

    origin: np.ndarray  # normalized-cube origin
    direction: np.ndarray  # normalized-cube direction (ray parameter is world length)
    t_near: np.ndarray
    t_far: np.ndarray
    depth: np.ndarray  # world ray length to the observed surface, 0 if none
    rgb: np.ndarray
    mask: np.ndarray
    owner: np.ndarray

    def __len__(self):
        return len(self.t_near)

    def points(self, idx: np.ndarray, t: np.ndarray, dtype=np.float64) -> np.ndarray:
        """Flat (R*N, 3) cube-space sample positions of rays ``idx`` at parameters ``t``."""
        o, d = self.origin[idx], self.direction[idx]
        out = np.empty((*t.shape, 3), dtype=dtype)
        for c in range(3):  # per component: much faster than a 3-wide broadcast
            out[..., c] = o[:, c : c + 1] + t * d[:, c : c + 1]
        return out.reshape(-1, 3)

    @staticmethod
    def concat(pools: Sequence["RayPool"]) -> "RayPool":
        return RayPool(*(np.concatenate([getattr(p, f) for p in pools]) for f in RayPool.__dataclass_fields__))


def object_rays(frames: Sequence[Frame], obs: ObjectObservation, bbox_pad: int = 2, delta: float = DELTA_STOP):
    """World rays of every pixel inside the object's 2D boxes, with targets and truncation."""
    chunks = []
    for fo in obs.frames:
        frame = frames[fo.frame_index]
        H, W = frame.shape
        u0, v0, u1, v1 = fo.bbox
        u0, v0 = max(u0 - bbox_pad, 0), max(v0 - bbox_pad, 0)
        u1, v1 = min(u1 + bbox_pad, W - 1), min(v1 + bbox_pad, H - 1)
        vv, uu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1]
        uu, vv = uu.reshape(-1), vv.reshape(-1)
        o, d, scale = frame.camera.rays(uu, vv)
        far = frame.camera.max_depth * scale
        t_max = occlusion_truncate(frame, obs.instance_id, uu, vv, far, delta)
        mask = (frame.instance_mask[vv, uu] == obs.instance_id).astype(np.int64)
        depth = np.where(mask == 1, frame.depth[vv, uu] * scale, 0.0)
        chunks.append((o, d, t_max, depth, frame.rgb[vv, uu], mask))
    return [np.concatenate(x) for x in zip(*chunks)]


def build_ray_pool(frames, obs: ObjectObservation, box: OrientedBox, owner: int = 0, bbox_pad: int = 2,
                   t_near: float = T_NEAR) -> RayPool:
    o, d, t_max, depth, rgb, mask = object_rays(frames, obs, bbox_pad)
    t0, t1 = ray_box_interval(o, d, box)
    t0 = np.maximum(t0, t_near)
    t1 = np.minimum(t1, t_max)
    keep = t1 - t0 > 1e-3  # rays with no admissible segment render zero opacity regardless of the field
    o_n, d_n = to_nocs_rays(o[keep], d[keep], box)
    return RayPool(o_n, d_n, t0[keep], t1[keep], depth[keep], rgb[keep], mask[keep],
                   np.full(int(keep.sum()), owner, dtype=np.int64))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iterations: int = 2000
    pixels_per_iter: int = 120
    n_samples: int = N_SAMPLES
    sigma_d: float = SIGMA_D
    lambda_color: float = LAMBDA_COLOR
    lambda_opacity: float = LAMBDA_OPACITY
    lambda_reg: float = LAMBDA_REG
    lr: float = 1e-3
    code_lr: float = 1e-3
    seed: int = 0
    dtype: str = "float32"
    bbox_pad: int = 2


@dataclass
class TrainResult:
    model: FieldModel
    codes: Optional[LatentCodes]
    log: list[dict] = field(default_factory=list)


def _train(model: FieldModel, codes: Optional[LatentCodes], pool: RayPool, object_ids, cfg: TrainConfig,
           rng: np.random.Generator) -> TrainResult:
    dtype = np.dtype(cfg.dtype)
    opt = Adam(AdamConfig(lr=cfg.lr, code_lr=cfg.code_lr))
    lambdas = (cfg.lambda_color, cfg.lambda_opacity, cfg.lambda_reg)
    log = []
    if len(pool) == 0 and cfg.iterations > 0:
        raise ValueError("no training rays intersect the field box")
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(pool), cfg.pixels_per_iter)
        t = sample_depth_guided_batch(rng, pool.t_near[idx], pool.t_far[idx], pool.depth[idx], cfg.n_samples, cfg.sigma_d)
        owner = pool.owner[idx]
        bound = Bound(model, codes, dtype)
        logits, rgb = bound.forward(pool.points(idx, t, dtype), np.repeat(owner, cfg.n_samples))
        render = render_batch(logits, rgb, t)
        batch = RayBatch(render, pool.rgb[idx], pool.depth[idx], pool.mask[idx], owner)
        loss, parts = compute_losses(batch, object_ids, bound if codes is not None else None, lambdas)
        rec = parts.record(it)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(it, rec)
        log.append(rec)
        grads = backward(bound, loss)
        opt.step(model, codes, grads)
    return TrainResult(model, codes, log)


def train_object_model(frames, obs: ObjectObservation, box: Optional[OrientedBox] = None,
                       config: Optional[TrainConfig] = None) -> TrainResult:
    """Independent per-object field trained on the object's 2D-box pixels."""
    cfg = config or TrainConfig()
    if box is None:
        box = field_box(fit_obb(obs.cloud))
    rng = np.random.default_rng([cfg.seed, obs.instance_id])
    model = FieldModel.create("object", rng)
    pool = build_ray_pool(frames, obs, box, 0, cfg.bbox_pad)
    return _train(model, None, pool, [obs.instance_id], cfg, rng)


def category_pixels_per_iter(n_objects_scene: int, n_models_scene: int, base: int = 120) -> int:
    return max(1, int(round(base * n_objects_scene / max(n_models_scene, 1))))


def train_category_model(frames, members: Sequence[tuple[ObjectObservation, OrientedBox]],
                         config: Optional[TrainConfig] = None) -> TrainResult:
    """One field shared by several objects, each mapped into the cube by its own (aligned) box.

    ``members`` pairs every object with the field box of its refined,
    representative-aligned oriented box.
    """
    if not members:
        raise ValueError("a category model needs at least one object")
    cfg = config or TrainConfig()
    members = sorted(members, key=lambda m: m[0].instance_id)
    ids = [m[0].instance_id for m in members]
    rng = np.random.default_rng([cfg.seed, *ids])
    model = FieldModel.create("category", rng)
    codes = LatentCodes.zeros(ids, model.code_dim)
    pool = RayPool.concat([build_ray_pool(frames, obs, box, k, cfg.bbox_pad) for k, (obs, box) in enumerate(members)])
    return _train(model, codes, pool, ids, cfg, rng)
