"""Occupancy/color neural fields on the normalized object cube.

Two architectures share the same encoding and trunk layout:

* object-level: encoded point -> 3 softplus layers -> occupancy logit and color
* category-level: (encoded point, shape code) -> 3 softplus layers -> occupancy
  logit and feature v; (v, texture code) -> relu layer -> color

The category color head never sees the point directly, so occupancy does not
depend on the texture code at all.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, positional_encoding_array, sigmoid_array

N_FREQ = 4
FG_HIDDEN = 32
BG_HIDDEN = 128
CODE_DIM = 32
FEATURE_DIM = 32
SOFTPLUS_BETA = 10.0

CHECKPOINT_MAGIC = b"CFLD"
CHECKPOINT_VERSION = 1
_KIND_IDS = {"object": 0, "category": 1}


class CodeDimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def encoding_dim(n_freq: int) -> int:
    return 3 + 6 * n_freq


def positional_encoding(x, n_freq: int = N_FREQ) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < n_freq."""
    return positional_encoding_array(x, n_freq)


@dataclass
class LatentCodes:
    """Per-object shape and texture codes of one category model."""

    instance_ids: list[int]
    z_s: np.ndarray
    z_t: np.ndarray

    @classmethod
    def zeros(cls, instance_ids, dim: int = CODE_DIM) -> "LatentCodes":
        n = len(instance_ids)
        return cls(list(instance_ids), np.zeros((n, dim)), np.zeros((n, dim)))

    def index(self, instance_id: int) -> int:
        return self.instance_ids.index(instance_id)

    def code(self, instance_id: int) -> tuple[np.ndarray, np.ndarray]:
        i = self.index(instance_id)
        return self.z_s[i], self.z_t[i]

    def copy(self) -> "LatentCodes":
        return LatentCodes(list(self.instance_ids), self.z_s.copy(), self.z_t.copy())


@dataclass
class GradientSet:
    params: dict[str, np.ndarray]
    z_s: Optional[np.ndarray] = None
    z_t: Optional[np.ndarray] = None

    def all_finite(self) -> bool:
        arrays = list(self.params.values()) + [a for a in (self.z_s, self.z_t) if a is not None]
        return all(np.all(np.isfinite(a)) for a in arrays)


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class FieldModel:
    kind: str  # "object" or "category"
    params: dict[str, np.ndarray]
    n_freq: int = N_FREQ
    hidden: int = FG_HIDDEN
    code_dim: int = CODE_DIM
    feature_dim: int = FEATURE_DIM
    beta: float = SOFTPLUS_BETA

    @classmethod
    def create(
        cls,
        kind: str,
        seed: int | np.random.Generator = 0,
        hidden: int = FG_HIDDEN,
        n_freq: int = N_FREQ,
        code_dim: int = CODE_DIM,
        feature_dim: int = FEATURE_DIM,
        beta: float = SOFTPLUS_BETA,
    ) -> "FieldModel":
        if kind not in _KIND_IDS:
            raise ValueError(f"unknown field kind {kind!r}")
        rng = np.random.default_rng(seed)
        E, H = encoding_dim(n_freq), hidden
        p = {"w0": _glorot(rng, E, H), "b0": np.zeros(H)}
        if kind == "category":
            p["w0_code"] = _glorot(rng, code_dim, H)
        p.update(
            w1=_glorot(rng, H, H), b1=np.zeros(H),
            w2=_glorot(rng, H, H), b2=np.zeros(H),
            # untrained fields start maximally uncertain
            w_occ=np.zeros((H, 1)), b_occ=np.zeros(1),
        )
        if kind == "object":
            p.update(w_rgb=_glorot(rng, H, 3), b_rgb=np.zeros(3))
        else:
            p.update(
                w_feat=_glorot(rng, H, feature_dim), b_feat=np.zeros(feature_dim),
                wt0=_glorot(rng, feature_dim, H), wt0_code=_glorot(rng, code_dim, H), bt0=np.zeros(H),
                wt1=_glorot(rng, H, 3), bt1=np.zeros(3),
            )
        return cls(kind, p, n_freq, hidden, code_dim, feature_dim, beta)

    @classmethod
    def background(cls, seed=0) -> "FieldModel":
        return cls.create("object", seed, hidden=BG_HIDDEN)

    @property
    def is_category(self) -> bool:
        return self.kind == "category"

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "FieldModel":
        return FieldModel(self.kind, {k: v.copy() for k, v in self.params.items()}, self.n_freq,
                          self.hidden, self.code_dim, self.feature_dim, self.beta)

    def as_float32(self) -> "FieldModel":
        """Same model with parameters rounded to checkpoint precision."""
        m = self.copy()
        m.params = {k: v.astype(np.float32).astype(np.float64) for k, v in m.params.items()}
        return m

    # -- plain evaluation -------------------------------------------------

    def _trunk(self, enc, code_term=None):
        p, b = self.params, self.beta
        pre = enc @ p["w0"] + p["b0"]
        if code_term is not None:
            pre = pre + code_term
        h = ad.softplus_array(b * pre) / b
        h = ad.softplus_array(b * (h @ p["w1"] + p["b1"])) / b
        h = ad.softplus_array(b * (h @ p["w2"] + p["b2"])) / b
        return h

    def logits(self, x, z_s=None) -> np.ndarray:
        """Occupancy logits for points in the normalized cube."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        enc = positional_encoding_array(x, self.n_freq)
        code_term = None
        if self.is_category:
            z_s = self._check_code(z_s)
            code_term = z_s @ self.params["w0_code"]
        h = self._trunk(enc, code_term)
        return (h @ self.params["w_occ"] + self.params["b_occ"])[:, 0]

    def forward_object(self, x) -> tuple[np.ndarray, np.ndarray]:
        if self.is_category:
            raise ValueError("forward_object() called on a category model")
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = self._trunk(positional_encoding_array(x.reshape(-1, 3), self.n_freq))
        occ = sigmoid_array((h @ self.params["w_occ"] + self.params["b_occ"])[:, 0])
        rgb = sigmoid_array(h @ self.params["w_rgb"] + self.params["b_rgb"])
        return (occ[0], rgb[0]) if single else (occ, rgb)

    def forward_category(self, x, z_s, z_t) -> tuple[np.ndarray, np.ndarray]:
        if not self.is_category:
            raise ValueError("forward_category() called on an object model")
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        z_s, z_t = self._check_code(z_s), self._check_code(z_t)
        p = self.params
        h = self._trunk(positional_encoding_array(x.reshape(-1, 3), self.n_freq), z_s @ p["w0_code"])
        occ = sigmoid_array((h @ p["w_occ"] + p["b_occ"])[:, 0])
        v = h @ p["w_feat"] + p["b_feat"]
        t = np.maximum(v @ p["wt0"] + z_t @ p["wt0_code"] + p["bt0"], 0.0)
        rgb = sigmoid_array(t @ p["wt1"] + p["bt1"])
        return (occ[0], rgb[0]) if single else (occ, rgb)

    def occupancy(self, x, code: Optional[tuple] = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        z_s = None if code is None else code[0]
        return sigmoid_array(self.logits(x, z_s))

    def _check_code(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.code_dim:
            raise CodeDimensionError(f"code has dimension {z.shape[-1]}, model expects {self.code_dim}")
        return z


class Bound:
    """Parameter (and code) leaves for one recorded forward computation."""

    def __init__(self, model: FieldModel, codes: Optional[LatentCodes] = None, dtype=np.float64):
        self.model = model
        self.codes = codes
        self.dtype = dtype
        self.params = {k: ad.parameter(v, k, dtype) for k, v in model.params.items()}
        self.z_s = self.z_t = None
        if model.is_category:
            if codes is None:
                raise ValueError("category model needs latent codes")
            if codes.z_s.shape[1] != model.code_dim or codes.z_t.shape[1] != model.code_dim:
                raise CodeDimensionError("latent code dimension does not match the model")
            self.z_s = ad.parameter(codes.z_s, "z_s", dtype)
            self.z_t = ad.parameter(codes.z_t, "z_t", dtype)

    def forward(self, x, owner: Optional[np.ndarray] = None, x_grad: bool = False):
        """Occupancy logits (n,) and colors (n, 3) for normalized points ``x``.

        ``owner`` gives, for category models, the code row of every point.
        """
        m, p = self.model, self.params
        x = ad.parameter(x, "x", self.dtype) if x_grad else Tensor(np.asarray(x, dtype=self.dtype))
        enc = ad.positional_encoding(x, m.n_freq)
        if m.is_category:
            pre = ad.linear(enc, p["w0"], p["b0"])
            per_code = ad.matmul(self.z_s, p["w0_code"])
            h = ad.softplus(ad.add(pre, ad.take_rows(per_code, owner)), m.beta)
        else:
            h = ad.softplus_linear(enc, p["w0"], p["b0"], m.beta)
        h = ad.softplus_linear(h, p["w1"], p["b1"], m.beta)
        h = ad.softplus_linear(h, p["w2"], p["b2"], m.beta)
        logit = ad.reshape(ad.linear(h, p["w_occ"], p["b_occ"]), (-1,))
        if not m.is_category:
            rgb = ad.sigmoid(ad.linear(h, p["w_rgb"], p["b_rgb"]))
        else:
            v = ad.linear(h, p["w_feat"], p["b_feat"])
            tex = ad.take_rows(ad.matmul(self.z_t, p["wt0_code"]), owner)
            t = ad.relu(ad.add(ad.linear(v, p["wt0"], p["bt0"]), tex))
            rgb = ad.sigmoid(ad.linear(t, p["wt1"], p["bt1"]))
        return logit, rgb

    def code_regularizer(self) -> Tensor:
        """Per-object sum of ||z_s||^2 + ||z_t||^2, summed over objects."""
        return ad.add(ad.square_sum(self.z_s), ad.square_sum(self.z_t))


def backward(bound: Bound, loss: Tensor) -> GradientSet:
    """Exact gradients of ``loss`` for every parameter and code bound in ``bound``."""
    leaves = ad.backward(loss)
    grads = {k: leaves.get(id(t), np.zeros_like(t.data)) for k, t in bound.params.items()}
    gs = GradientSet(grads)
    if bound.z_s is not None:
        gs.z_s = leaves.get(id(bound.z_s), np.zeros_like(bound.z_s.data))
        gs.z_t = leaves.get(id(bound.z_t), np.zeros_like(bound.z_t.data))
    return gs


@dataclass
class AdamConfig:
    lr: float = 1e-3
    code_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Adam:
    config: AdamConfig = field(default_factory=AdamConfig)
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def _update(self, key, values, grads, lr):
        """One moment update over a group of arrays treated as a single flat vector."""
        c = self.config
        g = np.concatenate([x.reshape(-1) for x in grads])
        m = self.m.get(key)
        if m is None:
            m = self.m[key] = np.zeros_like(g)
            self.v[key] = np.zeros_like(g)
        v = self.v[key]
        m *= c.beta1
        m += (1 - c.beta1) * g
        v *= c.beta2
        v += (1 - c.beta2) * g * g
        step = (lr / (1 - c.beta1**self.t)) * m / (np.sqrt(v / (1 - c.beta2**self.t)) + c.eps)
        start = 0
        for x in values:
            x -= step[start : start + x.size].reshape(x.shape)
            start += x.size

    def step(self, model: FieldModel, codes: Optional[LatentCodes], grads: GradientSet) -> None:
        """In-place adaptive-moment update; refuses non-finite gradients."""
        if not grads.all_finite():
            raise NonFiniteGradientError("non-finite gradient, optimizer step aborted")
        for k, g in grads.params.items():
            if g.shape != model.params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}")
        self.t += 1
        keys = sorted(grads.params)
        self._update("params", [model.params[k] for k in keys], [grads.params[k] for k in keys], self.config.lr)
        if codes is not None and grads.z_s is not None:
            self._update("codes", [codes.z_s, codes.z_t], [grads.z_s, grads.z_t], self.config.code_lr)


def optimizer_step(model, codes, grads, optimizer: Adam):
    optimizer.step(model, codes, grads)
    return model, codes


# ---------------------------------------------------------------------------
# checkpoint
#
# layout (little endian):
#   magic "CFLD" | u32 version | u32 kind | u32 n_freq | u32 hidden
#   | u32 code_dim | u32 feature_dim | f32 beta | u32 n_blocks
#   per block: u32 name_len | name utf-8 | u32 ndim | u32 dims[ndim] | f32 data
#   u32 n_codes | u32 code_dim, then per code: i32 instance id | f32 z_s | f32 z_t


def save_checkpoint(path, model: FieldModel, codes: Optional[LatentCodes] = None) -> None:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack(
        "<IIIIIIfI", CHECKPOINT_VERSION, _KIND_IDS[model.kind], model.n_freq, model.hidden,
        model.code_dim, model.feature_dim, model.beta, len(model.params),
    )
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    n_codes = 0 if codes is None else len(codes.instance_ids)
    dim = model.code_dim if codes is None else codes.z_s.shape[1]
    out += struct.pack("<II", n_codes, dim)
    for i in range(n_codes):
        out += struct.pack("<i", codes.instance_ids[i])
        out += np.ascontiguousarray(codes.z_s[i], dtype="<f4").tobytes()
        out += np.ascontiguousarray(codes.z_t[i], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[FieldModel, Optional[LatentCodes]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    version, kind_id, n_freq, hidden, code_dim, feat_dim, beta, n_blocks = struct.unpack_from("<IIIIIIfI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<IIIIIIfI")
    params = {}
    for _ in range(n_blocks):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
        pos += 4 + 4 * ndim
        count = int(np.prod(shape))
        params[name] = np.frombuffer(buf, "<f4", count, pos).astype(np.float64).reshape(shape)
        pos += 4 * count
    n_codes, dim = struct.unpack_from("<II", buf, pos)
    pos += 8
    codes = None
    if n_codes:
        ids, zs, zt = [], [], []
        for _ in range(n_codes):
            (iid,) = struct.unpack_from("<i", buf, pos)
            pos += 4
            zs.append(np.frombuffer(buf, "<f4", dim, pos).astype(np.float64))
            zt.append(np.frombuffer(buf, "<f4", dim, pos + 4 * dim).astype(np.float64))
            pos += 8 * dim
            ids.append(iid)
        codes = LatentCodes(ids, np.stack(zs), np.stack(zt))
    kind = {v: k for k, v in _KIND_IDS.items()}[kind_id]
    beta = float(np.float32(beta))
    return FieldModel(kind, params, n_freq, hidden, code_dim, feat_dim, beta), codes
