"""Windowed-MLP policy with a Gaussian-mixture action head, in plain numpy.

All parameters live in one float64 vector; :class:`ParamLayout` names the
slices.  ``backward`` is hand-derived reverse mode for exactly this
architecture (tanh trunk, linear heads for mixture logits, means and
softly-clamped log-stds).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LOG_2PI = math.log(2 * math.pi)


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PolicyHyper:
    obs_dim: int
    window: int = 10
    hidden: tuple[int, ...] = (256, 256)
    mixtures: int = 5
    action_dim: int = 3
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    # fixed per-frame input affine, x -> (x - offset) * scale; not trained
    input_offset: Optional[tuple[float, ...]] = None
    input_scale: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        for name in ("input_offset", "input_scale"):
            v = getattr(self, name)
            if v is not None:
                if len(v) != self.obs_dim:
                    raise DimensionMismatch(f"{name} has {len(v)} entries, obs_dim is {self.obs_dim}")
                object.__setattr__(self, name, tuple(float(x) for x in v))

    @property
    def input_dim(self) -> int:
        return self.obs_dim * self.window

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyHyper":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        for name in ("input_offset", "input_scale"):
            if d.get(name) is not None:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


class ParamLayout:
    """Named slices partitioning the flat parameter vector."""

    def __init__(self, hyper: PolicyHyper):
        self.hyper = hyper
        K, d = hyper.mixtures, hyper.action_dim
        shapes = []
        prev = hyper.input_dim
        for i, h in enumerate(hyper.hidden):
            shapes += [(f"trunk{i}.w", (prev, h)), (f"trunk{i}.b", (h,))]
            prev = h
        shapes += [
            ("logits.w", (prev, K)),
            ("logits.b", (K,)),
            ("means.w", (prev, K * d)),
            ("means.b", (K * d,)),
            ("log_stds.w", (prev, K * d)),
            ("log_stds.b", (K * d,)),
        ]
        self.slots: list[Slot] = []
        off = 0
        for name, shape in shapes:
            s = Slot(name, shape, off)
            self.slots.append(s)
            off += s.size
        self.size = off
        self.by_name = {s.name: s for s in self.slots}

    @cached_property
    def bias_mask(self) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        for s in self.slots:
            if s.name.endswith(".b"):
                m[s.slice] = True
        return m

    @property
    def weight_mask(self) -> np.ndarray:
        return ~self.bias_mask

    @cached_property
    def input_affine(self) -> Optional[tuple[np.ndarray, np.ndarray]]:
        hy = self.hyper
        if hy.input_offset is None and hy.input_scale is None:
            return None
        off = np.zeros(hy.obs_dim) if hy.input_offset is None else np.array(hy.input_offset)
        scale = np.ones(hy.obs_dim) if hy.input_scale is None else np.array(hy.input_scale)
        return np.tile(off, hy.window), np.tile(scale, hy.window)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {s.name: flat[s.slice].reshape(s.shape) for s in self.slots}

    def describe(self) -> list[dict]:
        return [{"name": s.name, "shape": list(s.shape), "offset": s.offset} for s in self.slots]


_LAYOUTS: dict[PolicyHyper, ParamLayout] = {}


def layout_for(hyper: PolicyHyper) -> ParamLayout:
    if hyper not in _LAYOUTS:
        _LAYOUTS[hyper] = ParamLayout(hyper)
    return _LAYOUTS[hyper]


@dataclass
class PolicyParams:
    flat: np.ndarray
    hyper: PolicyHyper

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.layout.size,):
            raise DimensionMismatch(f"expected {self.layout.size} parameters, got {self.flat.shape}")

    @property
    def layout(self) -> ParamLayout:
        return layout_for(self.hyper)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.flat.copy(), self.hyper)

    def with_flat(self, flat: np.ndarray) -> "PolicyParams":
        return PolicyParams(flat, self.hyper)


def init_params(hyper: PolicyHyper, rng: np.random.Generator, head_scale: float = 0.01) -> PolicyParams:
    lay = layout_for(hyper)
    flat = np.zeros(lay.size)
    for s in lay.slots:
        if s.name.endswith(".b"):
            continue
        fan_in, fan_out = s.shape
        if s.name.startswith("trunk"):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        else:
            bound = head_scale * math.sqrt(6.0 / (fan_in + fan_out))
        flat[s.slice] = rng.uniform(-bound, bound, size=s.size)
    return PolicyParams(flat, hyper)


@dataclass
class GmmOutput:
    log_weights: np.ndarray  # (B, K)
    means: np.ndarray  # (B, K, d)
    log_stds: np.ndarray  # (B, K, d)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def stds(self) -> np.ndarray:
        return np.exp(self.log_stds)

    def __getitem__(self, i) -> "GmmOutput":
        return GmmOutput(self.log_weights[i : i + 1], self.means[i : i + 1], self.log_stds[i : i + 1])


def _soft_clamp(raw: np.ndarray, lo: float, hi: float):
    # C1 at zero, identity slope there; saturates at lo/hi
    pos = raw >= 0
    t = np.where(pos, np.tanh(raw / hi), np.tanh(raw / -lo))
    val = np.where(pos, hi * t, -lo * t)
    return val, 1.0 - t * t


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _as_batch(params: PolicyParams, windows) -> np.ndarray:
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.hyper.input_dim:
        raise DimensionMismatch(f"window has shape {x.shape}, expected (*, {params.hyper.input_dim})")
    return x


def _forward(params: PolicyParams, x: np.ndarray):
    hy = params.hyper
    lay = params.layout
    v = lay.views(params.flat)
    if lay.input_affine is not None:
        off, scale = lay.input_affine
        x = (x - off) * scale
    acts = [x]
    h = x
    for i in range(len(hy.hidden)):
        h = np.tanh(h @ v[f"trunk{i}.w"] + v[f"trunk{i}.b"])
        acts.append(h)
    B, K, d = x.shape[0], hy.mixtures, hy.action_dim
    logits = h @ v["logits.w"] + v["logits.b"]
    means = (h @ v["means.w"] + v["means.b"]).reshape(B, K, d)
    raw = (h @ v["log_stds.w"] + v["log_stds.b"]).reshape(B, K, d)
    log_stds, dclamp = _soft_clamp(raw, hy.log_std_min, hy.log_std_max)
    log_weights = logits - _logsumexp(logits)[:, None]
    return GmmOutput(log_weights, means, log_stds), (acts, dclamp)


def forward(params: PolicyParams, window) -> GmmOutput:
    """Mixture parameters for one window ``(T*obs,)`` or a batch ``(B, T*obs)``."""
    out, _ = _forward(params, _as_batch(params, window))
    return out


def _component_logpdf(out: GmmOutput, actions: np.ndarray):
    u = (actions[:, None, :] - out.means) * np.exp(-out.log_stds)
    d = actions.shape[1]
    return -0.5 * np.sum(u * u, axis=2) - np.sum(out.log_stds, axis=2) - 0.5 * d * LOG_2PI, u


def nll_per_sample(out: GmmOutput, actions) -> np.ndarray:
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    comp, _ = _component_logpdf(out, a)
    return -_logsumexp(out.log_weights + comp)


def nll(out: GmmOutput, action) -> float:
    """Mean negative log-likelihood of the action(s) under the mixture."""
    return float(np.mean(nll_per_sample(out, action)))


def _head_grads(out: GmmOutput, actions: np.ndarray, dclamp: np.ndarray):
    comp, u = _component_logpdf(out, actions)
    joint = out.log_weights + comp
    lse = _logsumexp(joint)
    resp = np.exp(joint - lse[:, None])
    w = np.exp(out.log_weights)
    d_logits = w - resp
    inv_std = np.exp(-out.log_stds)
    d_means = -resp[:, :, None] * u * inv_std
    d_raw = -resp[:, :, None] * (u * u - 1.0) * dclamp
    B = actions.shape[0]
    return -lse, d_logits, d_means.reshape(B, -1), d_raw.reshape(B, -1)


def _backprop(params: PolicyParams, acts, d_logits, d_means, d_raw, per_sample: bool):
    hy = params.hyper
    v = params.layout.views(params.flat)
    B = acts[0].shape[0]
    grads: dict[str, np.ndarray] = {}

    def outer(a, g):
        return np.einsum("bi,bj->bij", a, g) if per_sample else a.T @ g

    def colsum(g):
        return g if per_sample else g.sum(axis=0)

    h = acts[-1]
    grads["logits.w"], grads["logits.b"] = outer(h, d_logits), colsum(d_logits)
    grads["means.w"], grads["means.b"] = outer(h, d_means), colsum(d_means)
    grads["log_stds.w"], grads["log_stds.b"] = outer(h, d_raw), colsum(d_raw)
    dh = d_logits @ v["logits.w"].T + d_means @ v["means.w"].T + d_raw @ v["log_stds.w"].T
    for i in reversed(range(len(hy.hidden))):
        h = acts[i + 1]
        dpre = dh * (1.0 - h * h)
        grads[f"trunk{i}.w"], grads[f"trunk{i}.b"] = outer(acts[i], dpre), colsum(dpre)
        if i > 0:
            dh = dpre @ v[f"trunk{i}.w"].T
    lay = params.layout
    if per_sample:
        flat = np.empty((B, lay.size))
        for s in lay.slots:
            flat[:, s.slice] = grads[s.name].reshape(B, -1)
    else:
        flat = np.empty(lay.size)
        for s in lay.slots:
            flat[s.slice] = grads[s.name].ravel()
    return flat


def backward(params: PolicyParams, windows, actions, sample_weights: Optional[np.ndarray] = None):
    """Mean NLL over the batch and its exact gradient w.r.t. ``params.flat``.

    ``sample_weights`` (summing to 1) replaces the uniform batch mean.
    """
    x = _as_batch(params, windows)
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if a.shape != (x.shape[0], params.hyper.action_dim):
        raise DimensionMismatch(f"actions have shape {a.shape}")
    out, (acts, dclamp) = _forward(params, x)
    losses, d_logits, d_means, d_raw = _head_grads(out, a, dclamp)
    w = np.full(x.shape[0], 1.0 / x.shape[0]) if sample_weights is None else np.asarray(sample_weights)
    grad = _backprop(params, acts, d_logits * w[:, None], d_means * w[:, None], d_raw * w[:, None], False)
    return float(np.dot(w, losses)), grad


def per_sample_grads(params: PolicyParams, windows, actions) -> np.ndarray:
    """``(B, P)`` gradients of each sample's NLL (i.e. of ``-log p(a|s)``)."""
    x = _as_batch(params, windows)
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    out, (acts, dclamp) = _forward(params, x)
    _, d_logits, d_means, d_raw = _head_grads(out, a, dclamp)
    return _backprop(params, acts, d_logits, d_means, d_raw, True)


def sample_action(out: GmmOutput, rng: Optional[np.random.Generator] = None, deterministic: bool = False) -> np.ndarray:
    """Draw ``(B, d)`` actions, clamped to [-1, 1].

    Deterministic mode returns the mean of the heaviest component and never
    touches ``rng``.
    """
    B, K, d = out.means.shape
    if deterministic:
        k = np.argmax(out.log_weights, axis=1)
    else:
        u = rng.random(B)
        cdf = np.cumsum(out.weights, axis=1)
        k = np.minimum((u[:, None] >= cdf).sum(axis=1), K - 1)
    mu = out.means[np.arange(B), k]
    if deterministic:
        return np.clip(mu, -1.0, 1.0)
    std = np.exp(out.log_stds[np.arange(B), k])
    return np.clip(mu + std * rng.standard_normal((B, d)), -1.0, 1.0)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class OptimConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32


def cosine_lr(t: int, total_steps: int, lr_max: float = 1e-4, lr_min: float = 1e-5) -> float:
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


def adam_cosine_step(
    state: AdamState,
    flat: np.ndarray,
    grad: np.ndarray,
    t: int,
    total_steps: int,
    cfg: OptimConfig = OptimConfig(),
    trainable: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One Adam update at cosine-scheduled rate ``lr(t)``; mutates ``state``, returns new params.

    Entries outside ``trainable`` are returned bit-for-bit unchanged.
    """
    state.t += 1
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = state.m / (1 - cfg.beta1**state.t)
    v_hat = state.v / (1 - cfg.beta2**state.t)
    update = cosine_lr(t, total_steps, cfg.lr_max, cfg.lr_min) * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if trainable is None:
        return flat - update
    return np.where(trainable, flat - update, flat)


# ---------------------------------------------------------------------------
# windows and rollout policy


def make_windows(features: np.ndarray, embedding: np.ndarray, window: int, count: Optional[int] = None) -> np.ndarray:
    """Windows ending at frames ``0..count-1``, zero-padded before the first frame."""
    features = np.asarray(features, dtype=np.float64)
    emb = np.broadcast_to(np.asarray(embedding, dtype=np.float64), (features.shape[0], len(embedding)))
    frames = np.concatenate([features, emb], axis=1)
    n = frames.shape[0] if count is None else count
    padded = np.concatenate([np.zeros((window - 1, frames.shape[1])), frames[:n]], axis=0)
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, frames.shape[1]))[:, 0]
    return win.reshape(n, -1).copy()


class GmmPolicy:
    """Stateful rollout policy keeping a per-episode observation window."""

    def __init__(self, params: PolicyParams, deterministic: bool = True, rng=None):
        self.params = params
        self.deterministic = deterministic
        self.rng = rng
        self.history = None

    def reset(self, n: int) -> None:
        hy = self.params.hyper
        self.history = np.zeros((n, hy.window, hy.obs_dim))

    def act(self, observations, states=None) -> np.ndarray:
        obs = np.asarray(observations, dtype=np.float64)
        if self.history is None or self.history.shape[0] != obs.shape[0]:
            self.reset(obs.shape[0])
        self.history = np.concatenate([self.history[:, 1:], obs[:, None, :]], axis=1)
        out = forward(self.params, self.history.reshape(obs.shape[0], -1))
        return sample_action(out, self.rng, self.deterministic)


# ---------------------------------------------------------------------------
# checkpoint files

CKPT_MAGIC = b"TLCKPT01"


def save_checkpoint(path, params: PolicyParams, extra: Optional[dict] = None) -> None:
    header = {
        "version": 1,
        "hyper": asdict(params.hyper),
        "layout": params.layout.describe(),
        "size": params.layout.size,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    hyper = PolicyHyper.from_dict(header["hyper"])
    params = PolicyParams(flat, hyper)
    if params.layout.describe() != header["layout"]:
        raise ValueError(f"{path}: layout descriptor does not match hyperparameters")
    return params, header["extra"]
