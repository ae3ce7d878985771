"""Fusion head: three conv blocks and a two-layer dense classifier, in numpy.

Shape chain for an 8x8 fused input with ``C`` channels::

    8x8xC -> conv3x3(64)+BN+LReLU -> conv3x3(128)+BN+LReLU -> conv3x3(256)+BN+LReLU
          -> flatten(16384) -> dense(1024)+BN+LReLU -> dropout -> dense(1) -> sigmoid

Convolutions are stride 1 with same padding and no bias (the following batch
norm's shift makes one redundant).  Optionally a learnable ``stem`` conv maps
a raw 8x8x1 image to ``stem_channels`` for the variant without backbones.
Forward passes return a cache consumed by :meth:`FusionHead.backward`, which
yields gradients for every parameter and for the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import NumericError, ShapeError

GRID = 8
BN_MOMENTUM = 0.9
BN_EPS = 1e-3
# cap on im2col buffer size, in elements
_COLS_BUDGET = 16_000_000


def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int
    conv_channels: tuple[int, ...] = (64, 128, 256)
    dense_units: int = 1024
    dropout: float = 0.3
    leaky_slope: float = 0.01
    stem_channels: int = 0
    dtype: str = "float32"

    @property
    def conv_in(self) -> int:
        return self.stem_channels if self.stem_channels else self.in_channels

    @property
    def flat_dim(self) -> int:
        return GRID * GRID * self.conv_channels[-1]


def _conv_forward(x, w):
    n, h, wd, c = x.shape
    cout = w.shape[1]
    chunk = max(1, _COLS_BUDGET // (h * wd * 9 * c))
    out = np.empty((n, h, wd, cout), dtype=np.result_type(x, w))
    for s in range(0, n, chunk):
        xs = x[s:s + chunk]
        cols = kernels.im2col3x3(xs)
        out[s:s + chunk] = (cols @ w).reshape(xs.shape[0], h, wd, cout)
    return out


def _conv_backward(x, w, dout):
    n, h, wd, c = x.shape
    cout = w.shape[1]
    chunk = max(1, _COLS_BUDGET // (h * wd * 9 * c))
    dw = np.zeros_like(w)
    dx = np.empty_like(x)
    for s in range(0, n, chunk):
        xs = x[s:s + chunk]
        ds = dout[s:s + chunk].reshape(-1, cout)
        cols = kernels.im2col3x3(xs)
        dw += cols.T @ ds
        dcols = ds @ w.T
        dx[s:s + chunk] = kernels.col2im3x3(dcols, xs.shape[0], h, wd, c)
    return dx, dw


def _bn_forward(z, gamma, beta, mean_key, var_key, state, train, axes):
    if train:
        mu = z.mean(axis=axes)
        var = z.var(axis=axes)
        state[mean_key] = BN_MOMENTUM * state[mean_key] + (1 - BN_MOMENTUM) * mu
        state[var_key] = BN_MOMENTUM * state[var_key] + (1 - BN_MOMENTUM) * var
    else:
        mu, var = state[mean_key], state[var_key]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def _bn_backward(dy, gamma, cache, axes, train):
    xhat, inv = cache
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    m = dy.size // dy.shape[-1]
    dz = (inv / m) * (m * dxhat - np.sum(dxhat, axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
    return dz, dgamma, dbeta


def sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class FusionHead:
    """Trainable per-instrument head; parameters live in ``params``, BN statistics in ``state``."""

    def __init__(self, config: HeadConfig, seed: int = 0):
        self.config = config
        dt = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {}
        s: dict[str, np.ndarray] = {}
        if config.stem_channels:
            p["stem.kernel"] = _glorot(rng, 9 * config.in_channels, 9 * config.stem_channels,
                                       (9 * config.in_channels, config.stem_channels), dt)
            p["stem.bias"] = np.zeros(config.stem_channels, dtype=dt)
        cin = config.conv_in
        for k, cout in enumerate(config.conv_channels, start=1):
            p[f"conv{k}.kernel"] = _glorot(rng, 9 * cin, 9 * cout, (9 * cin, cout), dt)
            p[f"conv{k}.bn.gamma"] = np.ones(cout, dtype=dt)
            p[f"conv{k}.bn.beta"] = np.zeros(cout, dtype=dt)
            s[f"conv{k}.bn.moving_mean"] = np.zeros(cout, dtype=dt)
            s[f"conv{k}.bn.moving_var"] = np.ones(cout, dtype=dt)
            cin = cout
        flat = config.flat_dim
        p["dense1.kernel"] = _glorot(rng, flat, config.dense_units, (flat, config.dense_units), dt)
        p["dense1.bn.gamma"] = np.ones(config.dense_units, dtype=dt)
        p["dense1.bn.beta"] = np.zeros(config.dense_units, dtype=dt)
        s["dense1.bn.moving_mean"] = np.zeros(config.dense_units, dtype=dt)
        s["dense1.bn.moving_var"] = np.ones(config.dense_units, dtype=dt)
        p["dense2.kernel"] = _glorot(rng, config.dense_units, 1, (config.dense_units, 1), dt)
        p["dense2.bias"] = np.zeros(1, dtype=dt)
        self.params = p
        self.state = s

    @property
    def n_conv(self) -> int:
        return len(self.config.conv_channels)

    def _check(self, arr, layer):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite activation in layer {layer}")

    def _leaky(self, z):
        return np.where(z > 0, z, z * self.config.leaky_slope)

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                trace: list | None = None):
        """Return ``(probabilities (N,), cache)``.

        ``train`` selects batch statistics and active dropout; ``rng`` drives
        the dropout mask.
        """
        cfg = self.config
        p = self.params
        x = np.asarray(x, dtype=cfg.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (GRID, GRID, cfg.in_channels):
            raise ShapeError(f"head expects (N, {GRID}, {GRID}, {cfg.in_channels}), got {x.shape}")
        self._check(x, "input")
        cache: dict = {"train": train, "x": x}
        if trace is not None:
            trace.append(("input", x.shape[1:]))
        h = x
        if cfg.stem_channels:
            h = _conv_forward(x, p["stem.kernel"]) + p["stem.bias"]
            self._check(h, "stem")
            cache["stem_in"] = x
            if trace is not None:
                trace.append(("stem", h.shape[1:]))
        for k in range(1, self.n_conv + 1):
            cache[f"conv{k}.in"] = h
            z = _conv_forward(h, p[f"conv{k}.kernel"])
            zb, bn_cache = _bn_forward(z, p[f"conv{k}.bn.gamma"], p[f"conv{k}.bn.beta"],
                                       f"conv{k}.bn.moving_mean", f"conv{k}.bn.moving_var",
                                       self.state, train, (0, 1, 2))
            cache[f"conv{k}.bn"] = bn_cache
            cache[f"conv{k}.pre"] = zb
            h = self._leaky(zb)
            self._check(h, f"conv{k}")
            if trace is not None:
                trace.append((f"conv{k}", h.shape[1:]))
        n = h.shape[0]
        flat = h.reshape(n, -1)
        cache["flat"] = flat
        if trace is not None:
            trace.append(("flatten", flat.shape[1:]))
        z = flat @ p["dense1.kernel"]
        zb, bn_cache = _bn_forward(z, p["dense1.bn.gamma"], p["dense1.bn.beta"],
                                   "dense1.bn.moving_mean", "dense1.bn.moving_var", self.state, train, (0,))
        cache["dense1.bn"] = bn_cache
        cache["dense1.pre"] = zb
        h = self._leaky(zb)
        self._check(h, "dense1")
        if trace is not None:
            trace.append(("dense1", h.shape[1:]))
        if train and cfg.dropout > 0:
            gen = rng if rng is not None else np.random.default_rng()
            mask = (gen.random(h.shape) >= cfg.dropout).astype(h.dtype) / (1.0 - cfg.dropout)
            h = h * mask
            cache["mask"] = mask
        cache["dense2.in"] = h
        logit = (h @ p["dense2.kernel"])[:, 0] + p["dense2.bias"][0]
        self._check(logit, "dense2")
        prob = sigmoid(logit)
        if trace is not None:
            trace.append(("dense2", prob.shape[1:] or (1,)))
        cache["logit"] = logit
        return prob, cache

    def backward(self, cache, dlogit):
        """Gradients of a loss w.r.t. parameters and input, given dL/dlogit (N,)."""
        cfg = self.config
        p = self.params
        train = cache["train"]
        slope = cfg.leaky_slope
        grads: dict[str, np.ndarray] = {}
        dlogit = np.asarray(dlogit, dtype=cfg.dtype).reshape(-1, 1)
        h2 = cache["dense2.in"]
        grads["dense2.kernel"] = h2.T @ dlogit
        grads["dense2.bias"] = dlogit.sum(axis=0)
        dh = dlogit @ p["dense2.kernel"].T
        if "mask" in cache:
            dh = dh * cache["mask"]
        pre = cache["dense1.pre"]
        dz = dh * np.where(pre > 0, 1.0, slope).astype(dh.dtype)
        dz, grads["dense1.bn.gamma"], grads["dense1.bn.beta"] = _bn_backward(
            dz, p["dense1.bn.gamma"], cache["dense1.bn"], (0,), train)
        flat = cache["flat"]
        grads["dense1.kernel"] = flat.T @ dz
        dflat = dz @ p["dense1.kernel"].T
        dh = dflat.reshape(flat.shape[0], GRID, GRID, cfg.conv_channels[-1])
        for k in range(self.n_conv, 0, -1):
            pre = cache[f"conv{k}.pre"]
            dz = dh * np.where(pre > 0, 1.0, slope).astype(dh.dtype)
            dz, grads[f"conv{k}.bn.gamma"], grads[f"conv{k}.bn.beta"] = _bn_backward(
                dz, p[f"conv{k}.bn.gamma"], cache[f"conv{k}.bn"], (0, 1, 2), train)
            dh, grads[f"conv{k}.kernel"] = _conv_backward(cache[f"conv{k}.in"], p[f"conv{k}.kernel"], dz)
        if cfg.stem_channels:
            grads["stem.bias"] = dh.sum(axis=(0, 1, 2))
            dh, grads["stem.kernel"] = _conv_backward(cache["stem_in"], p["stem.kernel"], dh)
        return grads, dh
