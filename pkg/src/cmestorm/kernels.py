"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba versions are used when numba imports cleanly and the environment
variable ``CMESTORM_JIT`` is not set to ``0``.  Both implementations are
always importable (``NUMPY_KERNELS`` / ``JIT_KERNELS``) so tests and the
benchmark can compare them directly.

Kernels:

* ``im2col3x3`` / ``col2im3x3``: stride-1 same-padding 3x3 patch unfolding
  for NHWC tensors and its adjoint.
* ``resize_bilinear``: half-pixel-centre bilinear resampling of (H, W, C).
* ``adam_step``: fused in-place Adam update.
* ``sweep_counts``: confusion counts at many thresholds.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    nb = None


def jit_requested() -> bool:
    return os.environ.get("CMESTORM_JIT", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy implementations


def _np_im2col3x3(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    patches = [xp[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(patches, axis=-1).reshape(n * h * w, 9 * c)


def _np_col2im3x3(cols, n, h, w, c):
    cols = cols.reshape(n, h, w, 9, c)
    xp = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + h, dx:dx + w, :] += cols[:, :, :, k, :]
            k += 1
    return xp[:, 1:-1, 1:-1, :]


def _resize_axis(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def _np_resize_bilinear(img, out_h, out_w):
    h, w, _ = img.shape
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    fy = fy.astype(img.dtype)[:, None, None]
    fx = fx.astype(img.dtype)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _np_adam_step(param, grad, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    step = lr * math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)
    param -= step * m / (np.sqrt(v) + eps)


def _np_sweep_counts(y, p, thresholds):
    pred = p[None, :] >= thresholds[:, None]
    pos = y[None, :] == 1
    out = np.empty((thresholds.shape[0], 4), dtype=np.int64)
    out[:, 0] = np.sum(pred & pos, axis=1)
    out[:, 1] = np.sum(pred & ~pos, axis=1)
    out[:, 2] = np.sum(~pred & pos, axis=1)
    out[:, 3] = np.sum(~pred & ~pos, axis=1)
    return out


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    im2col3x3=_np_im2col3x3,
    col2im3x3=_np_col2im3x3,
    resize_bilinear=_np_resize_bilinear,
    adam_step=_np_adam_step,
    sweep_counts=_np_sweep_counts,
)


# ---------------------------------------------------------------------------
# numba implementations

JIT_KERNELS = None

if nb is not None:
    njit = nb.njit(cache=True, nogil=True)

    @njit
    def _nb_im2col3x3(x):
        n, h, w, c = x.shape
        out = np.zeros((n * h * w, 9 * c), dtype=x.dtype)
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    for dy in range(3):
                        yy = i + dy - 1
                        if yy < 0 or yy >= h:
                            continue
                        for dx in range(3):
                            xx = j + dx - 1
                            if xx < 0 or xx >= w:
                                continue
                            base = (dy * 3 + dx) * c
                            for ch in range(c):
                                out[row, base + ch] = x[b, yy, xx, ch]
        return out

    @njit
    def _nb_col2im3x3(cols, n, h, w, c):
        out = np.zeros((n, h, w, c), dtype=cols.dtype)
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    for dy in range(3):
                        yy = i + dy - 1
                        if yy < 0 or yy >= h:
                            continue
                        for dx in range(3):
                            xx = j + dx - 1
                            if xx < 0 or xx >= w:
                                continue
                            base = (dy * 3 + dx) * c
                            for ch in range(c):
                                out[b, yy, xx, ch] += cols[row, base + ch]
        return out

    @njit
    def _nb_resize_bilinear(img, out_h, out_w):
        h, w, c = img.shape
        out = np.empty((out_h, out_w, c), dtype=img.dtype)
        sy = h / out_h
        sx = w / out_w
        for i in range(out_h):
            fy = (i + 0.5) * sy - 0.5
            fy = min(max(fy, 0.0), h - 1.0)
            y0 = int(math.floor(fy))
            y1 = min(y0 + 1, h - 1)
            wy = fy - y0
            for j in range(out_w):
                fx = (j + 0.5) * sx - 0.5
                fx = min(max(fx, 0.0), w - 1.0)
                x0 = int(math.floor(fx))
                x1 = min(x0 + 1, w - 1)
                wx = fx - x0
                for ch in range(c):
                    top = img[y0, x0, ch] * (1 - wx) + img[y0, x1, ch] * wx
                    bot = img[y1, x0, ch] * (1 - wx) + img[y1, x1, ch] * wx
                    out[i, j, ch] = top * (1 - wy) + bot * wy
        return out

    @njit
    def _nb_adam_kernel(p, g, m, v, step, beta1, beta2, eps):
        for k in range(p.size):
            gk = g[k]
            mk = beta1 * m[k] + (1.0 - beta1) * gk
            vk = beta2 * v[k] + (1.0 - beta2) * gk * gk
            m[k] = mk
            v[k] = vk
            p[k] -= step * mk / (math.sqrt(vk) + eps)

    def _nb_adam_step(param, grad, m, v, lr, beta1, beta2, eps, t):
        step = lr * math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)
        _nb_adam_kernel(param.reshape(-1), np.ascontiguousarray(grad).reshape(-1),
                        m.reshape(-1), v.reshape(-1), step, beta1, beta2, eps)

    @njit
    def _nb_sweep_counts(y, p, thresholds):
        out = np.zeros((thresholds.shape[0], 4), dtype=np.int64)
        for k in range(thresholds.shape[0]):
            t = thresholds[k]
            for i in range(y.shape[0]):
                pred = p[i] >= t
                if y[i] == 1:
                    if pred:
                        out[k, 0] += 1
                    else:
                        out[k, 2] += 1
                else:
                    if pred:
                        out[k, 1] += 1
                    else:
                        out[k, 3] += 1
        return out

    def _wrap_col2im(cols, n, h, w, c):
        return _nb_col2im3x3(np.ascontiguousarray(cols), n, h, w, c)

    def _wrap_im2col(x):
        return _nb_im2col3x3(np.ascontiguousarray(x))

    def _wrap_resize(img, out_h, out_w):
        return _nb_resize_bilinear(np.ascontiguousarray(img), out_h, out_w)

    def _wrap_sweep(y, p, thresholds):
        return _nb_sweep_counts(np.ascontiguousarray(y, dtype=np.int64),
                                np.ascontiguousarray(p, dtype=np.float64),
                                np.ascontiguousarray(thresholds, dtype=np.float64))

    JIT_KERNELS = SimpleNamespace(
        name="numba",
        im2col3x3=_wrap_im2col,
        col2im3x3=_wrap_col2im,
        resize_bilinear=_wrap_resize,
        adam_step=_nb_adam_step,
        sweep_counts=_wrap_sweep,
    )


def active_kernels() -> SimpleNamespace:
    """Kernel set selected by the environment at call time."""
    if JIT_KERNELS is not None and jit_requested():
        return JIT_KERNELS
    return NUMPY_KERNELS


def im2col3x3(x):
    return active_kernels().im2col3x3(x)


def col2im3x3(cols, n, h, w, c):
    return active_kernels().col2im3x3(cols, n, h, w, c)


def resize_bilinear(img, out_h, out_w):
    """Resize a (H, W) or (H, W, C) array with half-pixel-centre bilinear sampling."""
    squeeze = img.ndim == 2
    arr = img[:, :, None] if squeeze else img
    out = active_kernels().resize_bilinear(arr, int(out_h), int(out_w))
    return out[:, :, 0] if squeeze else out


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, t):
    active_kernels().adam_step(param, grad, m, v, lr, beta1, beta2, eps, t)


def sweep_counts(y, p, thresholds):
    """Return (T, 4) counts of (tp, fp, fn, tn) with ``p >= threshold`` as positive."""
    return active_kernels().sweep_counts(np.asarray(y), np.asarray(p, dtype=np.float64),
                                         np.asarray(thresholds, dtype=np.float64))
