"""Central finite-difference check of the head's analytic WBCE gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FusionHead
from .training import ClassWeights, wbce, wbce_grad_logit


@dataclass
class GradCheckResult:
    names: list[str]            # parameter tensor of each sample
    rel_err: np.ndarray         # |num - ana| / max(|num|, |ana|)
    crossed_kink: np.ndarray    # a +-step perturbation flipped some activation sign

    def pass_rate(self, tol: float = 1e-4) -> float:
        return float(np.mean(self.rel_err < tol))

    def smooth_pass_rate(self, tol: float = 1e-4) -> float:
        """Pass rate over the samples whose perturbation stayed on one linear piece."""
        keep = ~self.crossed_kink
        return float(np.mean(self.rel_err[keep] < tol)) if keep.any() else float("nan")


def _signs(cache: dict) -> np.ndarray:
    return np.concatenate([(cache[k] > 0).ravel() for k in sorted(cache) if k.endswith(".pre")])


def _stratified(names, sizes, n, rng):
    quota = dict.fromkeys(names, 0)
    left = n
    open_ = [k for k, s in zip(names, sizes) if s > 0]
    size = dict(zip(names, sizes))
    while left > 0 and open_:
        share = max(1, left // len(open_))
        for k in list(open_):
            take = min(share, size[k] - quota[k], left)
            quota[k] += take
            left -= take
            if quota[k] >= size[k]:
                open_.remove(k)
            if left == 0:
                break
    return [(k, rng.choice(size[k], size=quota[k], replace=False)) for k in names if quota[k]]


def check_gradients(head: FusionHead, x: np.ndarray, y: np.ndarray, weights: ClassWeights,
                    n_samples: int = 200, step: float = 1e-4, seed: int = 0,
                    dropout_seed: int = 99) -> GradCheckResult:
    """Compare backprop against central differences for ``n_samples`` random head parameters.

    The forward pass runs in training mode (batch statistics, fixed dropout
    mask) so the batch-norm backward path is the one exercised.  Parameters
    are sampled per tensor, as evenly as tensor sizes allow, so that every
    layer is covered; a uniform draw would land almost entirely in the
    16M-entry dense kernel.
    """
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=np.float64)

    def run():
        p, cache = head.forward(x, train=True, rng=np.random.default_rng(dropout_seed))
        return wbce(y, p, weights), p, cache

    _, p, cache = run()
    grads, _ = head.backward(cache, wbce_grad_logit(y, p, weights))
    base = _signs(cache)
    names = sorted(head.params)
    picks = []
    for name, idx in _stratified(names, [head.params[n].size for n in names], n_samples, rng):
        picks.extend((name, int(i)) for i in idx)
    out_names, errs, kinks = [], [], []
    for name, i in picks:
        flat = head.params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        lp, _, cp = run()
        flat[i] = orig - step
        lm, _, cm = run()
        flat[i] = orig
        num = (lp - lm) / (2 * step)
        ana = float(grads[name].reshape(-1)[i])
        denom = max(abs(num), abs(ana))
        out_names.append(name)
        errs.append(abs(num - ana) / denom if denom > 1e-10 else 0.0)
        kinks.append(bool((_signs(cp) != base).any() or (_signs(cm) != base).any()))
    return GradCheckResult(out_names, np.asarray(errs), np.asarray(kinks))
