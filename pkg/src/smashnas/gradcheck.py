"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor


def projected(fn: Callable[..., Tensor], rng: np.random.Generator) -> Callable[..., Tensor]:
    """Turn a tensor-valued function into a scalar one via a fixed random projection."""
    cache: dict[str, np.ndarray] = {}

    def wrapped(*args):
        out = fn(*args)
        if "r" not in cache:
            cache["r"] = rng.standard_normal(out.shape)
        return (out * Tensor(cache["r"].astype(out.dtype))).sum()

    return wrapped


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    wrt: Sequence[int] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    h: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` receives one float64 ``Tensor`` per input and must return a scalar.
    When ``max_coords`` is set only that many randomly chosen coordinates of
    each checked input are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    tensors = [Tensor(a, requires_grad=(i in wrt), dtype=np.float64) for i, a in enumerate(arrays)]
    loss = fn(*tensors)
    loss.backward()

    worst = 0.0
    for i in wrt:
        analytic_full = tensors[i].grad
        if analytic_full is None:
            analytic_full = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for n, k in enumerate(coords):
            saved = flat[k]
            flat[k] = saved + h
            plus = _evaluate(fn, arrays)
            flat[k] = saved - h
            minus = _evaluate(fn, arrays)
            flat[k] = saved
            numeric[n] = (plus - minus) / (2 * h)
        worst = max(worst, relative_error(analytic_full.reshape(-1)[coords], numeric))
    return worst


def _evaluate(fn, arrays) -> float:
    return float(fn(*[Tensor(a.copy(), dtype=np.float64) for a in arrays]).data)


def gradcheck_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    max_coords: int = 10,
    rng: np.random.Generator | None = None,
    h: float = 1e-6,
) -> float:
    """Finite-difference check of a closure over named float64 parameters."""
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic, numeric = [], []
    names = list(params)
    for _ in range(max_coords):
        name = names[rng.integers(len(names))]
        p = params[name]
        k = np.unravel_index(int(rng.integers(p.data.size)), p.data.shape)
        g = p.grad[k] if p.grad is not None else 0.0
        saved = p.data[k]
        p.data[k] = saved + h
        plus = float(loss_fn().data)
        p.data[k] = saved - h
        minus = float(loss_fn().data)
        p.data[k] = saved
        analytic.append(g)
        numeric.append((plus - minus) / (2 * h))
    return relative_error(np.array(analytic), np.array(numeric))
