"""Finite-difference verification of every differentiable op.

Protocol: project the op output against a fixed random vector to get a
scalar, compare the tape gradient of that scalar against central
differences with per-element step h = 1e-4 * max(1, |x|).  Error metric
is |analytic - numeric| / max(1, |analytic|, |numeric|), maxed over
elements.

Registered builders draw inputs away from kinks (relu/clamp corners,
interpolation cell boundaries, zero-length displacement rows); the ops
are piecewise smooth and finite differences are only meaningful on the
smooth pieces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class OpCheck:
    name: str
    seed: int
    rel_err: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.rel_err.values())


def _project_scalar(out: Tensor, proj: np.ndarray) -> Tensor:
    return ops.total(ops.mul(out, Tensor(proj)))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: dict[str, np.ndarray],
    tol: float = 1e-4,
    seed: int = 0,
    name: str = "op",
) -> OpCheck:
    """Compare tape gradients of fn(**inputs) against central differences."""
    tensors = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    out = fn(**tensors)
    proj = np.random.default_rng(seed ^ 0x5EED).normal(size=out.data.shape)
    loss = _project_scalar(out, proj)
    loss.backward()

    def forward(arrays: dict[str, np.ndarray]) -> float:
        res = fn(**{k: Tensor(v) for k, v in arrays.items()})
        return float((res.data * proj).sum())

    errs = {}
    for key, base in inputs.items():
        analytic = tensors[key].grad
        assert analytic is not None, f"{name}: no gradient reached input {key!r}"
        worst = 0.0
        flat = base.reshape(-1)
        for i in range(flat.size):
            h = 1e-4 * max(1.0, abs(float(flat[i])))
            bumped = {k: v.copy() for k, v in inputs.items()}
            bumped[key].reshape(-1)[i] += h
            hi = forward(bumped)
            bumped[key].reshape(-1)[i] -= 2 * h
            lo = forward(bumped)
            num = (hi - lo) / (2 * h)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
        errs[key] = worst
    return OpCheck(name=name, seed=seed, rel_err=errs, tol=tol)


# ------------------------------------------------------------------ registry

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], dict[str, np.ndarray]]]


def _away_from_zero(rng, shape, low=0.2, high=1.5):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _interior_coords(rng, n, dims_xyz):
    """Normalized points whose continuous indices stay >= 0.1 from cell edges."""
    pts = np.empty((n, 3))
    for ax, nax in enumerate(dims_xyz):
        cell = rng.integers(0, nax - 1, size=n)
        frac = rng.uniform(0.15, 0.85, size=n)
        pts[:, ax] = 2.0 * (cell + frac) / (nax - 1) - 1.0
    return pts


def _build_add(rng):
    return ops.add, {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}


def _build_add_broadcast(rng):
    return ops.add, {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}


def _build_mul(rng):
    return ops.mul, {"a": rng.normal(size=(2, 5)), "b": rng.normal(size=(2, 5))}


def _build_linear(rng):
    def fn(x, w, b):
        return ops.linear(x, w, b)

    return fn, {"x": rng.normal(size=(4, 6)), "w": rng.normal(size=(6, 3)), "b": rng.normal(size=(3,))}


def _build_linear_single_row(rng):
    def fn(x, w, b):
        return ops.linear(x, w, b)

    return fn, {"x": rng.normal(size=(1, 5)), "w": rng.normal(size=(5, 4)), "b": rng.normal(size=(4,))}


def _build_conv3d(rng):
    def fn(x, w, b):
        return ops.conv3d(x, w, b, stride=1, padding=1)

    return fn, {
        "x": rng.normal(size=(2, 2, 3, 3, 3)),
        "w": rng.normal(size=(2, 2, 3, 3, 3)),
        "b": rng.normal(size=(2,)),
    }


def _build_conv3d_strided(rng):
    def fn(x, w):
        return ops.conv3d(x, w, None, stride=2, padding=0)

    return fn, {"x": rng.normal(size=(1, 1, 5, 5, 5)), "w": rng.normal(size=(2, 1, 3, 3, 3))}


def _build_relu(rng):
    return ops.relu, {"x": _away_from_zero(rng, (4, 5))}


def _build_leaky_relu(rng):
    def fn(x):
        return ops.leaky_relu(x, slope=0.1)

    return fn, {"x": _away_from_zero(rng, (4, 5))}


def _build_tanh(rng):
    return ops.tanh, {"x": rng.normal(size=(3, 4))}


def _build_clamp(rng):
    def fn(x):
        return ops.clamp(x, -1.0, 1.0)

    # mix of clearly-inside and clearly-outside elements, none near the edge
    inside = rng.uniform(-0.8, 0.8, size=12)
    outside = rng.uniform(1.2, 2.0, size=8) * rng.choice([-1.0, 1.0], size=8)
    return fn, {"x": rng.permuted(np.concatenate([inside, outside])).reshape(4, 5)}


def _build_softmax(rng):
    def fn(x):
        return ops.softmax(x, axis=-1)

    return fn, {"x": rng.normal(size=(4, 6))}


def _build_concat(rng):
    def fn(a, b):
        return ops.concat([a, b], axis=1)

    return fn, {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 4))}


def _build_reshape(rng):
    def fn(x):
        return ops.reshape(x, (6, 2))

    return fn, {"x": rng.normal(size=(3, 4))}


def _build_moveaxis(rng):
    def fn(x):
        return ops.moveaxis(x, 0, 2)

    return fn, {"x": rng.normal(size=(2, 3, 4))}


def _build_mean(rng):
    return ops.mean, {"x": rng.normal(size=(3, 7))}


def _build_total(rng):
    return ops.total, {"x": rng.normal(size=(2, 3, 2))}


def _build_upsample2(rng):
    return ops.upsample2, {"x": rng.normal(size=(1, 2, 2, 3, 2))}


def _build_trilinear(rng):
    coords = _interior_coords(rng, 6, (4, 3, 3))

    def fn(field, coords):
        return ops.trilinear(field, coords)

    return fn, {"field": rng.normal(size=(2, 3, 3, 4)), "coords": coords}


def _build_cross_entropy(rng):
    targets = rng.integers(0, 4, size=8)

    def fn(logits):
        return ops.cross_entropy(logits, targets)

    return fn, {"logits": rng.normal(size=(8, 4))}


def _build_soft_dice(rng):
    onehot = np.zeros((10, 3))
    onehot[np.arange(10), rng.integers(0, 3, size=10)] = 1.0

    def fn(probs):
        return ops.soft_dice_loss(probs, onehot)

    return fn, {"probs": rng.uniform(0.05, 0.95, size=(10, 3))}


def _build_deformation_penalty(rng):
    rows = rng.normal(size=(9, 3))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    rows *= rng.uniform(0.3, 1.0, size=(9, 1))  # no zero-length rows

    return ops.deformation_penalty, {"d": rows}


REGISTRY: dict[str, Builder] = {
    "add": _build_add,
    "add_broadcast": _build_add_broadcast,
    "mul": _build_mul,
    "linear": _build_linear,
    "linear_single_row": _build_linear_single_row,
    "conv3d": _build_conv3d,
    "conv3d_strided": _build_conv3d_strided,
    "relu": _build_relu,
    "leaky_relu": _build_leaky_relu,
    "tanh": _build_tanh,
    "clamp": _build_clamp,
    "softmax": _build_softmax,
    "concat": _build_concat,
    "reshape": _build_reshape,
    "moveaxis": _build_moveaxis,
    "mean": _build_mean,
    "total": _build_total,
    "upsample2": _build_upsample2,
    "trilinear": _build_trilinear,
    "cross_entropy": _build_cross_entropy,
    "soft_dice": _build_soft_dice,
    "deformation_penalty": _build_deformation_penalty,
}


def run_registry(seeds=range(20), tol: float = 1e-4) -> list[OpCheck]:
    """Check every registered op across seeds; returns one record per (op, seed)."""
    out = []
    for name, build in REGISTRY.items():
        for seed in seeds:
            fn, inputs = build(np.random.default_rng(seed))
            out.append(grad_check(fn, inputs, tol=tol, seed=seed, name=name))
    return out
