from __future__ import annotations

import numpy as np

from safeplan.errors import NumericError, ShapeError
from safeplan.nn.params import ParamSet


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm", op="clip_by_global_norm")
    if norm <= max_norm:
        return grads, norm
    scale = np.float32(max_norm / (norm + 1e-6))
    return {k: g * scale for k, g in grads.items()}, norm


def opt_step(params: ParamSet, grads: dict, lr: float, betas=(0.9, 0.999), eps=1e-8) -> ParamSet:
    """One Adam update with bias correction, in place.

    The step counter advances once per call. Parameters absent from ``grads``
    keep their values and moments.
    """
    unknown = set(grads) - set(params.params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    for name, g in grads.items():
        if g.shape != params.params[name].data.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {params.params[name].data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", op="opt_step")
    b1, b2 = betas
    params.step += 1
    t = params.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m1 = params.m1[name]
        m2 = params.m2[name]
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b2
        m2 += (1.0 - b2) * (g * g)
        p = params.params[name]
        p.data = (p.data - lr * (m1 / c1) / (np.sqrt(m2 / c2) + eps)).astype(p.data.dtype)
    return params
