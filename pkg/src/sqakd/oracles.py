"""Independent verification machinery.

These paths deliberately avoid the code they check: the gradient oracle uses
central finite differences, the level oracle enumerates quantizer outputs
over a dense input sweep and compares them against an affinely constructed
grid, and the landscape exporter evaluates the loss on a plane spanned by
two seeded random directions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NumericError
from .quantizers import QuantKind, QuantizerSpec, Target, quantize_array


def grad_oracle(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, at 64-bit precision."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x))
        flat[i] = orig - h
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"function not finite near perturbed coordinate {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = float(np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric))
    den = max(float(np.linalg.norm(numeric)), 1e-12)
    return num / den


# ---------------------------------------------------------------------------
# quantization level structure


def theoretical_levels(spec: QuantizerSpec) -> np.ndarray:
    """The <= 2^bits grid values the quantizer may emit, built from the affine
    formula rather than by running the quantizer."""
    dtype = spec.dtype
    s = dtype(2**spec.bits - 1)
    k = np.arange(0, 2**spec.bits, dtype=dtype)
    if spec.kind == QuantKind.PACT:
        m = spec.clip_params["p1"].data.astype(dtype)
        return k / s * m
    if spec.kind in (QuantKind.EWGS, QuantKind.DOREFA):
        base = k / s
        if spec.target == Target.WEIGHTS:
            return dtype(2.0) * base - dtype(1.0)
        return base
    q_n, q_p = spec.lsq_levels()
    step = spec.clip_params["p1"].data.astype(dtype)
    return np.arange(q_n, q_p + 1, dtype=dtype) * step


def _default_domain(spec: QuantizerSpec):
    if spec.kind == QuantKind.PACT:
        m = float(spec.clip_params["p1"].data)
        return (-m - 1.0, 2.0 * m + 1.0)
    if spec.kind == QuantKind.EWGS:
        p1 = float(spec.clip_params["p1"].data)
        p2 = float(spec.clip_params["p2"].data)
        pad = max(p2 - p1, 1.0)
        return (p1 - pad, p2 + pad)
    if spec.kind == QuantKind.LSQ:
        step = float(spec.clip_params["p1"].data)
        q_n, q_p = spec.lsq_levels()
        return (step * q_n - 1.0, step * q_p + 1.0)
    return (-2.0, 2.0)


def level_oracle(spec: QuantizerSpec, n_samples: int = 10_000, domain=None, seed: int = 0) -> np.ndarray:
    """Distinct quantizer outputs over a dense sweep plus random draws."""
    if n_samples < 1_000:
        raise ConfigError(f"level oracle needs at least 1000 samples, got {n_samples}")
    lo, hi = domain if domain is not None else _default_domain(spec)
    rng = np.random.Generator(np.random.PCG64(seed))
    sweep = np.linspace(lo, hi, n_samples, dtype=spec.dtype)
    draws = rng.uniform(lo, hi, n_samples).astype(spec.dtype)
    values = np.concatenate([sweep, draws])
    return np.unique(quantize_array(values, spec))


# ---------------------------------------------------------------------------
# loss-landscape slices


@dataclass
class LandscapeSlice:
    """Loss values on the plane theta + u*d1 + v*d2."""

    extents: float
    resolution: int
    seed: int
    center_loss: float
    losses: np.ndarray
    flagged: list = field(default_factory=list)
    filter_normalized: bool = True

    def metadata(self) -> dict:
        return {
            "extents": self.extents,
            "resolution": self.resolution,
            "seed": self.seed,
            "center_loss": self.center_loss,
            "flagged_cells": [list(c) for c in self.flagged],
            "filter_normalized": self.filter_normalized,
        }


def _random_directions(params, seed: int, filter_normalize: bool):
    rng = np.random.Generator(np.random.PCG64(seed))
    directions = []
    for _ in range(2):
        d = [rng.standard_normal(p.shape).astype(p.dtype) for p in params]
        if filter_normalize:
            # Rescale each direction block to the norm of its parameter block.
            for block, p in zip(d, params):
                d_norm = float(np.linalg.norm(block))
                p_norm = float(np.linalg.norm(p))
                if d_norm > 0:
                    block *= p_norm / d_norm
        directions.append(d)
    return directions


def export_landscape(
    loss_fn: Callable[[list], float],
    params: list,
    extents: float,
    resolution: int,
    seed: int = 0,
    filter_normalize: bool = True,
    directions: Optional[tuple] = None,
) -> LandscapeSlice:
    """Evaluate ``loss_fn`` on a (2*extents)-wide plane around ``params``.

    Non-finite cells are recorded in ``flagged`` instead of aborting the
    export. Supplying explicit ``directions`` bypasses generation (useful for
    analytic checks); they are used as given, without normalization.
    """
    if resolution < 1:
        raise ConfigError(f"resolution must be >= 1, got {resolution}")
    if extents < 0:
        raise ConfigError(f"extents must be >= 0, got {extents}")
    params = [np.asarray(p) for p in params]
    if directions is None:
        d1, d2 = _random_directions(params, seed, filter_normalize)
    else:
        d1, d2 = [[np.asarray(b, dtype=p.dtype) for b, p in zip(d, params)] for d in directions]
        filter_normalize = False

    center_loss = float(loss_fn(params))
    coords = np.linspace(-extents, extents, resolution) if resolution > 1 else np.array([0.0])
    losses = np.zeros((resolution, resolution), dtype=np.float64)
    flagged = []
    for i, u in enumerate(coords):
        for j, v in enumerate(coords):
            shifted = [p + p.dtype.type(u) * b1 + p.dtype.type(v) * b2 for p, b1, b2 in zip(params, d1, d2)]
            value = float(loss_fn(shifted))
            losses[i, j] = value
            if not np.isfinite(value):
                flagged.append((i, j))
    loss_fn(params)  # leave any stateful target (e.g. a live network) at the center
    return LandscapeSlice(
        extents=float(extents),
        resolution=resolution,
        seed=seed,
        center_loss=center_loss,
        losses=losses,
        flagged=flagged,
        filter_normalized=filter_normalize,
    )


def save_landscape(slice_: LandscapeSlice, csv_path, json_path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in slice_.losses]
    Path(csv_path).write_text("\n".join(lines) + "\n")
    Path(json_path).write_text(json.dumps(slice_.metadata(), indent=1, sort_keys=True))


def network_loss_fn(net, ds, objective, teacher=None, quantized: bool = True):
    """Build a (loss_fn, center_params) pair evaluating the total training
    loss of ``net`` over the full dataset at arbitrary parameter values.

    The parameter space covers the layer weights and biases; trainable
    quantizer scalars stay pinned at their checkpointed values (perturbing
    them can leave their valid domain entirely)."""
    from .losses import Mode, total_loss
    from .tensor import Tensor

    named = net.layer_parameters()
    center = [t.data.copy() for _, t in named]

    if objective.mode != Mode.CE_ONLY and teacher is None:
        raise ConfigError(f"objective '{objective.mode.value}' needs a teacher network")
    h_t = teacher.forward(Tensor(ds.x), quantized=False).detach() if teacher is not None else None

    def loss_fn(values):
        for (name, t), v in zip(named, values):
            t.data = np.asarray(v, dtype=t.data.dtype)
        logits = net.forward(Tensor(ds.x), quantized=quantized)
        loss = total_loss(h_t, logits, ds.y, objective)
        return float(loss.data)

    return loss_fn, center
