"""Parametric fake quantizers with pluggable backward rules.

Every quantizer is a clip stage followed by a rounding stage. The clip stage
is differentiated analytically (pass-through inside the clip range, zero
outside, inside branch at the kinks), including the derivatives of its
trainable parameters. The rounding stage is non-differentiable, so its
backward is replaced: the gradient arriving at the rounded value is augmented
with a term proportional to the discretization error,

    grad_in = grad_out + mu * (x_c - x_q)

where mu = 0 recovers the straight-through estimator and
mu = delta * sign(grad_out) * grad_out recovers element-wise gradient
scaling. The rule is applied at the rounding boundary, where x_c and x_q
share the same (clip-normalized) scale; affine re-mappings such as the
weight-range shift sit outside it and are differentiated normally.

Rounding ties break away from zero everywhere.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DegenerateInputError, DegenerateIntervalError
from .tensor import Tensor, add_scalar, custom_grad_op, mul_scalar, tanh


class QuantKind(str, enum.Enum):
    PACT = "pact"
    EWGS = "ewgs"
    DOREFA = "dorefa"
    LSQ = "lsq"


class Target(str, enum.Enum):
    WEIGHTS = "weights"
    ACTIVATIONS = "activations"


class RuleKind(str, enum.Enum):
    STE = "ste"
    EWGS = "ewgs"
    CUSTOM = "custom"


@dataclass(frozen=True)
class BackwardRule:
    """Backward behaviour of the rounding stage."""

    kind: RuleKind = RuleKind.STE
    delta: float = 0.0
    mu_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.delta < 0:
            raise ConfigError(f"backward-rule delta must be non-negative, got {self.delta}")
        if self.kind == RuleKind.CUSTOM and self.mu_fn is None:
            raise ConfigError("custom backward rule needs a mu function")

    @classmethod
    def ste(cls) -> "BackwardRule":
        return cls(RuleKind.STE)

    @classmethod
    def ewgs(cls, delta: float) -> "BackwardRule":
        return cls(RuleKind.EWGS, delta=delta)

    @classmethod
    def custom(cls, mu_fn: Callable) -> "BackwardRule":
        return cls(RuleKind.CUSTOM, mu_fn=mu_fn)


def apply_backward_rule(rule: BackwardRule, g: np.ndarray, x_c: np.ndarray, x_q: np.ndarray) -> np.ndarray:
    """Gradient for the clipped value given the gradient at the rounded value.

    mu is computed elementwise; with kind STE the upstream gradient passes
    through unchanged (identical to the EWGS formula at delta = 0).
    """
    if rule.kind == RuleKind.STE:
        return g
    if rule.kind == RuleKind.EWGS:
        mu = rule.delta * np.sign(g) * g
    else:
        mu = np.asarray(rule.mu_fn(g, x_c, x_q), dtype=g.dtype)
    return g + mu * (x_c - x_q)


# ---------------------------------------------------------------------------
# forward math (single source of truth for both autograd and array paths)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (NumPy rounds ties to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _pact_clip_fwd(x, m):
    # The elementwise formula equals clamp(x, 0, m) mathematically but can
    # leak a few ulps past the bounds for |x| >> m; pin it to the range.
    return np.clip(0.5 * (np.abs(x) - np.abs(x - m) + m), 0.0, m)


def _ewgs_clip_fwd(x, p1, p2):
    return np.clip((x - p1) / (p2 - p1), 0.0, 1.0)


def _grid_round_fwd(x_c, s):
    return round_half_away(x_c * s) / s


def _pact_round_fwd(x_c, m, s):
    # Grouped as (k / s) * m so grid points and the x_c = m endpoint
    # reproduce exactly in floating point.
    return round_half_away(x_c * (s / m)) / s * m


def _clamp_unit_fwd(x):
    return np.clip(x, 0.0, 1.0)


def _lsq_fwd(x, s, q_n, q_p):
    u_c = np.clip(x / s, q_n, q_p)
    return round_half_away(u_c) * s


def _dorefa_weight_scale(x):
    m = np.max(np.abs(np.tanh(x)))
    if m == 0:
        raise DegenerateInputError("DoReFa weight quantizer needs a non-zero weight tensor")
    return m


# ---------------------------------------------------------------------------
# quantizer configuration


def _check_bits(bits: int) -> int:
    if not isinstance(bits, int) or not 1 <= bits <= 8:
        raise ConfigError(f"bit width must be an integer in [1, 8], got {bits!r}")
    return bits


@dataclass
class QuantizerSpec:
    """Configuration and trainable state of one quantizer instance.

    ``clip_params`` and ``round_params`` hold the trainable scalars; kinds
    that reuse the clip parameters in the rounding function alias the same
    tensors in both mappings. Data-dependent parameters start uninitialized
    and are filled by ``init_from_array`` (the training engine calls it with
    the first batch for activations and with the latent weights for weights).
    """

    kind: QuantKind
    target: Target
    bits: int
    rule: BackwardRule = field(default_factory=BackwardRule.ste)
    lower: float = 0.0
    upper: Optional[float] = None
    clip_params: dict = field(default_factory=dict)
    round_params: dict = field(default_factory=dict)
    dtype: np.dtype = np.float32

    def __post_init__(self):
        _check_bits(self.bits)
        if self.upper is not None and not self.lower < self.upper:
            raise ConfigError(f"clip bounds must satisfy lower < upper, got [{self.lower}, {self.upper}]")

    # -- parameter handling ------------------------------------------------

    @property
    def initialized(self) -> bool:
        if self.kind == QuantKind.DOREFA:
            return True
        needed = ("p1", "p2") if self.kind == QuantKind.EWGS else ("p1",)
        return all(self.clip_params.get(name) is not None for name in needed)

    def param_tensors(self):
        """Unique (name, tensor) pairs, aliases reported once."""
        seen = {}
        for name, t in {**self.clip_params, **self.round_params}.items():
            if t is not None and id(t) not in {id(v) for v in seen.values()}:
                seen[name] = t
        return list(seen.items())

    def _mk_param(self, value: float) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)

    def init_from_array(self, x: np.ndarray) -> None:
        """Set data-dependent parameters from a reference array."""
        if self.kind == QuantKind.PACT:
            if self.clip_params.get("p1") is None:
                if self.target == Target.ACTIVATIONS:
                    m0 = 3.0
                else:
                    m0 = float(np.max(np.abs(x))) or 1.0
                p = self._mk_param(m0)
                self.clip_params["p1"] = p
                self.round_params["q1"] = p
        elif self.kind == QuantKind.EWGS:
            if self.clip_params.get("p1") is None:
                lo, hi = float(np.min(x)), float(np.max(x))
                if hi - lo < 1e-6:
                    hi = lo + 1.0  # degenerate first batch; fall back to a unit interval
                self.clip_params["p1"] = self._mk_param(lo)
                self.clip_params["p2"] = self._mk_param(hi)
        elif self.kind == QuantKind.LSQ:
            if self.clip_params.get("p1") is None:
                _, q_p = self.lsq_levels()
                s0 = 2.0 * float(np.mean(np.abs(x))) / np.sqrt(max(q_p, 1))
                if s0 <= 0:
                    s0 = 1e-3
                p = self._mk_param(s0)
                self.clip_params["p1"] = p
                self.round_params["q1"] = p
        # DoReFa has no trainable parameters.

    def require_initialized(self):
        if not self.initialized:
            raise ConfigError(f"{self.kind.value} quantizer parameters are not initialized")

    def constrain_params(self) -> None:
        """Project trainable parameters back into their valid domain."""
        if self.kind == QuantKind.PACT and self.clip_params.get("p1") is not None:
            m = self.clip_params["p1"]
            m.data = np.maximum(m.data, np.asarray(1e-3, dtype=m.data.dtype))
        elif self.kind == QuantKind.EWGS and self.clip_params.get("p1") is not None:
            p1, p2 = self.clip_params["p1"], self.clip_params["p2"]
            floor = p1.data + np.asarray(1e-3, dtype=p2.data.dtype)
            p2.data = np.maximum(p2.data, floor)
        elif self.kind == QuantKind.LSQ and self.clip_params.get("p1") is not None:
            s = self.clip_params["p1"]
            s.data = np.maximum(s.data, np.asarray(1e-4, dtype=s.data.dtype))

    def lsq_levels(self):
        if self.target == Target.ACTIVATIONS:
            return 0, 2**self.bits - 1
        return -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1

def make_quantizer(
    kind: QuantKind | str,
    target: Target | str,
    bits: int,
    rule: BackwardRule | None = None,
    dtype=np.float32,
) -> QuantizerSpec:
    kind = QuantKind(kind)
    target = Target(target)
    rule = rule or BackwardRule.ste()
    upper = {QuantKind.PACT: None, QuantKind.EWGS: 1.0, QuantKind.DOREFA: 1.0, QuantKind.LSQ: None}[kind]
    return QuantizerSpec(kind=kind, target=target, bits=_check_bits(bits), rule=rule, upper=upper, dtype=dtype)


# ---------------------------------------------------------------------------
# clip stage (analytic derivatives, inside branch at kinks)


def pact_clip(x: Tensor, m: Tensor) -> Tensor:
    if float(m.data) <= 0:
        raise DegenerateIntervalError(f"PACT clip bound must be positive, got {float(m.data)}")

    def backward(g, inputs, output):
        x_arr, m_arr = inputs
        gx = np.where((x_arr >= 0) & (x_arr <= m_arr), g, 0.0).astype(g.dtype)
        gm = np.asarray(np.sum(g * (x_arr > m_arr)), dtype=g.dtype).reshape(m_arr.shape)
        return gx, gm

    return custom_grad_op(_pact_clip_fwd, backward)(x, m)


def ewgs_clip(x: Tensor, p1: Tensor, p2: Tensor) -> Tensor:
    if float(p2.data - p1.data) <= 0:
        raise DegenerateIntervalError(
            f"EWGS clip interval is degenerate: p1={float(p1.data)}, p2={float(p2.data)}"
        )

    def backward(g, inputs, output):
        x_arr, p1_arr, p2_arr = inputs
        d = p2_arr - p1_arr
        u = (x_arr - p1_arr) / d
        gi = np.where((u >= 0) & (u <= 1), g, 0.0).astype(g.dtype)
        gx = gi / d
        gp1 = np.asarray(np.sum(gi * (x_arr - p2_arr) / (d * d)), dtype=g.dtype).reshape(p1_arr.shape)
        gp2 = np.asarray(np.sum(gi * -(x_arr - p1_arr) / (d * d)), dtype=g.dtype).reshape(p2_arr.shape)
        return gx, gp1, gp2

    return custom_grad_op(_ewgs_clip_fwd, backward)(x, p1, p2)


def clamp_unit(x: Tensor) -> Tensor:
    def backward(g, inputs, output):
        (x_arr,) = inputs
        return np.where((x_arr >= 0) & (x_arr <= 1), g, 0.0).astype(g.dtype)

    return custom_grad_op(_clamp_unit_fwd, backward)(x)


# ---------------------------------------------------------------------------
# rounding stage (custom backward per the discretization-error rule)


def grid_round(x_c: Tensor, bits: int, rule: BackwardRule) -> Tensor:
    """Round onto the uniform grid {k / (2^bits - 1)}."""
    s = float(2**bits - 1)

    def forward(xc):
        return _grid_round_fwd(xc, s)

    def backward(g, inputs, output):
        return apply_backward_rule(rule, g, inputs[0], output)

    return custom_grad_op(forward, backward)(x_c)


def pact_round(x_c: Tensor, m: Tensor, bits: int, rule: BackwardRule) -> Tensor:
    """Round onto {k * m / (2^bits - 1)}; no gradient reaches m through the
    rounding stage (straight-through, the scale cancels)."""
    s = float(2**bits - 1)

    def forward(xc, m_arr):
        return _pact_round_fwd(xc, m_arr, s)

    def backward(g, inputs, output):
        return apply_backward_rule(rule, g, inputs[0], output), None

    return custom_grad_op(forward, backward)(x_c, m)


def lsq_round(x: Tensor, s: Tensor, q_n: int, q_p: int, rule: BackwardRule) -> Tensor:
    """Learned-step quantizer: x_q = round(clamp(x/s, q_n, q_p)) * s.

    The step size receives the straight-through-estimated gradient
    (round(u) - u inside the range, the saturated level outside); the data
    path additionally honours the configured backward rule at the round.
    """

    def forward(x_arr, s_arr):
        return _lsq_fwd(x_arr, s_arr, q_n, q_p)

    def backward(g, inputs, output):
        x_arr, s_arr = inputs
        sd = s_arr.reshape(())
        u = x_arr / sd
        inside = (u >= q_n) & (u <= q_p)
        u_c = np.clip(u, q_n, q_p)
        u_q = round_half_away(u_c)
        g_uq = g * sd
        g_uc = apply_backward_rule(rule, g_uq, u_c, u_q)
        gx = np.where(inside, g_uc / sd, 0.0).astype(g.dtype)
        ds = np.where(inside, u_q - u, np.where(u < q_n, q_n, q_p))
        gs = np.asarray(np.sum(g * ds), dtype=g.dtype).reshape(s_arr.shape)
        return gx, gs

    return custom_grad_op(forward, backward)(x, s)


# ---------------------------------------------------------------------------
# public stage-wise and composed entry points


def clip(x: Tensor, spec: QuantizerSpec) -> Tensor:
    """Clip stage of the quantizer (Tensor in, clipped Tensor out)."""
    spec.require_initialized()
    if spec.kind == QuantKind.PACT:
        return pact_clip(x, spec.clip_params["p1"])
    if spec.kind == QuantKind.EWGS:
        return ewgs_clip(x, spec.clip_params["p1"], spec.clip_params["p2"])
    if spec.kind == QuantKind.DOREFA and spec.target == Target.ACTIVATIONS:
        return clamp_unit(x)
    raise ConfigError(f"{spec.kind.value}/{spec.target.value} has no standalone clip stage")


def round_q(x_c: Tensor, spec: QuantizerSpec) -> Tensor:
    """Rounding stage of the quantizer applied to an already-clipped value."""
    spec.require_initialized()
    if spec.kind == QuantKind.PACT:
        return pact_round(x_c, spec.clip_params["p1"], spec.bits, spec.rule)
    if spec.kind in (QuantKind.EWGS, QuantKind.DOREFA):
        y = grid_round(x_c, spec.bits, spec.rule)
        if spec.target == Target.WEIGHTS:
            return add_scalar(mul_scalar(y, 2.0), -1.0)
        return y
    raise ConfigError(f"{spec.kind.value} has no standalone rounding stage")


def quantize(x: Tensor, spec: QuantizerSpec) -> Tensor:
    """Full fake-quantization: round_q(clip(x)) with the spec's backward rule."""
    spec.require_initialized()
    if spec.kind == QuantKind.DOREFA:
        return quantize_dorefa(x, spec)
    if spec.kind == QuantKind.LSQ:
        return quantize_lsq(x, spec)
    return round_q(clip(x, spec), spec)


def quantize_dorefa(x: Tensor, spec: QuantizerSpec) -> Tensor:
    if spec.kind != QuantKind.DOREFA:
        raise ConfigError(f"quantize_dorefa called with kind {spec.kind.value}")
    if spec.target == Target.WEIGHTS:
        scale = _dorefa_weight_scale(x.data)
        t = tanh(x)
        u = add_scalar(mul_scalar(t, 1.0 / (2.0 * scale)), 0.5)
        y = grid_round(u, spec.bits, spec.rule)
        return add_scalar(mul_scalar(y, 2.0), -1.0)
    u = clamp_unit(x)
    return grid_round(u, spec.bits, spec.rule)


def quantize_lsq(x: Tensor, spec: QuantizerSpec) -> Tensor:
    if spec.kind != QuantKind.LSQ:
        raise ConfigError(f"quantize_lsq called with kind {spec.kind.value}")
    spec.require_initialized()
    q_n, q_p = spec.lsq_levels()
    return lsq_round(x, spec.clip_params["p1"], q_n, q_p, spec.rule)


def quantize_array(x: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Forward-only quantization on a plain array (same math as quantize)."""
    spec.require_initialized()
    s = float(2**spec.bits - 1)
    if spec.kind == QuantKind.PACT:
        m = spec.clip_params["p1"].data
        if float(m) <= 0:
            raise DegenerateIntervalError(f"PACT clip bound must be positive, got {float(m)}")
        return _pact_round_fwd(_pact_clip_fwd(x, m), m, s)
    if spec.kind == QuantKind.EWGS:
        p1, p2 = spec.clip_params["p1"].data, spec.clip_params["p2"].data
        if float(p2 - p1) <= 0:
            raise DegenerateIntervalError("EWGS clip interval is degenerate")
        y = _grid_round_fwd(_ewgs_clip_fwd(x, p1, p2), s)
        return 2.0 * y - 1.0 if spec.target == Target.WEIGHTS else y
    if spec.kind == QuantKind.DOREFA:
        if spec.target == Target.WEIGHTS:
            scale = _dorefa_weight_scale(x)
            y = _grid_round_fwd(np.tanh(x) / (2.0 * scale) + 0.5, s)
            return 2.0 * y - 1.0
        return _grid_round_fwd(_clamp_unit_fwd(x), s)
    q_n, q_p = spec.lsq_levels()
    return _lsq_fwd(x, spec.clip_params["p1"].data, q_n, q_p)
