"""A linear layer whose three training GEMMs run on block-scaled 4-bit values.

Weights are stored (out_features, in_features) in binary64 master precision;
the forward product is y = x @ W.T.  Each GEMM quantizes its two operands
along the contracted dimension:

* Fprop   y  = x @ W.T     contracts the input features,
* Dgrad   dx = dy @ W      contracts the output features,
* Wgrad   dW = dy.T @ x    contracts the batch.

A PrecisionPolicy picks the format, the scale layouts, which GEMMs get a
tiled Hadamard transform on both operands, and which tensor roles round
stochastically.  With square weight tiles the backward pass reuses the
forward weight encoding through a transpose view, so the weight values seen
by Fprop and Dgrad are identical; with one-dimensional weight scaling the
backward pass must requantize along the new contracted dimension, and the
two passes see slightly different weights (the chain-rule violation measured
by chain_rule_violation_metric).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .blockquant import (
    FormatSpec,
    NVFP4,
    QuantizedTensor,
    ScalingLayout,
    cols1d,
    dequantize,
    quantize,
    rows1d,
    square2d,
)
from .codecs import NEAREST, RoundingMode, Stochastic
from .gemm import scaled_gemm, transpose_quantized_view
from .hadamard import HadamardSpec, apply_rht_tiled
from .reports import quantization_stats
from .rng import stream_key


class GemmKind(enum.Enum):
    FPROP = "fprop"
    DGRAD = "dgrad"
    WGRAD = "wgrad"


_SR_ROLES = frozenset({"gradients", "activations", "weights"})
_SIGN_STRATEGIES = ("none", "fixed", "per_instance")


@dataclass(frozen=True)
class PrecisionPolicy:
    """What gets quantized, how, and where randomness enters.

    weight_layout: square tiles keep forward/backward weight values
    identical via transpose views; a 1-D layout forces backward
    requantization.  For 1-D layouts only the block length matters; the
    orientation is chosen per GEMM so scales always run along the contracted
    dimension.  act_grad_layout plays the same role for activations and
    gradients (1-D only).  rht_gemms lists the GEMMs whose operand pairs are
    Hadamard-transformed; sr_roles lists tensor roles ("gradients",
    "activations", "weights") that round stochastically.  quantize_forward /
    quantize_backward allow switching one direction back to wide precision
    mid-run while the other stays quantized.
    """

    quantize: bool = True
    fmt: FormatSpec = NVFP4
    weight_layout: ScalingLayout = field(default_factory=square2d)
    act_grad_layout: ScalingLayout = field(default_factory=lambda: rows1d(16))
    rht_gemms: frozenset = frozenset({GemmKind.WGRAD})
    rht_spec: HadamardSpec = HadamardSpec(d=16, sign_seed=0, randomized=True)
    sr_roles: frozenset = frozenset({"gradients"})
    sign_strategy: str = "fixed"
    quantize_forward: bool = True
    quantize_backward: bool = True
    seed: int = 0
    collect_stats: bool = True

    def __post_init__(self):
        if not set(self.sr_roles) <= _SR_ROLES:
            raise ValueError(f"sr_roles must be a subset of {sorted(_SR_ROLES)}")
        if self.sign_strategy not in _SIGN_STRATEGIES:
            raise ValueError(f"sign_strategy must be one of {_SIGN_STRATEGIES}")
        if self.act_grad_layout.kind == "square":
            raise ValueError("activations and gradients use 1-D scale layouts")
        if self.fmt.block_len != 16 and self.weight_layout.kind == "square":
            raise ValueError("square weight tiles require a block-16 format")


@dataclass
class LinearLayerState:
    """Master-precision weights plus the identity used to key RNG streams."""

    weights: np.ndarray  # (out_features, in_features), float64
    layer_index: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be 2-D (out_features, in_features)")


@dataclass
class GemmTrace:
    """Record of one quantized GEMM: per-operand round-trip error plus
    saturation/underflow counts, and for Dgrad whether the weight values
    matched the forward encoding exactly."""

    kind: GemmKind
    quant_error: dict
    saturated: int
    underflow_to_zero: int
    layouts: dict
    rounding: dict
    consistent_weights: bool | None = None


@dataclass
class FwdContext:
    """Everything backward() needs: the saved input, the forward weight
    encoding (when reusable), and the identifiers to rebuild RNG streams."""

    x: np.ndarray
    layer: LinearLayerState
    policy: PrecisionPolicy
    step: int
    qweight: QuantizedTensor | None
    trace: GemmTrace | None


def _as_rows(layout: ScalingLayout) -> ScalingLayout:
    return layout if layout.kind == "square" else rows1d(layout.block_len)


def _as_cols(layout: ScalingLayout) -> ScalingLayout:
    return layout if layout.kind == "square" else cols1d(layout.block_len)


class _NullStats:
    """Placeholder when per-GEMM statistics are switched off."""

    rel_fro_error = 0.0
    saturated = 0
    underflow_to_zero = 0


def _stats(policy: PrecisionPolicy, values, q):
    if not policy.collect_stats:
        return _NullStats
    return quantization_stats(values, q)


def _mode(policy: PrecisionPolicy, role: str, layer_index: int, step: int,
          tag: str) -> RoundingMode:
    if role in policy.sr_roles:
        return Stochastic((policy.seed, layer_index, step, tag))
    return NEAREST


def _instance_spec(policy: PrecisionPolicy, layer_index: int, step: int,
                   kind: GemmKind) -> HadamardSpec:
    if policy.sign_strategy == "none":
        return replace(policy.rht_spec, randomized=False)
    if policy.sign_strategy == "fixed":
        return policy.rht_spec
    derived = int(stream_key("rht-instance", policy.rht_spec.sign_seed,
                             policy.seed, layer_index, step, kind.value)[0])
    return replace(policy.rht_spec, sign_seed=derived)


def _rht_pair(a: np.ndarray, b: np.ndarray, spec: HadamardSpec):
    """Transform both operands of a @ b along the contracted dimension.

    The contracted dimension is zero-padded to a transform multiple (padding
    contributes nothing to the product), then A gets H on its row segments
    and B gets H^T on its column segments, so the product is preserved.
    """
    k = a.shape[1]
    kp = -(-k // spec.d) * spec.d
    if kp != k:
        a = np.pad(a, ((0, 0), (0, kp - k)))
        b = np.pad(b, ((0, kp - k), (0, 0)))
    return apply_rht_tiled(a, spec), apply_rht_tiled(b.T, spec).T


def forward(layer: LinearLayerState, x, policy: PrecisionPolicy,
            step: int = 0):
    """y = x @ W.T under the policy; returns (y, context for backward)."""
    x = np.asarray(x, dtype=np.float64)
    if not (policy.quantize and policy.quantize_forward):
        y = x @ layer.weights.T
        return y, FwdContext(x=x, layer=layer, policy=policy, step=step,
                             qweight=None, trace=None)
    a, b = x, layer.weights.T
    transformed = GemmKind.FPROP in policy.rht_gemms
    if transformed:
        spec = _instance_spec(policy, layer.layer_index, step, GemmKind.FPROP)
        a, b = _rht_pair(a, b, spec)
    fmt = policy.fmt
    mode_x = _mode(policy, "activations", layer.layer_index, step, "fprop/x")
    mode_w = _mode(policy, "weights", layer.layer_index, step, "fprop/w")
    qx = quantize(a, fmt, _as_rows(policy.act_grad_layout), mode_x)
    qw = quantize(b, fmt, _as_cols(policy.weight_layout), mode_w)
    sx, sw = _stats(policy, a, qx), _stats(policy, b, qw)
    y = scaled_gemm(qx, qw)
    trace = GemmTrace(
        kind=GemmKind.FPROP,
        quant_error={"input": sx.rel_fro_error, "weight": sw.rel_fro_error},
        saturated=sx.saturated + sw.saturated,
        underflow_to_zero=sx.underflow_to_zero + sw.underflow_to_zero,
        layouts={"input": f"{qx.fmt.name}/{qx.layout.kind}",
                 "weight": f"{qw.fmt.name}/{qw.layout.kind}"},
        rounding={"input": type(mode_x).__name__, "weight": type(mode_w).__name__},
    )
    # The forward encoding is reusable by Dgrad only if it encodes the raw
    # weights (no transform) in square tiles.
    reusable = qw if (not transformed and policy.weight_layout.kind == "square") else None
    return y, FwdContext(x=x, layer=layer, policy=policy, step=step,
                         qweight=reusable, trace=trace)


def backward(ctx: FwdContext, dy):
    """Gradients (dx, dW, traces) for the saved forward call.

    Dgrad reuses the forward weight encoding through a transpose view when
    the layout allows it; otherwise the weights are requantized along the
    output dimension.  Wgrad optionally Hadamard-transforms both operands
    along the batch.  All stochastic streams are keyed by (seed, layer,
    step, operand tag), so recomputing this backward gives identical bits.
    """
    policy, layer, step, x = ctx.policy, ctx.layer, ctx.step, ctx.x
    dy = np.asarray(dy, dtype=np.float64)
    if not (policy.quantize and policy.quantize_backward):
        return dy @ layer.weights, dy.T @ x, []

    fmt = policy.fmt
    li = layer.layer_index
    traces = []

    # Dgrad: dx = dy @ W, contracted over out_features.
    a, b = dy, layer.weights
    transformed = GemmKind.DGRAD in policy.rht_gemms
    if transformed:
        spec = _instance_spec(policy, li, step, GemmKind.DGRAD)
        a, b = _rht_pair(a, b, spec)
    mode_g = _mode(policy, "gradients", li, step, "dgrad/dy")
    qdy = quantize(a, fmt, _as_rows(policy.act_grad_layout), mode_g)
    if not transformed and policy.weight_layout.kind == "square" and ctx.qweight is not None:
        qw = transpose_quantized_view(ctx.qweight)
        mode_w = NEAREST
    else:
        mode_w = _mode(policy, "weights", li, step, "dgrad/w")
        qw = quantize(b, fmt, _as_cols(policy.weight_layout), mode_w)
    consistent = None
    if policy.collect_stats and ctx.qweight is not None:
        consistent = bool(np.array_equal(dequantize(qw),
                                         dequantize(ctx.qweight).T))
    sg, sw = _stats(policy, a, qdy), _stats(policy, b, qw)
    dx = scaled_gemm(qdy, qw)
    traces.append(GemmTrace(
        kind=GemmKind.DGRAD,
        quant_error={"grad_out": sg.rel_fro_error, "weight": sw.rel_fro_error},
        saturated=sg.saturated + sw.saturated,
        underflow_to_zero=sg.underflow_to_zero + sw.underflow_to_zero,
        layouts={"grad_out": f"{qdy.fmt.name}/{qdy.layout.kind}",
                 "weight": f"{qw.fmt.name}/{qw.layout.kind}"},
        rounding={"grad_out": type(mode_g).__name__, "weight": type(mode_w).__name__},
        consistent_weights=consistent,
    ))

    # Wgrad: dW = dy.T @ x, contracted over the batch.
    a2, b2 = dy.T, x
    if GemmKind.WGRAD in policy.rht_gemms:
        spec = _instance_spec(policy, li, step, GemmKind.WGRAD)
        a2, b2 = _rht_pair(a2, b2, spec)
    mode_g2 = _mode(policy, "gradients", li, step, "wgrad/dy")
    mode_x2 = _mode(policy, "activations", li, step, "wgrad/x")
    qg = quantize(a2, fmt, _as_rows(policy.act_grad_layout), mode_g2)
    qx = quantize(b2, fmt, _as_cols(policy.act_grad_layout), mode_x2)
    sg2, sx2 = _stats(policy, a2, qg), _stats(policy, b2, qx)
    dW = scaled_gemm(qg, qx)
    traces.append(GemmTrace(
        kind=GemmKind.WGRAD,
        quant_error={"grad_out": sg2.rel_fro_error, "input": sx2.rel_fro_error},
        saturated=sg2.saturated + sx2.saturated,
        underflow_to_zero=sg2.underflow_to_zero + sx2.underflow_to_zero,
        layouts={"grad_out": f"{qg.fmt.name}/{qg.layout.kind}",
                 "input": f"{qx.fmt.name}/{qx.layout.kind}"},
        rounding={"grad_out": type(mode_g2).__name__, "input": type(mode_x2).__name__},
    ))
    return dx, dW, traces


def chain_rule_violation_metric(weights, policy: PrecisionPolicy) -> float:
    """Relative Frobenius gap between the weight values used by the forward
    and backward GEMMs under the policy's weight layout.

    Square tiles transpose exactly, so the gap is 0; one-dimensional scales
    quantize blocks along different axes in the two passes, which generally
    yields a strictly positive gap (the two passes differentiate slightly
    different functions).
    """
    w = np.asarray(weights, dtype=np.float64)
    fwd = dequantize(quantize(w.T, policy.fmt, _as_cols(policy.weight_layout))).T
    bwd = dequantize(quantize(w, policy.fmt, _as_cols(policy.weight_layout)))
    denom = float(np.linalg.norm(w))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(fwd - bwd) / denom)
