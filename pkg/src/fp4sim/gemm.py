"""Matrix products over block-scaled 4-bit operands.

The emulated tensor-core contract: within each K-block, raw code products
accumulate exactly (code values are dyadic rationals no larger than 6, so
every inner product of a block is exact in binary64 in any summation order);
each block's partial sum is descaled by the product of the two stored block
scales; descaled partials accumulate across K-blocks in ascending block
order; finally the tensor-level decode scales multiply once.  Results are
therefore bitwise reproducible and independent of how the inner products
were scheduled.
"""

from __future__ import annotations

import numpy as np

from .blockquant import QuantizedTensor, block_decompose, expand_scales
from .codecs import decode_e2m1


class GemmError(ValueError):
    pass


class NotTransposableError(GemmError):
    pass


def _operand_scales(q: QuantizedTensor, side: str) -> np.ndarray:
    """Block decode scales expanded along the non-contracted axis.

    Returns (padded_rows, n_kblocks) for side "a" or (n_kblocks, padded_cols)
    for side "b", where K-blocks tile the contracted dimension.
    """
    bm = q.block_map
    vals = q.scale_values()
    if q.layout.kind == "square":
        tile = q.layout.block_shape[0]
        if side == "a":
            return np.repeat(vals, tile, axis=0)
        return np.repeat(vals, tile, axis=1)
    return vals


def scaled_gemm(qa: QuantizedTensor, qb: QuantizedTensor,
                accumulate: str = "f64") -> np.ndarray:
    """(m, k) @ (k, n) on quantized operands, descaled per K-block.

    qa must carry scales along its rows ("rows" segments or square tiles)
    and qb along its columns ("cols" or square), so both operands share the
    K-block boundaries of the contracted dimension.  accumulate selects the
    cross-block accumulator width: "f64" (default) or "f32" to emulate a
    narrower partial-sum register.
    """
    if qa.fmt.name != qb.fmt.name:
        raise GemmError(f"operand formats differ: {qa.fmt.name} vs {qb.fmt.name}")
    if accumulate not in ("f64", "f32"):
        raise GemmError(f"unknown accumulator {accumulate!r}")
    if qa.layout.kind not in ("rows", "square"):
        raise GemmError("left operand must be scaled along rows (or in squares)")
    if qb.layout.kind not in ("cols", "square"):
        raise GemmError("right operand must be scaled along columns (or in squares)")
    m, ka = qa.shape
    kb, n = qb.shape
    if ka != kb:
        raise GemmError(f"inner dimensions differ: {ka} vs {kb}")

    block_k = qa.layout.block_shape[1] if qa.layout.kind != "square" else 16
    block_k_b = qb.layout.block_shape[0] if qb.layout.kind != "square" else 16
    if block_k != block_k_b:
        raise GemmError("operands decompose K with different block lengths")

    bma = qa.block_map
    bmb = qb.block_map
    kp = bma.padded_shape[1]
    if kp != bmb.padded_shape[0]:
        raise GemmError("padded inner dimensions differ")

    va = decode_e2m1(qa.codes)
    vb = decode_e2m1(qb.codes)
    sa = _operand_scales(qa, "a")  # (padded_m, kp/block_k)
    sb = _operand_scales(qb, "b")  # (kp/block_k, padded_n)

    dtype = np.float64 if accumulate == "f64" else np.float32
    out = np.zeros((bma.padded_shape[0], bmb.padded_shape[1]), dtype=dtype)
    for kb_i in range(kp // block_k):
        sl = slice(kb_i * block_k, (kb_i + 1) * block_k)
        partial = va[:, sl] @ vb[sl, :]  # exact: dyadic values, short sums
        term = sa[:, kb_i, None] * sb[None, kb_i, :] * partial
        out += term.astype(dtype, copy=False)
    out = out.astype(np.float64)
    if qa.fmt.has_tensor_scale:
        out *= qa.global_decode_scale * qb.global_decode_scale
    return out[:m, :n]


def transpose_quantized_view(q: QuantizedTensor) -> QuantizedTensor:
    """Reinterpret a square-tiled tensor as its transpose without requantizing.

    Square tiles cover both axes symmetrically, so transposing codes and the
    scale grid yields a quantized tensor whose dequantization is exactly the
    transpose of the original: forward and backward passes then see one
    consistent set of weight values.  One-dimensional layouts scale along a
    single axis and cannot be reinterpreted; they raise NotTransposableError
    and the caller must requantize along the new dot-product dimension.
    """
    if q.layout.kind != "square":
        raise NotTransposableError(
            "block scales along one axis do not transpose; requantize along "
            "the new dot-product dimension")
    return QuantizedTensor(
        shape=(q.shape[1], q.shape[0]),
        codes=np.ascontiguousarray(q.codes.T),
        scale_codes=np.ascontiguousarray(q.scale_codes.T),
        layout=q.layout,
        fmt=q.fmt,
        global_decode_scale=q.global_decode_scale,
    )


def dequant_matmul(qa: QuantizedTensor, qb: QuantizedTensor) -> np.ndarray:
    """Reference product: dequantize both operands fully, then matmul in
    binary64.  scaled_gemm must agree with this up to accumulation-order
    rounding; tests use it as the independent oracle."""
    return qa.dequantize() @ qb.dequantize()
