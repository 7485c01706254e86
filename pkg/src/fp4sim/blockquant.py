"""Two-level block-scaled 4-bit quantization of 2-D tensors.

Two formats:

* ``NVFP4``: blocks of 16 share an E4M3 (fractional) scale, plus one FP32
  tensor-level scale chosen so the largest block scale lands at the top of
  the E4M3 range.  Encoding pipeline for tensor x with amax_x = max|x|:

      s_enc      = (6 * 448) / amax_x            tensor encode scale
      s_dec      = 1 / s_enc                     tensor decode scale (FP32 grid)
      s_dec_b    = amax_b / 6                    ideal per-block decode scale
      scale_code = e4m3_rne(s_dec_b * s_enc)     stored per block
      s_enc_b    = 1 / (decode(scale_code) * s_dec)
      codes      = e2m1(x_i * s_enc_b)

  and dequantization is code * decode(scale_code) * s_dec.

* ``MXFP4``: blocks of 32 share a UE8M0 (power-of-two) scale, no tensor
  scale.  The stored scale is the smallest power of two >= amax_b / 6, which
  makes encoding saturation-free by construction but can leave the top two
  magnitude codes unused when amax_b sits just above a power of two.

Scaling layouts tile a (R, C) tensor with (1, L) row segments, (L, 1) column
segments, or 16x16 squares.  Tensors are zero-padded up to block multiples
before encoding and cropped after decoding; block scales are indexed in
row-major order over the block grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codecs import (
    E2M1_MAX,
    E4M3_MAX,
    E4M3_SMALLEST_POSITIVE_CODE,
    NEAREST,
    NonFiniteInputError,
    QuantizationError,
    RoundingMode,
    decode_e2m1,
    decode_e4m3,
    decode_ue8m0,
    encode_e2m1,
    encode_e4m3,
    encode_ue8m0_roundup,
)


class LayoutError(QuantizationError):
    pass


@dataclass(frozen=True)
class FormatSpec:
    """Name, block length, scale codec, and whether a tensor-level decode
    scale accompanies the block scales."""

    name: str
    block_len: int
    scale_codec: str  # "e4m3" | "ue8m0"
    has_tensor_scale: bool

    def __post_init__(self):
        if self.scale_codec not in ("e4m3", "ue8m0"):
            raise ValueError(f"unknown scale codec {self.scale_codec!r}")
        if self.block_len < 1:
            raise ValueError("block_len must be positive")


NVFP4 = FormatSpec("nvfp4", 16, "e4m3", True)
MXFP4 = FormatSpec("mxfp4", 32, "ue8m0", False)

FORMATS = {f.name: f for f in (NVFP4, MXFP4)}


@dataclass(frozen=True)
class ScalingLayout:
    """How scale blocks tile a 2-D tensor.

    kind "rows": (1, block_len) segments along each row (shared scale along
    the second axis); "cols": (block_len, 1) segments down each column;
    "square": 16x16 tiles (one scale per tile, shared by both axes).
    """

    kind: str
    block_shape: tuple[int, int]

    def __post_init__(self):
        if self.kind not in ("rows", "cols", "square"):
            raise ValueError(f"unknown layout kind {self.kind!r}")

    @property
    def block_len(self) -> int:
        return max(self.block_shape)


def rows1d(n: int = 16) -> ScalingLayout:
    return ScalingLayout("rows", (1, n))


def cols1d(n: int = 16) -> ScalingLayout:
    return ScalingLayout("cols", (n, 1))


def square2d() -> ScalingLayout:
    return ScalingLayout("square", (16, 16))


@dataclass(frozen=True)
class BlockMap:
    """Geometry of the block decomposition of one tensor under one layout."""

    shape: tuple[int, int]
    padded_shape: tuple[int, int]
    block_shape: tuple[int, int]
    grid_shape: tuple[int, int]

    @property
    def n_blocks(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def block_slices(self, index: int) -> tuple[slice, slice]:
        """Padded-tensor slices of block `index` (row-major grid order)."""
        gr, gc = self.grid_shape
        r, c = divmod(index, gc)
        br, bc = self.block_shape
        return slice(r * br, (r + 1) * br), slice(c * bc, (c + 1) * bc)


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def block_decompose(shape: tuple[int, int], layout: ScalingLayout) -> BlockMap:
    r, c = shape
    if r < 1 or c < 1:
        raise LayoutError("tensor must have at least one row and column")
    br, bc = layout.block_shape
    padded = (_ceil_to(r, br), _ceil_to(c, bc))
    grid = (padded[0] // br, padded[1] // bc)
    return BlockMap(tuple(shape), padded, layout.block_shape, grid)


def _pad(x: np.ndarray, bm: BlockMap) -> np.ndarray:
    pr = bm.padded_shape[0] - x.shape[0]
    pc = bm.padded_shape[1] - x.shape[1]
    if pr == 0 and pc == 0:
        return x
    return np.pad(x, ((0, pr), (0, pc)))


def _to_blocks(xp: np.ndarray, bm: BlockMap) -> np.ndarray:
    """Padded tensor -> (n_blocks, block_size) rows in grid row-major order."""
    br, bc = bm.block_shape
    gr, gc = bm.grid_shape
    return (xp.reshape(gr, br, gc, bc)
              .transpose(0, 2, 1, 3)
              .reshape(bm.n_blocks, br * bc))


def _from_blocks(blocks: np.ndarray, bm: BlockMap) -> np.ndarray:
    br, bc = bm.block_shape
    gr, gc = bm.grid_shape
    return (blocks.reshape(gr, gc, br, bc)
                  .transpose(0, 2, 1, 3)
                  .reshape(bm.padded_shape))


def expand_scales(grid_values: np.ndarray, bm: BlockMap) -> np.ndarray:
    """Broadcast per-block values from the grid to the padded tensor shape."""
    br, bc = bm.block_shape
    return np.repeat(np.repeat(grid_values, br, axis=0), bc, axis=1)


@dataclass(frozen=True)
class BlockStats:
    """Per-block and tensor-level magnitude maxima."""

    amax_blocks: np.ndarray  # grid_shape
    amax_tensor: float
    block_map: BlockMap


def block_stats(x, layout: ScalingLayout) -> BlockStats:
    x = _check_input(x)
    bm = block_decompose(x.shape, layout)
    blocks = _to_blocks(_pad(x, bm), bm)
    amax_b = np.abs(blocks).max(axis=1).reshape(bm.grid_shape)
    return BlockStats(amax_b, float(np.abs(x).max()), bm)


def _check_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise LayoutError("block quantization expects a 2-D tensor")
    if not np.isfinite(x).all():
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteInputError(f"non-finite input at index {tuple(bad)}")
    return x


@dataclass
class QuantizedTensor:
    """Codes, block scale codes, and enough metadata to dequantize.

    codes cover the zero-padded shape; scale_codes are uint8 over the block
    grid.  global_decode_scale is the tensor-level decode scale (required
    for nvfp4, absent for mxfp4).
    """

    shape: tuple[int, int]
    codes: np.ndarray        # uint8, padded shape, values 0..15
    scale_codes: np.ndarray  # uint8, grid shape
    layout: ScalingLayout
    fmt: FormatSpec
    global_decode_scale: float | None

    def __post_init__(self):
        bm = self.block_map
        if tuple(self.codes.shape) != bm.padded_shape:
            raise LayoutError("code array does not match padded shape")
        if tuple(self.scale_codes.shape) != bm.grid_shape:
            raise LayoutError("scale grid does not match block decomposition")
        if self.fmt.has_tensor_scale and self.global_decode_scale is None:
            raise QuantizationError(f"{self.fmt.name} requires a tensor-level scale")
        if not self.fmt.has_tensor_scale and self.global_decode_scale is not None:
            raise QuantizationError(f"{self.fmt.name} does not carry a tensor-level scale")
        if self.layout.kind != "square" and self.layout.block_len != self.fmt.block_len:
            raise LayoutError("layout block length must match the format block length")
        if self.layout.kind == "square" and self.fmt.block_len != 16:
            raise LayoutError("square tiles require a block-16 format")

    @property
    def block_map(self) -> BlockMap:
        return block_decompose(self.shape, self.layout)

    def scale_values(self) -> np.ndarray:
        """Per-block decode scales (before the tensor-level scale)."""
        if self.fmt.scale_codec == "e4m3":
            return decode_e4m3(self.scale_codes)
        return decode_ue8m0(self.scale_codes)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def global_encode_scale(amax_tensor: float) -> tuple[float, float]:
    """Tensor-level (encode, decode) scale pair for nvfp4.

    s_enc maps the tensor amax to E2M1_MAX * E4M3_MAX so the largest block
    scale uses the full E4M3 range; s_dec is its reciprocal (kept in wide
    precision; the FP32 grid is coarser, and rounding there would only
    shift both levels by the same factor).
    """
    if not np.isfinite(amax_tensor) or amax_tensor < 0:
        raise QuantizationError("amax must be finite and non-negative")
    if amax_tensor == 0:
        return 1.0, 1.0
    s_enc = (E2M1_MAX * E4M3_MAX) / amax_tensor
    return s_enc, 1.0 / s_enc


def nvfp4_block_scales(amax_blocks: np.ndarray, s_enc: float,
                       s_dec: float) -> tuple[np.ndarray, np.ndarray]:
    """Stored E4M3 scale codes and per-block encode multipliers.

    The ideal decode scale amax_b / 6 is pre-multiplied by s_enc, rounded to
    E4M3, and inverted against s_dec so encode * decode is exactly the
    stored-scale product.  All-zero blocks store the smallest positive scale
    code (a zero code would make the encode multiplier undefined); blocks
    whose scale underflows E4M3 to zero get a zero multiplier, which zeroes
    their codes.
    """
    target = (amax_blocks / E2M1_MAX) * s_enc
    codes = encode_e4m3(target)
    codes[amax_blocks == 0] = E4M3_SMALLEST_POSITIVE_CODE
    decoded = decode_e4m3(codes)
    with np.errstate(divide="ignore"):
        enc = np.where(decoded > 0, 1.0 / (decoded * s_dec), 0.0)
    return codes, enc


def quantize_nvfp4(x, layout: ScalingLayout = rows1d(16),
                   mode: RoundingMode = NEAREST) -> QuantizedTensor:
    x = _check_input(x)
    if layout.kind != "square" and layout.block_len != NVFP4.block_len:
        raise LayoutError("nvfp4 uses block length 16")
    bm = block_decompose(x.shape, layout)
    xp = _pad(x, bm)
    blocks = _to_blocks(xp, bm)
    amax_b = np.abs(blocks).max(axis=1)
    s_enc, s_dec = global_encode_scale(float(np.abs(x).max()))
    scale_codes, enc = nvfp4_block_scales(amax_b, s_enc, s_dec)
    counters = _to_blocks(
        np.arange(xp.size, dtype=np.int64).reshape(xp.shape), bm)
    codes = encode_e2m1(blocks * enc[:, None], mode, counters=counters)
    return QuantizedTensor(
        shape=tuple(x.shape),
        codes=_from_blocks(codes, bm).astype(np.uint8),
        scale_codes=scale_codes.reshape(bm.grid_shape),
        layout=layout,
        fmt=NVFP4,
        global_decode_scale=s_dec,
    )


def quantize_mxfp4(x, layout: ScalingLayout = rows1d(32),
                   mode: RoundingMode = NEAREST) -> QuantizedTensor:
    x = _check_input(x)
    if layout.kind == "square":
        raise LayoutError("mxfp4 blocks are 32 long; square tiles are 16x16")
    if layout.block_len != MXFP4.block_len:
        raise LayoutError("mxfp4 uses block length 32")
    bm = block_decompose(x.shape, layout)
    xp = _pad(x, bm)
    blocks = _to_blocks(xp, bm)
    amax_b = np.abs(blocks).max(axis=1)
    # Round the ideal scale UP to a power of two: the scaled amax then never
    # exceeds 6, so encoding cannot saturate.
    scale_codes = np.zeros(bm.n_blocks, dtype=np.uint8)
    nz = amax_b > 0
    if nz.any():
        scale_codes[nz] = encode_ue8m0_roundup(amax_b[nz] / E2M1_MAX)
    decoded = decode_ue8m0(scale_codes)
    counters = _to_blocks(
        np.arange(xp.size, dtype=np.int64).reshape(xp.shape), bm)
    codes = encode_e2m1(blocks / decoded[:, None], mode, counters=counters)
    return QuantizedTensor(
        shape=tuple(x.shape),
        codes=_from_blocks(codes, bm).astype(np.uint8),
        scale_codes=scale_codes.reshape(bm.grid_shape),
        layout=layout,
        fmt=MXFP4,
        global_decode_scale=None,
    )


def quantize(x, fmt: FormatSpec, layout: ScalingLayout | None = None,
             mode: RoundingMode = NEAREST) -> QuantizedTensor:
    if layout is None:
        layout = rows1d(fmt.block_len)
    if fmt.name == "nvfp4":
        return quantize_nvfp4(x, layout, mode)
    if fmt.name == "mxfp4":
        return quantize_mxfp4(x, layout, mode)
    raise ValueError(f"unknown format {fmt.name!r}")


def encode_multipliers(q: QuantizedTensor) -> np.ndarray:
    """Per-block encode multipliers reconstructed from the stored codes.

    Multiplying original values by these reproduces exactly what the encoder
    saw before E2M1 rounding (used for saturation/underflow accounting).
    """
    decoded = q.scale_values()
    s_dec = q.global_decode_scale if q.fmt.has_tensor_scale else 1.0
    with np.errstate(divide="ignore"):
        return np.where(decoded > 0, 1.0 / (decoded * s_dec), 0.0)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Decode to binary64 and crop the zero padding."""
    bm = q.block_map
    vals = decode_e2m1(q.codes) * expand_scales(q.scale_values(), bm)
    if q.fmt.has_tensor_scale:
        vals = vals * q.global_decode_scale
    r, c = q.shape
    return vals[:r, :c]
