"""Image IO (netpbm), resize/blur preprocessing, patch tiling, heatmaps.

Only PGM (P2/P5) and PPM (P3/P6) with maxval 255 are supported: the formats
are bit-exactly specifiable, which keeps round-trip tests byte-stable and
the artifact dependency-free.  Images are stored as uint8 (H, W, C) arrays
with C in {1, 3}; the float helpers work on unit-interval float64 arrays.

Quantization convention everywhere: floor after adding 1e-7 (so exact
half-integers round down, while values that are integral up to float error
stay put).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import (
    CorruptHeader,
    DimensionMismatch,
    IndivisibleDims,
    TruncatedData,
    UnsupportedFormat,
)

# viridis-like 8-entry ramp used for PPM heatmap output
_RAMP = np.array(
    [
        (68, 1, 84),
        (70, 50, 127),
        (54, 92, 141),
        (39, 127, 143),
        (31, 161, 135),
        (74, 194, 109),
        (159, 218, 58),
        (253, 231, 37),
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Image:
    """8-bit image; ``pixels`` is (height, width, channels) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError("pixels must be uint8")
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"pixels must be (H, W, C) with C in {{1, 3}}, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_float(self) -> np.ndarray:
        """Unit-interval float64 copy, same shape."""
        return self.pixels.astype(np.float64) / 255.0

    @classmethod
    def from_float(cls, arr: np.ndarray) -> "Image":
        """Quantize a unit-interval float array back to 8 bits."""
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(_quantize(arr * 255.0))


@dataclass(frozen=True)
class PatchGrid:
    """Row-major P x P tiling of an image.

    ``patches`` is (N, P, P, C) uint8 with N = grid_rows * grid_cols.
    """

    patch_size: int
    grid_rows: int
    grid_cols: int
    patches: np.ndarray

    def __post_init__(self):
        n, p, q, _ = self.patches.shape
        if p != self.patch_size or q != self.patch_size:
            raise DimensionMismatch(f"patches are {p}x{q}, expected {self.patch_size}")
        if n != self.grid_rows * self.grid_cols:
            raise DimensionMismatch(
                f"{n} patches for a {self.grid_rows}x{self.grid_cols} grid"
            )

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(arr + 1e-7), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# netpbm IO
# ---------------------------------------------------------------------------

_MAGIC_CHANNELS = {b"P2": 1, b"P3": 3, b"P5": 1, b"P6": 3}
_BINARY_MAGIC = (b"P5", b"P6")


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise CorruptHeader("unexpected end of file while reading header")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def _int_token(data: bytes, pos: int, what: str) -> tuple[int, int]:
    token, pos = _next_token(data, pos)
    try:
        return int(token), pos
    except ValueError:
        raise CorruptHeader(f"expected integer {what}, got {token!r}") from None


def load_image(path: str | Path) -> Image:
    """Read a PGM/PPM file (ASCII or binary, maxval 255)."""
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise CorruptHeader(f"{path}: file too short for a netpbm header")
    magic = data[:2]
    if magic not in _MAGIC_CHANNELS:
        raise UnsupportedFormat(f"{path}: unsupported magic {magic!r}")
    channels = _MAGIC_CHANNELS[magic]
    width, pos = _int_token(data, 2, "width")
    height, pos = _int_token(data, pos, "height")
    maxval, pos = _int_token(data, pos, "maxval")
    if width < 1 or height < 1:
        raise CorruptHeader(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: only maxval 255 is supported, got {maxval}")
    count = width * height * channels

    if magic in _BINARY_MAGIC:
        # exactly one whitespace byte separates maxval from the raster
        if pos >= len(data) or not data[pos : pos + 1].isspace():
            raise CorruptHeader(f"{path}: missing whitespace before raster")
        raster = data[pos + 1 : pos + 1 + count]
        if len(raster) < count:
            raise TruncatedData(
                f"{path}: raster has {len(raster)} bytes, header declares {count}"
            )
        flat = np.frombuffer(raster, dtype=np.uint8)
    else:
        values = data[pos:].split()
        samples = []
        for token in values:
            if token.startswith(b"#"):
                continue
            try:
                v = int(token)
            except ValueError:
                raise CorruptHeader(f"{path}: bad sample token {token!r}") from None
            if not 0 <= v <= 255:
                raise CorruptHeader(f"{path}: sample {v} outside [0, 255]")
            samples.append(v)
            if len(samples) == count:
                break
        if len(samples) < count:
            raise TruncatedData(
                f"{path}: raster has {len(samples)} samples, header declares {count}"
            )
        flat = np.array(samples, dtype=np.uint8)

    return Image(flat.reshape(height, width, channels))


def save_image(path: str | Path, img: Image) -> None:
    """Write binary PGM (1 channel) or PPM (3 channels)."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    Path(path).write_bytes(header + img.pixels.tobytes())


# ---------------------------------------------------------------------------
# Geometry ops (float internals)
# ---------------------------------------------------------------------------


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling on a float (H, W, C) array.

    Output pixel t samples source coordinate t * (in-1)/(out-1); a
    single-pixel output samples the source center.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def coords(n_in, n_out):
        if n_out == 1:
            return np.full(1, (n_in - 1) / 2.0)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    sy = coords(h, out_h)
    sx = coords(w, out_w)
    y0 = np.minimum(sy.astype(np.int64), h - 1)
    x0 = np.minimum(sx.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear resize of an 8-bit image; quantization floors half-integers."""
    return Image(_quantize(resize_array(img.pixels.astype(np.float64), out_h, out_w)))


def gaussian_blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), edges clamped.

    sigma = 0 returns an unchanged copy.  Linear in the input.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return arr.copy()
    radius = math.ceil(3 * sigma)
    out = gaussian_filter1d(arr, sigma, axis=0, mode="nearest", radius=radius)
    return gaussian_filter1d(out, sigma, axis=1, mode="nearest", radius=radius)


def gaussian_blur(img: Image, sigma: float) -> Image:
    if sigma == 0:
        return Image(img.pixels.copy())
    return Image(_quantize(gaussian_blur_array(img.pixels.astype(np.float64), sigma)))


def make_gist_input(
    img: Image,
    context: Image | None = None,
    gist_size: int = 32,
    sigma: float = 8.0,
) -> tuple[Image, Image | None]:
    """Coarse 'gist' views: blur then downscale to gist_size x gist_size.

    The context, when present, gets the identical treatment.  Blur runs
    before the resize (blurring the full-resolution image, then sampling),
    not the other way around.
    """
    if gist_size < 8:
        raise ValueError("gist_size must be >= 8")

    def gist(im: Image) -> Image:
        blurred = gaussian_blur_array(im.pixels.astype(np.float64), sigma)
        return Image(_quantize(resize_array(blurred, gist_size, gist_size)))

    return gist(img), (gist(context) if context is not None else None)


def patchify(img: Image, patch_size: int) -> PatchGrid:
    """Tile the image into non-overlapping patch_size x patch_size regions,
    row-major."""
    if img.height % patch_size or img.width % patch_size:
        raise IndivisibleDims(
            f"{img.height}x{img.width} not divisible by patch size {patch_size}"
        )
    rows = img.height // patch_size
    cols = img.width // patch_size
    c = img.channels
    patches = (
        img.pixels.reshape(rows, patch_size, cols, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch_size, patch_size, c)
    )
    return PatchGrid(patch_size, rows, cols, np.ascontiguousarray(patches))


def unpatchify(grid: PatchGrid) -> Image:
    """Reassemble a PatchGrid back into the original image."""
    p, rows, cols = grid.patch_size, grid.grid_rows, grid.grid_cols
    c = grid.patches.shape[3]
    pixels = (
        grid.patches.reshape(rows, cols, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * p, cols * p, c)
    )
    return Image(np.ascontiguousarray(pixels))


# ---------------------------------------------------------------------------
# Heatmap rendering
# ---------------------------------------------------------------------------


def _colorize(norm: np.ndarray) -> np.ndarray:
    """Map unit-interval values through the 8-entry ramp to RGB floats."""
    t = np.clip(norm, 0.0, 1.0) * (len(_RAMP) - 1)
    lo = np.minimum(t.astype(np.int64), len(_RAMP) - 2)
    frac = (t - lo)[..., None]
    return _RAMP[lo] * (1 - frac) + _RAMP[lo + 1] * frac


def render_heatmap(
    weights: np.ndarray,
    grid_rows: int,
    grid_cols: int,
    out_h: int,
    out_w: int,
    blur_sigma: float = 0.0,
    base: Image | None = None,
) -> Image:
    """Render per-region weights as an image.

    Weights are min-max normalized (a constant map renders mid-gray),
    nearest-upsampled so each region paints its own block, optionally
    Gaussian-blurred, and either returned as grayscale or colorized through
    the ramp and alpha-blended (0.5) over ``base``.  Brighter means higher
    weight; the output is invariant to positive affine rescaling of the
    weights.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape[0] != grid_rows * grid_cols:
        raise DimensionMismatch(
            f"{w.shape[0]} weights for a {grid_rows}x{grid_cols} grid"
        )
    span = float(w.max() - w.min())
    norm = (w - w.min()) / span if span > 1e-300 else np.full_like(w, 0.5)
    field = norm.reshape(grid_rows, grid_cols)
    iy = np.arange(out_h) * grid_rows // out_h
    ix = np.arange(out_w) * grid_cols // out_w
    heat = field[iy][:, ix]
    if blur_sigma > 0:
        heat = gaussian_blur_array(heat[:, :, None], blur_sigma)[:, :, 0]

    if base is None:
        return Image(_quantize(heat[:, :, None] * 255.0))

    if (base.height, base.width) != (out_h, out_w):
        raise DimensionMismatch(
            f"base is {base.height}x{base.width}, heatmap is {out_h}x{out_w}"
        )
    color = _colorize(heat)
    base_rgb = base.pixels.astype(np.float64)
    if base.channels == 1:
        base_rgb = np.repeat(base_rgb, 3, axis=2)
    return Image(_quantize(0.5 * base_rgb + 0.5 * color))
