#!/usr/bin/env python3
"""
Image containers, ingestion, bilateral denoising and synthetic OCT phantoms

BScan, Cube and Mask are immutable: their arrays are marked read-only on
construction, so they can be handed to worker threads without copying.
"""

import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from segmentation_config import (
    CIRRUS_DIMS,
    CIRRUS_VOXEL_MM,
    DEFAULT_BILATERAL_WINDOW,
    DEFAULT_SIGMA_R,
    DEFAULT_SIGMA_S,
    PHANTOM_BAND_BOTTOM_LEVEL,
    PHANTOM_BAND_TOP_LEVEL,
    PHANTOM_BELOW_LEVEL,
    PHANTOM_FLOATER_CLEARANCE,
    PHANTOM_FLOATER_LEVEL,
    PHANTOM_FLOATER_RADIUS,
    PHANTOM_FOCUS_LEVELS,
    PHANTOM_FOCUS_RADII,
    PHANTOM_SHADOW_FACTOR,
    PHANTOM_STRIPE_LEVEL,
    PHANTOM_STRIPE_ROWS,
    PHANTOM_VITREOUS_LEVEL,
)
from segmentation_errors import DimensionError, FormatError, ParameterError

logger = logging.getLogger(__name__)

CUBE_LAYOUTS = ("bscan_major_u8",)


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class BScan:
    """One grayscale B-scan, data[row, col] with rows = depth samples"""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.size == 0:
            raise DimensionError(f"B-scan must be a non-empty 2-D array, got shape {data.shape}")
        data = _frozen(data, np.float64)
        if not np.all(np.isfinite(data)):
            raise ParameterError("B-scan intensities must be finite")
        if data.min() < 0 or data.max() > 255:
            raise ParameterError(
                f"B-scan intensities must lie in [0, 255], got [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def quantized(self) -> np.ndarray:
        """Intensities rounded onto the 8-bit grid"""
        return np.clip(np.rint(self.data), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits, bool))

    @classmethod
    def empty(cls, shape: Tuple[int, int]) -> "Mask":
        return cls(np.zeros(shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))


@dataclass(frozen=True)
class Cube:
    bscans: Tuple[BScan, ...]
    voxel_dims_mm: Tuple[float, float, float] = CIRRUS_VOXEL_MM

    def __post_init__(self):
        bscans = tuple(self.bscans)
        if not bscans:
            raise DimensionError("cube needs at least one B-scan")
        shape = bscans[0].shape
        for index, bscan in enumerate(bscans):
            if bscan.shape != shape:
                raise DimensionError(
                    f"B-scan {index} has shape {bscan.shape}, expected {shape}"
                )
        if len(self.voxel_dims_mm) != 3 or min(self.voxel_dims_mm) <= 0:
            raise ParameterError(f"voxel_dims_mm must be three positive sizes, got {self.voxel_dims_mm}")
        object.__setattr__(self, "bscans", bscans)
        object.__setattr__(self, "voxel_dims_mm", tuple(float(v) for v in self.voxel_dims_mm))

    def __len__(self) -> int:
        return len(self.bscans)

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(width, height, n_bscans)"""
        height, width = self.bscans[0].shape
        return width, height, len(self.bscans)


@dataclass(frozen=True)
class Focus:
    center: Tuple[float, float]  # (row, col)
    radii: Tuple[float, float]  # (row radius, col radius)
    intensity: float


@dataclass(frozen=True)
class Floater:
    """Bright vitreous opacity hanging from the retina on a thin strand"""

    center: Tuple[float, float]  # (row, col)
    radius: float = PHANTOM_FLOATER_RADIUS
    intensity: float = PHANTOM_FLOATER_LEVEL
    strand_width: int = 1  # columns, the strand runs down to the band top


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int]  # (width, height)
    band: Tuple[int, int]  # (top row, bottom row), inclusive
    foci: Tuple[Focus, ...] = ()
    speckle_level: float = 0.0
    vessel_shadows: Tuple[Tuple[int, int], ...] = ()  # (first col, last col), inclusive
    seed: int = 0
    floaters: Tuple[Floater, ...] = ()  # never part of the truth mask

    def __post_init__(self):
        object.__setattr__(self, "foci", tuple(self.foci))
        object.__setattr__(self, "floaters", tuple(self.floaters))
        object.__setattr__(self, "vessel_shadows", tuple(tuple(s) for s in self.vessel_shadows))
        width, height = self.dims
        top, bottom = self.band
        if width < 1 or height < 1:
            raise ParameterError(f"phantom dims must be positive, got {self.dims}")
        if not 0 <= top <= bottom < height:
            raise ParameterError(f"band {self.band} must lie within 0..{height - 1}")
        if bottom - top + 1 <= PHANTOM_STRIPE_ROWS:
            raise ParameterError(f"band {self.band} is too thin for the bright stripe")
        if self.speckle_level < 0:
            raise ParameterError(f"speckle_level must be >= 0, got {self.speckle_level}")
        for focus in self.foci:
            row, col = focus.center
            if not (top <= row <= bottom and 0 <= col < width):
                raise ParameterError(f"focus center {focus.center} lies outside the band")
            if not 0 <= focus.intensity <= 255:
                raise ParameterError(f"focus intensity {focus.intensity} outside [0, 255]")
            if min(focus.radii) <= 0:
                raise ParameterError(f"focus radii must be positive, got {focus.radii}")
        for first, last in self.vessel_shadows:
            if not 0 <= first <= last < width:
                raise ParameterError(f"vessel shadow ({first}, {last}) outside 0..{width - 1}")
        for floater in self.floaters:
            row, col = floater.center
            if not (0 <= row < top and 0 <= col and col + floater.strand_width <= width):
                raise ParameterError(f"floater center {floater.center} must lie above the band")
            if floater.radius <= 0 or floater.strand_width < 1:
                raise ParameterError(
                    f"floater radius and strand width must be positive, got {floater.radius}, {floater.strand_width}"
                )


def load_cube(path: str, dims: Tuple[int, int, int] = CIRRUS_DIMS,
              layout: str = "bscan_major_u8",
              voxel_dims_mm: Tuple[float, float, float] = CIRRUS_VOXEL_MM) -> Cube:
    """
    Load a raw cube of unsigned bytes.

    Args:
        path: raw file, B-scan-major, each B-scan row-major (height = depth)
        dims: (width, height, n_bscans)
        layout: byte layout name
        voxel_dims_mm: physical voxel size (x, y, z)

    Returns:
        Cube with intensities equal to the raw bytes
    """
    if layout not in CUBE_LAYOUTS:
        raise ParameterError(f"unknown cube layout {layout!r}, expected one of {CUBE_LAYOUTS}")
    width, height, count = dims
    expected = width * height * count
    actual = os.path.getsize(path)
    if actual != expected:
        raise DimensionError(
            f"{path}: expected {expected} bytes for dims {width}x{height}x{count}, found {actual}"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(count, height, width)
    logger.info("loaded cube %s with %d B-scans of %dx%d", path, count, width, height)
    return Cube(tuple(BScan(raw[i]) for i in range(count)), voxel_dims_mm)


def save_cube(cube: Cube, path: str) -> None:
    stack = np.stack([bscan.quantized() for bscan in cube.bscans])
    stack.tofile(path)


def _decode_gray(path: str) -> np.ndarray:
    try:
        with Image.open(path) as image:
            image.load()
            mode = image.mode
            if mode == "1":
                image = image.convert("L")
                mode = "L"
            if mode != "L":
                raise FormatError(f"{path}: expected 8-bit grayscale, got mode {mode}")
            return np.asarray(image, dtype=np.uint8)
    except (UnidentifiedImageError, SyntaxError) as exc:
        raise OSError(f"cannot decode {path}: {exc}") from exc


def load_bscan(path: str) -> BScan:
    return BScan(_decode_gray(path))


def save_bscan(img: BScan, path: str) -> None:
    Image.fromarray(img.quantized()).save(path)


def load_mask(path: str) -> Mask:
    return Mask(_decode_gray(path) > 127)


def save_mask(mask: Mask, path: str) -> None:
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8)).save(path)


def _check_window(window: int, name: str = "window") -> None:
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"{name} must be odd and >= 1, got {window}")


@njit(cache=True, nogil=True)
def _bilateral_kernel(padded, spatial, height, width, range_scale):
    size = spatial.shape[0]
    half = size // 2
    out = np.empty((height, width), dtype=np.float64)
    for row in range(height):
        for col in range(width):
            center = padded[row + half, col + half]
            numerator = 0.0
            denominator = 0.0
            for i in range(size):
                for j in range(size):
                    value = padded[row + i, col + j]
                    diff = value - center
                    weight = spatial[i, j] * np.exp(-diff * diff * range_scale)
                    numerator += weight * value
                    denominator += weight
            out[row, col] = numerator / denominator
    return out


def bilateral_filter(img: BScan, sigma_s: float = DEFAULT_SIGMA_S, sigma_r: float = DEFAULT_SIGMA_R,
                     window: int = DEFAULT_BILATERAL_WINDOW) -> BScan:
    """
    Edge-preserving bilateral filter with Gaussian spatial and range kernels.

    Args:
        img: input B-scan
        sigma_s: spatial standard deviation (px)
        sigma_r: range standard deviation (gray levels)
        window: odd square window (px), border replicated

    Returns:
        filtered B-scan of the same size
    """
    if sigma_s <= 0 or sigma_r <= 0:
        raise ParameterError(f"sigmas must be > 0, got sigma_s={sigma_s}, sigma_r={sigma_r}")
    _check_window(window)
    data = img.data
    half = window // 2
    dy, dx = np.mgrid[-half:half + 1, -half:half + 1]
    spatial = np.exp(-(dy * dy + dx * dx) / (2.0 * sigma_s * sigma_s))
    padded = np.pad(data, half, mode="edge")
    out = _bilateral_kernel(padded, spatial, data.shape[0], data.shape[1], 1.0 / (2.0 * sigma_r * sigma_r))
    return BScan(np.clip(out, data.min(), data.max()))


def mean_filter(img: BScan, window: int = 3) -> BScan:
    _check_window(window)
    return BScan(np.clip(ndimage.uniform_filter(img.data, size=window, mode="nearest"), 0, 255))


def median_filter(img: BScan, window: int = 3) -> BScan:
    _check_window(window)
    return BScan(ndimage.median_filter(img.data, size=window, mode="nearest"))


def ellipse_mask(shape: Tuple[int, int], focus: Focus) -> np.ndarray:
    rows, cols = np.ogrid[:shape[0], :shape[1]]
    row, col = focus.center
    ry, rx = focus.radii
    return ((rows - row) / ry) ** 2 + ((cols - col) / rx) ** 2 <= 1.0


def synth_phantom(spec: PhantomSpec) -> Tuple[BScan, Mask]:
    """Render a layered retina phantom and its exact foci mask"""
    width, height = spec.dims
    top, bottom = spec.band
    rows = np.arange(height, dtype=np.float64)[:, None]
    image = np.empty((height, width), dtype=np.float64)
    image[:top] = PHANTOM_VITREOUS_LEVEL
    image[bottom + 1:] = PHANTOM_BELOW_LEVEL
    span = max(bottom - top, 1)
    gradient = PHANTOM_BAND_TOP_LEVEL + (PHANTOM_BAND_BOTTOM_LEVEL - PHANTOM_BAND_TOP_LEVEL) * (
        (rows[top:bottom + 1] - top) / span
    )
    image[top:bottom + 1] = np.rint(gradient)
    image[bottom + 1 - PHANTOM_STRIPE_ROWS:bottom + 1] = PHANTOM_STRIPE_LEVEL

    for first, last in spec.vessel_shadows:
        image[top:bottom + 1, first:last + 1] *= PHANTOM_SHADOW_FACTOR

    for floater in spec.floaters:
        row, col = int(round(floater.center[0])), int(floater.center[1])
        image[row:top, col:col + floater.strand_width] = PHANTOM_BAND_TOP_LEVEL
        blob = Focus(floater.center, (floater.radius, floater.radius), floater.intensity)
        image[ellipse_mask((height, width), blob) & (rows < top)] = floater.intensity

    truth = np.zeros((height, width), dtype=bool)
    band_rows = np.zeros((height, 1), dtype=bool)
    band_rows[top:bottom + 1] = True
    for focus in spec.foci:
        pixels = ellipse_mask((height, width), focus) & band_rows
        image[pixels] = focus.intensity
        truth |= pixels

    if spec.speckle_level > 0:
        rng = np.random.default_rng(spec.seed)
        looks = 1.0 / (spec.speckle_level ** 2)
        image = image * rng.gamma(shape=looks, scale=1.0 / looks, size=image.shape)
    return BScan(np.clip(image, 0, 255)), Mask(truth)


def random_phantom_spec(seed: int, dims: Tuple[int, int] = CIRRUS_DIMS[:2],
                        band: Optional[Tuple[int, int]] = None, n_foci: Optional[int] = None,
                        speckle_level: float = 0.1, n_shadows: int = 2, n_floaters: int = 0) -> PhantomSpec:
    """
    Draw a phantom layout with well separated foci.

    Foci stay clear of the bright stripe, of each other and of the vessel
    shadows so that each one is a separate component of the truth mask.
    Floaters go into the vitreous with strands alternating between one and
    two columns; they are drawn last so the foci do not depend on them.
    """
    rng = np.random.default_rng(seed)
    width, height = dims
    if band is None:
        top = int(height * 0.3)
        band = (top, top + int(height * 0.45))
    top, bottom = band
    if n_foci is None:
        n_foci = int(rng.integers(6, 13))

    shadows: List[Tuple[int, int]] = []
    margin = 40
    for _ in range(n_shadows):
        for _attempt in range(50):
            first = int(rng.integers(margin, max(margin + 1, width - margin - 12)))
            last = first + int(rng.integers(4, 12))
            if last >= width - margin:
                continue
            if all(first > s_last + margin or last < s_first - margin for s_first, s_last in shadows):
                shadows.append((first, last))
                break

    low_row = top + 6
    high_row = bottom - PHANTOM_STRIPE_ROWS - 10
    foci: List[Focus] = []
    spacing = 6 * PHANTOM_FOCUS_RADII[1]
    for _ in range(n_foci):
        for _attempt in range(200):
            row = float(rng.uniform(low_row, high_row))
            col = float(rng.uniform(8, width - 8))
            if any(s_first - 8 <= col <= s_last + 8 for s_first, s_last in shadows):
                continue
            if all(np.hypot(row - f.center[0], col - f.center[1]) >= spacing for f in foci):
                radii = (float(rng.uniform(*PHANTOM_FOCUS_RADII)), float(rng.uniform(*PHANTOM_FOCUS_RADII)))
                level = float(rng.uniform(*PHANTOM_FOCUS_LEVELS))
                foci.append(Focus((row, col), radii, level))
                break
        else:
            logger.warning("phantom seed %d: no room for focus %d", seed, len(foci) + 1)

    floaters: List[Floater] = []
    floater_low = 2 * PHANTOM_FLOATER_RADIUS
    floater_high = top - PHANTOM_FLOATER_CLEARANCE
    for index in range(n_floaters if floater_high > floater_low else 0):
        for _attempt in range(200):
            row = float(rng.uniform(floater_low, floater_high))
            col = float(rng.uniform(margin, width - margin))
            if any(s_first - 8 <= col <= s_last + 8 for s_first, s_last in shadows):
                continue
            if all(abs(col - f.center[1]) >= 4 * PHANTOM_FLOATER_RADIUS for f in floaters):
                floaters.append(Floater((row, col), strand_width=1 + index % 2))
                break
        else:
            logger.warning("phantom seed %d: no room for floater %d", seed, len(floaters) + 1)
    if n_floaters and floater_high <= floater_low:
        logger.warning("phantom seed %d: vitreous too thin for floaters", seed)
    return PhantomSpec(dims=(width, height), band=band, foci=tuple(foci), speckle_level=speckle_level,
                       vessel_shadows=tuple(sorted(shadows)), seed=seed, floaters=tuple(floaters))


def synth_cube(specs: Sequence[PhantomSpec],
               voxel_dims_mm: Tuple[float, float, float] = CIRRUS_VOXEL_MM) -> Tuple[Cube, List[Mask]]:
    pairs = [synth_phantom(spec) for spec in specs]
    return Cube(tuple(p[0] for p in pairs), voxel_dims_mm), [p[1] for p in pairs]
