#!/usr/bin/env python3
"""
Flat grayscale morphology and geodesic reconstruction

Erosion and dilation use a disk structuring element with a replicated
border. Reconstruction steps always use the 4-connected unit cross.
"""

from dataclasses import dataclass
from typing import FrozenSet, Tuple

import numpy as np
from scipy import ndimage
from skimage.morphology import reconstruction

from ImageCore import BScan
from segmentation_errors import ParameterError, PreconditionError

UNIT_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class StructuringElement:
    offsets: FrozenSet[Tuple[int, int]]
    radius: int

    @property
    def footprint(self) -> np.ndarray:
        size = 2 * self.radius + 1
        out = np.zeros((size, size), dtype=bool)
        for dy, dx in self.offsets:
            out[dy + self.radius, dx + self.radius] = True
        return out


def disk(radius: int) -> StructuringElement:
    if radius < 0:
        raise ParameterError(f"disk radius must be >= 0, got {radius}")
    offsets = frozenset(
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    )
    return StructuringElement(offsets, radius)


def dilate(img: BScan, se: StructuringElement) -> BScan:
    return BScan(ndimage.grey_dilation(img.data, footprint=se.footprint, mode="nearest"))


def erode(img: BScan, se: StructuringElement) -> BScan:
    return BScan(ndimage.grey_erosion(img.data, footprint=se.footprint, mode="nearest"))


def _first_violation(bad: np.ndarray) -> Tuple[int, int]:
    row, col = np.unravel_index(int(np.argmax(bad)), bad.shape)
    return int(row), int(col)


def reconstruct_dilation(marker: BScan, mask: BScan) -> BScan:
    """Grow marker under mask until stable (geodesic reconstruction by dilation)"""
    if marker.shape != mask.shape:
        raise PreconditionError(f"marker shape {marker.shape} differs from mask shape {mask.shape}")
    bad = marker.data > mask.data
    if bad.any():
        row, col = _first_violation(bad)
        raise PreconditionError(
            f"marker exceeds mask at pixel (row={row}, col={col}): "
            f"{marker.data[row, col]} > {mask.data[row, col]}"
        )
    return BScan(reconstruction(marker.data, mask.data, method="dilation", footprint=UNIT_CROSS))


def reconstruct_erosion(marker: BScan, mask: BScan) -> BScan:
    """Shrink marker above mask until stable (geodesic reconstruction by erosion)"""
    if marker.shape != mask.shape:
        raise PreconditionError(f"marker shape {marker.shape} differs from mask shape {mask.shape}")
    bad = marker.data < mask.data
    if bad.any():
        row, col = _first_violation(bad)
        raise PreconditionError(
            f"marker is below mask at pixel (row={row}, col={col}): "
            f"{marker.data[row, col]} < {mask.data[row, col]}"
        )
    return BScan(reconstruction(marker.data, mask.data, method="erosion", footprint=UNIT_CROSS))


def closing_reconstruction(img: BScan, r: int) -> BScan:
    """
    Opening then closing by reconstruction with a disk of radius r.

    Args:
        img: input B-scan
        r: disk radius (px), 0 returns img unchanged

    Returns:
        smoothed B-scan whose contours follow the input
    """
    if r < 0:
        raise ParameterError(f"radius must be >= 0, got {r}")
    if r == 0:
        return img
    se = disk(r)
    opened = reconstruct_dilation(erode(img, se), img)
    return reconstruct_erosion(dilate(opened, se), opened)
