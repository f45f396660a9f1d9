#!/usr/bin/env python3
"""
Artifact writers: JSON reports, CSV tables, overlay images and SVG curves
"""

import csv
import json
import logging
import os
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402
from scipy import ndimage  # noqa: E402

from EvaluationMetrics import BlandAltman, PairedSeries, bland_altman  # noqa: E402
from ImageCore import BScan, Mask  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "hfseg"
SVG_METADATA = {"Date": None, "Creator": None}
OUTLINE_RGB = (255, 0, 0)


def ensure_dir(path: str) -> None:
    if path:
        os.makedirs(path, exist_ok=True)


def write_json(data: dict, path: str) -> None:
    ensure_dir(os.path.dirname(path))
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=4)
        handle.write("\n")
    logger.info("wrote %s", path)


def write_csv(header: Sequence[str], rows: Iterable[Sequence], path: str) -> None:
    ensure_dir(os.path.dirname(path))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info("wrote %s", path)


def save_overlay(img: BScan, mask: Mask, path: str) -> None:
    """Input image in gray with the mask outline drawn in red"""
    gray = img.quantized()
    rgb = np.stack([gray, gray, gray], axis=-1)
    outline = mask.bits & ~ndimage.binary_erosion(mask.bits)
    rgb[outline] = OUTLINE_RGB
    ensure_dir(os.path.dirname(path))
    Image.fromarray(rgb).save(path)


def _save_svg(fig, path: str) -> None:
    ensure_dir(os.path.dirname(path))
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info("wrote %s", path)


def plot_sweep(axis: str, values: Sequence[float], dscs: Sequence[float], path: str) -> None:
    fig = plt.figure(figsize=(6, 4))
    plt.plot(values, dscs, marker="o", label="mean DSC")
    plt.title(f"Effect of {axis} on HF segmentation")
    plt.xlabel(axis)
    plt.ylabel("DSC (%)")
    plt.legend()
    plt.grid(True)
    _save_svg(fig, path)


def plot_agreement(series: PairedSeries, path_prefix: str) -> BlandAltman:
    """Correlation scatter and Bland-Altman plot of paired volumes"""
    agreement = bland_altman(series)
    fig = plt.figure(figsize=(5, 5))
    plt.scatter(series.g, series.a, s=12)
    lo = float(min(series.g.min(), series.a.min()))
    hi = float(max(series.g.max(), series.a.max()))
    plt.plot([lo, hi], [lo, hi], linestyle="--", color="gray")
    plt.xlabel("ground truth volume")
    plt.ylabel("automatic volume")
    plt.grid(True)
    _save_svg(fig, f"{path_prefix}_correlation.svg")

    fig = plt.figure(figsize=(6, 4))
    plt.scatter((series.g + series.a) / 2, series.differences, s=12)
    for y, style in ((agreement.bias, "-"), (agreement.lower, "--"), (agreement.upper, "--")):
        plt.axhline(y, linestyle=style, color="gray")
    plt.xlabel("mean of automatic and ground truth")
    plt.ylabel("automatic - ground truth")
    plt.grid(True)
    _save_svg(fig, f"{path_prefix}_bland_altman.svg")
    return agreement
