#!/usr/bin/env python3
"""
End-to-end HF segmentation of B-scans and cubes

Each B-scan is denoised, then an ROI band (fuzzy clustering) and an HF
estimate (stable extremal regions) are computed, combined with a logical AND
and cleaned by component size. Cubes are processed slice by slice on a
thread pool; a failing slice is recorded and skipped.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ImageCore import BScan, Cube, Mask, bilateral_filter
from MSER import build_component_tree, dedup_regions, extract_mser, regions_to_mask, stability
from RoiGeneration import FcmParams, RoiPolicy, generate_roi
from segmentation_config import CIRRUS_VOXEL_MM, NEAR_CUTOFF_FRACTION, PipelineConfig
from segmentation_errors import DegenerateDataError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class FocusRegion:
    bscan_index: int
    area: int
    centroid: Tuple[float, float]  # (row, col)
    bbox: Tuple[int, int, int, int]  # (top, left, bottom, right), inclusive
    mean_intensity: float

    def to_dict(self) -> dict:
        return {
            "area": self.area,
            "centroid": [round(self.centroid[0], 4), round(self.centroid[1], 4)],
            "bbox": list(self.bbox),
            "mean_intensity": round(self.mean_intensity, 4),
        }


@dataclass
class BScanSegmentation:
    mask: Mask
    foci: List[FocusRegion]
    roi: Mask
    hf_estimate: Mask
    warnings: List[str] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class SliceSummary:
    index: int
    foci: List[FocusRegion]
    voxel_count: int
    failure: Optional[str] = None
    seconds: float = 0.0


@dataclass
class HFReport:
    slices: List[SliceSummary]
    voxel_count: int
    volume_mm3: float
    voxel_dims_mm: Tuple[float, float, float]
    config: Dict
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "voxel_dims_mm": list(self.voxel_dims_mm),
            "total_voxels": self.voxel_count,
            "total_volume_mm3": self.volume_mm3,
            "n_foci": sum(len(s.foci) for s in self.slices),
            "bscans": [
                {
                    "index": s.index,
                    "voxel_count": s.voxel_count,
                    "failure": s.failure,
                    "foci": [f.to_dict() for f in s.foci],
                }
                for s in self.slices
            ],
            "warnings": list(self.warnings),
        }

    def timing(self) -> dict:
        seconds = [s.seconds for s in self.slices]
        return {
            "per_bscan_seconds": [round(s, 4) for s in seconds],
            "mean_seconds": round(float(np.mean(seconds)), 4) if seconds else 0.0,
            "total_seconds": round(float(np.sum(seconds)), 4),
        }


def merge_masks(roi: Mask, hfs: Mask) -> Mask:
    if roi.shape != hfs.shape:
        raise DimensionError(f"cannot merge masks of shapes {roi.shape} and {hfs.shape}")
    return Mask(roi.bits & hfs.bits)


def _label(mask: Mask) -> Tuple[np.ndarray, np.ndarray]:
    labels, count = ndimage.label(mask.bits, structure=FOUR_CONNECTED)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    return labels, sizes


def size_filter(mask: Mask, min_area: int, max_area: Optional[int] = None) -> Mask:
    """Drop 4-connected components outside [min_area, max_area]"""
    if max_area is not None and max_area < min_area:
        raise ParameterError(f"max_area {max_area} is below min_area {min_area}")
    labels, sizes = _label(mask)
    upper = np.inf if max_area is None else max_area
    keep = (sizes >= min_area) & (sizes <= upper)
    keep[0] = False
    return Mask(keep[labels])


def near_cutoff_components(mask: Mask, max_area: Optional[int],
                           fraction: float = NEAR_CUTOFF_FRACTION) -> List[int]:
    if max_area is None:
        return []
    _, sizes = _label(mask)
    sizes = sizes[1:]
    close = np.abs(sizes - max_area) <= fraction * max_area
    return sorted(int(s) for s in sizes[close])


def label_foci(mask: Mask, img: BScan, bscan_index: int = 0) -> List[FocusRegion]:
    labels, count = ndimage.label(mask.bits, structure=FOUR_CONNECTED)
    foci = []
    for label, box in enumerate(ndimage.find_objects(labels), start=1):
        if box is None:
            continue
        rows, cols = np.nonzero(labels[box] == label)
        rows = rows + box[0].start
        cols = cols + box[1].start
        foci.append(FocusRegion(
            bscan_index=bscan_index,
            area=int(rows.size),
            centroid=(float(rows.mean()), float(cols.mean())),
            bbox=(int(box[0].start), int(box[1].start), int(box[0].stop - 1), int(box[1].stop - 1)),
            mean_intensity=float(img.data[rows, cols].mean()),
        ))
    return foci


def denoise(img: BScan, cfg: PipelineConfig) -> BScan:
    """Bilateral filter (if enabled), rounded onto the 8-bit grid"""
    if not cfg.denoise:
        return BScan(img.quantized())
    return BScan(bilateral_filter(img, cfg.sigma_s, cfg.sigma_r, cfg.bilateral_window).quantized())


def roi_branch(img: BScan, cfg: PipelineConfig) -> Tuple[Mask, List[str]]:
    params = FcmParams(c=cfg.clusters, m=cfg.fuzzifier, tol=cfg.tol, max_iters=cfg.max_iters, seed=cfg.seed)
    policy = RoiPolicy(exclude_darkest=cfg.roi_exclude_darkest, keep=cfg.roi_keep,
                       min_component=cfg.roi_min_component, rule=cfg.roi_rule,
                       threshold=cfg.roi_threshold, cut_bright_layer=cfg.roi_cut_bright_layer,
                       layer_margin=cfg.roi_layer_margin)
    try:
        result = generate_roi(img, params, cfg.window, cfg.se_radius, cfg.filter_chain,
                              cfg.normalize_mode, policy, cfg.b_const)
    except DegenerateDataError as exc:
        message = f"ROI skipped: {exc}"
        logger.warning(message)
        return Mask.empty(img.shape), [message]
    return result.mask, list(result.warnings)


def hf_branch(img: BScan, cfg: PipelineConfig) -> Mask:
    tree = build_component_tree(img)
    psi = stability(tree, cfg.gray_delta)
    regions = extract_mser(tree, cfg.gray_delta, cfg.gray_g_min, cfg.max_variation,
                           min_area=1, max_area=cfg.max_area, psi=psi)
    regions = dedup_regions(regions, tree, cfg.similarity_tol, cfg.gray_delta, cfg.max_variation)
    return regions_to_mask(regions, img.shape)


def segment_bscan(img: BScan, cfg: Optional[PipelineConfig] = None, bscan_index: int = 0) -> BScanSegmentation:
    """
    Segment the HFs of one B-scan.

    The ROI and HF branches only share the denoised image, but they run one
    after the other on the calling thread. Parallelism is per B-scan, in
    segment_cube.

    Args:
        img: raw B-scan
        cfg: pipeline parameters
        bscan_index: position inside its cube, copied into each FocusRegion

    Returns:
        BScanSegmentation with the final mask, foci, both branch masks and warnings
    """
    cfg = cfg or PipelineConfig()
    start = time.perf_counter()
    denoised = denoise(img, cfg)
    roi, warnings = roi_branch(denoised, cfg)
    hf_estimate = hf_branch(denoised, cfg)
    merged = merge_masks(roi, hf_estimate)
    near = near_cutoff_components(merged, cfg.max_area)
    if near:
        message = f"B-scan {bscan_index}: components near max_area={cfg.max_area}: {near}"
        logger.warning(message)
        warnings.append(message)
    final = size_filter(merged, cfg.min_area, cfg.max_area)
    foci = label_foci(final, img, bscan_index)
    seconds = time.perf_counter() - start
    logger.info("B-scan %d: %d foci, %d px in %.2fs", bscan_index, len(foci), final.area, seconds)
    return BScanSegmentation(final, foci, roi, hf_estimate, warnings, seconds)


def quantify(voxel_count: int, voxel_dims_mm: Tuple[float, float, float] = CIRRUS_VOXEL_MM) -> float:
    if voxel_count < 0:
        raise ParameterError(f"voxel count must be >= 0, got {voxel_count}")
    x, y, z = voxel_dims_mm
    return voxel_count * (x * y * z)


def _segment_slice(args) -> Tuple[int, Optional[BScanSegmentation], Optional[str]]:
    index, bscan, cfg = args
    try:
        return index, segment_bscan(bscan, cfg, index), None
    except Exception as exc:
        logger.error("B-scan %d failed: %s", index, exc)
        return index, None, f"{type(exc).__name__}: {exc}"


def segment_cube(cube: Cube, cfg: Optional[PipelineConfig] = None, jobs: Optional[int] = None,
                 masks_out: Optional[List[Optional[Mask]]] = None,
                 indices: Optional[Sequence[int]] = None) -> HFReport:
    """
    Segment every B-scan of a cube and aggregate the HF volume.

    Args:
        cube: input volume
        cfg: pipeline parameters
        jobs: worker threads (defaults to cfg.jobs)
        masks_out: if given, receives the final mask of each slice (None for failures)
        indices: processing order of the slices, results are reported in cube order

    Returns:
        HFReport
    """
    cfg = cfg or PipelineConfig()
    jobs = jobs or cfg.jobs
    order = list(indices) if indices is not None else list(range(len(cube)))
    tasks = [(i, cube.bscans[i], cfg) for i in order]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_segment_slice, tasks))
    else:
        outcomes = [_segment_slice(task) for task in tasks]
    outcomes.sort(key=lambda outcome: outcome[0])

    slices = []
    warnings = []
    if masks_out is not None:
        masks_out.clear()
    for index, result, failure in outcomes:
        if result is None:
            slices.append(SliceSummary(index, [], 0, failure))
            warnings.append(f"B-scan {index} failed: {failure}")
            if masks_out is not None:
                masks_out.append(None)
            continue
        slices.append(SliceSummary(index, result.foci, result.mask.area, None, result.seconds))
        warnings.extend(result.warnings)
        if masks_out is not None:
            masks_out.append(result.mask)
    voxel_count = sum(s.voxel_count for s in slices)
    volume = quantify(voxel_count, cube.voxel_dims_mm)
    logger.info("cube: %d voxels, %.6f mm^3 over %d B-scans", voxel_count, volume, len(slices))
    return HFReport(slices, voxel_count, volume, cube.voxel_dims_mm, cfg.to_dict(), warnings)
