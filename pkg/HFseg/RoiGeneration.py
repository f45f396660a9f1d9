#!/usr/bin/env python3
"""
ROI generation with fuzzy c-means on the gray-level histogram

Steps:
1. Smooth texture with closing-by-reconstruction
2. Build the gray-level histogram of the smoothed image
3. Iterate count-weighted FCM over the histogram levels until the largest
   membership change drops below T
4. Copy each level's memberships back to its pixels
5. Filter the membership planes (median, distance-weighted, or both)
6. Normalize and binarize into a solid retina band that ends above the
   brightest wide layer
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from ImageCore import BScan, Mask
from Morphology import closing_reconstruction
from segmentation_config import (
    DEFAULT_B_CONST,
    DEFAULT_CLUSTERS,
    DEFAULT_FILTER_CHAIN,
    DEFAULT_FUZZIFIER,
    DEFAULT_MAX_ITERS,
    DEFAULT_NORMALIZE_MODE,
    DEFAULT_ROI_CUT_BRIGHT_LAYER,
    DEFAULT_ROI_EXCLUDE_DARKEST,
    DEFAULT_ROI_KEEP,
    DEFAULT_ROI_LAYER_MARGIN,
    DEFAULT_ROI_LAYER_MIN_SPAN,
    DEFAULT_ROI_MIN_COMPONENT,
    DEFAULT_ROI_RULE,
    DEFAULT_ROI_THRESHOLD,
    DEFAULT_SE_RADIUS,
    DEFAULT_SEED,
    DEFAULT_TOL,
    DEFAULT_WINDOW,
    FILTER_CHAINS,
    NORMALIZE_ALIASES,
    NORMALIZE_MODES,
    ROI_KEEP_MODES,
    ROI_RULES,
)
from segmentation_errors import ConsistencyError, DegenerateDataError, ParameterError

logger = logging.getLogger(__name__)

EPS = 2.0 ** -52
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class Histogram:
    levels: np.ndarray  # ascending distinct gray values
    counts: np.ndarray

    @property
    def q(self) -> int:
        return len(self.levels)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class FcmParams:
    c: int = DEFAULT_CLUSTERS
    m: float = DEFAULT_FUZZIFIER
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.c < 1:
            raise ParameterError(f"cluster count must be >= 1, got {self.c}")
        if self.m <= 1:
            raise ParameterError(f"fuzzifier must be > 1, got {self.m}")
        if self.tol <= 0:
            raise ParameterError(f"tolerance must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class FcmResult:
    u: np.ndarray  # c x q, rows ordered by ascending centroid
    centroids: np.ndarray
    iterations: int
    converged: bool
    objective: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class RoiPolicy:
    exclude_darkest: int = DEFAULT_ROI_EXCLUDE_DARKEST
    keep: str = DEFAULT_ROI_KEEP
    min_component: int = DEFAULT_ROI_MIN_COMPONENT
    fill_columns: bool = True
    rule: str = DEFAULT_ROI_RULE
    threshold: float = DEFAULT_ROI_THRESHOLD
    cut_bright_layer: bool = DEFAULT_ROI_CUT_BRIGHT_LAYER
    layer_margin: int = DEFAULT_ROI_LAYER_MARGIN
    layer_min_span: float = DEFAULT_ROI_LAYER_MIN_SPAN

    def __post_init__(self):
        if self.keep not in ROI_KEEP_MODES:
            raise ParameterError(f"keep must be one of {ROI_KEEP_MODES}, got {self.keep!r}")
        if self.exclude_darkest < 0:
            raise ParameterError(f"exclude_darkest must be >= 0, got {self.exclude_darkest}")
        if self.rule not in ROI_RULES:
            raise ParameterError(f"rule must be one of {ROI_RULES}, got {self.rule!r}")
        if self.threshold < 0:
            raise ParameterError(f"threshold must be >= 0, got {self.threshold}")
        if self.layer_margin < 0:
            raise ParameterError(f"layer_margin must be >= 0, got {self.layer_margin}")
        if not 0 < self.layer_min_span <= 1:
            raise ParameterError(f"layer_min_span must be in (0, 1], got {self.layer_min_span}")


@dataclass(frozen=True)
class RoiResult:
    mask: Mask
    warnings: Tuple[str, ...] = ()


def gray_histogram(img: BScan) -> Histogram:
    levels, counts = np.unique(img.data, return_counts=True)
    return Histogram(levels=levels, counts=counts)


def init_membership(c: int, q: int, seed: int) -> np.ndarray:
    """Seeded random column-stochastic c x q matrix"""
    rng = np.random.default_rng(seed)
    u = rng.random((c, q)) + EPS
    return u / u.sum(axis=0, keepdims=True)


def fcm_centroids(u: np.ndarray, levels: np.ndarray, counts: np.ndarray, m: float) -> np.ndarray:
    weights = counts * u ** m
    denominator = weights.sum(axis=1)
    if np.any(denominator <= 0):
        raise DegenerateDataError("a cluster lost all membership, its centroid is undefined")
    return (weights @ levels) / denominator


def fcm_memberships(levels: np.ndarray, centroids: np.ndarray, m: float) -> np.ndarray:
    """
    Memberships of each level given the centroids.

    A level that coincides with a centroid belongs fully to the first such
    centroid.
    """
    dist2 = (levels[None, :] - centroids[:, None]) ** 2
    nearest = dist2.min(axis=0)
    exact = nearest == 0
    u = np.empty_like(dist2)
    if np.any(~exact):
        ratio = dist2[:, ~exact] / nearest[~exact]
        inv = ratio ** (-1.0 / (m - 1.0))
        u[:, ~exact] = inv / inv.sum(axis=0, keepdims=True)
    if np.any(exact):
        first = np.argmax(dist2[:, exact] == 0, axis=0)
        block = np.zeros((len(centroids), int(exact.sum())))
        block[first, np.arange(block.shape[1])] = 1.0
        u[:, exact] = block
    return u


def fcm_objective(u: np.ndarray, levels: np.ndarray, counts: np.ndarray, centroids: np.ndarray,
                  m: float) -> float:
    dist2 = (levels[None, :] - centroids[:, None]) ** 2
    return float(np.sum(counts * u ** m * dist2))


def fcm_histogram(hist: Histogram, p: FcmParams) -> FcmResult:
    """
    Count-weighted fuzzy c-means over histogram levels.

    Args:
        hist: gray-level histogram
        p: clustering parameters

    Returns:
        FcmResult with rows sorted by ascending centroid
    """
    if hist.q < p.c:
        raise DegenerateDataError(f"{hist.q} gray levels cannot support {p.c} clusters")
    levels = hist.levels.astype(np.float64)
    counts = hist.counts.astype(np.float64)
    u = init_membership(p.c, hist.q, p.seed)
    objective = []
    converged = False
    iterations = 0
    for iterations in range(1, p.max_iters + 1):
        centroids = fcm_centroids(u, levels, counts, p.m)
        u_next = fcm_memberships(levels, centroids, p.m)
        objective.append(fcm_objective(u_next, levels, counts, centroids, p.m))
        change = float(np.max(np.abs(u_next - u)))
        u = u_next
        if change < p.tol:
            converged = True
            break
    if not converged:
        logger.warning("FCM stopped after %d iterations without converging", iterations)
    order = np.argsort(centroids, kind="stable")
    logger.debug("FCM converged=%s after %d iterations, centroids %s", converged, iterations,
                 centroids[order])
    return FcmResult(u=u[order], centroids=centroids[order], iterations=iterations,
                     converged=converged, objective=objective)


def map_to_pixels(uq: np.ndarray, hist: Histogram, img: BScan) -> np.ndarray:
    """Per-pixel membership field of shape (c, height, width)"""
    index = np.searchsorted(hist.levels, img.data)
    index = np.clip(index, 0, hist.q - 1)
    missing = hist.levels[index] != img.data
    if missing.any():
        row, col = np.unravel_index(int(np.argmax(missing)), missing.shape)
        raise ConsistencyError(
            f"gray value {img.data[row, col]} at (row={row}, col={col}) is not a histogram level"
        )
    return uq[:, index]


def _check_window(window: int) -> None:
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"filter window must be odd and >= 1, got {window}")


def _renormalize(field_: np.ndarray) -> np.ndarray:
    return field_ / (field_.sum(axis=0, keepdims=True) + EPS)


def spatial_membership_filter(field_: np.ndarray, window: int) -> np.ndarray:
    """Add neighbour memberships weighted by 1/(distance + 1), then renormalize"""
    _check_window(window)
    half = window // 2
    dy, dx = np.mgrid[-half:half + 1, -half:half + 1]
    kernel = 1.0 / (np.hypot(dy, dx) + 1.0)
    out = np.stack([ndimage.correlate(plane, kernel, mode="nearest") for plane in field_])
    return _renormalize(out)


def median_membership_filter(field_: np.ndarray, window: int) -> np.ndarray:
    _check_window(window)
    return np.stack([ndimage.median_filter(plane, size=window, mode="nearest") for plane in field_])


def normalize_roi(field_: np.ndarray, mode: str = DEFAULT_NORMALIZE_MODE,
                  b_const: float = DEFAULT_B_CONST) -> np.ndarray:
    """
    Rescale the memberships of every pixel.

    cluster_scaled divides by c * (sum + b_const), probabilistic by
    (sum + b_const) and none leaves the field as it is. A large b_const
    shrinks every score towards zero.
    """
    mode = NORMALIZE_ALIASES.get(mode, mode)
    if mode not in NORMALIZE_MODES:
        raise ParameterError(
            f"normalize mode must be one of {NORMALIZE_MODES} or {sorted(NORMALIZE_ALIASES)}, got {mode!r}"
        )
    if b_const < 0:
        raise ParameterError(f"b_const must be >= 0, got {b_const}")
    if mode == "none":
        return field_
    total = field_.sum(axis=0, keepdims=True) + b_const
    if mode == "cluster_scaled":
        total = field_.shape[0] * total
    out = np.zeros_like(field_, dtype=np.float64)
    np.divide(field_, total, out=out, where=total > 0)
    return out


def _keep_components(candidate: np.ndarray, policy: RoiPolicy) -> np.ndarray:
    labels, count = ndimage.label(candidate, structure=FOUR_CONNECTED)
    if count == 0:
        return candidate
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    if policy.keep == "largest":
        return labels == int(np.argmax(sizes))
    keep = sizes >= policy.min_component
    keep[0] = False
    return keep[labels]


def fill_columns(band: np.ndarray) -> np.ndarray:
    height = band.shape[0]
    present = band.any(axis=0)
    top = np.argmax(band, axis=0)
    bottom = height - 1 - np.argmax(band[::-1], axis=0)
    rows = np.arange(height)[:, None]
    return (rows >= top) & (rows <= bottom) & present


def bright_layer_top(labels: np.ndarray, c: int, min_span: float = DEFAULT_ROI_LAYER_MIN_SPAN) -> Optional[np.ndarray]:
    """
    First row of the lowest wide layer of the brightest cluster, per column.

    Components of the brightest cluster that span fewer than min_span * width
    columns (foci, speckle) are ignored. The layer is the deepest wide
    component plus every other wide component whose columns do not overlap
    it, so pieces split by shadows stay one layer while a brighter layer
    above is left out. Columns the layer does not reach are interpolated.
    None when no component is wide enough.
    """
    bright, count = ndimage.label(labels == c - 1, structure=FOUR_CONNECTED)
    width = labels.shape[1]
    boxes = ndimage.find_objects(bright)
    wide = [k for k in range(1, count + 1)
            if boxes[k - 1] is not None and boxes[k - 1][1].stop - boxes[k - 1][1].start >= min_span * width]
    if not wide:
        return None
    row_index = np.broadcast_to(np.arange(labels.shape[0])[:, None], labels.shape)
    depth = ndimage.mean(row_index, bright, wide)
    taken = np.zeros(width, dtype=bool)
    top = np.full(width, -1, dtype=np.int64)
    for k in (wide[i] for i in np.argsort(-np.asarray(depth), kind="stable")):
        span = boxes[k - 1][1]
        if taken[span].any():
            continue
        taken[span] = True
        component = bright[:, span] == k
        present = component.any(axis=0)
        top[span] = np.where(present, np.argmax(component, axis=0), -1)
    found = top >= 0
    columns = np.arange(width)
    return np.rint(np.interp(columns, columns[found], top[found])).astype(np.int64)


def _candidates(field_: np.ndarray, policy: RoiPolicy) -> np.ndarray:
    if policy.rule == "threshold":
        return field_[policy.exclude_darkest:].sum(axis=0) >= policy.threshold
    return np.argmax(field_, axis=0) >= policy.exclude_darkest


def _cut_above_layer(candidate: np.ndarray, field_: np.ndarray, policy: RoiPolicy) -> np.ndarray:
    c = field_.shape[0]
    if not policy.cut_bright_layer or policy.exclude_darkest >= c - 1:
        return candidate
    top = bright_layer_top(np.argmax(field_, axis=0), c, policy.layer_min_span)
    if top is None:
        return candidate
    rows = np.arange(candidate.shape[0])[:, None]
    cut = candidate & (rows < top[None, :] - policy.layer_margin)
    if not cut.any():
        return candidate
    logger.debug("ROI cut above the bright layer, rows %d..%d", int(top.min()), int(top.max()))
    return cut


def binarize_roi(field_: np.ndarray, centroids: np.ndarray, policy: Optional[RoiPolicy] = None) -> RoiResult:
    """
    Turn memberships into a solid band mask.

    Args:
        field_: (c, height, width) memberships, rows aligned with centroids
        centroids: ascending cluster centroids
        policy: which clusters count as retina and how components are kept

    Returns:
        RoiResult with the mask and any warnings
    """
    policy = policy or RoiPolicy()
    if len(centroids) != field_.shape[0]:
        raise ConsistencyError(f"{len(centroids)} centroids for {field_.shape[0]} membership planes")
    if np.any(np.diff(centroids) < 0):
        raise ConsistencyError("centroids must be ascending")
    candidate = _candidates(field_, policy)
    if not candidate.any():
        if policy.rule == "threshold":
            message = f"ROI is empty: no pixel reaches the retina score {policy.threshold}"
        else:
            message = "ROI is empty: every pixel belongs to the background cluster"
        logger.warning(message)
        return RoiResult(Mask(candidate), (message,))
    band = _keep_components(candidate, policy)
    # cut after component selection: the layer may be what joins the band across shadows
    band = _cut_above_layer(band, field_, policy)
    if policy.fill_columns:
        band = fill_columns(band)
    return RoiResult(Mask(band))


def generate_roi(img: BScan, p: Optional[FcmParams] = None, w: int = DEFAULT_WINDOW,
                 se_radius: int = DEFAULT_SE_RADIUS, filter_chain: str = DEFAULT_FILTER_CHAIN,
                 normalize_mode: str = DEFAULT_NORMALIZE_MODE,
                 policy: Optional[RoiPolicy] = None, b_const: float = DEFAULT_B_CONST) -> RoiResult:
    """Full ROI branch from a (denoised) B-scan to a band mask"""
    p = p or FcmParams()
    if filter_chain not in FILTER_CHAINS:
        raise ParameterError(f"filter chain must be one of {FILTER_CHAINS}, got {filter_chain!r}")
    smoothed = closing_reconstruction(img, se_radius)
    hist = gray_histogram(smoothed)
    fcm = fcm_histogram(hist, p)
    memberships = map_to_pixels(fcm.u, hist, smoothed)
    if filter_chain in ("spatial", "spatial_then_median"):
        memberships = spatial_membership_filter(memberships, w)
    if filter_chain in ("median", "spatial_then_median"):
        memberships = median_membership_filter(memberships, w)
    memberships = normalize_roi(memberships, normalize_mode, b_const)
    result = binarize_roi(memberships, fcm.centroids, policy)
    if not fcm.converged:
        message = f"FCM did not converge within {p.max_iters} iterations"
        return RoiResult(result.mask, result.warnings + (message,))
    return RoiResult(result.mask, result.warnings)
