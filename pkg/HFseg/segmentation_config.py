#!/usr/bin/env python3
"""
Configuration file for the HF segmentation pipeline

Defaults follow the ROI-generation parameters (c = 4, m = 2, w = 5, T = 0.002)
and the extremal-region parameters (delta = 0.21, g = 2.10, in normalized units).
To run a different scenario you can:
1. Edit the constants below
2. Pass a key=value config file to the CLI with --config
3. Override single values with CLI flags (flags win over the config file)

Available filter chains:
- median: median membership filter only
- spatial_then_median: distance-weighted neighbour filter, then median
- spatial: distance-weighted neighbour filter only
"""

import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

from segmentation_errors import ParameterError

logger = logging.getLogger(__name__)

# Bilateral preprocessing
DEFAULT_SIGMA_S = 3.0  # spatial std-dev (px)
DEFAULT_SIGMA_R = 20.0  # range std-dev (gray levels)
DEFAULT_BILATERAL_WINDOW = 7  # odd window (px)
DEFAULT_DENOISE = True  # False reproduces the "without preprocessing" ablation

# ROI branch
DEFAULT_CLUSTERS = 4  # c
DEFAULT_FUZZIFIER = 2.0  # m
DEFAULT_TOL = 0.002  # T, max membership change for convergence
DEFAULT_MAX_ITERS = 300  # safety cap, hitting it flags the run unconverged
DEFAULT_WINDOW = 5  # w, membership filter window (px)
DEFAULT_SE_RADIUS = 1  # disk radius of the closing-by-reconstruction
DEFAULT_FILTER_CHAIN = "median"
DEFAULT_NORMALIZE_MODE = "cluster_scaled"
DEFAULT_B_CONST = 2.0 ** -52  # added to the column sum before dividing
DEFAULT_ROI_EXCLUDE_DARKEST = 1  # clusters treated as background
DEFAULT_ROI_KEEP = "largest"  # or "min_area"
DEFAULT_ROI_MIN_COMPONENT = 50  # px, only used by roi_keep = "min_area"
DEFAULT_ROI_RULE = "argmax"  # or "threshold" on the normalized retina memberships
DEFAULT_ROI_THRESHOLD = 0.125  # half the cluster_scaled maximum for c = 4
DEFAULT_ROI_CUT_BRIGHT_LAYER = True  # keep the ROI above the brightest wide layer
DEFAULT_ROI_LAYER_MARGIN = 2  # rows left free above that layer
DEFAULT_ROI_LAYER_MIN_SPAN = 0.1  # fraction of the width a component must span to count as a layer

# HF estimation branch (normalized units, multiplied by the intensity scale)
DEFAULT_DELTA = 0.21
DEFAULT_G_MIN = 2.10
DEFAULT_MAX_VARIATION = 1.0
DEFAULT_SIMILARITY_TOL = 0.2  # relative area difference for duplicate regions
DEFAULT_INTENSITY_SCALE = 255.0 / 5.0  # gray levels per normalized unit

# Post-processing
DEFAULT_MIN_AREA = 5  # px, smaller bright spots count as speckle
DEFAULT_MAX_AREA = None  # px, set per cube by the operator
NEAR_CUTOFF_FRACTION = 0.2  # components within 20% of max_area get a warning

# Runtime
DEFAULT_SEED = 0
DEFAULT_JOBS = 1

# Cirrus cube geometry
CIRRUS_DIMS = (512, 1024, 128)  # width (A-scans), height (depth), B-scans
CIRRUS_EXTENT_MM = (6.0, 6.0, 2.0)  # x, y, z
CIRRUS_VOXEL_MM = (
    CIRRUS_EXTENT_MM[0] / CIRRUS_DIMS[0],
    CIRRUS_EXTENT_MM[1] / CIRRUS_DIMS[2],
    CIRRUS_EXTENT_MM[2] / CIRRUS_DIMS[1],
)

# Phantom generator
PHANTOM_VITREOUS_LEVEL = 20.0
PHANTOM_BAND_TOP_LEVEL = 100.0
PHANTOM_BAND_BOTTOM_LEVEL = 130.0
PHANTOM_STRIPE_LEVEL = 200.0
PHANTOM_STRIPE_ROWS = 6
PHANTOM_BELOW_LEVEL = 20.0
PHANTOM_SHADOW_FACTOR = 0.5
PHANTOM_FOCUS_LEVELS = (190.0, 235.0)
PHANTOM_FOCUS_RADII = (2.0, 3.5)
PHANTOM_FLOATER_LEVEL = 210.0
PHANTOM_FLOATER_RADIUS = 3.0
PHANTOM_FLOATER_CLEARANCE = 12  # rows between a floater and the band top
PHANTOM_MAX_AREA = 150  # px, manual cut-off for phantom runs: above any focus, below any stripe piece

# Logging
LOG_ENV_VAR = "HFSEG_LOG"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

FILTER_CHAINS = ("median", "spatial_then_median", "spatial")
NORMALIZE_MODES = ("cluster_scaled", "probabilistic", "none")
NORMALIZE_ALIASES = {"paper": "cluster_scaled"}
ROI_KEEP_MODES = ("largest", "min_area")
ROI_RULES = ("argmax", "threshold")


@dataclass(frozen=True)
class PipelineConfig:
    """All stage parameters of one segmentation run"""

    sigma_s: float = DEFAULT_SIGMA_S
    sigma_r: float = DEFAULT_SIGMA_R
    bilateral_window: int = DEFAULT_BILATERAL_WINDOW
    denoise: bool = DEFAULT_DENOISE
    clusters: int = DEFAULT_CLUSTERS
    fuzzifier: float = DEFAULT_FUZZIFIER
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    window: int = DEFAULT_WINDOW
    se_radius: int = DEFAULT_SE_RADIUS
    filter_chain: str = DEFAULT_FILTER_CHAIN
    normalize_mode: str = DEFAULT_NORMALIZE_MODE
    b_const: float = DEFAULT_B_CONST
    roi_exclude_darkest: int = DEFAULT_ROI_EXCLUDE_DARKEST
    roi_keep: str = DEFAULT_ROI_KEEP
    roi_min_component: int = DEFAULT_ROI_MIN_COMPONENT
    roi_rule: str = DEFAULT_ROI_RULE
    roi_threshold: float = DEFAULT_ROI_THRESHOLD
    roi_cut_bright_layer: bool = DEFAULT_ROI_CUT_BRIGHT_LAYER
    roi_layer_margin: int = DEFAULT_ROI_LAYER_MARGIN
    delta: float = DEFAULT_DELTA
    g_min: float = DEFAULT_G_MIN
    max_variation: float = DEFAULT_MAX_VARIATION
    similarity_tol: float = DEFAULT_SIMILARITY_TOL
    intensity_scale: float = DEFAULT_INTENSITY_SCALE
    min_area: int = DEFAULT_MIN_AREA
    max_area: Optional[int] = DEFAULT_MAX_AREA
    seed: int = DEFAULT_SEED
    jobs: int = DEFAULT_JOBS

    def __post_init__(self):
        object.__setattr__(self, "normalize_mode",
                           NORMALIZE_ALIASES.get(self.normalize_mode, self.normalize_mode))
        self.validate()

    def validate(self) -> None:
        """Raise ParameterError for the first field outside its range"""
        checks = [
            ("sigma_s", self.sigma_s > 0, "must be > 0"),
            ("sigma_r", self.sigma_r > 0, "must be > 0"),
            ("bilateral_window", self.bilateral_window >= 1 and self.bilateral_window % 2 == 1,
             "must be odd and >= 1"),
            ("clusters", self.clusters >= 2, "must be >= 2"),
            ("fuzzifier", self.fuzzifier > 1, "must be > 1"),
            ("tol", self.tol > 0, "must be > 0"),
            ("max_iters", self.max_iters >= 1, "must be >= 1"),
            ("window", self.window >= 1 and self.window % 2 == 1, "must be odd and >= 1"),
            ("se_radius", self.se_radius >= 0, "must be >= 0"),
            ("filter_chain", self.filter_chain in FILTER_CHAINS, f"must be one of {FILTER_CHAINS}"),
            ("normalize_mode", self.normalize_mode in NORMALIZE_MODES,
             f"must be one of {NORMALIZE_MODES} or an alias in {sorted(NORMALIZE_ALIASES)}"),
            ("b_const", self.b_const >= 0, "must be >= 0"),
            ("roi_exclude_darkest", 0 <= self.roi_exclude_darkest < self.clusters,
             "must be in [0, clusters)"),
            ("roi_keep", self.roi_keep in ROI_KEEP_MODES, f"must be one of {ROI_KEEP_MODES}"),
            ("roi_min_component", self.roi_min_component >= 1, "must be >= 1"),
            ("roi_rule", self.roi_rule in ROI_RULES, f"must be one of {ROI_RULES}"),
            ("roi_threshold", self.roi_threshold >= 0, "must be >= 0"),
            ("roi_layer_margin", self.roi_layer_margin >= 0, "must be >= 0"),
            ("delta", self.delta > 0, "must be > 0"),
            ("max_variation", self.max_variation >= 0, "must be >= 0"),
            ("similarity_tol", self.similarity_tol >= 0, "must be >= 0"),
            ("intensity_scale", self.intensity_scale > 0, "must be > 0"),
            ("min_area", self.min_area >= 1, "must be >= 1"),
            ("max_area", self.max_area is None or self.max_area >= self.min_area,
             "must be >= min_area"),
            ("jobs", self.jobs >= 1, "must be >= 1"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ParameterError(f"{name}={getattr(self, name)!r} {message}")

    @property
    def gray_delta(self) -> float:
        return self.delta * self.intensity_scale

    @property
    def gray_g_min(self) -> float:
        return self.g_min * self.intensity_scale

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(name: str, raw: str):
    kind = FIELD_TYPES[name]
    text = raw.strip()
    if kind == "Optional[int]" or kind == Optional[int]:
        return None if text.lower() == "none" else int(text)
    if kind in ("bool", bool):
        if text.lower() in ("true", "yes", "1", "on"):
            return True
        if text.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    return text


def load_config_file(path: str) -> dict:
    """
    Read a flat key=value config file.

    Args:
        path: config file path

    Returns:
        dict of PipelineConfig field name -> typed value
    """
    values = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ParameterError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, raw = stripped.split("=", 1)
            name = key.strip().replace("-", "_")
            if name not in FIELD_TYPES:
                raise ParameterError(f"{path}:{lineno}: unknown key {key.strip()!r}")
            try:
                values[name] = _coerce(name, raw)
            except ValueError as exc:
                raise ParameterError(f"{path}:{lineno}: bad value for {name}: {exc}") from exc
    logger.debug("loaded %d settings from %s", len(values), path)
    return values


def build_config(file_values: Optional[dict] = None, flag_values: Optional[dict] = None) -> PipelineConfig:
    """Merge defaults < config file < explicit flags into a validated PipelineConfig"""
    merged = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if k in FIELD_TYPES})
    return PipelineConfig(**merged)


def log_level_from_env(default: str = "WARNING") -> int:
    name = os.environ.get(LOG_ENV_VAR, default).upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.WARNING
