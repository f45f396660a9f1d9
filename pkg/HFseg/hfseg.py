#!/usr/bin/env python3
"""
Command-line front end for HF segmentation

Subcommands:
- denoise, roi, mser: run one stage on a single B-scan and write its image/mask
- segment: full pipeline on a B-scan (--bscan) or a raw cube (--cube)
- segment-cube: full pipeline on a raw cube
- phantom: write synthetic B-scans or cubes with ground-truth masks
- eval: compare predicted masks with ground-truth masks
- sweep: DSC as a function of one parameter
- tree-dump: write the component tree of a B-scan as CSV

The log level is read from the HFSEG_LOG environment variable.
"""

import argparse
import glob
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from EvaluationMetrics import (
    PairedSeries,
    bland_altman,
    dice,
    linear_fit,
    paired_t_test,
    pearson,
)
from ImageCore import (
    BScan,
    Cube,
    load_bscan,
    load_cube,
    load_mask,
    random_phantom_spec,
    save_bscan,
    save_cube,
    save_mask,
    synth_cube,
    synth_phantom,
)
from MSER import build_component_tree, dump_tree, stability
from ReportWriter import plot_agreement, plot_sweep, save_overlay, write_csv, write_json
from segmentation import denoise, hf_branch, roi_branch, segment_bscan, segment_cube
from segmentation_config import (
    CIRRUS_DIMS,
    CIRRUS_VOXEL_MM,
    LOG_FORMAT,
    PHANTOM_MAX_AREA,
    PipelineConfig,
    build_config,
    load_config_file,
    log_level_from_env,
)
from segmentation_errors import HFSegError, ParameterError, UndefinedCorrelationError

logger = logging.getLogger(__name__)

DEFAULTS = PipelineConfig()

# flag -> (config field, type, help)
PIPELINE_FLAGS = [
    ("--sigma-s", "sigma_s", float, "bilateral spatial std-dev (px)"),
    ("--sigma-r", "sigma_r", float, "bilateral range std-dev (gray levels)"),
    ("--bilateral-window", "bilateral_window", int, "bilateral window (odd px)"),
    ("--clusters", "clusters", int, "FCM cluster count c"),
    ("--fuzzifier", "fuzzifier", float, "FCM fuzzifier m"),
    ("--tol", "tol", float, "FCM convergence threshold T"),
    ("--max-iters", "max_iters", int, "FCM iteration cap"),
    ("--window", "window", int, "membership filter window w (odd px)"),
    ("--se-radius", "se_radius", int, "closing-by-reconstruction disk radius (px)"),
    ("--filter-chain", "filter_chain", str, "membership filters: median, spatial_then_median, spatial"),
    ("--normalize-mode", "normalize_mode", str,
     "membership normalization: cluster_scaled (alias paper), probabilistic or none"),
    ("--b-const", "b_const", float, "constant added to the membership sum before normalizing"),
    ("--roi-rule", "roi_rule", str, "retina pixels: argmax cluster or threshold on the normalized score"),
    ("--roi-threshold", "roi_threshold", float, "retina score threshold of the threshold rule"),
    ("--roi-keep", "roi_keep", str, "ROI component selection: largest or min_area"),
    ("--roi-layer-margin", "roi_layer_margin", int, "rows left free above the brightest layer"),
    ("--delta", "delta", float, "stability window delta (normalized units)"),
    ("--g-min", "g_min", float, "darkest admissible region level g (normalized units)"),
    ("--max-variation", "max_variation", float, "largest admissible stability value"),
    ("--similarity-tol", "similarity_tol", float, "relative area difference for duplicate regions"),
    ("--intensity-scale", "intensity_scale", float, "gray levels per normalized unit"),
    ("--min-area", "min_area", int, "smallest kept focus (px)"),
    ("--max-area", "max_area", int, "largest kept focus (px), unset keeps all"),
    ("--seed", "seed", int, "random seed"),
    ("--jobs", "jobs", int, "worker threads for cubes"),
]

SWEEP_AXES = {"m": "fuzzifier", "w": "window", "T": "tol", "delta": "delta", "g": "g_min"}
IMAGE_PATTERNS = ("*.png", "*.pgm")


def _pipeline_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("pipeline parameters")
    group.add_argument("--config", default=None, help="key=value config file (flags override it)")
    for flag, name, kind, text in PIPELINE_FLAGS:
        group.add_argument(flag, dest=name, type=kind, default=argparse.SUPPRESS,
                           help=f"{text} (default: {getattr(DEFAULTS, name)})")
    group.add_argument("--no-denoise", dest="denoise", action="store_false", default=argparse.SUPPRESS,
                       help="skip bilateral preprocessing (default: denoise)")
    group.add_argument("--no-layer-cut", dest="roi_cut_bright_layer", action="store_false",
                       default=argparse.SUPPRESS,
                       help="let the ROI reach into the brightest layer (default: cut above it)")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfseg", description="Hyperreflective foci segmentation for SD-OCT")
    sub = parser.add_subparsers(dest="command", required=True)
    parent = _pipeline_parent()

    for name, text in (("denoise", "bilateral-filter one B-scan"),
                       ("roi", "ROI band mask of one B-scan"),
                       ("mser", "HF estimate mask of one B-scan"),
                       ("tree-dump", "component tree of one B-scan as CSV")):
        cmd = sub.add_parser(name, parents=[parent], help=text)
        cmd.add_argument("--bscan", required=True, help="input PGM/PNG B-scan")
        cmd.add_argument("--out", required=True, help="output file")

    for name, text in (("segment", "full pipeline on a B-scan or a cube"),
                       ("segment-cube", "full pipeline on a raw cube")):
        cmd = sub.add_parser(name, parents=[parent], help=text)
        if name == "segment":
            cmd.add_argument("--bscan", help="input PGM/PNG B-scan")
        cmd.add_argument("--cube", required=(name == "segment-cube"), help="raw unsigned-byte cube")
        cmd.add_argument("--dims", type=int, nargs=3, default=list(CIRRUS_DIMS),
                         metavar=("WIDTH", "HEIGHT", "BSCANS"),
                         help=f"cube dims (default: {' '.join(map(str, CIRRUS_DIMS))})")
        cmd.add_argument("--overlays", action="store_true", help="also write overlay images")
        cmd.add_argument("--out", required=True, help="output directory")

    cmd = sub.add_parser("phantom", help="synthetic B-scans or cubes with ground truth")
    cmd.add_argument("--seed", type=int, default=DEFAULTS.seed, help=f"phantom seed (default: {DEFAULTS.seed})")
    cmd.add_argument("--width", type=int, default=CIRRUS_DIMS[0], help=f"(default: {CIRRUS_DIMS[0]})")
    cmd.add_argument("--height", type=int, default=CIRRUS_DIMS[1], help=f"(default: {CIRRUS_DIMS[1]})")
    cmd.add_argument("--bscans", type=int, default=1, help="B-scans; more than one writes a raw cube (default: 1)")
    cmd.add_argument("--n-foci", type=int, default=None, help="foci per B-scan (default: random 6-12)")
    cmd.add_argument("--speckle", type=float, default=0.1, help="speckle level (default: 0.1)")
    cmd.add_argument("--shadows", type=int, default=2, help="vessel shadows per B-scan (default: 2)")
    cmd.add_argument("--floaters", type=int, default=0, help="tethered vitreous floaters per B-scan (default: 0)")
    cmd.add_argument("--out", required=True, help="output directory")

    cmd = sub.add_parser("eval", help="compare predicted masks with ground truth")
    cmd.add_argument("--pred", required=True, help="directory of predicted masks")
    cmd.add_argument("--gt", required=True, help="directory of ground-truth masks")
    cmd.add_argument("--out", required=True, help="metrics CSV")
    cmd.add_argument("--plots", action="store_true", help="write correlation and Bland-Altman SVGs")

    cmd = sub.add_parser("sweep", parents=[parent], help="DSC versus one parameter")
    cmd.add_argument("--axis", required=True, help=f"swept parameter: {', '.join(SWEEP_AXES)}")
    cmd.add_argument("--values", required=True, type=float, nargs="+", help="values to try")
    cmd.add_argument("--phantoms", type=int, default=4, help="phantom count (default: 4)")
    cmd.add_argument("--floaters", type=int, default=0, help="tethered vitreous floaters per phantom (default: 0)")
    cmd.add_argument("--phantom-width", type=int, default=CIRRUS_DIMS[0], help=f"(default: {CIRRUS_DIMS[0]})")
    cmd.add_argument("--phantom-height", type=int, default=CIRRUS_DIMS[1], help=f"(default: {CIRRUS_DIMS[1]})")
    cmd.add_argument("--bscans", default=None, help="directory of B-scans instead of phantoms")
    cmd.add_argument("--gt", default=None, help="ground-truth masks matching --bscans")
    cmd.add_argument("--out", required=True, help="output directory")
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {name: getattr(args, name) for _, name, _, _ in PIPELINE_FLAGS if hasattr(args, name)}
    if hasattr(args, "denoise"):
        flags["denoise"] = args.denoise
    if hasattr(args, "roi_cut_bright_layer"):
        flags["roi_cut_bright_layer"] = args.roi_cut_bright_layer
    return build_config(file_values, flags)


def _image_files(directory: str) -> Dict[str, str]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"not a directory: {directory}")
    files = {}
    for pattern in IMAGE_PATTERNS:
        for path in glob.glob(os.path.join(directory, pattern)):
            files[os.path.splitext(os.path.basename(path))[0]] = path
    return dict(sorted(files.items()))


def match_files(pred_dir: str, gt_dir: str) -> List[tuple]:
    pred = _image_files(pred_dir)
    truth = _image_files(gt_dir)
    if not pred and not truth:
        raise ParameterError(f"no masks found in {pred_dir} or {gt_dir}")
    unmatched = sorted(set(pred) ^ set(truth))
    if unmatched:
        raise ParameterError(f"unmatched mask files: {', '.join(unmatched)}")
    return [(name, pred[name], truth[name]) for name in pred]


def cmd_denoise(args, cfg: PipelineConfig) -> int:
    save_bscan(denoise(load_bscan(args.bscan), cfg), args.out)
    print(f"Denoised B-scan written to {args.out}")
    return 0


def cmd_roi(args, cfg: PipelineConfig) -> int:
    roi, warnings = roi_branch(denoise(load_bscan(args.bscan), cfg), cfg)
    save_mask(roi, args.out)
    print(f"ROI mask ({roi.area} px) written to {args.out}")
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def cmd_mser(args, cfg: PipelineConfig) -> int:
    mask = hf_branch(denoise(load_bscan(args.bscan), cfg), cfg)
    save_mask(mask, args.out)
    print(f"HF estimate ({mask.area} px) written to {args.out}")
    return 0


def cmd_tree_dump(args, cfg: PipelineConfig) -> int:
    img = denoise(load_bscan(args.bscan), cfg)
    tree = build_component_tree(img)
    dump_tree(tree, stability(tree, cfg.gray_delta), args.out)
    print(f"{tree.n_nodes} tree nodes written to {args.out}")
    return 0


def _write_segmentation(cube: Cube, cfg: PipelineConfig, out_dir: str, overlays: bool,
                        names: Sequence[str]) -> int:
    masks: List = []
    report = segment_cube(cube, cfg, masks_out=masks)
    os.makedirs(out_dir, exist_ok=True)
    mask_dir = os.path.join(out_dir, "masks") if len(cube) > 1 else out_dir
    os.makedirs(mask_dir, exist_ok=True)
    for index, (name, mask) in enumerate(zip(names, masks)):
        if mask is None:
            continue
        save_mask(mask, os.path.join(mask_dir, f"{name}.png"))
        if overlays:
            save_overlay(cube.bscans[index], mask, os.path.join(out_dir, "overlays", f"{name}.png"))
    write_json(report.timing(), os.path.join(out_dir, "timing.json"))
    write_json(report.to_dict(), os.path.join(out_dir, "report.json"))
    n_foci = sum(len(s.foci) for s in report.slices)
    print(f"Segmented {len(cube)} B-scan(s): {n_foci} foci, {report.voxel_count} voxels, "
          f"{report.volume_mm3:.6g} mm^3")
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    failed = [s.index for s in report.slices if s.failure]
    return 1 if failed and len(failed) == len(report.slices) else 0


def cmd_segment(args, cfg: PipelineConfig) -> int:
    bscan_path = getattr(args, "bscan", None)
    if bool(bscan_path) == bool(args.cube):
        raise ParameterError("give exactly one of --bscan or --cube")
    if bscan_path:
        img = load_bscan(bscan_path)
        return _write_segmentation(Cube((img,), CIRRUS_VOXEL_MM), cfg, args.out, True, ["mask"])
    cube = load_cube(args.cube, tuple(args.dims))
    names = [f"bscan_{i:03d}" for i in range(len(cube))]
    return _write_segmentation(cube, cfg, args.out, args.overlays, names)


def cmd_phantom(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    dims = (args.width, args.height)
    specs = [
        random_phantom_spec(args.seed + i, dims=dims, n_foci=args.n_foci, speckle_level=args.speckle,
                            n_shadows=args.shadows, n_floaters=args.floaters)
        for i in range(args.bscans)
    ]
    if args.bscans == 1:
        img, truth = synth_phantom(specs[0])
        save_bscan(img, os.path.join(args.out, "phantom.png"))
        save_mask(truth, os.path.join(args.out, "truth.png"))
        print(f"Phantom with {len(specs[0].foci)} foci written to {args.out}")
        return 0
    cube, truths = synth_cube(specs)
    save_cube(cube, os.path.join(args.out, "cube.raw"))
    truth_dir = os.path.join(args.out, "truth")
    os.makedirs(truth_dir, exist_ok=True)
    for index, truth in enumerate(truths):
        save_mask(truth, os.path.join(truth_dir, f"bscan_{index:03d}.png"))
    write_json({"dims": [args.width, args.height, args.bscans],
                "foci_per_bscan": [len(s.foci) for s in specs],
                "suggested_max_area": PHANTOM_MAX_AREA}, os.path.join(args.out, "phantom.json"))
    print(f"Phantom cube of {args.bscans} B-scans written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pairs = match_files(args.pred, args.gt)
    rows = []
    dscs = []
    pred_volumes = []
    true_volumes = []
    for name, pred_path, gt_path in pairs:
        pred, truth = load_mask(pred_path), load_mask(gt_path)
        value = dice(pred, truth)
        extras = "both empty" if pred.area == 0 and truth.area == 0 else ""
        rows.append(["dice", name, f"{value:.6f}", extras])
        dscs.append(value)
        pred_volumes.append(pred.area)
        true_volumes.append(truth.area)
    rows.append(["dice_mean", "all", f"{np.mean(dscs):.6f}", f"n={len(dscs)}"])

    series = PairedSeries(np.array(true_volumes, float), np.array(pred_volumes, float))
    if series.n >= 2:
        try:
            r = pearson(series)
            fit = linear_fit(series)
            rows.append(["pearson", "volume", f"{r:.6f}", ""])
            rows.append(["r_squared", "volume", f"{fit.r_squared:.6f}",
                         f"slope={fit.slope:.6g} intercept={fit.intercept:.6g}"])
        except UndefinedCorrelationError as exc:
            rows.append(["pearson", "volume", "nan", f"undefined: {exc}"])
        ttest = paired_t_test(series)
        rows.append(["t_test_p", "volume", f"{ttest.p_value:.6g}", f"t={ttest.t_statistic:.6g} df={ttest.df} {ttest.flag}".strip()])
        agreement = bland_altman(series)
        rows.append(["bland_altman_bias", "volume", f"{agreement.bias:.6g}", ""])
        rows.append(["bland_altman_limits", "volume", f"{agreement.lower:.6g};{agreement.upper:.6g}",
                     f"within={agreement.within}/{agreement.n}"])
        if args.plots:
            plot_agreement(series, os.path.splitext(args.out)[0])
    write_csv(["metric", "group", "value", "extras"], rows, args.out)
    print(f"Mean DSC {np.mean(dscs):.2f}% over {len(dscs)} masks, metrics written to {args.out}")
    return 0


def sweep_dsc(cfg: PipelineConfig, axis: str, values: Sequence[float], images: Sequence[BScan],
              truths: Sequence) -> List[float]:
    """Mean DSC over the batch for each value of one parameter"""
    if axis not in SWEEP_AXES:
        raise ParameterError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")
    field_name = SWEEP_AXES[axis]
    results = []
    for value in values:
        typed = int(value) if field_name == "window" else float(value)
        if field_name == "window" and typed != value:
            raise ParameterError(f"window values must be integers, got {value}")
        trial = build_config(cfg.to_dict(), {field_name: typed})
        scores = [dice(segment_bscan(img, trial).mask, truth) for img, truth in zip(images, truths)]
        results.append(float(np.mean(scores)))
        logger.info("sweep %s=%s: mean DSC %.2f", axis, value, results[-1])
    return results


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    if args.axis not in SWEEP_AXES:
        raise ParameterError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {args.axis!r}")
    if args.bscans:
        if not args.gt:
            raise ParameterError("--bscans needs --gt")
        pairs = match_files(args.bscans, args.gt)
        images = [load_bscan(p) for _, p, _ in pairs]
        truths = [load_mask(g) for _, _, g in pairs]
    else:
        if cfg.max_area is None:
            cfg = build_config(cfg.to_dict(), {"max_area": PHANTOM_MAX_AREA})
        dims = (args.phantom_width, args.phantom_height)
        phantoms = [synth_phantom(random_phantom_spec(cfg.seed + i, dims=dims, n_floaters=args.floaters))
                    for i in range(args.phantoms)]
        images = [p[0] for p in phantoms]
        truths = [p[1] for p in phantoms]
    dscs = sweep_dsc(cfg, args.axis, args.values, images, truths)
    os.makedirs(args.out, exist_ok=True)
    write_csv([args.axis, "dsc"], [[f"{v:g}", f"{d:.6f}"] for v, d in zip(args.values, dscs)],
              os.path.join(args.out, "sweep.csv"))
    plot_sweep(args.axis, args.values, dscs, os.path.join(args.out, "sweep.svg"))
    best = args.values[int(np.argmax(dscs))]
    print(f"Sweep over {args.axis}: best DSC {max(dscs):.2f}% at {best:g}")
    return 0


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "phantom":
        return cmd_phantom(args)
    if args.command == "eval":
        return cmd_eval(args)
    cfg = config_from_args(args)
    handlers = {
        "denoise": cmd_denoise,
        "roi": cmd_roi,
        "mser": cmd_mser,
        "tree-dump": cmd_tree_dump,
        "segment": cmd_segment,
        "segment-cube": cmd_segment,
        "sweep": cmd_sweep,
    }
    return handlers[args.command](args, cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=log_level_from_env(), format=LOG_FORMAT)
    try:
        return run(argv)
    except HFSegError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"hfseg: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"hfseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
