#!/usr/bin/env python3
"""
Tests for image containers, file I/O, bilateral filtering and phantoms
"""

import numpy as np
import pytest
from PIL import Image

from ImageCore import (
    BScan,
    Cube,
    Floater,
    Focus,
    Mask,
    PhantomSpec,
    bilateral_filter,
    ellipse_mask,
    load_bscan,
    load_cube,
    load_mask,
    mean_filter,
    median_filter,
    random_phantom_spec,
    save_cube,
    save_mask,
    synth_cube,
    synth_phantom,
)
from segmentation_config import CIRRUS_VOXEL_MM
from segmentation_errors import DimensionError, FormatError, ParameterError


def test_bscan_rejects_out_of_range():
    """Intensities must be finite and inside [0, 255]"""
    with pytest.raises(ParameterError):
        BScan(np.full((2, 2), 256.0))
    with pytest.raises(ParameterError):
        BScan(np.array([[0.0, np.nan]]))
    with pytest.raises(DimensionError):
        BScan(np.zeros(4))
    img = BScan(np.zeros((3, 4)))
    assert (img.width, img.height) == (4, 3)
    assert not img.data.flags.writeable


def test_cube_round_trip(tmp_path):
    """Raw cube bytes survive load -> save unchanged"""
    print("=== Testing Cube Round Trip ===")
    rng = np.random.default_rng(1)
    raw = rng.integers(0, 256, size=(3, 5, 4), dtype=np.uint8)
    path = tmp_path / "cube.raw"
    raw.tofile(path)
    cube = load_cube(str(path), dims=(4, 5, 3))
    assert len(cube) == 3
    assert cube.dims == (4, 5, 3)
    assert cube.voxel_dims_mm == pytest.approx(CIRRUS_VOXEL_MM)
    assert np.array_equal(cube.bscans[1].data, raw[1].astype(float))

    copy_path = tmp_path / "copy.raw"
    save_cube(cube, str(copy_path))
    assert copy_path.read_bytes() == path.read_bytes()
    print("✓ cube bytes round-trip")


def test_cube_zero_bytes(tmp_path):
    path = tmp_path / "zeros.raw"
    np.zeros(2 * 3 * 2, dtype=np.uint8).tofile(path)
    cube = load_cube(str(path), dims=(2, 3, 2))
    assert all(np.all(b.data == 0) for b in cube.bscans)


def test_cube_size_mismatch(tmp_path):
    """A 100-byte file cannot hold a Cirrus cube"""
    path = tmp_path / "short.raw"
    path.write_bytes(bytes(100))
    with pytest.raises(DimensionError, match="67108864"):
        load_cube(str(path))
    with pytest.raises(OSError):
        load_cube(str(tmp_path / "missing.raw"))


def test_cube_rejects_mixed_shapes():
    with pytest.raises(DimensionError):
        Cube((BScan(np.zeros((2, 2))), BScan(np.zeros((3, 2)))))


def test_load_bscan_formats(tmp_path):
    """Grayscale graymaps load, RGB and 16-bit images are rejected"""
    gray = tmp_path / "seven.pgm"
    Image.fromarray(np.full((3, 3), 7, dtype=np.uint8)).save(gray)
    img = load_bscan(str(gray))
    assert img.shape == (3, 3)
    assert np.all(img.data == 7)

    tall = tmp_path / "tall.png"
    Image.fromarray(np.zeros((1024, 512), dtype=np.uint8)).save(tall)
    img = load_bscan(str(tall))
    assert (img.width, img.height) == (512, 1024)

    rgb = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((3, 3, 3), dtype=np.uint8)).save(rgb)
    with pytest.raises(FormatError):
        load_bscan(str(rgb))

    deep = tmp_path / "deep.png"
    Image.fromarray(np.full((3, 3), 1000, dtype=np.uint16)).save(deep)
    with pytest.raises(FormatError):
        load_bscan(str(deep))

    corrupt = tmp_path / "corrupt.png"
    corrupt.write_bytes(b"not an image at all")
    with pytest.raises(OSError):
        load_bscan(str(corrupt))


def test_mask_file_round_trip(tmp_path):
    bits = np.zeros((4, 6), dtype=bool)
    bits[1:3, 2:5] = True
    path = tmp_path / "mask.png"
    save_mask(Mask(bits), str(path))
    assert np.array_equal(np.asarray(Image.open(path)), np.where(bits, 255, 0))
    assert np.array_equal(load_mask(str(path)).bits, bits)


def test_bilateral_fixed_points():
    """Constant images and 1x1 windows pass through"""
    constant = BScan(np.full((6, 5), 7.0))
    out = bilateral_filter(constant, 3.0, 20.0, 7)
    assert np.allclose(out.data, 7.0, atol=1e-12)
    single = BScan(np.array([[5.0]]))
    assert bilateral_filter(single, 1.0, 1.0, 1).data[0, 0] == 5.0


def test_bilateral_center_value():
    """Center of [0,0,100,0,0] with a 3x3 window is the weighted mean of (0,100,0)"""
    img = BScan(np.array([[0.0, 0.0, 100.0, 0.0, 0.0]]))
    out = bilateral_filter(img, sigma_s=1.0, sigma_r=1000.0, window=3)
    side = np.exp(-0.5) * np.exp(-(100.0 ** 2) / (2 * 1000.0 ** 2))
    expected = 100.0 / (1.0 + 2.0 * side)
    assert out.data[0, 2] == pytest.approx(expected, rel=1e-9)


def test_bilateral_range_and_gaussian_limit():
    """Output stays within the input range; huge sigma_r approaches the Gaussian blur"""
    rng = np.random.default_rng(3)
    data = rng.integers(0, 256, size=(12, 10)).astype(float)
    img = BScan(data)
    out = bilateral_filter(img, 2.0, 15.0, 5)
    assert out.data.min() >= data.min() and out.data.max() <= data.max()

    blurred = bilateral_filter(img, 2.0, 1e9, 5).data
    half = 2
    padded = np.pad(data, half, mode="edge")
    num = np.zeros_like(data)
    den = 0.0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            w = np.exp(-(dy * dy + dx * dx) / 8.0)
            num += w * padded[half + dy:half + dy + 12, half + dx:half + dx + 10]
            den += w
    assert np.max(np.abs(blurred - num / den)) < 1e-6


def test_bilateral_parameter_errors():
    img = BScan(np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        bilateral_filter(img, 0.0, 1.0, 3)
    with pytest.raises(ParameterError):
        bilateral_filter(img, 1.0, -1.0, 3)
    with pytest.raises(ParameterError):
        bilateral_filter(img, 1.0, 1.0, 4)


def test_baseline_filters():
    img = BScan(np.array([[0.0, 0.0, 90.0, 0.0, 0.0]] * 3))
    assert np.all(median_filter(img, 3).data == 0.0)
    assert mean_filter(img, 3).data[1, 2] == pytest.approx(30.0)


def test_phantom_determinism_and_invariants():
    """The same phantom description twice gives identical images; foci stay inside the band"""
    print("=== Testing Phantom Generator ===")
    spec = random_phantom_spec(11, dims=(256, 192), speckle_level=0.1)
    img_a, mask_a = synth_phantom(spec)
    img_b, mask_b = synth_phantom(spec)
    assert np.array_equal(img_a.data, img_b.data)
    assert np.array_equal(mask_a.bits, mask_b.bits)
    top, bottom = spec.band
    rows = np.nonzero(mask_a.bits)[0]
    assert rows.min() >= top and rows.max() <= bottom
    assert 6 <= len(spec.foci) <= 12
    print(f"✓ {len(spec.foci)} foci, {mask_a.area} truth pixels")


def test_phantom_layers():
    spec = PhantomSpec(dims=(40, 60), band=(20, 45), vessel_shadows=((10, 12),))
    img, mask = synth_phantom(spec)
    assert mask.area == 0
    assert img.data[5, 0] == pytest.approx(20.0)
    assert 90 <= img.data[30, 0] <= 140
    assert img.data[45, 0] == pytest.approx(200.0)
    assert img.data[45, 11] == pytest.approx(100.0)
    assert img.data[55, 0] == pytest.approx(20.0)


def test_phantom_floaters():
    """Floaters hang from the band top on their strands and never enter the truth mask"""
    floaters = (Floater((8.0, 10.0), strand_width=1), Floater((8.0, 28.0), strand_width=2))
    img, mask = synth_phantom(PhantomSpec(dims=(40, 60), band=(20, 45), floaters=floaters))
    assert mask.area == 0
    assert img.data[8, 10] == pytest.approx(210.0)
    assert np.all(img.data[12:20, 10] == 100.0)
    assert img.data[15, 11] == pytest.approx(20.0)
    assert np.all(img.data[12:20, 28:30] == 100.0)
    assert img.data[15, 30] == pytest.approx(20.0)
    with pytest.raises(ParameterError):
        PhantomSpec(dims=(40, 60), band=(20, 45), floaters=(Floater((25.0, 10.0)),))
    with pytest.raises(ParameterError):
        PhantomSpec(dims=(40, 60), band=(20, 45), floaters=(Floater((8.0, 39.0), strand_width=2),))


def test_random_floaters_leave_foci_alone():
    plain = random_phantom_spec(6, dims=(256, 192))
    spec = random_phantom_spec(6, dims=(256, 192), n_floaters=4)
    assert plain.floaters == ()
    assert spec.foci == plain.foci
    assert [f.strand_width for f in spec.floaters] == [1, 2, 1, 2]
    top = spec.band[0]
    for floater in spec.floaters:
        assert floater.center[0] <= top - 12
        assert not any(first - 8 <= floater.center[1] <= last + 8 for first, last in spec.vessel_shadows)
    _, truth = synth_phantom(spec)
    assert np.array_equal(truth.bits, synth_phantom(plain)[1].bits)


def test_phantom_focus_rasterization():
    """A noise-free focus marks exactly its rasterized ellipse"""
    focus = Focus(center=(30.0, 20.0), radii=(3.0, 3.0), intensity=220.0)
    spec = PhantomSpec(dims=(40, 60), band=(15, 50), foci=(focus,))
    img, mask = synth_phantom(spec)
    expected = ellipse_mask((60, 40), focus)
    rows, cols = np.mgrid[:60, :40]
    assert expected.sum() == np.count_nonzero((rows - 30) ** 2 + (cols - 20) ** 2 <= 9)
    assert np.array_equal(mask.bits, expected)
    assert np.all(img.data[expected] == 220.0)


def test_phantom_spec_errors():
    with pytest.raises(ParameterError):
        PhantomSpec(dims=(40, 60), band=(20, 70))
    with pytest.raises(ParameterError):
        PhantomSpec(dims=(40, 60), band=(20, 45), foci=(Focus((5.0, 5.0), (2.0, 2.0), 200.0),))
    with pytest.raises(ParameterError):
        PhantomSpec(dims=(40, 60), band=(20, 45), foci=(Focus((30.0, 5.0), (2.0, 2.0), 300.0),))


def test_synth_cube():
    specs = [random_phantom_spec(s, dims=(128, 96), speckle_level=0.0) for s in range(3)]
    cube, truths = synth_cube(specs)
    assert cube.dims == (128, 96, 3)
    assert len(truths) == 3


def main():
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        test_cube_round_trip(Path(tmp))
    test_bilateral_center_value()
    test_phantom_determinism_and_invariants()
    print("\nImage core checks finished")


if __name__ == "__main__":
    main()
