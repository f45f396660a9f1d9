#!/usr/bin/env python3
"""
Tests for pixel sorting, max-tree construction, stability and region selection
"""

import csv

import numpy as np
import pytest
from scipy import ndimage

from ImageCore import BScan
from MSER import (
    ComponentTree,
    ExtremalRegion,
    build_component_tree,
    dedup_regions,
    dump_tree,
    extract_mser,
    region_moments,
    regions_to_mask,
    sort_pixels,
    stability,
    stability_terms,
)
from segmentation_errors import ConsistencyError, ParameterError

FOUR = ndimage.generate_binary_structure(2, 1)


def image(rows):
    return BScan(np.array(rows, dtype=float))


def node_pixel_sets(tree: ComponentTree):
    """Flat pixel indices of every node, children merged into parents"""
    sets = [set() for _ in range(tree.n_nodes)]
    for pixel, node in enumerate(tree.pixel_node):
        sets[node].add(pixel)
    for node in range(tree.n_nodes - 1, 0, -1):
        sets[tree.node_parent[node]] |= sets[node]
    return [frozenset(s) for s in sets]


def threshold_nodes(data: np.ndarray):
    """Brute-force node set: components of every threshold set I >= g whose minimum is g"""
    nodes = set()
    for g in np.unique(data):
        labels, count = ndimage.label(data >= g, structure=FOUR)
        for k in range(1, count + 1):
            component = labels == k
            if data[component].min() == g:
                nodes.add((float(g), frozenset(np.flatnonzero(component).tolist())))
    return nodes


def threshold_psi(data: np.ndarray, level: float, pixels: frozenset, delta: float) -> float:
    """Brute-force stability of one node from the threshold images at level -/+ delta"""
    flat = sorted(pixels)
    labels, _ = ndimage.label(data >= level - delta, structure=FOUR)
    lab = labels.ravel()
    dimmer = np.count_nonzero(lab == lab[flat[0]])

    labels, count = ndimage.label(data >= level + delta, structure=FOUR)
    lab = labels.ravel()
    inside = np.zeros(data.size, dtype=bool)
    inside[flat] = True
    sizes = np.bincount(lab, minlength=count + 1)
    crosses = np.zeros(count + 1, dtype=bool)
    crosses[lab[~inside]] = True
    crosses[0] = True
    candidates = sizes[~crosses]
    brighter = int(candidates.max()) if candidates.size else len(pixels)
    return (dimmer - brighter) / len(pixels)


def blob_image(shape, centers, radius, fg=200.0, bg=20.0):
    rows, cols = np.mgrid[:shape[0], :shape[1]]
    data = np.full(shape, bg)
    for r, c in centers:
        data[(rows - r) ** 2 + (cols - c) ** 2 <= radius * radius] = fg
    return BScan(data)


def test_sort_pixels_examples():
    ordered = sort_pixels(image([[3, 1, 2]]))
    assert np.array_equal(ordered.keys[ordered.order], [1, 2, 3])
    assert np.array_equal(sort_pixels(image([[4, 4], [4, 4]])).order, [0, 1, 2, 3])

    rng = np.random.default_rng(16)
    data = rng.integers(0, 256, size=(8, 8)).astype(float)
    result = sort_pixels(BScan(data))
    assert np.array_equal(result.keys[result.order], np.sort(data.ravel()))
    assert np.array_equal(result.order, np.argsort(data.ravel(), kind="stable"))


def test_tree_small_examples():
    """[1,3,2] nests three nodes; a constant image has a single root"""
    tree = build_component_tree(image([[1, 3, 2]]))
    assert np.array_equal(tree.level, [1, 2, 3])
    assert np.array_equal(tree.area, [3, 2, 1])
    assert np.array_equal(tree.node_parent, [0, 0, 1])
    assert np.array_equal(tree.node_mask(1), [[False, True, True]])

    flat = build_component_tree(BScan(np.full((4, 5), 60.0)))
    assert flat.n_nodes == 1
    assert flat.area[0] == 20

    plateaus = build_component_tree(image([[9, 0, 9]]))
    assert plateaus.n_nodes == 3
    assert np.array_equal(plateaus.node_parent, [0, 0, 0])
    assert np.array_equal(plateaus.area, [3, 1, 1])
    assert plateaus.children()[0] == [1, 2]


def test_tree_matches_threshold_oracle():
    """Nodes, areas and stability agree with brute-force threshold decomposition"""
    print("=== Testing Max-Tree Oracle ===")
    rng = np.random.default_rng(23)
    delta = 60.0
    for _ in range(200):
        data = (rng.integers(0, 8, size=(24, 24)) * 30).astype(float)
        tree = build_component_tree(BScan(data))
        pixel_sets = node_pixel_sets(tree)
        assert set(zip(tree.level.tolist(), pixel_sets)) == threshold_nodes(data)
        assert len(set(pixel_sets)) == tree.n_nodes

        own = np.bincount(tree.pixel_node, minlength=tree.n_nodes)
        child_sum = np.zeros(tree.n_nodes, dtype=np.int64)
        np.add.at(child_sum, tree.node_parent[1:], tree.area[1:])
        assert np.array_equal(tree.area, own + child_sum)
        assert tree.area[0] == data.size

        psi = stability(tree, delta)
        for node, pixels in enumerate(pixel_sets):
            assert psi[node] == threshold_psi(data, tree.level[node], pixels, delta)
    print("✓ 200 images match the oracle")


def test_moments_examples():
    img = np.zeros((5, 5))
    img[2, 3] = 200.0
    tree = build_component_tree(BScan(img))
    mu, sigma = region_moments(tree)
    leaf = int(np.argmax(tree.level))
    assert tuple(mu[leaf]) == (2.0, 3.0)
    assert np.array_equal(sigma[leaf], np.zeros((2, 2)))

    pair = ComponentTree(
        shape=(1, 3),
        parent=np.zeros(3, dtype=np.int64),
        pixel_node=np.zeros(3, dtype=np.int64),
        nodes=np.zeros(1, dtype=np.int64),
        node_parent=np.zeros(1, dtype=np.int64),
        level=np.array([5.0]),
        area=np.array([2]),
        sum_x=np.array([[0.0, 2.0]]),
        sum_xx=np.array([[0.0, 0.0, 4.0]]),
    )
    mu, sigma = region_moments(pair)
    assert tuple(mu[0]) == (0.0, 1.0)
    assert np.array_equal(sigma[0], [[0.0, 0.0], [0.0, 1.0]])


def test_moments_match_direct_recomputation():
    rng = np.random.default_rng(31)
    data = (rng.integers(0, 6, size=(20, 20)) * 40).astype(float)
    tree = build_component_tree(BScan(data))
    mu, sigma = region_moments(tree)
    for node in range(tree.n_nodes):
        rows, cols = np.nonzero(tree.node_mask(node))
        points = np.stack([rows, cols]).astype(float)
        assert np.allclose(mu[node], points.mean(axis=1), atol=1e-9)
        assert np.allclose(sigma[node], np.cov(points, bias=True).reshape(2, 2), atol=1e-9)
        assert np.trace(sigma[node]) >= -1e-9
        assert np.all(np.linalg.eigvalsh(sigma[node]) >= -1e-9)


def test_stability_examples():
    """Areas 12 (dimmer), 10 (self) and 8 (brighter) give 0.4"""
    tree = build_component_tree(image([[1, 1, 2, 2, 3, 3, 3, 3, 3, 3, 3, 3]]))
    dimmer, brighter = stability_terms(tree, 1.0)
    assert (dimmer[1], tree.area[1], brighter[1]) == (12, 10, 8)
    psi = stability(tree, 1.0)
    assert psi[1] == pytest.approx(0.4)
    assert dimmer[0] == 12
    assert psi[0] == pytest.approx(2 / 12)

    sharp = build_component_tree(image([[0, 0, 200, 200, 0]]))
    assert stability(sharp, 10.0)[1] == 0.0

    with pytest.raises(ParameterError):
        stability(sharp, 0.0)


def test_shift_invariance():
    rng = np.random.default_rng(41)
    data = (rng.integers(0, 6, size=(16, 16)) * 30).astype(float)
    base = build_component_tree(BScan(data))
    moved = build_component_tree(BScan(data + 40.0))
    assert np.array_equal(base.node_parent, moved.node_parent)
    assert np.array_equal(base.area, moved.area)
    assert np.array_equal(stability(base, 30.0), stability(moved, 30.0))


def test_single_blob_gives_one_region():
    print("=== Testing Extremal Region Selection ===")
    img = blob_image((40, 40), [(20, 20)], 4)
    tree = build_component_tree(img)
    regions = extract_mser(tree, delta=10.71, g_min=107.1, max_variation=1.0)
    assert len(regions) == 1
    blob = img.data == 200.0
    assert regions[0].area == np.count_nonzero(blob)
    assert regions[0].centroid == pytest.approx((20.0, 20.0))
    assert np.array_equal(regions_to_mask(regions, img.shape).bits, blob)
    print("✓ one region for one blob")

    flat = build_component_tree(BScan(np.full((10, 10), 90.0)))
    assert extract_mser(flat, 10.71, 107.1, 1.0) == []


def test_two_blobs_and_area_limits():
    img = blob_image((40, 60), [(10, 12), (28, 45)], 3)
    tree = build_component_tree(img)
    regions = extract_mser(tree, 10.71, 107.1, 1.0)
    centroids = sorted(r.centroid for r in regions)
    assert centroids == [pytest.approx((10.0, 12.0)), pytest.approx((28.0, 45.0))]
    assert extract_mser(tree, 10.71, 107.1, 1.0, max_area=10) == []
    assert extract_mser(tree, 10.71, 250.0, 1.0) == []
    assert [r.node for r in dedup_regions(regions, tree, 0.2, 10.71)] == [r.node for r in regions]


def nested_tree():
    data = np.full((14, 14), 20.0)
    data[2:12, 2:12] = 200.0
    data[12, 5] = 190.0
    tree = build_component_tree(BScan(data))
    outer = int(np.flatnonzero(tree.level == 190.0)[0])
    inner = int(np.flatnonzero(tree.level == 200.0)[0])
    return tree, outer, inner


def region(tree, node, psi):
    return ExtremalRegion(node=node, level=float(tree.level[node]), area=int(tree.area[node]),
                          stability=psi, centroid=(0.0, 0.0), second_moment=np.zeros((2, 2)),
                          rows=np.array([], dtype=np.int64), cols=np.array([], dtype=np.int64))


def test_dedup_nested_regions():
    """Areas 101 and 100 ten levels apart collapse to the more stable one"""
    tree, outer, inner = nested_tree()
    assert (tree.area[outer], tree.area[inner]) == (101, 100)
    pair = [region(tree, outer, 0.05), region(tree, inner, 0.01)]
    kept = dedup_regions(pair, tree, similarity_tol=0.1, delta=10.71)
    assert [r.node for r in kept] == [inner]

    pair = [region(tree, outer, 0.01), region(tree, inner, 0.05)]
    assert [r.node for r in dedup_regions(pair, tree, 0.1, 10.71)] == [outer]

    tie = [region(tree, outer, 0.02), region(tree, inner, 0.02)]
    assert [r.node for r in dedup_regions(tie, tree, 0.1, 10.71)] == [inner]

    far = dedup_regions(pair, tree, 0.1, delta=5.0)
    assert len(far) == 2
    assert dedup_regions(pair, tree, 0.1, 10.71, max_variation=0.02)[0].node == outer


def test_regions_to_mask():
    img = blob_image((20, 20), [(10, 10)], 2)
    tree = build_component_tree(img)
    assert regions_to_mask([], (20, 20)).area == 0
    regions = extract_mser(tree, 10.71, 107.1, 1.0)
    assert regions_to_mask(regions, (20, 20)).area == regions[0].area

    a = region(tree, 0, 0.0)
    a = ExtremalRegion(**{**a.__dict__, "rows": np.array([0, 0, 1]), "cols": np.array([0, 1, 1])})
    b = ExtremalRegion(**{**a.__dict__, "rows": np.array([1, 2]), "cols": np.array([1, 2])})
    assert regions_to_mask([a, b], (3, 3)).area == 4

    outside = ExtremalRegion(**{**a.__dict__, "rows": np.array([5]), "cols": np.array([0])})
    with pytest.raises(ConsistencyError):
        regions_to_mask([outside], (3, 3))


def test_dump_tree(tmp_path):
    tree = build_component_tree(image([[1, 3, 2]]))
    path = tmp_path / "tree.csv"
    dump_tree(tree, stability(tree, 1.0), str(path))
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 3
    assert rows[0]["node"] == "0" and rows[0]["parent"] == "0"
    assert [int(r["area"]) for r in rows] == [3, 2, 1]
    assert float(rows[2]["mu_col"]) == 1.0


def main():
    test_tree_small_examples()
    test_tree_matches_threshold_oracle()
    test_single_blob_gives_one_region()
    print("\nMSER checks finished")


if __name__ == "__main__":
    main()
