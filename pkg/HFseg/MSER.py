#!/usr/bin/env python3
"""
Max-tree construction and maximally stable extremal regions

The tree is built with Berger's union-find over pixels sorted by a stable
counting sort, processed brightest first, then canonicalized so every pixel
points at the representative of its node. Nodes are numbered in ascending
processing order, which puts the root at 0 and every parent before its
children.
"""

import csv
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from ImageCore import BScan, Mask
from segmentation_errors import ConsistencyError, ParameterError

logger = logging.getLogger(__name__)

N_LEVELS = 256


@njit(cache=True, nogil=True)
def _counting_sort(keys, n_bins):
    counts = np.zeros(n_bins + 1, dtype=np.int64)
    for i in range(keys.size):
        counts[keys[i] + 1] += 1
    for b in range(n_bins):
        counts[b + 1] += counts[b]
    order = np.empty(keys.size, dtype=np.int64)
    for i in range(keys.size):
        k = keys[i]
        order[counts[k]] = i
        counts[k] += 1
    return order


@njit(cache=True, nogil=True)
def _find_root(zpar, p):
    root = p
    while zpar[root] != root:
        root = zpar[root]
    while zpar[p] != root:
        nxt = zpar[p]
        zpar[p] = root
        p = nxt
    return root


@njit(cache=True, nogil=True)
def _maxtree_parents(values, height, width, order):
    n = values.size
    parent = np.full(n, -1, dtype=np.int64)
    zpar = np.full(n, -1, dtype=np.int64)
    neighbors = np.empty(4, dtype=np.int64)
    for i in range(n - 1, -1, -1):
        p = order[i]
        parent[p] = p
        zpar[p] = p
        row = p // width
        col = p % width
        count = 0
        if row > 0:
            neighbors[count] = p - width
            count += 1
        if row < height - 1:
            neighbors[count] = p + width
            count += 1
        if col > 0:
            neighbors[count] = p - 1
            count += 1
        if col < width - 1:
            neighbors[count] = p + 1
            count += 1
        for j in range(count):
            nb = neighbors[j]
            if parent[nb] != -1:
                root = _find_root(zpar, nb)
                if root != p:
                    parent[root] = p
                    zpar[root] = p
    for i in range(n):
        p = order[i]
        q = parent[p]
        if values[parent[q]] == values[q]:
            parent[p] = parent[q]
    return parent


@njit(cache=True, nogil=True)
def _accumulate_to_parents(node_parent, acc):
    for node in range(node_parent.size - 1, 0, -1):
        parent = node_parent[node]
        for k in range(acc.shape[1]):
            acc[parent, k] += acc[node, k]


@njit(cache=True, nogil=True)
def _stability_terms(node_parent, level, area, delta):
    """
    Areas of the node's component at g - delta and of its largest
    component at g + delta.
    """
    n_nodes = node_parent.size
    dimmer = np.empty(n_nodes, dtype=np.int64)
    for node in range(n_nodes):
        a = node
        cutoff = level[node] - delta
        while a != 0 and level[node_parent[a]] >= cutoff:
            a = node_parent[a]
        dimmer[node] = area[a]
    brighter = np.full(n_nodes, -1, dtype=np.int64)
    for d in range(1, n_nodes):
        p = node_parent[d]
        ld = level[d]
        lp = level[p]
        a = p
        while True:
            la = level[a]
            if a != p and la <= lp - delta:
                break
            if la <= ld - delta and area[d] > brighter[a]:
                brighter[a] = area[d]
            if a == 0:
                break
            a = node_parent[a]
    for node in range(n_nodes):
        if brighter[node] < 0:
            brighter[node] = area[node]
    return dimmer, brighter


@dataclass(frozen=True)
class PixelOrder:
    order: np.ndarray
    keys: np.ndarray


@dataclass(frozen=True)
class ComponentTree:
    shape: Tuple[int, int]
    parent: np.ndarray  # per pixel, canonical
    pixel_node: np.ndarray  # per pixel, node index
    nodes: np.ndarray  # canonical pixel of each node
    node_parent: np.ndarray
    level: np.ndarray
    area: np.ndarray
    sum_x: np.ndarray  # (n_nodes, 2): sums of row, col
    sum_xx: np.ndarray  # (n_nodes, 3): sums of row*row, row*col, col*col

    root: int = 0

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    def children(self) -> List[List[int]]:
        kids: List[List[int]] = [[] for _ in range(self.n_nodes)]
        for node in range(1, self.n_nodes):
            kids[int(self.node_parent[node])].append(node)
        return kids

    def subtree_nodes(self, selected: np.ndarray) -> np.ndarray:
        """Boolean per node: inside the subtree of any selected node"""
        inside = np.asarray(selected, dtype=bool).copy()
        for node in range(1, self.n_nodes):
            if inside[self.node_parent[node]]:
                inside[node] = True
        return inside

    def node_mask(self, node: int) -> np.ndarray:
        selected = np.zeros(self.n_nodes, dtype=bool)
        selected[node] = True
        return self.subtree_nodes(selected)[self.pixel_node].reshape(self.shape)


@dataclass(frozen=True)
class ExtremalRegion:
    node: int
    level: float
    area: int
    stability: float
    centroid: Tuple[float, float]
    second_moment: np.ndarray  # 2x2 covariance
    rows: np.ndarray
    cols: np.ndarray


def sort_pixels(img: BScan) -> PixelOrder:
    keys = img.quantized().ravel()
    return PixelOrder(order=_counting_sort(keys, N_LEVELS), keys=keys)


def build_component_tree(img: BScan) -> ComponentTree:
    """
    Max-tree of the 4-connected bright threshold sets of the quantized image.

    Args:
        img: input B-scan, intensities rounded to the 8-bit grid

    Returns:
        ComponentTree with areas and raw moment sums per node
    """
    height, width = img.shape
    if height * width == 0:
        raise ParameterError("cannot build a component tree of an empty image")
    sorted_pixels = sort_pixels(img)
    values = sorted_pixels.keys.astype(np.int64)
    order = sorted_pixels.order
    parent = _maxtree_parents(values, height, width, order)

    n = values.size
    index = np.arange(n)
    canonical = (parent == index) | (values[parent] != values)
    nodes = order[canonical[order]]
    node_index = np.full(n, -1, dtype=np.int64)
    node_index[nodes] = np.arange(nodes.size)
    node_parent = node_index[parent[nodes]]
    node_parent[0] = 0
    pixel_node = np.where(canonical, node_index, node_index[parent])

    rows = (index // width).astype(np.float64)
    cols = (index % width).astype(np.float64)
    acc = np.zeros((nodes.size, 6), dtype=np.float64)
    for k, weights in enumerate((None, rows, cols, rows * rows, rows * cols, cols * cols)):
        acc[:, k] = np.bincount(pixel_node, weights=weights, minlength=nodes.size)
    _accumulate_to_parents(node_parent, acc)
    logger.debug("max-tree of %dx%d image has %d nodes", width, height, nodes.size)
    return ComponentTree(
        shape=(height, width),
        parent=parent,
        pixel_node=pixel_node,
        nodes=nodes,
        node_parent=node_parent,
        level=values[nodes].astype(np.float64),
        area=np.rint(acc[:, 0]).astype(np.int64),
        sum_x=acc[:, 1:3].copy(),
        sum_xx=acc[:, 3:6].copy(),
    )


def region_moments(tree: ComponentTree) -> Tuple[np.ndarray, np.ndarray]:
    """Centroids (n_nodes, 2) and covariances (n_nodes, 2, 2) of every node"""
    area = tree.area.astype(np.float64)
    mu = tree.sum_x / area[:, None]
    second = tree.sum_xx / area[:, None]
    sigma = np.empty((tree.n_nodes, 2, 2))
    sigma[:, 0, 0] = second[:, 0] - mu[:, 0] * mu[:, 0]
    sigma[:, 0, 1] = second[:, 1] - mu[:, 0] * mu[:, 1]
    sigma[:, 1, 0] = sigma[:, 0, 1]
    sigma[:, 1, 1] = second[:, 2] - mu[:, 1] * mu[:, 1]
    return mu, sigma


def stability_terms(tree: ComponentTree, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    if delta <= 0:
        raise ParameterError(f"delta must be > 0, got {delta}")
    return _stability_terms(tree.node_parent, tree.level, tree.area, float(delta))


def stability(tree: ComponentTree, delta: float) -> np.ndarray:
    """Per-node area variation across the window [g - delta, g + delta]"""
    dimmer, brighter = stability_terms(tree, delta)
    psi = (dimmer - brighter) / tree.area.astype(np.float64)
    return np.maximum(psi, 0.0)


@njit(cache=True, nogil=True)
def _propagate_owner(slot, node_parent):
    """Nearest selected ancestor-or-self of every node, parents come first"""
    owner = slot.copy()
    for node in range(1, node_parent.size):
        if owner[node] < 0:
            owner[node] = owner[node_parent[node]]
    return owner


def _region_pixels(tree: ComponentTree, nodes: Sequence[int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Member pixel coordinates for each node, in one pass over the tree"""
    if not nodes:
        return []
    selected = np.asarray(nodes, dtype=np.int64)
    slot = np.full(tree.n_nodes, -1, dtype=np.int64)
    slot[selected] = np.arange(selected.size)
    owner = _propagate_owner(slot, tree.node_parent)
    # each selected node also owns what its nearest selected descendants own
    enclosing = np.where(selected != 0, owner[tree.node_parent[selected]], -1)
    pixel_owner = owner[tree.pixel_node]
    width = tree.shape[1]
    owned = np.flatnonzero(pixel_owner >= 0)
    order = np.argsort(pixel_owner[owned], kind="stable")
    grouped = owned[order]
    bounds = np.searchsorted(pixel_owner[grouped], np.arange(selected.size + 1))
    direct = [grouped[bounds[k]:bounds[k + 1]] for k in range(selected.size)]
    collected = [list([d]) for d in direct]
    for k in range(len(nodes)):
        outer = enclosing[k]
        while outer >= 0:
            collected[outer].append(direct[k])
            outer = enclosing[outer]
    out = []
    for parts in collected:
        flat = np.sort(np.concatenate(parts))
        out.append((flat // width, flat % width))
    return out


def _make_regions(tree: ComponentTree, nodes: Sequence[int], psi: np.ndarray) -> List[ExtremalRegion]:
    mu, sigma = region_moments(tree)
    pixels = _region_pixels(tree, list(nodes))
    regions = []
    for node, (rows, cols) in zip(nodes, pixels):
        regions.append(ExtremalRegion(
            node=int(node),
            level=float(tree.level[node]),
            area=int(tree.area[node]),
            stability=float(psi[node]),
            centroid=(float(mu[node, 0]), float(mu[node, 1])),
            second_moment=sigma[node].copy(),
            rows=rows,
            cols=cols,
        ))
    return regions


def extract_mser(tree: ComponentTree, delta: float, g_min: float, max_variation: float,
                 min_area: int = 1, max_area: Optional[int] = None,
                 psi: Optional[np.ndarray] = None) -> List[ExtremalRegion]:
    """
    Select nodes whose stability is a local minimum along the tree.

    Args:
        tree: max-tree of the image
        delta: threshold window in gray levels
        g_min: darkest admissible node level in gray levels
        max_variation: largest admissible stability value
        min_area, max_area: admissible region sizes (px)
        psi: precomputed stability values

    Returns:
        selected regions ordered by node index
    """
    if psi is None:
        psi = stability(tree, delta)
    n_nodes = tree.n_nodes
    if n_nodes < 2:
        return []
    parent_psi = psi[tree.node_parent]
    min_child = np.full(n_nodes, np.inf)
    np.minimum.at(min_child, tree.node_parent[1:], psi[1:])
    upper = np.inf if max_area is None else max_area
    selected = (
        (psi <= parent_psi)
        & (psi < min_child)
        & (psi <= max_variation)
        & (tree.level >= g_min)
        & (tree.area >= min_area)
        & (tree.area <= upper)
    )
    selected[0] = False
    nodes = np.flatnonzero(selected)
    logger.debug("%d stable regions out of %d nodes", nodes.size, n_nodes)
    return _make_regions(tree, nodes.tolist(), psi)


def dedup_regions(regions: Sequence[ExtremalRegion], tree: ComponentTree, similarity_tol: float,
                  delta: float, max_variation: float = np.inf) -> List[ExtremalRegion]:
    """
    Remove nested regions that repeat their nearest selected ancestor.

    A region and the nearest surviving selected region containing it are
    duplicates when their levels differ by at most delta and their areas by at
    most similarity_tol relative to the outer area. The one with the larger
    stability value is dropped; ties keep the brighter region.
    """
    kept = {r.node: r for r in regions if r.stability <= max_variation}
    for region in sorted(kept.values(), key=lambda r: (-r.level, r.node)):
        if region.node not in kept:
            continue
        outer_node = int(tree.node_parent[region.node])
        while outer_node != 0 and outer_node not in kept:
            outer_node = int(tree.node_parent[outer_node])
        outer = kept.get(outer_node)
        if outer is None:
            continue
        close_levels = region.level - outer.level <= delta
        similar = abs(region.area - outer.area) / outer.area <= similarity_tol
        if close_levels and similar:
            if outer.stability >= region.stability:
                del kept[outer.node]
            else:
                del kept[region.node]
    return [kept[node] for node in sorted(kept)]


def regions_to_mask(regions: Sequence[ExtremalRegion], dims: Tuple[int, int]) -> Mask:
    """Union of region pixels; dims is (height, width)"""
    bits = np.zeros(dims, dtype=bool)
    for region in regions:
        if region.rows.size == 0:
            continue
        if (region.rows.min() < 0 or region.cols.min() < 0
                or region.rows.max() >= dims[0] or region.cols.max() >= dims[1]):
            raise ConsistencyError(f"region at node {region.node} has pixels outside {dims}")
        bits[region.rows, region.cols] = True
    return Mask(bits)


def dump_tree(tree: ComponentTree, psi: np.ndarray, path: str) -> None:
    mu, _ = region_moments(tree)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["node", "parent", "level", "area", "psi", "mu_row", "mu_col"])
        for node in range(tree.n_nodes):
            writer.writerow([node, int(tree.node_parent[node]), int(tree.level[node]),
                             int(tree.area[node]), f"{psi[node]:.6g}",
                             f"{mu[node, 0]:.6g}", f"{mu[node, 1]:.6g}"])
