"""On-the-fly random forest that relabels pixels of one blade group from color.

One forest is fitted per blade surface, using the images of that surface as
input and their hole-filled masks as (noisy) supervision. Features are the
normalized RGB channels of a pixel and its eight immediate neighbors
(replicate-padded at borders), 27 values in total. The forest is small by
design: it should capture the dominant color patterns and overrule isolated
mislabeled pixels, not memorize the supervision.

Everything is deterministic: the group subsample is drawn from the
configured seed, and tree t derives its own generator from ``seed XOR t``,
so trees can be grown in any order or in parallel without changing the
result bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .raster import (
    FORMAT_PGM_MASK,
    FORMAT_PPM,
    BinaryMask,
    RgbImage,
    load_raster,
)

__all__ = [
    "FEATURE_DIM",
    "NEIGHBOR_OFFSETS",
    "ForestConfig",
    "DecisionTree",
    "ForestModel",
    "GroupItem",
    "BladeGroup",
    "extract_features",
    "fit_forest",
    "fit_forest_data",
    "predict_mask",
    "predict_proba",
    "dump_model",
]

#: Neighbor offsets in row-major order around the center, center excluded.
NEIGHBOR_OFFSETS: tuple[tuple[int, int], ...] = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)

#: Center RGB plus eight neighbor RGBs, each channel divided by 255.
FEATURE_DIM = 3 * (1 + len(NEIGHBOR_OFFSETS))

# Split search evaluates at most this many thresholds per candidate feature,
# taken as evenly spaced quantiles of the midpoint sequence.
MAX_THRESHOLD_CANDIDATES = 32

# Pixels processed per prediction chunk; bounds transient feature memory.
_CHUNK_PIXELS = 1 << 17


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters; defaults follow the tuned pipeline settings."""

    n_trees: int = 5
    max_depth: int = 4
    features_per_split: int | None = None  # None -> ceil(sqrt(FEATURE_DIM))
    sample_cap: int = 200_000
    seed: int = 0
    vote_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.sample_cap < 1:
            raise ValueError("sample_cap must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")
        if not (0.0 <= self.vote_threshold <= 1.0):
            raise ValueError("vote_threshold must lie in [0, 1]")

    def resolved_features_per_split(self) -> int:
        if self.features_per_split is not None:
            return min(self.features_per_split, FEATURE_DIM)
        return math.ceil(math.sqrt(FEATURE_DIM))


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat array representation of a binary decision tree.

    ``feature[i] < 0`` marks node i as a leaf whose foreground fraction is
    ``value[i]``; internal nodes route samples with
    ``x[feature] < threshold`` to ``left`` and the rest to ``right``.
    Node 0 is the root.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        """Longest root-to-leaf path in edges."""
        depths = {0: 0}
        best = 0
        for i in range(self.n_nodes):
            d = depths[i]
            if self.feature[i] >= 0:
                depths[int(self.left[i])] = d + 1
                depths[int(self.right[i])] = d + 1
            else:
                best = max(best, d)
        return best

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Leaf foreground fraction for each row of the (n, FEATURE_DIM) matrix."""
        out = np.empty(len(x), dtype=np.float64)
        stack = [(0, np.arange(len(x)))]
        while stack:
            node, idx = stack.pop()
            if idx.size == 0:
                continue
            f = int(self.feature[node])
            if f < 0:
                out[idx] = self.value[node]
                continue
            goes_left = x[idx, f] < self.threshold[node]
            stack.append((int(self.left[node]), idx[goes_left]))
            stack.append((int(self.right[node]), idx[~goes_left]))
        return out


@dataclass(frozen=True, eq=False)
class ForestModel:
    """Fitted ensemble; prediction averages the trees' leaf fractions."""

    trees: tuple[DecisionTree, ...]
    config: ForestConfig
    blade_id: str


@dataclass(frozen=True)
class GroupItem:
    image_path: Path
    h1_mask_path: Path
    gt_path: Path | None = None


@dataclass(frozen=True)
class BladeGroup:
    """All images of one blade surface, the unit a forest is fitted on."""

    blade_id: str
    items: tuple[GroupItem, ...]

    def __post_init__(self) -> None:
        if len(self.items) < 1:
            raise ValueError(f"blade group {self.blade_id!r} has no items")
        object.__setattr__(self, "items", tuple(self.items))


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


def extract_features(img: RgbImage, h: int, w: int) -> np.ndarray:
    """27-vector for one pixel: center RGB then neighbor RGBs, over 255.

    Neighbors outside the image replicate the nearest valid pixel.
    """
    height, width = img.shape
    if not (0 <= h < height and 0 <= w < width):
        raise ValueError(f"pixel ({h}, {w}) outside {height}x{width} image")
    v = img.values
    out = np.empty(FEATURE_DIM, dtype=np.float64)
    out[0:3] = v[h, w]
    col = 3
    for dy, dx in NEIGHBOR_OFFSETS:
        hh = min(max(h + dy, 0), height - 1)
        ww = min(max(w + dx, 0), width - 1)
        out[col : col + 3] = v[hh, ww]
        col += 3
    out /= 255.0
    return out


def _pad_image(img: RgbImage) -> np.ndarray:
    return np.pad(img.values, ((1, 1), (1, 1), (0, 0)), mode="edge")


def _features_at(padded: np.ndarray, hs: np.ndarray, ws: np.ndarray) -> np.ndarray:
    """Feature rows for pixel coordinate arrays, via the edge-padded image."""
    out = np.empty((len(hs), FEATURE_DIM), dtype=np.float64)
    out[:, 0:3] = padded[hs + 1, ws + 1]
    col = 3
    for dy, dx in NEIGHBOR_OFFSETS:
        out[:, col : col + 3] = padded[hs + 1 + dy, ws + 1 + dx]
        col += 3
    out /= 255.0
    return out


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _quantile_cap(mids: np.ndarray) -> np.ndarray:
    if mids.size <= MAX_THRESHOLD_CANDIDATES:
        return mids
    pick = np.linspace(0, mids.size - 1, MAX_THRESHOLD_CANDIDATES)
    return mids[np.round(pick).astype(np.intp)]


def _best_split(
    x: np.ndarray, y: np.ndarray, idx: np.ndarray, features: np.ndarray
) -> tuple[int, float] | None:
    """Lowest-weighted-Gini (feature, threshold) over the candidate features.

    Thresholds are midpoints of the sorted unique values in the node, capped
    to evenly spaced quantiles. Returns None when no feature admits a split.
    """
    y_node = y[idx]
    n = idx.size
    pos_total = int(y_node.sum())
    best_score = np.inf
    best: tuple[int, float] | None = None
    for f in features:
        col = x[idx, f]
        uniq = np.unique(col)
        if uniq.size < 2:
            continue
        mids = _quantile_cap((uniq[:-1] + uniq[1:]) * 0.5)
        below = col[:, None] < mids[None, :]
        n_left = below.sum(axis=0)
        pos_left = (below & y_node[:, None]).sum(axis=0)
        n_right = n - n_left
        pos_right = pos_total - pos_left
        p_left = pos_left / n_left
        p_right = pos_right / n_right
        gini_left = 2.0 * p_left * (1.0 - p_left)
        gini_right = 2.0 * p_right * (1.0 - p_right)
        weighted = (n_left * gini_left + n_right * gini_right) / n
        j = int(np.argmin(weighted))
        if weighted[j] < best_score:
            best_score = float(weighted[j])
            best = (int(f), float(mids[j]))
    return best


class _TreeBuilder:
    def __init__(self, x: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator):
        self.x = x
        self.y = y
        self.cfg = cfg
        self.rng = rng
        self.k = cfg.resolved_features_per_split()
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def _add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(np.nan)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(np.nan)
        return len(self.feature) - 1

    def grow(self, idx: np.ndarray, depth: int) -> int:
        node = self._add_node()
        y_node = self.y[idx]
        pos = int(y_node.sum())
        n = idx.size
        if depth >= self.cfg.max_depth or n < 2 or pos == 0 or pos == n:
            self.value[node] = pos / n
            return node
        features = self.rng.choice(FEATURE_DIM, size=self.k, replace=False)
        split = _best_split(self.x, self.y, idx, features)
        if split is None:
            self.value[node] = pos / n
            return node
        f, thr = split
        goes_left = self.x[idx, f] < thr
        self.feature[node] = f
        self.threshold[node] = thr
        self.left[node] = self.grow(idx[goes_left], depth + 1)
        self.right[node] = self.grow(idx[~goes_left], depth + 1)
        return node

    def build(self) -> DecisionTree:
        n = len(self.y)
        boot = self.rng.integers(0, n, size=n)
        self.x = self.x[boot]
        self.y = self.y[boot]
        self.grow(np.arange(n), 0)
        return DecisionTree(
            feature=np.asarray(self.feature, dtype=np.int16),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            value=np.asarray(self.value, dtype=np.float64),
        )


def _subsample(
    pairs: Sequence[tuple[RgbImage, BinaryMask]], cfg: ForestConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic uniform pixel subsample over the concatenated group.

    Pixels are indexed item by item in the given order, row-major within each
    image; at most ``sample_cap`` of them are kept, drawn without replacement
    from the configured seed.
    """
    sizes = []
    for img, mask in pairs:
        if img.shape != mask.shape:
            raise ValueError(
                f"image {img.shape} and mask {mask.shape} dimensions differ"
            )
        sizes.append(img.height * img.width)
    total = sum(sizes)
    if total <= cfg.sample_cap:
        selected = np.arange(total, dtype=np.int64)
    else:
        rng = np.random.default_rng(cfg.seed)
        selected = rng.choice(total, size=cfg.sample_cap, replace=False)
        selected.sort()

    x = np.empty((selected.size, FEATURE_DIM), dtype=np.float64)
    y = np.empty(selected.size, dtype=bool)
    offset = 0
    for (img, mask), size in zip(pairs, sizes):
        lo = int(np.searchsorted(selected, offset))
        hi = int(np.searchsorted(selected, offset + size))
        if lo < hi:
            local = selected[lo:hi] - offset
            hs, ws = np.divmod(local, img.width)
            x[lo:hi] = _features_at(_pad_image(img), hs, ws)
            y[lo:hi] = mask.values[hs, ws]
        offset += size
    return x, y


def fit_forest_data(
    blade_id: str,
    pairs: Sequence[tuple[RgbImage, BinaryMask]],
    cfg: ForestConfig,
    workers: int = 1,
) -> ForestModel:
    """Fit a forest on in-memory (image, supervision mask) pairs.

    Tree t derives its generator from ``cfg.seed XOR t`` and draws a
    bootstrap resample of the group subsample, so the result is identical
    whether trees are grown sequentially or on ``workers`` threads.
    """
    if len(pairs) == 0:
        raise ValueError(f"blade group {blade_id!r} has no training images")
    x, y = _subsample(pairs, cfg)

    def build(tree_index: int) -> DecisionTree:
        rng = np.random.default_rng(cfg.seed ^ tree_index)
        return _TreeBuilder(x, y, cfg, rng).build()

    if workers <= 1:
        trees = [build(t) for t in range(cfg.n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(build, range(cfg.n_trees)))
    return ForestModel(tuple(trees), cfg, blade_id)


def fit_forest(group: BladeGroup, cfg: ForestConfig, workers: int = 1) -> ForestModel:
    """Load the group's images and masks from disk and fit a forest."""
    pairs = []
    for item in group.items:
        img = load_raster(item.image_path, FORMAT_PPM)
        mask = load_raster(item.h1_mask_path, FORMAT_PGM_MASK)
        pairs.append((img, mask))
    return fit_forest_data(group.blade_id, pairs, cfg, workers=workers)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict_proba(model: ForestModel, img: RgbImage) -> np.ndarray:
    """Mean leaf fraction per pixel as an (H, W) float64 array."""
    height, width = img.shape
    padded = _pad_image(img)
    out = np.empty((height, width), dtype=np.float64)
    rows_per_chunk = max(1, _CHUNK_PIXELS // width)
    for r0 in range(0, height, rows_per_chunk):
        r1 = min(height, r0 + rows_per_chunk)
        hs, ws = np.divmod(np.arange(r0 * width, r1 * width, dtype=np.int64), width)
        feats = _features_at(padded, hs, ws)
        acc = model.trees[0].predict_proba(feats)
        for tree in model.trees[1:]:
            acc = acc + tree.predict_proba(feats)
        out[r0:r1] = (acc / len(model.trees)).reshape(r1 - r0, width)
    return out


def predict_mask(model: ForestModel, img: RgbImage) -> BinaryMask:
    """Foreground wherever the ensemble mean reaches the vote threshold."""
    return BinaryMask(predict_proba(model, img) >= model.config.vote_threshold)


# ---------------------------------------------------------------------------
# Inspection dump
# ---------------------------------------------------------------------------


def _dump_node(tree: DecisionTree, node: int, indent: int) -> str:
    pad = "  " * indent
    f = int(tree.feature[node])
    if f < 0:
        return f"{pad}(leaf {tree.value[node]!r})"
    left = _dump_node(tree, int(tree.left[node]), indent + 1)
    right = _dump_node(tree, int(tree.right[node]), indent + 1)
    return f"{pad}(split f={f} thr={tree.threshold[node]!r}\n{left}\n{right})"


def dump_model(model: ForestModel) -> str:
    """Nested parenthesized text dump of the fitted trees.

    Grammar: ``forest := (forest blade=<id> trees=<n> tree*)``,
    ``tree := (tree <index> node)``, ``node := (leaf <fraction>) |
    (split f=<feature> thr=<threshold> node node)``. Thresholds and
    fractions use shortest round-trip float formatting.
    """
    parts = [
        f"(forest blade={model.blade_id} trees={len(model.trees)} "
        f"depth={model.config.max_depth} seed={model.config.seed}"
    ]
    for t, tree in enumerate(model.trees):
        parts.append(f"  (tree {t}\n{_dump_node(tree, 0, 2)})")
    return "\n".join(parts) + ")\n"
