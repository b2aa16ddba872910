"""Patch-level lane-marking classification.

Square patches are cut on a regular grid inside the road surface; a patch is
positive when any marking pixel falls inside it. Patches are described by raw
pixels, HOG or LBP features and classified with a random forest of
Gini-split decision trees. Running the forest over a grid of patch centres
gives the marking probability map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import geo
from .tiles import Raster, to_grayscale

PATCH_SIZES = (8, 12, 16, 24)
FEATURE_KINDS = ("pixel", "hog", "lbp")
CLASSIFIERS = ("random_forest", "svm", "ann", "cnn")
MODEL_VERSION = 1


@dataclass
class PatchSample:
    size: int
    pixels: np.ndarray
    center: geo.TilePixel
    label: bool | None = None


@dataclass
class FeatureVector:
    kind: str
    values: np.ndarray


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    n_bins: int = 64
    max_features: str | int = "sqrt"
    neg_ratio: float = 3.0
    seed: int = 0
    classifier: str = "random_forest"

    def __post_init__(self):
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.classifier != "random_forest":
            raise NotImplementedError(f"{self.classifier} is reserved but not implemented")
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("forest hyperparameters must be positive")


# -- patches --------------------------------------------------------------------


def grid_offsets(extent: int, size: int, stride: int) -> np.ndarray:
    """Top-left offsets of the patches that fit inside ``extent`` pixels."""
    if size > extent:
        raise ValueError(f"patch size {size} exceeds raster extent {extent}")
    return np.arange(0, extent - size + 1, stride)


def _box_any(mask: np.ndarray, size: int) -> np.ndarray:
    """``out[r, c]`` is True when ``mask[r:r+size, c:c+size]`` has a set pixel."""
    ii = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    tot = ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]
    return tot > 0


def patch_grid(gray: np.ndarray, surface_mask: np.ndarray, size: int, stride: int,
               marking_mask: np.ndarray | None = None):
    """Patches on the stride grid whose centre pixel lies in the surface.

    Returns ``(patches, rows, cols, labels)`` where ``rows``/``cols`` are the
    top-left offsets and ``labels`` is None without a marking mask.
    """
    if gray.shape != surface_mask.shape or (marking_mask is not None and marking_mask.shape != gray.shape):
        raise ValueError("masks must have the raster's dimensions")
    r0 = grid_offsets(gray.shape[0], size, stride)
    c0 = grid_offsets(gray.shape[1], size, stride)
    rr, cc = np.meshgrid(r0, c0, indexing="ij")
    keep = surface_mask[rr + size // 2, cc + size // 2]
    rows, cols = rr[keep], cc[keep]
    windows = sliding_window_view(gray, (size, size))
    patches = windows[rows, cols]
    labels = None
    if marking_mask is not None:
        labels = _box_any(marking_mask, size)[rows, cols]
    return patches, rows, cols, labels


def extract_patches(tile: Raster, surface_mask, marking_mask, size: int = 12, stride: int = 4) -> list[PatchSample]:
    gray = to_grayscale(tile).pixels
    patches, rows, cols, labels = patch_grid(gray, np.asarray(surface_mask, bool), size, stride,
                                             None if marking_mask is None else np.asarray(marking_mask, bool))
    ox, oy = tile.origin_px if tile.georef else (0, 0)
    level = tile.georef[2] if tile.georef else geo.MAX_LEVEL
    out = []
    for i in range(len(rows)):
        center = geo.TilePixel(level, ox + cols[i] + size / 2, oy + rows[i] + size / 2)
        out.append(PatchSample(size, np.array(patches[i]), center, None if labels is None else bool(labels[i])))
    return out


# -- features ------------------------------------------------------------------------

_LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def feature_length(kind: str, size: int) -> int:
    if kind == "pixel":
        return size * size
    if kind == "hog":
        cells = size // 4
        blocks = max(cells - 1, 1)
        return blocks * blocks * 4 * 9 if cells >= 2 else 9
    if kind == "lbp":
        return 256
    raise ValueError(f"unknown feature kind {kind!r}")


def lbp_histograms(patches: np.ndarray) -> np.ndarray:
    """256-bin normalised histograms of 3x3 local binary patterns.

    Bit ``i`` is set when neighbour ``i`` (clockwise from the top-left) is
    greater than or equal to the centre, so flat areas code as 255.
    """
    p = np.asarray(patches, dtype=np.int16)
    n, h, w = p.shape
    centre = p[:, 1:-1, 1:-1]
    code = np.zeros(centre.shape, dtype=np.int64)
    for bit, (dr, dc) in enumerate(_LBP_OFFSETS):
        nb = p[:, 1 + dr : h - 1 + dr, 1 + dc : w - 1 + dc]
        code |= (nb >= centre).astype(np.int64) << bit
    flat = (code.reshape(n, -1) + 256 * np.arange(n)[:, None]).ravel()
    hist = np.bincount(flat, minlength=256 * n).reshape(n, 256).astype(float)
    return hist / hist.sum(axis=1, keepdims=True)


def hog_features(patches: np.ndarray) -> np.ndarray:
    from skimage.feature import hog

    out = []
    for p in patches:
        size = p.shape[0]
        cells = size // 4
        block = 2 if cells >= 2 else 1
        v = hog(
            p.astype(float),
            orientations=9,
            pixels_per_cell=(4, 4),
            cells_per_block=(block, block),
            block_norm="L2-Hys",
            feature_vector=True,
        )
        out.append(np.nan_to_num(v))
    return np.asarray(out, dtype=float)


def features_batch(patches: np.ndarray, kind: str) -> np.ndarray:
    patches = np.asarray(patches)
    if kind == "pixel":
        return patches.reshape(len(patches), -1).astype(np.float32) / 255.0
    if kind == "hog":
        return hog_features(patches)
    if kind == "lbp":
        return lbp_histograms(patches)
    raise ValueError(f"unknown feature kind {kind!r}")


def compute_features(p: PatchSample, kind: str = "pixel") -> FeatureVector:
    return FeatureVector(kind, features_batch(p.pixels[None], kind)[0])


# -- forest -------------------------------------------------------------------------


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # P(positive) at each node

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            go_left = X[rows[active], f[active]] <= self.threshold[node[active]]
            nxt = np.where(go_left, self.left[node[active]], self.right[node[active]])
            node[active] = nxt

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(v) for v in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=float),
        )


@dataclass
class ForestModel:
    trees: list[Tree]
    n_features: int
    feature_kind: str = "pixel"
    patch_size: int = 12
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        doc = {
            "version": MODEL_VERSION,
            "feature_kind": self.feature_kind,
            "patch_size": self.patch_size,
            "n_features": self.n_features,
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "meta": self.meta,
            "trees": [t.to_dict() for t in self.trees],
        }
        Path(path).write_text(json.dumps(doc, separators=(",", ":")))

    @classmethod
    def load(cls, path) -> ForestModel:
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        return cls(
            [Tree.from_dict(t) for t in doc["trees"]],
            int(doc["n_features"]),
            doc["feature_kind"],
            int(doc["patch_size"]),
            int(doc["n_trees"]),
            int(doc["max_depth"]),
            int(doc["min_leaf"]),
            doc.get("meta", {}),
        )


def _bin_edges(X: np.ndarray, n_bins: int) -> list[np.ndarray]:
    qs = np.linspace(0, 1, n_bins + 1)[1:-1]
    edges = []
    for j in range(X.shape[1]):
        e = np.unique(np.quantile(X[:, j], qs))
        edges.append(e)
    return edges


def _grow_tree(Xb: np.ndarray, y: np.ndarray, edges, n_bins: int, cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    n, d = Xb.shape
    m = max(1, int(math.sqrt(d))) if cfg.max_features == "sqrt" else min(d, int(cfg.max_features))
    idx = rng.integers(0, n, size=n)  # bootstrap
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, idx, 0)]
    offsets = np.arange(m) * n_bins
    while stack:
        node, ids, depth = stack.pop()
        yy = y[ids]
        npos = int(yy.sum())
        cnt = len(ids)
        value[node] = npos / cnt
        if depth >= cfg.max_depth or npos == 0 or npos == cnt or cnt < 2 * cfg.min_leaf:
            continue
        feats = rng.choice(d, size=m, replace=False)
        codes = (Xb[np.ix_(ids, feats)] + offsets).ravel()
        tot = np.bincount(codes, minlength=m * n_bins).reshape(m, n_bins)
        pos = np.bincount(codes, weights=np.repeat(yy, m).astype(float), minlength=m * n_bins).reshape(m, n_bins)
        nl = np.cumsum(tot, axis=1)[:, :-1].astype(float)
        pl = np.cumsum(pos, axis=1)[:, :-1]
        nr = cnt - nl
        pr = npos - pl
        ok = (nl >= cfg.min_leaf) & (nr >= cfg.min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            gini = 2 * pl * (1 - pl / nl) + 2 * pr * (1 - pr / nr)
        gini = np.where(ok, gini, np.inf)
        best = int(np.argmin(gini))
        j, b = divmod(best, n_bins - 1)
        parent = 2 * npos * (1 - npos / cnt)
        if not np.isfinite(gini[j, b]) or gini[j, b] >= parent - 1e-12:
            continue
        f = int(feats[j])
        if b >= len(edges[f]):
            continue
        go_left = Xb[ids, f] <= b
        li, ri = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, float(edges[f][b]), li, ri
        stack.append((ri, ids[~go_left], depth + 1))
        stack.append((li, ids[go_left], depth + 1))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=float),
    )


def train_forest(X, y, cfg: ForestConfig | None = None, feature_kind: str = "pixel", patch_size: int = 12) -> ForestModel:
    """Bootstrap-aggregated Gini trees on a random sqrt(d) feature subset per split.

    Candidate thresholds are the training-set quantiles of each feature
    (``cfg.n_bins`` of them), which keeps split search linear in the node size.
    """
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y).astype(bool)
    if len(X) < 2:
        raise ValueError("need at least two samples")
    if y.all() or not y.any():
        raise ValueError("training data must contain both classes")
    edges = _bin_edges(X, cfg.n_bins)
    nb = cfg.n_bins
    Xb = np.empty(X.shape, dtype=np.int64)
    for j, e in enumerate(edges):
        Xb[:, j] = np.searchsorted(e, X[:, j], side="left")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    yi = y.astype(np.int64)
    trees = [_grow_tree(Xb, yi, edges, nb, cfg, np.random.default_rng(s)) for s in seeds]
    return ForestModel(trees, X.shape[1], feature_kind, patch_size, cfg.n_trees, cfg.max_depth, cfg.min_leaf)


def predict_proba_batch(m: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != m.n_features:
        raise ValueError(f"feature dimension {X.shape[1]} does not match model ({m.n_features})")
    acc = np.zeros(len(X))
    for t in m.trees:
        acc += t.predict(X)
    return acc / len(m.trees)


def predict_proba(m: ForestModel, f) -> float:
    if isinstance(f, FeatureVector):
        if f.kind != m.feature_kind:
            raise ValueError(f"feature kind {f.kind} does not match model ({m.feature_kind})")
        f = f.values
    return float(predict_proba_batch(m, np.asarray(f)[None])[0])


def balance(X, y, neg_ratio: float, rng: np.random.Generator):
    """Keep every positive and at most ``neg_ratio`` times as many negatives."""
    y = np.asarray(y, dtype=bool)
    pos = np.flatnonzero(y)
    neg = np.flatnonzero(~y)
    limit = int(round(neg_ratio * len(pos)))
    if len(neg) > limit:
        neg = np.sort(rng.choice(neg, size=limit, replace=False))
    keep = np.sort(np.concatenate([pos, neg]))
    return np.asarray(X)[keep], y[keep]


def stratified_folds(y, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold index per sample; per-class and total fold sizes differ by at most one."""
    y = np.asarray(y, dtype=bool)
    fold = np.empty(len(y), dtype=np.int64)
    start = 0
    for cls in (True, False):
        members = rng.permutation(np.flatnonzero(y == cls))
        fold[members] = (start + np.arange(len(members))) % k
        start += len(members)
    return fold


@dataclass
class CVResult:
    precision: float
    recall: float
    folds: np.ndarray
    proba: np.ndarray
    tp: int
    fp: int
    fn: int


def cross_validate(X, y, cfg: ForestConfig | None = None, k: int = 10, threshold: float = 0.5) -> CVResult:
    """Pooled precision and recall of k-fold stratified cross validation."""
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=bool)
    if min(y.sum(), (~y).sum()) < k:
        raise ValueError(f"need at least {k} samples of each class for {k}-fold cross validation")
    folds = stratified_folds(y, k, np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    proba = np.full(len(y), np.nan)
    for f in range(k):
        test = folds == f
        sub = ForestConfig(**{**cfg.__dict__, "seed": cfg.seed + 1000 * (f + 1)})
        model = train_forest(X[~test], y[~test], sub)
        proba[test] = predict_proba_batch(model, X[test])
    pred = proba >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = tp / (tp + fp) if tp + fp else float("nan")
    recall = tp / (tp + fn) if tp + fn else float("nan")
    return CVResult(precision, recall, folds, proba, tp, fp, fn)


# -- probability map --------------------------------------------------------------------


@dataclass
class ProbabilityMap:
    """Classifier output on a regular grid of patch centres.

    Cell ``[i, j]`` is centred at global pixel ``(x0 + j*stride, y0 + i*stride)``.
    """

    values: np.ndarray
    x0: float
    y0: float
    stride: int
    level: int
    patch_size: int = 12

    def centers(self, rows, cols) -> np.ndarray:
        return np.stack([self.x0 + np.asarray(cols) * self.stride, self.y0 + np.asarray(rows) * self.stride], axis=-1)


def predict_map(tile: Raster, surface_mask, m: ForestModel, stride: int = 4) -> ProbabilityMap:
    """Probability at each stride-grid centre inside the surface, 0 elsewhere."""
    gray = to_grayscale(tile).pixels
    surface_mask = np.asarray(surface_mask, dtype=bool)
    size = m.patch_size
    r0 = grid_offsets(gray.shape[0], size, stride)
    c0 = grid_offsets(gray.shape[1], size, stride)
    values = np.zeros((len(r0), len(c0)))
    patches, rows, cols, _ = patch_grid(gray, surface_mask, size, stride)
    if len(rows):
        values[rows // stride, cols // stride] = predict_proba_batch(m, features_batch(patches, m.feature_kind))
    ox, oy = tile.origin_px if tile.georef else (0, 0)
    level = tile.georef[2] if tile.georef else geo.MAX_LEVEL
    return ProbabilityMap(values, ox + size / 2, oy + size / 2, stride, level, size)
