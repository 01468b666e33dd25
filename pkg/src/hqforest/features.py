"""Patch features, squared-feature expansion, normalisation and per-tree subsets.

Default schema (``hq-default-v1``), in index order, for ``C`` channels:

1. per channel: patch median; mean, variance, min and max of the 27 cell
   medians; x/y/z contrasts (median of the far cell plane minus the near one)
2. per channel pair ``a < b``: ``med_a / (med_a + med_b + 1e-9)`` and
   ``med_a - med_b``
3. per channel: mean and variance of the neighbours' patch medians and the
   patch-minus-neighbourhood contrast
4. per ordered pair ``a != b``: own median of ``a`` minus the neighbours'
   mean median of ``b``

A patch without neighbours falls back to its own median for the
neighbourhood mean (variance 0). Layer-0 features are the raw intensities.
"""
import itertools
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import NoCells, TooManyTrees
from .pyramid import CELL_OFFSETS, LabeledVolume, PyramidLayer

SCHEMA_ID = "hq-default-v1"
RATIO_EPS = 1e-9
STD_FLOOR = 1e-12
_LOCAL_INTRA = ("median", "cell_mean", "cell_var", "cell_min", "cell_max",
                "contrast_x", "contrast_y", "contrast_z")
_CONTEXT_INTRA = ("nb_mean", "nb_var", "nb_contrast")


@dataclass(frozen=True)
class FeatureDef:
    name: str
    channels: tuple
    locality: str
    kind: str


@dataclass(frozen=True)
class FeatureSchema:
    schema_id: str
    n_chan: int
    features: tuple

    @property
    def n_tot(self):
        return len(self.features)

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]


def default_schema(n_chan) -> FeatureSchema:
    defs = []
    for c in range(n_chan):
        for k in _LOCAL_INTRA:
            defs.append(FeatureDef(f"ch{c}.{k}", (c,), "local", k))
    for a, b in itertools.combinations(range(n_chan), 2):
        defs.append(FeatureDef(f"ch{a}/ch{b}.ratio", (a, b), "local", "ratio"))
        defs.append(FeatureDef(f"ch{a}-ch{b}.diff", (a, b), "local", "diff"))
    for c in range(n_chan):
        for k in _CONTEXT_INTRA:
            defs.append(FeatureDef(f"ch{c}.{k}", (c,), "contextual", k))
    for a, b in itertools.permutations(range(n_chan), 2):
        defs.append(FeatureDef(f"ch{a}-nb.ch{b}.cross", (a, b), "contextual", "cross"))
    return FeatureSchema(SCHEMA_ID, n_chan, tuple(defs))


def voxel_schema(n_chan) -> FeatureSchema:
    defs = tuple(FeatureDef(f"ch{c}.intensity", (c,), "local", "intensity")
                 for c in range(n_chan))
    return FeatureSchema("hq-voxel-v1", n_chan, defs)


def _features_from_parts(med, cells, nb_meds):
    """Assemble schema rows from patch medians ``(n, C)``, cell medians
    ``(n, C, 27)`` and neighbour medians ``(n, C, 26)`` (NaN where absent)."""
    n, n_chan = med.shape
    cols = []
    for c in range(n_chan):
        cm = cells[:, c, :]
        grid = cm.reshape(n, 3, 3, 3)  # axes (z, y, x) of the cell stencil
        cx = np.median(grid[:, :, :, 2].reshape(n, 9), axis=1) - np.median(
            grid[:, :, :, 0].reshape(n, 9), axis=1)
        cy = np.median(grid[:, :, 2, :].reshape(n, 9), axis=1) - np.median(
            grid[:, :, 0, :].reshape(n, 9), axis=1)
        cz = np.median(grid[:, 2].reshape(n, 9), axis=1) - np.median(
            grid[:, 0].reshape(n, 9), axis=1)
        cols += [med[:, c], cm.mean(axis=1), cm.var(axis=1), cm.min(axis=1),
                 cm.max(axis=1), cx, cy, cz]
    for a, b in itertools.combinations(range(n_chan), 2):
        cols.append(med[:, a] / (med[:, a] + med[:, b] + RATIO_EPS))
        cols.append(med[:, a] - med[:, b])
    # Sorting makes the neighbourhood statistics independent of neighbour order.
    vals = np.ascontiguousarray(np.sort(nb_meds, axis=2))
    count = np.sum(~np.isnan(vals), axis=2)
    safe = np.maximum(count, 1)
    nb_mean = np.where(count > 0, np.nansum(vals, axis=2) / safe, med)
    dev = np.where(np.isnan(vals), 0.0, vals - nb_mean[:, :, None])
    nb_var = np.where(count > 0, np.sum(dev * dev, axis=2) / safe, 0.0)
    for c in range(n_chan):
        cols += [nb_mean[:, c], nb_var[:, c], med[:, c] - nb_mean[:, c]]
    for a, b in itertools.permutations(range(n_chan), 2):
        cols.append(med[:, a] - nb_mean[:, b])
    return np.stack(cols, axis=1)


def _block_medians(grid, sx, sy, sz, size, max_elems=1 << 22):
    """Medians of the ``size``-cubes starting at every ``(sx, sy, sz)`` combination."""
    sx, sy, sz = (np.asarray(s, dtype=np.int64) for s in (sx, sy, sz))
    out = np.empty((sx.size, sy.size, sz.size))
    ar = np.arange(size)
    cube = size ** 3
    step = max(1, max_elems // max(1, cube * sz.size))
    zi = (sz[:, None] + ar[None, :]).ravel()
    for i, x0 in enumerate(sx):
        slab = grid[x0:x0 + size][:, :, zi]  # (size, Y, nz*size)
        for j0 in range(0, sy.size, step):
            ys = sy[j0:j0 + step]
            yi = (ys[:, None] + ar[None, :]).ravel()
            blk = slab[:, yi, :].reshape(size, ys.size, size, sz.size, size)
            blk = blk.transpose(1, 3, 0, 2, 4).reshape(ys.size, sz.size, cube)
            out[i, j0:j0 + ys.size] = np.median(blk, axis=2)
    return out


def _cell_medians_layer(volume: LabeledVolume, layer: PyramidLayer):
    cs = layer.side // 3
    starts = [np.arange(n) * layer.stride for n in layer.lattice]
    cell_starts = [np.unique((s[:, None] + cs * np.arange(3)[None, :]).ravel())
                   for s in starts]
    coords = layer.lattice_coords
    idx = []
    for a in range(3):
        o = starts[a][coords[:, a]][:, None] + cs * CELL_OFFSETS[None, :, a]
        idx.append(np.searchsorted(cell_starts[a], o))
    n = layer.n_patches
    cells = np.empty((n, volume.n_chan, 27))
    meds = np.empty((n, volume.n_chan))
    for c in range(volume.n_chan):
        ch = np.asarray(volume.channels[c], dtype=np.float64)
        cm = _block_medians(ch, *cell_starts, cs)
        cells[:, c, :] = cm[idx[0], idx[1], idx[2]]
        pm = _block_medians(ch, *starts, layer.side)
        meds[:, c] = pm[coords[:, 0], coords[:, 1], coords[:, 2]]
    return meds, cells


def layer_features(volume: LabeledVolume, layer: PyramidLayer) -> np.ndarray:
    """Basic feature matrix ``(n_patches, n_tot)`` for every patch of a layer."""
    if layer.r == 0:
        return voxel_features(volume)
    meds, cells = _cell_medians_layer(volume, layer)
    nb = layer.neighbors
    nb_meds = np.where((nb >= 0)[:, None, :], meds[np.maximum(nb, 0)].transpose(0, 2, 1),
                       np.nan)
    return _features_from_parts(meds, cells, nb_meds)


def voxel_features(volume: LabeledVolume) -> np.ndarray:
    """Per-voxel intensities in x-fastest voxel order."""
    ch = volume.channels
    return np.stack([np.asarray(ch[c], dtype=np.float64).ravel(order="F")
                     for c in range(volume.n_chan)], axis=1)


def extract_features(volume: LabeledVolume, layer: PyramidLayer, j) -> np.ndarray:
    """Feature vector of one patch, computed directly from its voxels."""
    if layer.r == 0:
        x, y, z = layer.lattice_coords[j]
        return np.asarray(volume.channels[:, x, y, z], dtype=np.float64)
    if layer.side % 3:
        raise NoCells(f"side {layer.side} is not divisible into 3x3x3 cells")
    s, cs = layer.side, layer.side // 3

    def median_at(c, o, size):
        x, y, z = o
        block = volume.channels[c, x:x + size, y:y + size, z:z + size]
        return float(np.median(np.asarray(block, dtype=np.float64)))

    o = layer.origins[j]
    n_chan = volume.n_chan
    med = np.array([[median_at(c, o, s) for c in range(n_chan)]])
    cells = np.array([[[median_at(c, o + off * cs, cs) for off in CELL_OFFSETS]
                       for c in range(n_chan)]])
    nb_meds = np.full((1, n_chan, 26), np.nan)
    for k, nid in enumerate(layer.neighbors[j]):
        if nid >= 0:
            for c in range(n_chan):
                nb_meds[0, c, k] = median_at(c, layer.origins[nid], s)
    return _features_from_parts(med, cells, nb_meds)[0]


def n_squared(n_sel):
    return 2 * n_sel + n_sel * (n_sel - 1) // 2


def squared_terms(n_sel) -> np.ndarray:
    """``(n_feat, 2)`` factor pairs: ``(i, -1)`` linear, ``(i, j)`` product, ``(i, i)`` square."""
    lin = [(i, -1) for i in range(n_sel)]
    prod = list(itertools.combinations(range(n_sel), 2))
    sq = [(i, i) for i in range(n_sel)]
    return np.array(lin + prod + sq, dtype=np.int64).reshape(-1, 2)


def square_features(selected) -> np.ndarray:
    """``[originals; pairwise products (i < j, lexicographic); squares]`` along the last axis."""
    x = np.asarray(selected, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("need at least one selected feature")
    return evaluate_terms(x, squared_terms(x.shape[-1]))


def evaluate_terms(x, terms) -> np.ndarray:
    """Evaluate squared-feature terms from :func:`squared_terms` on ``x[..., n_sel]``."""
    x = np.asarray(x, dtype=np.float64)
    terms = np.asarray(terms, dtype=np.int64).reshape(-1, 2)
    left = x[..., terms[:, 0]]
    right = np.where(terms[:, 1] >= 0, x[..., np.maximum(terms[:, 1], 0)], 1.0)
    return left * right


def global_squared_index(i, j, n_tot):
    """Index of a term in the expansion of the full basic feature vector."""
    if j < 0:
        return int(i)
    if i == j:
        return int(n_tot + n_tot * (n_tot - 1) // 2 + i)
    a, b = min(i, j), max(i, j)
    return int(n_tot + a * n_tot - a * (a + 1) // 2 + (b - a - 1))


def global_term(index, n_tot):
    """Inverse of :func:`global_squared_index`."""
    n_pairs = n_tot * (n_tot - 1) // 2
    if index < n_tot:
        return int(index), -1
    if index >= n_tot + n_pairs:
        i = int(index - n_tot - n_pairs)
        if i >= n_tot:
            raise IndexError(f"squared index {index} out of range")
        return i, i
    rank = index - n_tot
    a = 0
    while rank >= n_tot - 1 - a:
        rank -= n_tot - 1 - a
        a += 1
    return a, int(a + 1 + rank)


def squared_feature_name(index, names):
    i, j = global_term(index, len(names))
    if j < 0:
        return names[i]
    if i == j:
        return f"{names[i]}^2"
    return f"{names[i]}*{names[j]}"


def fit_normalizer(vectors):
    """Column means and population standard deviations (floored at 1e-12)."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.shape[0] < 2:
        raise ValueError("need at least two vectors to fit a normaliser")
    means = x.mean(axis=0)
    stds = np.maximum(x.std(axis=0), STD_FLOOR)
    return means, stds


def apply_normalizer(vectors, means, stds):
    return (np.asarray(vectors, dtype=np.float64) - means) / stds


def features_per_tree(n_tot):
    """``n_sel = floor(sqrt(n_tot))``; the forest has as many trees."""
    if n_tot < 1:
        raise ValueError("n_tot must be positive")
    return int(np.floor(np.sqrt(n_tot)))


def tree_feature_sets(n_tot, seed, n_weak=None) -> List[List[int]]:
    """Disjoint sorted 0-based index blocks from one seeded permutation."""
    n_sel = features_per_tree(n_tot)
    n_weak = n_sel if n_weak is None else n_weak
    if n_weak * n_sel > n_tot:
        raise TooManyTrees(f"{n_weak} disjoint sets of {n_sel} exceed {n_tot} features")
    perm = np.random.default_rng(seed).permutation(n_tot)
    return [sorted(int(v) for v in perm[w * n_sel:(w + 1) * n_sel]) for w in range(n_weak)]


def select_tree_features(n_tot, w, seed, n_weak=None) -> List[int]:
    """Feature block of tree ``w`` (1-based). Equal seeds give disjoint blocks across ``w``."""
    sets = tree_feature_sets(n_tot, seed, n_weak)
    if not 1 <= w <= len(sets):
        raise TooManyTrees(f"tree index {w} outside 1..{len(sets)}")
    return sets[w - 1]
