"""Multiresolution cubic patch pyramid over a multichannel volume.

Layer ``r >= 1`` holds cubes of side ``3 * 2**(r-1)`` placed with
``100 * (1 - 2**(1-r))`` percent overlap per axis, i.e. a stride of
``side * 2**(1-r)`` voxels. Layer 0 is the voxel grid. Patches are indexed
x-fastest on their lattice, matching the MRV1 voxel order.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional

import numpy as np

from .errors import NoCells, VolumeTooSmall

NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if (dx, dy, dz) != (0, 0, 0)], dtype=np.int64)
OCTANTS = np.array([(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)],
                   dtype=np.int64)
CELL_OFFSETS = np.array([(a, b, c) for c in range(3) for b in range(3) for a in range(3)],
                        dtype=np.int64)


@dataclass
class LabeledVolume:
    """Channels shaped ``(n_chan, x, y, z)``; labels ``(x, y, z)`` in 1..n_clas."""

    channels: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim == 3:
            ch = ch[None]
        if ch.ndim != 4 or ch.shape[0] < 1:
            raise ValueError("channels must be shaped (n_chan, x, y, z)")
        self.channels = ch
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != ch.shape[1:]:
                raise ValueError("labels must share the channel grid dims")

    @property
    def dims(self):
        return tuple(int(d) for d in self.channels.shape[1:])

    @property
    def n_chan(self):
        return self.channels.shape[0]


def patch_side(r):
    return 1 if r == 0 else 3 * 2 ** (r - 1)


def overlap_fraction(r):
    return 0.0 if r == 0 else 1.0 - 2.0 ** (1 - r)


def patch_stride(r):
    if r == 0:
        return 1
    stride = patch_side(r) * 2.0 ** (1 - r)
    return int(round(stride))


@dataclass
class Patch:
    layer: int
    id: int
    origin: tuple
    side: int
    parent_id: Optional[int]
    child_ids: List[int]
    neighbor_ids: List[int]
    label_histogram: Optional[np.ndarray] = None
    ref_label: Optional[int] = None
    heterogeneity: Optional[int] = None


@dataclass
class PyramidLayer:
    r: int
    side: int
    stride: int
    lattice: tuple
    dims: tuple
    histograms: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_patches(self):
        return int(np.prod(self.lattice))

    @cached_property
    def lattice_coords(self):
        """``(n, 3)`` lattice coordinates in id order (x fastest)."""
        nx, ny, nz = self.lattice
        ids = np.arange(self.n_patches)
        return np.stack([ids % nx, (ids // nx) % ny, ids // (nx * ny)], axis=1)

    @property
    def origins(self):
        return self.lattice_coords * self.stride

    def ids_from_coords(self, coords):
        coords = np.asarray(coords, dtype=np.int64)
        nx, ny, _ = self.lattice
        return coords[..., 0] + nx * (coords[..., 1] + ny * coords[..., 2])

    @cached_property
    def neighbors(self):
        """``(n, 26)`` neighbour ids on the stride lattice, ``-1`` where absent."""
        coords = self.lattice_coords[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]
        lat = np.asarray(self.lattice)
        valid = np.all((coords >= 0) & (coords < lat), axis=2)
        ids = self.ids_from_coords(np.where(valid[..., None], coords, 0))
        return np.where(valid, ids, -1)

    @property
    def ref_labels(self):
        if self.histograms is None:
            return None
        return np.argmax(self.histograms, axis=1) + 1

    @property
    def heterogeneity(self):
        if self.histograms is None:
            return None
        return heterogeneity_from_histograms(self.histograms)


@dataclass
class Pyramid:
    dims: tuple
    n_lay: int
    layers: Dict[int, PyramidLayer]
    parents: Dict[int, np.ndarray] = field(repr=False, default_factory=dict)
    children: Dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    def layer(self, r):
        return self.layers[r]

    def patch(self, r, j) -> Patch:
        lay = self.layers[r]
        hist = None if lay.histograms is None else lay.histograms[j]
        return Patch(
            layer=r, id=int(j), origin=tuple(int(v) for v in lay.origins[j]), side=lay.side,
            parent_id=(None if r == self.n_lay or self.parents[r][j] < 0
                       else int(self.parents[r][j])),
            child_ids=[] if r < 2 else [int(c) for c in self.children[r][j]],
            neighbor_ids=[int(v) for v in lay.neighbors[j] if v >= 0],
            label_histogram=hist,
            ref_label=None if hist is None else int(np.argmax(hist) + 1),
            heterogeneity=None if hist is None else int(heterogeneity_from_histograms(hist[None])[0]),
        )


def _lattice_counts(dims, side, stride):
    return tuple((d - side) // stride + 1 for d in dims)


def _octant_children(upper: PyramidLayer, lower: PyramidLayer):
    half = lower.side
    origins = upper.origins[:, None, :] + OCTANTS[None, :, :] * half
    if np.any(origins % lower.stride):
        raise AssertionError("octant origins fall off the finer lattice")
    return lower.ids_from_coords(origins // lower.stride)


def _parent_axis(o, child_side, parent_side, parent_stride, dim):
    """Per-axis parent origin.

    Preference: the octant parent on the octree grid rooted at the origin
    (origin a multiple of the parent side), then any other octant parent,
    then the most central containing parent.
    """
    hi_limit = dim - parent_side
    lo = np.maximum(0, o - child_side)
    hi = np.minimum(o, hi_limit)
    cand_a = o - child_side
    cand_b = o
    ok_a = (cand_a >= 0) & (cand_a <= hi_limit) & (cand_a % parent_stride == 0)
    ok_b = (cand_b <= hi_limit) & (cand_b % parent_stride == 0)
    tree_a = ok_a & (cand_a % parent_side == 0)
    tree_b = ok_b & (cand_b % parent_side == 0)
    target = o + child_side / 2.0 - parent_side / 2.0
    central = np.round(target / parent_stride) * parent_stride
    lo_s = np.ceil(lo / parent_stride) * parent_stride
    hi_s = np.floor(hi / parent_stride) * parent_stride
    central = np.clip(central, lo_s, hi_s).astype(np.int64)
    p = np.select([tree_b, tree_a, ok_b, ok_a], [cand_b, cand_a, cand_b, cand_a], central)
    valid = lo_s <= hi_s
    return np.where(valid, p, -1)


def _parents(lower: PyramidLayer, upper: PyramidLayer):
    if lower.r == 0:
        coords = np.minimum(lower.lattice_coords // upper.stride,
                            np.asarray(upper.lattice) - 1)
        return upper.ids_from_coords(coords)
    o = lower.origins
    axes = [_parent_axis(o[:, a], lower.side, upper.side, upper.stride, lower.dims[a])
            for a in range(3)]
    p = np.stack(axes, axis=1)
    bad = np.any(p < 0, axis=1)
    ids = upper.ids_from_coords(np.where(bad[:, None], 0, p // upper.stride))
    return np.where(bad, -1, ids)


def build_pyramid(volume_or_dims, n_lay=5, n_clas=None) -> Pyramid:
    """Enumerate layers ``0..n_lay`` with hierarchy links and label histograms.

    Patches that would cross the volume boundary are discarded. Label
    histograms are attached when the volume carries labels.
    """
    if isinstance(volume_or_dims, LabeledVolume):
        dims = volume_or_dims.dims
        labels = volume_or_dims.labels
    else:
        dims = tuple(int(d) for d in volume_or_dims)
        labels = None
    layers = {}
    for r in range(n_lay + 1):
        side, stride = patch_side(r), patch_stride(r)
        if min(dims) < side:
            raise VolumeTooSmall(r, side, dims)
        layers[r] = PyramidLayer(r, side, stride, _lattice_counts(dims, side, stride), dims)
    pyr = Pyramid(dims, n_lay, layers)
    for r in range(n_lay):
        pyr.parents[r] = _parents(layers[r], layers[r + 1])
    for r in range(2, n_lay + 1):
        pyr.children[r] = _octant_children(layers[r], layers[r - 1])
    if labels is not None:
        if n_clas is None:
            n_clas = int(labels.max())
        tables = _label_integral_tables(labels, n_clas)
        for r in range(n_lay + 1):
            layers[r].histograms = _box_sums(tables, layers[r].origins, layers[r].side)
    return pyr


def _label_integral_tables(labels, n_clas):
    onehot = np.zeros((n_clas,) + tuple(np.asarray(labels.shape) + 1), dtype=np.int64)
    for c in range(n_clas):
        onehot[c, 1:, 1:, 1:] = (labels == c + 1)
    return onehot.cumsum(axis=1).cumsum(axis=2).cumsum(axis=3)


def _box_sums(tables, origins, side):
    x0, y0, z0 = origins[:, 0], origins[:, 1], origins[:, 2]
    x1, y1, z1 = x0 + side, y0 + side, z0 + side
    t = tables
    s = (t[:, x1, y1, z1] - t[:, x0, y1, z1] - t[:, x1, y0, z1] - t[:, x1, y1, z0]
         + t[:, x0, y0, z1] + t[:, x0, y1, z0] + t[:, x1, y0, z0] - t[:, x0, y0, z0])
    return s.T.copy()


def heterogeneity_from_histograms(hist):
    """Half-max width of a categorical histogram: classes at or above half the peak, minus one."""
    hist = np.atleast_2d(hist)
    peak = hist.max(axis=1, keepdims=True)
    return (2 * hist >= peak).sum(axis=1) - 1


def patch_cells(layer: PyramidLayer, j):
    """27 ``(origin, side)`` cells of a 3x3x3 stencil, x fastest."""
    if layer.r == 0:
        raise NoCells("single-voxel patches have no cells")
    cs = layer.side // 3
    origin = layer.origins[j]
    return [(tuple(int(v) for v in origin + off * cs), cs) for off in CELL_OFFSETS]


def patch_neighbors(layer: PyramidLayer):
    """Neighbour id lists per patch (border patches have fewer than 26)."""
    nb = layer.neighbors
    return [[int(v) for v in row if v >= 0] for row in nb]


def label_stats(layer: PyramidLayer, j, labels, n_clas):
    """Histogram, mode label and heterogeneity of one patch from the label grid."""
    x, y, z = layer.origins[j]
    s = layer.side
    block = labels[x:x + s, y:y + s, z:z + s]
    hist = np.bincount(block.ravel().astype(np.int64), minlength=n_clas + 1)[1:]
    return hist, int(np.argmax(hist) + 1), int(heterogeneity_from_histograms(hist[None])[0])


@dataclass
class VoxelRecords:
    positions: np.ndarray
    intensities: np.ndarray
    labels: Optional[np.ndarray]
    voxel_ids: np.ndarray


def decompose_to_voxels(volume: LabeledVolume, layer: PyramidLayer, j) -> VoxelRecords:
    if layer.r != 1:
        raise ValueError("only layer-1 patches decompose into voxels")
    pos = layer.origins[j][None, :] + CELL_OFFSETS
    x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
    inten = volume.channels[:, x, y, z].T
    labs = None if volume.labels is None else volume.labels[x, y, z].astype(np.int64)
    nx, ny, _ = layer.dims
    vids = x + nx * (y + ny * z)
    return VoxelRecords(pos, inten, labs, vids)


def voxel_children(layer1: PyramidLayer):
    """``(n1, 27)`` voxel ids of every layer-1 patch."""
    pos = layer1.origins[:, None, :] + CELL_OFFSETS[None]
    nx, ny, _ = layer1.dims
    return pos[..., 0] + nx * (pos[..., 1] + ny * pos[..., 2])
