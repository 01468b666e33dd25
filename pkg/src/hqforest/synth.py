"""Synthetic labelled volumes and point sets for tests and demos.

``blocks``: background (class 1) with one axis-aligned box per foreground
class, each class drawing both channels around its own mean.

``concentric``: nested spheres around the volume centre. Class intensities
lie on concentric rings in the two-channel intensity plane, so no single
linear cut separates them while a quadratic one does.
"""
from dataclasses import dataclass

import numpy as np

from .errors import BadConfig
from .pyramid import LabeledVolume

SCALE = 100.0
BLOCK_MEANS = np.array([[0.2, 0.2], [0.8, 0.2], [0.2, 0.8], [0.8, 0.8],
                        [0.5, 0.5], [0.5, 0.9], [0.9, 0.5], [0.1, 0.5]])
PRESETS = ("blocks", "concentric")


@dataclass
class SynthConfig:
    preset: str = "blocks"
    dims: tuple = (48, 48, 48)
    n_clas: int = 4
    noise: float = 0.15
    seed: int = 0
    min_side: int = 18
    max_side: int = 24

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.preset not in PRESETS:
            raise BadConfig(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise BadConfig("dims must be three positive integers")
        if self.noise < 0:
            raise BadConfig("noise must be nonnegative")
        if self.preset == "blocks":
            if not 2 <= self.n_clas <= len(BLOCK_MEANS):
                raise BadConfig(f"blocks preset supports 2..{len(BLOCK_MEANS)} classes")
            if not 1 <= self.min_side <= self.max_side:
                raise BadConfig("need 1 <= min_side <= max_side")
        elif self.n_clas < 2:
            raise BadConfig("concentric preset needs at least 2 classes")


def _block_regions(dims, n_boxes):
    """Split the volume into ``n_boxes`` disjoint slabs by recursive halving."""
    regions = [((0, 0, 0), tuple(dims))]
    while len(regions) < n_boxes:
        regions.sort(key=lambda reg: -np.prod(reg[1]))
        (o, s) = regions.pop(0)
        ax = int(np.argmax(s))
        half = s[ax] // 2
        s1 = list(s)
        s1[ax] = half
        s2 = list(s)
        s2[ax] = s[ax] - half
        o2 = list(o)
        o2[ax] += half
        regions += [(o, tuple(s1)), (tuple(o2), tuple(s2))]
    return sorted(regions)


def blocks_labels(cfg: SynthConfig, rng):
    labels = np.ones(cfg.dims, dtype=np.int64)
    regions = _block_regions(cfg.dims, cfg.n_clas - 1)
    for c, (o, s) in enumerate(regions, start=2):
        origin, side = [], []
        for a in range(3):
            hi = min(cfg.max_side, s[a])
            lo = min(cfg.min_side, hi)
            length = int(rng.integers(lo, hi + 1))
            start = o[a] + int(rng.integers(0, s[a] - length + 1))
            origin.append(start)
            side.append(length)
        sl = tuple(slice(origin[a], origin[a] + side[a]) for a in range(3))
        labels[sl] = c
    return labels


def concentric_radii(n_clas, dims):
    """Sphere radii from the outermost foreground class inwards."""
    r_max = 0.45 * min(dims)
    return [r_max * (n_clas - c + 1) / n_clas for c in range(2, n_clas + 1)]


def concentric_labels(cfg: SynthConfig):
    centre = (np.asarray(cfg.dims) - 1) / 2.0
    grids = np.meshgrid(*[np.arange(d) for d in cfg.dims], indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, centre)))
    labels = np.ones(cfg.dims, dtype=np.int64)
    for c, rad in zip(range(2, cfg.n_clas + 1), concentric_radii(cfg.n_clas, cfg.dims)):
        labels[dist <= rad] = c
    return labels


def ring_bounds(c, n_clas):
    """Radial band of class ``c`` in intensity space: innermost class is a disk of radius 1."""
    k = n_clas - c  # 0 for the innermost class
    return (0.0, 1.0) if k == 0 else (0.5 + k, 1.5 + k)


def ring_intensities(labels, n_clas, rng, noise=0.0):
    """Two-channel intensities on class rings around ``(1, 1)``; returns ``(2, n)``."""
    labels = np.asarray(labels)
    n = labels.size
    lo = np.empty(n)
    hi = np.empty(n)
    for c in range(1, n_clas + 1):
        a, b = ring_bounds(c, n_clas)
        lo[labels == c], hi[labels == c] = a, b
    # Uniform over the annulus area.
    rad = np.sqrt(rng.uniform(lo ** 2, hi ** 2))
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.stack([rad * np.cos(phi), rad * np.sin(phi)]) + 3.0
    if noise:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    return pts


def concentric_points(n, rng, n_clas=2, noise=0.0):
    """Balanced labelled point set drawn from the concentric intensity rings."""
    labels = np.arange(n) % n_clas + 1
    rng.shuffle(labels)
    return ring_intensities(labels, n_clas, rng, noise).T, labels


def make_volume(cfg: SynthConfig) -> LabeledVolume:
    rng = np.random.default_rng(cfg.seed)
    if cfg.preset == "blocks":
        labels = blocks_labels(cfg, rng)
        means = BLOCK_MEANS[labels - 1]  # (x, y, z, 2)
        chans = np.moveaxis(means, -1, 0) + rng.normal(0.0, cfg.noise, (2,) + cfg.dims)
    else:
        labels = concentric_labels(cfg)
        pts = ring_intensities(labels.ravel(), cfg.n_clas, rng, cfg.noise * 0.1)
        chans = pts.reshape((2,) + cfg.dims)
    return LabeledVolume((chans * SCALE).astype(np.float32), labels)
