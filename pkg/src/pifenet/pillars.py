"""Point-cloud quantisation into a dense pillar grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

NUM_CHANNELS = 9


@dataclass
class PointCloud:
    """``points`` is an ``[M, 4]`` array of (x, y, z, reflectance)."""

    points: np.ndarray
    clamped: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            bad = int(np.argwhere(~np.isfinite(pts).all(axis=1))[0, 0])
            raise ValueError(f"non-finite point at index {bad}")
        out_of_range = (pts[:, 3] < 0) | (pts[:, 3] > 1)
        n_bad = int(out_of_range.sum())
        if n_bad:
            pts = pts.copy()
            pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
            logger.warning("clamped %d reflectance values into [0, 1]", n_bad)
        self.points = pts
        self.clamped += n_bad

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PillarConfig:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    pillar_x: float
    pillar_y: float
    max_pillars: int
    max_points: int
    channels: int = NUM_CHANNELS

    def __post_init__(self):
        for name, extent, size in (("x", self.x_max - self.x_min, self.pillar_x),
                                   ("y", self.y_max - self.y_min, self.pillar_y)):
            cells = extent / size
            if size <= 0 or extent <= 0 or abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"{name} extent {extent} is not a whole number of {size} m pillars")
        if self.z_max <= self.z_min:
            raise ValueError("empty z range")
        if self.max_pillars < 1 or self.max_points < 1:
            raise ValueError("max_pillars and max_points must be positive")
        if self.channels != NUM_CHANNELS:
            raise ValueError(f"pillar decoration has {NUM_CHANNELS} channels")

    @property
    def grid_x(self) -> int:
        return int(round((self.x_max - self.x_min) / self.pillar_x))

    @property
    def grid_y(self) -> int:
        return int(round((self.y_max - self.y_min) / self.pillar_y))

    @property
    def pillar_z(self) -> float:
        return self.z_max - self.z_min


@dataclass
class PillarTensor:
    features: np.ndarray  # [P, N, C]
    ix: np.ndarray  # [occupied]
    iy: np.ndarray  # [occupied]
    counts: np.ndarray  # [P]; zero beyond the occupied rows
    occupied: int
    seed: int = 0

    @property
    def valid(self) -> np.ndarray:
        """Boolean ``[P, N, 1]`` mask of populated point rows."""
        n = self.features.shape[1]
        return (np.arange(n)[None, :] < self.counts[:, None])[:, :, None]


def crop_to_range(cloud: PointCloud, cfg: PillarConfig) -> PointCloud:
    """Keep points inside the closed range box, preserving order."""
    p = cloud.points
    keep = ((p[:, 0] >= cfg.x_min) & (p[:, 0] <= cfg.x_max)
            & (p[:, 1] >= cfg.y_min) & (p[:, 1] <= cfg.y_max)
            & (p[:, 2] >= cfg.z_min) & (p[:, 2] <= cfg.z_max))
    return PointCloud(p[keep], clamped=cloud.clamped)


def cell_indices(points: np.ndarray, cfg: PillarConfig) -> tuple[np.ndarray, np.ndarray]:
    ix = np.floor((points[:, 0] - cfg.x_min) / cfg.pillar_x).astype(np.int64)
    iy = np.floor((points[:, 1] - cfg.y_min) / cfg.pillar_y).astype(np.int64)
    return ix, iy


def decorate(points: np.ndarray, center_xy: tuple[float, float]) -> np.ndarray:
    """Nine channels per point: xyzr, offsets to the pillar mean, planar offsets to the cell centre."""
    mean = points[:, :3].mean(axis=0)
    out = np.empty((len(points), NUM_CHANNELS))
    out[:, :4] = points[:, :4]
    out[:, 4:7] = points[:, :3] - mean
    out[:, 7] = points[:, 0] - center_xy[0]
    out[:, 8] = points[:, 1] - center_xy[1]
    return out


def pillarize(cloud: PointCloud, cfg: PillarConfig, seed: int = 0, dtype=np.float32) -> PillarTensor:
    """Bucket cropped points into pillars.

    Points on the upper x/y range edge fall outside the half-open cells and
    are dropped. Overfull pillars and surplus pillars are subsampled at
    random with ``seed``.
    """
    P, N = cfg.max_pillars, cfg.max_points
    rng = np.random.default_rng(seed)
    pts = cloud.points
    ix, iy = cell_indices(pts, cfg)
    inside = (ix >= 0) & (ix < cfg.grid_x) & (iy >= 0) & (iy < cfg.grid_y)
    pts, ix, iy = pts[inside], ix[inside], iy[inside]

    features = np.zeros((P, N, NUM_CHANNELS), dtype=dtype)
    counts = np.zeros(P, dtype=np.int64)
    if len(pts) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return PillarTensor(features, empty, empty, counts, 0, seed)

    cell = iy * cfg.grid_x + ix
    cells, inverse = np.unique(cell, return_inverse=True)
    if len(cells) > P:
        chosen = np.sort(rng.choice(len(cells), size=P, replace=False))
        remap = np.full(len(cells), -1)
        remap[chosen] = np.arange(P)
        slot = remap[inverse]
        keep = slot >= 0
        pts, slot = pts[keep], slot[keep]
        cells = cells[chosen]
    else:
        slot = inverse

    # random rank inside each pillar decides which points survive the cap
    rank_key = rng.random(len(pts))
    order = np.lexsort((rank_key, slot))
    sorted_slot = slot[order]
    starts = np.searchsorted(sorted_slot, np.arange(len(cells)))
    rank = np.arange(len(order)) - starts[sorted_slot]
    survivors = np.sort(order[rank < N])  # back to file order
    pts, slot = pts[survivors], slot[survivors]

    occupied = len(cells)
    counts[:occupied] = np.bincount(slot, minlength=occupied)
    cx = cfg.x_min + ((cells % cfg.grid_x) + 0.5) * cfg.pillar_x
    cy = cfg.y_min + ((cells // cfg.grid_x) + 0.5) * cfg.pillar_y

    by_slot = np.argsort(slot, kind="stable")
    pts, slot = pts[by_slot], slot[by_slot]
    row = np.arange(len(slot)) - np.searchsorted(slot, slot)
    sums = np.zeros((occupied, 3))
    np.add.at(sums, slot, pts[:, :3])
    mean = sums / counts[:occupied, None]
    dec = np.empty((len(pts), NUM_CHANNELS))
    dec[:, :4] = pts
    dec[:, 4:7] = pts[:, :3] - mean[slot]
    dec[:, 7] = pts[:, 0] - cx[slot]
    dec[:, 8] = pts[:, 1] - cy[slot]
    features[slot, row] = dec
    return PillarTensor(features, (cells % cfg.grid_x).astype(np.int64),
                        (cells // cfg.grid_x).astype(np.int64), counts, occupied, seed)
