"""Core geometric and corpus types shared by the whole pipeline.

Raster convention: cell (row, col) has its center at (col + 0.5, row + 0.5)
in (x, y) pixel coordinates. Every conversion between point sets and rasters
in this package uses that convention. Bounding boxes of rasterized masks run
along the outer cell boundary, so even a single-cell mask has a box with a
positive diagonal.

All types here are immutable after construction and safe to share across
parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyMaskError, ValidationError

TRAJECTORY_LEN = 10
LANDMARK_IDS = frozenset(range(1, 20))


def as_points(arr) -> np.ndarray:
    """Coerce ``arr`` to an (N, 2) float64 array and reject non-finite values."""
    pts = np.asarray(arr, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError(f"expected an (N, 2) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("point array contains NaN or infinity")
    return pts


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box from (x0, y0) to (x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError("bbox coordinates must be finite")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValidationError("bbox min corner must not exceed max corner")

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.x1 - self.x0, self.y1 - self.y0))

    @property
    def is_degenerate(self) -> bool:
        return self.diagonal == 0.0

    def corners(self) -> np.ndarray:
        """Corners in fixed order: min-min, min-max, max-min, max-max."""
        return np.array(
            [
                [self.x0, self.y0],
                [self.x0, self.y1],
                [self.x1, self.y0],
                [self.x1, self.y1],
            ],
            dtype=float,
        )


def bbox_diagonal(b: BBox) -> float:
    """Euclidean length of the box diagonal. 0.0 flags a degenerate point box."""
    return b.diagonal


@dataclass(frozen=True)
class ForegroundMask:
    """Binary foreground raster for one frame, with its tight box and centroid.

    ``grid`` is a boolean (H, W) array. The bbox follows the outer cell
    boundary of the set cells; the centroid is the mean of set cell centers.
    """

    frame_index: int
    grid: np.ndarray
    bbox: BBox = field(init=False)
    centroid: np.ndarray = field(init=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 2:
            raise ValidationError("mask grid must be 2-D")
        rows, cols = np.nonzero(grid)
        if rows.size == 0:
            raise EmptyMaskError(f"mask for frame {self.frame_index} has no set cells")
        bbox = BBox(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
        centroid = np.array([cols.mean() + 0.5, rows.mean() + 0.5])
        object.__setattr__(self, "bbox", bbox)
        object.__setattr__(self, "centroid", centroid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def mask_centroid(mask: ForegroundMask) -> np.ndarray:
    """Arithmetic mean of the set cell centers (center-of-mass of the mask)."""
    return mask.centroid.copy()


@dataclass(frozen=True)
class EdgeMap:
    """Per-pixel edge strength in [0, 1]."""

    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 2:
            raise ValidationError("edge map grid must be 2-D")
        if not np.all(np.isfinite(grid)):
            raise ValidationError("edge map contains NaN or infinity")
        if grid.size and (grid.min() < 0.0 or grid.max() > 1.0):
            raise ValidationError("edge strengths must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class FlowField:
    """Dense displacement field mapping one frame to the next, (H, W, 2) in pixels."""

    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", grid)
        if grid.ndim != 3 or grid.shape[2] != 2:
            raise ValidationError("flow grid must have shape (H, W, 2)")
        if not np.all(np.isfinite(grid)):
            raise ValidationError("flow field contains NaN or infinity")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]


@dataclass(frozen=True)
class Trajectory:
    """A fixed-length point track; ``points[k]`` is the position at start_frame + k."""

    id: int
    start_frame: int
    points: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points)
        if len(pts) < 2:
            raise ValidationError("trajectory needs at least 2 points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class LandmarkSet:
    """Ground-truth landmark positions for one frame with per-landmark visibility."""

    frame_index: int
    points: dict
    visibility: frozenset

    def __post_init__(self):
        pts = {int(k): np.asarray(v, dtype=float).reshape(2) for k, v in self.points.items()}
        vis = frozenset(int(i) for i in self.visibility)
        bad = set(pts) - LANDMARK_IDS
        if bad:
            raise ValidationError(f"unknown landmark ids {sorted(bad)}")
        if not vis <= set(pts):
            raise ValidationError("every visible landmark needs a point")
        for i, p in pts.items():
            if not np.all(np.isfinite(p)):
                raise ValidationError(f"landmark {i} has non-finite coordinates")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visibility", vis)
        if len(vis) >= 2 and self.scale() <= 0.0:
            raise ValidationError("visible landmarks are all coincident; scale undefined")

    def visible_points(self) -> tuple[list[int], np.ndarray]:
        """Sorted visible ids and their positions as an (N, 2) array."""
        ids = sorted(self.visibility)
        if not ids:
            return ids, np.empty((0, 2))
        return ids, np.stack([self.points[i] for i in ids])

    def scale(self) -> float:
        """Max pairwise distance among visible landmarks (object scale)."""
        _, pts = self.visible_points()
        if len(pts) < 2:
            return 0.0
        diff = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((diff**2).sum(-1)).max())


@dataclass(frozen=True)
class FrameSequence:
    """A T-frame slice of a shot together with its per-frame features.

    masks/edge_maps are indexed 0..T-1 relative to ``start_frame``; ``flows[t]``
    maps frame t to t+1 (forward). ``flows_back[t]`` maps frame t+1 back to t
    and is optional; when absent, backward propagation falls back to negated
    forward flow.
    """

    shot_id: str
    start_frame: int
    length: int
    trajectories: tuple = ()
    masks: Optional[tuple] = None
    edge_maps: Optional[tuple] = None
    flows: Optional[tuple] = None
    flows_back: Optional[tuple] = None

    def __post_init__(self):
        if self.length < 1:
            raise ValidationError("sequence length must be >= 1")
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for name in ("masks", "edge_maps", "flows", "flows_back"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(val))
        if self.masks is not None:
            if len(self.masks) != self.length:
                raise ValidationError("need one mask per frame")
            for t, m in enumerate(self.masks):
                if m.frame_index != self.start_frame + t:
                    raise ValidationError(
                        f"mask {t} indexed {m.frame_index}, expected {self.start_frame + t}"
                    )
        if self.edge_maps is not None and len(self.edge_maps) != self.length:
            raise ValidationError("need one edge map per frame")
        if self.flows is not None and len(self.flows) != self.length - 1:
            raise ValidationError("need length-1 forward flow fields")
        if self.flows_back is not None and len(self.flows_back) != self.length - 1:
            raise ValidationError("need length-1 backward flow fields")

    def trajectories_starting_at(self, rel_frame: int) -> list[Trajectory]:
        abs_frame = self.start_frame + rel_frame
        return [tr for tr in self.trajectories if tr.start_frame == abs_frame]

    def window(self, rel_start: int, length: int) -> "FrameSequence":
        """Sub-sequence of ``length`` frames starting at relative frame ``rel_start``.

        Keeps every trajectory that starts inside the window (their points may
        extend past it; that is valid shot data).
        """
        if rel_start < 0 or rel_start + length > self.length:
            raise ValidationError("window outside sequence bounds")
        lo = self.start_frame + rel_start
        trajs = tuple(tr for tr in self.trajectories if lo <= tr.start_frame < lo + length)

        def cut(val, n):
            return None if val is None else val[rel_start : rel_start + n]

        return FrameSequence(
            shot_id=self.shot_id,
            start_frame=lo,
            length=length,
            trajectories=trajs,
            masks=cut(self.masks, length),
            edge_maps=cut(self.edge_maps, length),
            flows=cut(self.flows, length - 1),
            flows_back=cut(self.flows_back, length - 1),
        )


@dataclass(frozen=True)
class Interval:
    """A clustered slice of a shot, the unit that sequence pairs are mined from."""

    shot_id: str
    start_frame: int
    length: int
    cluster_id: int

    def __post_init__(self):
        if not 10 <= self.length <= 200:
            raise ValidationError(f"interval length {self.length} outside [10, 200]")
        if self.start_frame < 0:
            raise ValidationError("interval start must be >= 0")
