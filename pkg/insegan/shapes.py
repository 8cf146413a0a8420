"""Rigid object models for the synthetic bins.

Each shape is a union of convex solids kept as half-space systems
(``normal · x + offset <= 0`` inside, as produced by ``scipy.spatial.ConvexHull``).
Top-down footprints are shapely polygons.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.spatial import ConvexHull
from shapely.geometry import MultiPoint, Polygon
from shapely.ops import unary_union

from .config import SHAPE_KINDS

logger = logging.getLogger(__name__)

ROUND_SEGMENTS: int = 24
_PARALLEL_EPS: float = 1e-12


@dataclass(frozen=True)
class ConvexSolid:
    """A convex polytope in the shape's local frame."""

    vertices: np.ndarray
    equations: np.ndarray

    @classmethod
    def from_vertices(cls, vertices: np.ndarray) -> "ConvexSolid":
        vertices = np.asarray(vertices, dtype=np.float64)
        return cls(vertices=vertices, equations=ConvexHull(vertices).equations)


def _box_vertices(lo: Tuple[float, float, float], hi: Tuple[float, float, float]) -> np.ndarray:
    return np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )


def _ellipse(rx: float, ry: float, z: float) -> np.ndarray:
    angles = np.linspace(0.0, 2 * np.pi, ROUND_SEGMENTS, endpoint=False)
    return np.stack([rx * np.cos(angles), ry * np.sin(angles), np.full_like(angles, z)], axis=1)


@dataclass(frozen=True)
class ShapeSpec:
    """Object class of a bin: a kind and its extents (x, y, z) in bin units."""

    kind: str
    dims: Tuple[float, float, float]

    def __post_init__(self) -> None:
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"Unknown shape kind: {self.kind!r} (choose from {SHAPE_KINDS})")
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"shape dimensions must be three positive numbers, got {self.dims}")

    @property
    def diameter(self) -> float:
        """Diameter of the bounding sphere: the largest extent in any pose."""
        return float(np.linalg.norm(self.dims))

    def solids(self) -> List[ConvexSolid]:
        """Convex parts of the shape, centred on its bounding box."""
        ax, ay, az = (d / 2.0 for d in self.dims)
        if self.kind == "box":
            return [ConvexSolid.from_vertices(_box_vertices((-ax, -ay, -az), (ax, ay, az)))]
        if self.kind == "cylinder":
            rim = np.vstack([_ellipse(ax, ay, -az), _ellipse(ax, ay, az)])
            return [ConvexSolid.from_vertices(rim)]
        if self.kind == "cone":
            rim = np.vstack([_ellipse(ax, ay, -az), [[0.0, 0.0, az]]])
            return [ConvexSolid.from_vertices(rim)]
        third_x, third_y = self.dims[0] / 3.0, self.dims[1] / 3.0
        if self.kind == "l-block":
            parts = [
                ((-ax, -ay, -az), (ax, -ay + third_y, az)),
                ((-ax, -ay, -az), (-ax + third_x, ay, az)),
            ]
        else:  # t-block
            parts = [
                ((-ax, ay - third_y, -az), (ax, ay, az)),
                ((-third_x / 2, -ay, -az), (third_x / 2, ay, az)),
            ]
        return [ConvexSolid.from_vertices(_box_vertices(lo, hi)) for lo, hi in parts]

    def footprint(self, rotation: np.ndarray, center: Tuple[float, float]) -> Polygon:
        """Top-down silhouette of the rotated shape centred at ``center``."""
        hulls = []
        for solid in self.solids():
            xy = solid.vertices @ rotation.T
            hulls.append(MultiPoint((xy[:, :2] + np.asarray(center)).tolist()).convex_hull)
        return unary_union(hulls)


def vertical_extent(
    solid: ConvexSolid, rotation: np.ndarray, offsets: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cast vertical rays through a rotated solid.

    Args:
        solid: Convex part in local coordinates.
        rotation: World-from-local rotation (3, 3).
        offsets: Ray footpoints (P, 2) relative to the shape centre, in the
            plane z = 0 through the centre.

    Returns:
        ``(hit, bottom, top)``: per-ray hit flags and the world-z of the entry
        and exit points relative to the centre.
    """
    direction = rotation.T @ np.array([0.0, 0.0, 1.0])
    origins = np.concatenate([offsets, np.zeros((len(offsets), 1))], axis=1) @ rotation
    normals, offset = solid.equations[:, :3], solid.equations[:, 3]

    along = normals @ direction
    slack = -(origins @ normals.T + offset)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = slack / along
    upper = np.where(along > _PARALLEL_EPS, bound, np.inf).min(axis=1)
    lower = np.where(along < -_PARALLEL_EPS, bound, -np.inf).max(axis=1)
    parallel_ok = np.where(np.abs(along) <= _PARALLEL_EPS, slack >= 0, True).all(axis=1)
    hit = parallel_ok & (lower < upper)
    return hit, lower, upper
