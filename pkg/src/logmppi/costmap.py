"""Robot-centered 2D occupancy grid.

Cell ``(i, j)`` covers ``[ox + j*res, ox + (j+1)*res) x [oy + i*res, oy + (i+1)*res)``
where ``(ox, oy)`` is the grid origin; rows run along +y, columns along +x.
Robot-centered grids snap their origin to the global ``res`` lattice, so a
grid recentered by a whole number of cells is an exact index shift.

Sensing model: a planar range sensor casts beams from the robot pose against
disc obstacles.  The cell holding each first hit is occupied; a cell whose
center lies within range and before the hit of the beam nearest its bearing
is free; everything else is unknown.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FREE, OCCUPIED, INFLATED, UNKNOWN = 0, 1, 2, 3

_CHARS = {FREE: ".", OCCUPIED: "#", INFLATED: "+", UNKNOWN: "?"}
_CODES = {c: k for k, c in _CHARS.items()}
_HEADER = "# logmppi occupancy grid v1"


@dataclass(frozen=True)
class GridParams:
    width: int = 240
    height: int = 240
    resolution: float = 0.05

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid width and height must be positive")
        if not self.resolution > 0:
            raise ValueError("grid resolution must be positive")


@dataclass(frozen=True)
class RobotFootprint:
    radius: float = 0.3

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("footprint radius must be positive")


@dataclass(frozen=True)
class SensorSpec:
    max_range: float = 8.0
    angular_resolution: float = math.radians(0.25)
    fov: float = 2.0 * math.pi

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError("sensor max_range must be positive")
        if not self.angular_resolution > 0:
            raise ValueError("sensor angular_resolution must be positive")
        if not 0 <= self.fov <= 2.0 * math.pi:
            raise ValueError("sensor fov must lie in [0, 2*pi]")

    @property
    def full_circle(self) -> bool:
        return self.fov >= 2.0 * math.pi - 1e-12

    @property
    def n_beams(self) -> int:
        if self.full_circle:
            return max(1, int(round(2.0 * math.pi / self.angular_resolution)))
        return int(math.floor(self.fov / self.angular_resolution + 1e-9)) + 1

    def beam_angles(self, heading: float) -> np.ndarray:
        n = self.n_beams
        if self.full_circle:
            step = 2.0 * math.pi / n
            return heading + step * np.arange(n)
        return heading - 0.5 * self.fov + self.angular_resolution * np.arange(n)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    cells: np.ndarray
    resolution: float
    origin: tuple

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError("cells must be a non-empty 2-D array")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if cells.max() > UNKNOWN:
            raise ValueError("unknown cell state")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.origin == other.origin
            and np.array_equal(self.cells, other.cells)
        )

    def cell_of(self, x, y):
        """Integer (row, col) of the cell holding world point(s) ``(x, y)``."""
        j = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.resolution).astype(np.int64)
        i = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.resolution).astype(np.int64)
        return i, j

    def cell_center(self, i, j):
        return (
            self.origin[0] + (np.asarray(j) + 0.5) * self.resolution,
            self.origin[1] + (np.asarray(i) + 0.5) * self.resolution,
        )

    def state_at(self, i: int, j: int) -> int:
        if 0 <= i < self.height and 0 <= j < self.width:
            return int(self.cells[i, j])
        return UNKNOWN

    def with_cells(self, cells) -> "OccupancyGrid":
        return OccupancyGrid(cells, self.resolution, self.origin)

    # -- serialization ------------------------------------------------------

    def to_ascii(self) -> str:
        lut = np.array([_CHARS[k] for k in range(4)])
        rows = ["".join(row) for row in lut[self.cells]]
        head = [
            _HEADER,
            f"width {self.width}",
            f"height {self.height}",
            f"resolution {self.resolution!r}",
            f"origin {self.origin[0]!r} {self.origin[1]!r}",
        ]
        return "\n".join(head + rows) + "\n"

    @classmethod
    def from_ascii(cls, text: str) -> "OccupancyGrid":
        lines = text.splitlines()
        if not lines or lines[0] != _HEADER:
            raise ValueError("not a logmppi occupancy grid")
        fields = {}
        for line in lines[1:5]:
            key, *vals = line.split()
            fields[key] = vals
        width, height = int(fields["width"][0]), int(fields["height"][0])
        body = lines[5:5 + height]
        if len(body) != height or any(len(r) != width for r in body):
            raise ValueError("grid body does not match the declared width/height")
        cells = np.array([[_CODES[c] for c in row] for row in body], dtype=np.uint8)
        return cls(cells, float(fields["resolution"][0]), (float(fields["origin"][0]), float(fields["origin"][1])))


def _discs(world) -> np.ndarray:
    """(K, 3) array of disc obstacles ``(cx, cy, r)`` from a world or array."""
    if hasattr(world, "discs"):
        world = world.discs()
    arr = np.asarray(world, dtype=float)
    return arr.reshape(-1, 3)


def grid_origin(center, params: GridParams) -> tuple:
    res = params.resolution
    ci = int(round(float(center[0]) / res))
    cj = int(round(float(center[1]) / res))
    return ((ci - params.width // 2) * res, (cj - params.height // 2) * res)


def _empty_grid(center, params: GridParams, fill: int) -> OccupancyGrid:
    cells = np.full((params.height, params.width), fill, dtype=np.uint8)
    return OccupancyGrid(cells, params.resolution, grid_origin(center, params))


def ray_disc_hits(px: float, py: float, angles: np.ndarray, discs: np.ndarray) -> np.ndarray:
    """Distance along each beam to the first disc boundary (inf when none)."""
    t = np.full(angles.shape, np.inf)
    if discs.size == 0:
        return t
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    ox = px - discs[:, 0][None, :]
    oy = py - discs[:, 1][None, :]
    r = discs[:, 2][None, :]
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - r * r
    disc = b * b - c
    root = np.sqrt(np.where(disc >= 0, disc, 0.0))
    near = -b - root
    far = -b + root
    cand = np.where(c <= 0, 0.0, near)  # sensor inside a disc: hit at 0
    valid = (disc >= 0) & (far >= 0)
    cand = np.where(valid & (cand >= 0), cand, np.inf)
    return np.minimum(t, cand.min(axis=1))


def build_from_world(world, center, params: GridParams = GridParams(), sensor: SensorSpec = SensorSpec()) -> OccupancyGrid:
    """Sense disc obstacles from pose ``center = (x, y, theta)`` into a fresh grid."""
    px, py = float(center[0]), float(center[1])
    heading = float(center[2]) if len(center) > 2 else 0.0
    grid = _empty_grid(center, params, UNKNOWN)
    discs = _discs(world)
    if discs.size:
        near = np.hypot(discs[:, 0] - px, discs[:, 1] - py) <= sensor.max_range + discs[:, 2]
        discs = discs[near]

    angles = sensor.beam_angles(heading)
    hits = ray_disc_hits(px, py, angles, discs)
    reach = np.minimum(hits, sensor.max_range)

    res = params.resolution
    ox, oy = grid.origin
    jj = np.arange(params.width)
    ii = np.arange(params.height)
    cx = ox + (jj + 0.5) * res
    cy = oy + (ii + 0.5) * res
    rx = cx[None, :] - px
    ry = cy[:, None] - py
    dist = np.hypot(rx, ry)

    n = angles.size
    if sensor.full_circle:
        step = 2.0 * math.pi / n
        rel = np.mod(np.arctan2(ry, rx) - heading, 2.0 * math.pi)
        beam = np.mod(np.rint(rel / step).astype(np.int64), n)
        covered = np.ones_like(beam, dtype=bool)
    else:
        rel = np.mod(np.arctan2(ry, rx) - (heading - 0.5 * sensor.fov) + math.pi, 2.0 * math.pi) - math.pi
        beam = np.rint(rel / sensor.angular_resolution).astype(np.int64)
        covered = (beam >= 0) & (beam < n)
        beam = np.clip(beam, 0, n - 1)
    free = covered & (dist <= sensor.max_range) & (dist < reach[beam])
    # the sensor cell itself is observed even when a beam starts inside a disc
    cells = np.where(free, FREE, UNKNOWN).astype(np.uint8)

    seen = np.isfinite(hits) & (hits <= sensor.max_range)
    if seen.any():
        hx = px + hits[seen] * np.cos(angles[seen])
        hy = py + hits[seen] * np.sin(angles[seen])
        hi, hj = grid.cell_of(hx, hy)
        inside = (hi >= 0) & (hi < params.height) & (hj >= 0) & (hj < params.width)
        cells[hi[inside], hj[inside]] = OCCUPIED
    return grid.with_cells(cells)


def rasterize_world(world, center, params: GridParams = GridParams()) -> OccupancyGrid:
    """Fully known map: cells whose center lies inside an obstacle are occupied."""
    grid = _empty_grid(center, params, FREE)
    discs = _discs(world)
    cells = np.zeros((params.height, params.width), dtype=np.uint8)
    res = params.resolution
    ox, oy = grid.origin
    for cxo, cyo, r in discs:
        i0, j0 = grid.cell_of(cxo - r, cyo - r)
        i1, j1 = grid.cell_of(cxo + r, cyo + r)
        i0, j0 = max(int(i0), 0), max(int(j0), 0)
        i1, j1 = min(int(i1), params.height - 1), min(int(j1), params.width - 1)
        if i0 > i1 or j0 > j1:
            continue
        jj = np.arange(j0, j1 + 1)
        ii = np.arange(i0, i1 + 1)
        ccx = ox + (jj + 0.5) * res - cxo
        ccy = oy + (ii + 0.5) * res - cyo
        inside = ccy[:, None] ** 2 + ccx[None, :] ** 2 <= r * r
        cells[i0:i1 + 1, j0:j1 + 1][inside] = OCCUPIED
    return grid.with_cells(cells)


def world_grid(world, extent, resolution: float = 0.05, margin: float = 2.0) -> OccupancyGrid:
    """Known-map grid covering ``[0, W] x [0, H]`` plus a margin."""
    w, h = float(extent[0]), float(extent[1])
    params = GridParams(
        width=int(math.ceil((w + 2 * margin) / resolution)),
        height=int(math.ceil((h + 2 * margin) / resolution)),
        resolution=resolution,
    )
    return rasterize_world(world, (0.5 * w, 0.5 * h), params)


def inflate(grid: OccupancyGrid, inflation_radius: float) -> OccupancyGrid:
    """Mark free/unknown cells within ``inflation_radius`` of an occupied cell as inflated."""
    if inflation_radius < 0:
        raise ValueError("inflation_radius must be >= 0")
    occ = grid.cells == OCCUPIED
    if inflation_radius == 0 or not occ.any():
        return grid
    dist = ndimage.distance_transform_edt(~occ) * grid.resolution
    cells = grid.cells.copy()
    cells[(dist <= inflation_radius + 1e-9) & ~occ] = INFLATED
    return grid.with_cells(cells)


def _lethal_state(state: int, unknown_is_lethal: bool) -> bool:
    return state in (OCCUPIED, INFLATED) or (unknown_is_lethal and state == UNKNOWN)


def is_collision(grid: OccupancyGrid, state, footprint: RobotFootprint, unknown_is_lethal: bool = False) -> bool:
    """Exact footprint test: any cell whose center is within the footprint radius is lethal.

    Cells outside the grid count as unknown, and so does a robot center
    outside the grid (which matters for footprints smaller than a cell).
    """
    x, y = float(state[0]), float(state[1])
    res = grid.resolution
    ox, oy = grid.origin
    r = footprint.radius
    r2 = r * r
    win = int(math.ceil(r / res)) + 1
    ci = int(math.floor((y - oy) / res))
    cj = int(math.floor((x - ox) / res))
    if unknown_is_lethal and not (0 <= ci < grid.height and 0 <= cj < grid.width):
        return True
    for i in range(ci - win, ci + win + 1):
        cy = oy + (i + 0.5) * res
        for j in range(cj - win, cj + win + 1):
            cx = ox + (j + 0.5) * res
            if (cx - x) ** 2 + (cy - y) ** 2 <= r2 and _lethal_state(grid.state_at(i, j), unknown_is_lethal):
                return True
    return False


def recenter(grid: OccupancyGrid, new_center, world, sensor: SensorSpec | None = None) -> OccupancyGrid:
    """Rebuild the local window about ``new_center``.

    With ``sensor=None`` the window is rasterized from the known world.
    """
    params = GridParams(grid.width, grid.height, grid.resolution)
    if sensor is None:
        return rasterize_world(world, new_center, params)
    return build_from_world(world, new_center, params, sensor)


class CollisionLookup:
    """Precomputed tables answering :func:`is_collision` with one lookup per query.

    Each cell of the padded lethal mask gets a code from the distance between
    its center and the nearest lethal cell center: 1 when every point of the
    cell collides, 0 when none does, 2 when the exact window scan is needed.
    """

    def __init__(self, grid: OccupancyGrid, footprint: RobotFootprint, unknown_is_lethal: bool = False):
        res = grid.resolution
        r = footprint.radius
        cells = grid.cells
        lethal = (cells == OCCUPIED) | (cells == INFLATED)
        if unknown_is_lethal:
            lethal |= cells == UNKNOWN
        pad = int(math.ceil(r / res)) + 1
        padded = np.pad(lethal, pad, constant_values=unknown_is_lethal)
        if padded.any():
            dist = ndimage.distance_transform_edt(~padded) * res
        else:
            dist = np.full(padded.shape, np.inf)
        half_diag = res * math.sqrt(0.5)
        code = np.full(padded.shape, 2, dtype=np.int8)
        code[dist - half_diag > r + 1e-9] = 0
        code[dist + half_diag < r - 1e-9] = 1
        if unknown_is_lethal:
            # a robot center outside the grid is itself on unknown ground
            code[:pad], code[-pad:], code[:, :pad], code[:, -pad:] = 1, 1, 1, 1

        self.code = np.ascontiguousarray(code)
        self.lethal = np.ascontiguousarray(padded.astype(np.uint8))
        self.origin = grid.origin
        self.resolution = res
        self.radius = r
        self.pad = pad
        self.oob_lethal = bool(unknown_is_lethal)

    def params(self) -> tuple:
        """Flat tuple consumed by the rollout kernels."""
        return (self.code, self.lethal, self.origin[0], self.origin[1], self.resolution, self.radius, self.pad, int(self.oob_lethal))

    def query(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        res, pad = self.resolution, self.pad
        ox, oy = self.origin
        j = np.floor((x - ox) / res).astype(np.int64) + pad
        i = np.floor((y - oy) / res).astype(np.int64) + pad
        h, w = self.code.shape
        inside = (i >= 0) & (i < h) & (j >= 0) & (j < w)
        out = np.full(x.shape, self.oob_lethal, dtype=bool)
        ii, jj = i[inside], j[inside]
        code = self.code[ii, jj]
        res_in = code == 1
        amb = np.flatnonzero(code == 2)
        if amb.size:
            xs = x[inside][amb]
            ys = y[inside][amb]
            ai, aj = ii[amb], jj[amb]
            hit = np.zeros(amb.size, dtype=bool)
            r2 = self.radius * self.radius
            for di in range(-pad, pad + 1):
                qi = ai + di
                cy = oy + (qi - pad + 0.5) * res
                for dj in range(-pad, pad + 1):
                    qj = aj + dj
                    ok = (qi >= 0) & (qi < h) & (qj >= 0) & (qj < w)
                    lethal = np.where(ok, self.lethal[np.clip(qi, 0, h - 1), np.clip(qj, 0, w - 1)] == 1, self.oob_lethal)
                    cx = ox + (qj - pad + 0.5) * res
                    hit |= lethal & ((cx - xs) ** 2 + (cy - ys) ** 2 <= r2)
            res_in[amb] = hit
        out[inside] = res_in
        return out
