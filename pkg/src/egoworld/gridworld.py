"""Deterministic 2D navigation world with synchronized egocentric and
fixed-camera views.

The egocentric render (FPV) never shows the agent but moves with it; the
fixed-camera renders (TPV) show the whole grid with the agent marker and are
post-processed per camera by a rotation / mirror / pixel-offset transform.
Every render is a pure function of (state, camera), so frames are bit-exact
across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

from .errors import ConfigError, EpisodeFinished

# headings, clockwise on screen (y grows downward)
NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
_HEADING_VEC = {NORTH: (0, -1), EAST: (1, 0), SOUTH: (0, 1), WEST: (-1, 0)}

# actions
FORWARD, BACKWARD, STRAFE_LEFT, STRAFE_RIGHT, TURN_LEFT, TURN_RIGHT = range(6)
N_ACTIONS = 6
ACTION_NAMES = ("forward", "backward", "strafe-left", "strafe-right",
                "turn-left", "turn-right")

# palette; the agent color must never appear in an FPV frame
WALL_COLOR = (0.25, 0.25, 0.28)
TARGET_COLOR = (0.10, 0.35, 0.95)
AGENT_COLOR = (0.90, 0.12, 0.10)
# floor texture: the green channel carries a 2x2 tile of four light shades
# keyed by (x % 2, y % 2) (a plain two-shade checker is invariant under
# 90-degree view rotation, which would make turning invisible in the
# egocentric view), while red and blue carry smooth positional gradients so
# every cell is visually unique and open-floor egocentric frames can be
# localized
FLOOR_CHECKER_G = {(0, 0): 0.84, (1, 0): 0.68, (0, 1): 0.92, (1, 1): 0.60}
FLOOR_BASE = 0.55
FLOOR_TINT = 0.03

FPV_WINDOW = 7          # cells per side of the egocentric window
FPV_LOOKAHEAD = 3       # the window is centered this many cells ahead

MIN_TARGET_DISTANCE = 4


@dataclass(frozen=True)
class EnvConfig:
    grid_size: int = 12
    n_views: int = 8
    horizon: int = 40
    resolution: int = 32

    def validate(self) -> "EnvConfig":
        if self.grid_size < 2 * MIN_TARGET_DISTANCE // 2 + 1:
            raise ConfigError(f"grid_size {self.grid_size} too small")
        if self.n_views < 1:
            raise ConfigError("n_views must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.resolution < FPV_WINDOW:
            raise ConfigError("resolution too small to rasterize the view window")
        return self


@dataclass(frozen=True)
class WorldState:
    grid_size: int
    agent_pos: Tuple[int, int]
    agent_heading: int
    target_pos: Tuple[int, int]
    step_count: int
    horizon: int

    def in_bounds(self, pos: Tuple[int, int]) -> bool:
        return 0 <= pos[0] < self.grid_size and 0 <= pos[1] < self.grid_size

    def on_target(self) -> bool:
        return self.agent_pos == self.target_pos


@dataclass(frozen=True)
class Viewpoint:
    """Fixed-camera transform: rotation (CCW degrees, multiple of 90),
    optional mirror, and a small pixel offset filled with black."""

    id: int
    rotation: int = 0
    mirror: bool = False
    offset: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.rotation % 90 != 0:
            raise ConfigError(f"viewpoint rotation {self.rotation} not a multiple of 90")
        if abs(self.offset[0]) > 2 or abs(self.offset[1]) > 2:
            raise ConfigError(f"viewpoint offset {self.offset} exceeds |2|")


def _rotate_left(heading: int) -> int:
    return (heading - 1) % 4


def _rotate_right(heading: int) -> int:
    return (heading + 1) % 4


def _right_vec(heading: int) -> Tuple[int, int]:
    return _HEADING_VEC[_rotate_right(heading)]


def eligible_target_cells(grid_size: int) -> List[Tuple[int, int]]:
    """Cells at least MIN_TARGET_DISTANCE (Manhattan) from the grid center."""
    cx = cy = grid_size // 2
    return [(x, y) for x in range(grid_size) for y in range(grid_size)
            if abs(x - cx) + abs(y - cy) >= MIN_TARGET_DISTANCE]


def reset(seed: int, config: EnvConfig = EnvConfig()) -> WorldState:
    """Fresh episode: agent at the grid center heading north, target drawn
    uniformly from the cells far enough away."""
    rng = np.random.default_rng(seed)
    cells = eligible_target_cells(config.grid_size)
    target = cells[int(rng.integers(len(cells)))]
    center = (config.grid_size // 2, config.grid_size // 2)
    return WorldState(grid_size=config.grid_size, agent_pos=center, agent_heading=NORTH,
                      target_pos=target, step_count=0, horizon=config.horizon)


def step(state: WorldState, action: int) -> WorldState:
    """Apply one action. Turns rotate the heading, moves translate one cell
    relative to the heading; a move off the grid is a no-op. The step counter
    always advances."""
    if state.step_count >= state.horizon:
        raise EpisodeFinished(f"episode already at horizon {state.horizon}")
    if not 0 <= action < N_ACTIONS:
        raise ConfigError(f"unknown action id {action}")
    heading = state.agent_heading
    pos = state.agent_pos
    if action == TURN_LEFT:
        heading = _rotate_left(heading)
    elif action == TURN_RIGHT:
        heading = _rotate_right(heading)
    else:
        fx, fy = _HEADING_VEC[heading]
        rx, ry = _right_vec(heading)
        dx, dy = {
            FORWARD: (fx, fy),
            BACKWARD: (-fx, -fy),
            STRAFE_LEFT: (-rx, -ry),
            STRAFE_RIGHT: (rx, ry),
        }[action]
        candidate = (pos[0] + dx, pos[1] + dy)
        if state.in_bounds(candidate):
            pos = candidate
    return replace(state, agent_pos=pos, agent_heading=heading,
                   step_count=state.step_count + 1)


def expert_action(state: WorldState) -> int:
    """Greedy oracle: forward when the target lies within 45 degrees of the
    heading, otherwise turn toward it, breaking exact-opposite ties left."""
    dx = state.target_pos[0] - state.agent_pos[0]
    dy = state.target_pos[1] - state.agent_pos[1]
    fx, fy = _HEADING_VEC[state.agent_heading]
    dot = fx * dx + fy * dy
    cross = fx * dy - fy * dx
    if dot >= abs(cross):
        return FORWARD
    # positive cross means the target is clockwise of the heading
    if cross > 0:
        return TURN_RIGHT
    if cross < 0:
        return TURN_LEFT
    return TURN_LEFT  # directly behind: documented tie-break


def _cell_bounds(n_cells: int, resolution: int) -> np.ndarray:
    return (np.arange(n_cells + 1) * resolution) // n_cells


def _expand_cells(cell_colors: np.ndarray, resolution: int) -> np.ndarray:
    """Grow an (n, n, 3) cell-color array to (resolution, resolution, 3)."""
    n = cell_colors.shape[0]
    bounds = _cell_bounds(n, resolution)
    counts = np.diff(bounds)
    return cell_colors.repeat(counts, axis=0).repeat(counts, axis=1)


def _floor_color(x: int, y: int, grid_size: int = 12) -> Tuple[float, float, float]:
    half = grid_size / 2.0
    return (FLOOR_BASE + FLOOR_TINT * (x - half),
            FLOOR_CHECKER_G[(x % 2, y % 2)],
            FLOOR_BASE + FLOOR_TINT * (y - half))


def fpv_cell_colors(state: WorldState) -> np.ndarray:
    """Colors of the 7x7 egocentric cell window (row 0 is farthest ahead)."""
    fx, fy = _HEADING_VEC[state.agent_heading]
    rx, ry = _right_vec(state.agent_heading)
    ax, ay = state.agent_pos
    colors = np.empty((FPV_WINDOW, FPV_WINDOW, 3))
    for row in range(FPV_WINDOW):
        ahead = FPV_WINDOW - 1 - row
        for col in range(FPV_WINDOW):
            lateral = col - FPV_WINDOW // 2
            wx = ax + fx * ahead + rx * lateral
            wy = ay + fy * ahead + ry * lateral
            if not state.in_bounds((wx, wy)):
                colors[row, col] = WALL_COLOR
            elif (wx, wy) == state.target_pos:
                colors[row, col] = TARGET_COLOR
            else:
                colors[row, col] = _floor_color(wx, wy, state.grid_size)
    return colors


def render_fpv(state: WorldState, resolution: int = 32) -> np.ndarray:
    """Egocentric frame: the 7x7 cell window ahead of the agent, rasterized to
    (resolution, resolution, 3) float32 in [0, 1]. The agent itself is never
    drawn; its egomotion shows through the floor texture and walls."""
    return _expand_cells(fpv_cell_colors(state), resolution).astype(np.float32)


def _point_in_triangle(px, py, verts) -> np.ndarray:
    (x0, y0), (x1, y1), (x2, y2) = verts
    d0 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    d1 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    d2 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
    return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))


# agent triangle size relative to one cell; larger than the cell so the agent
# stays visually salient at low resolutions (it is drawn over neighbors)
_TRIANGLE_SPAN = 1.6


def agent_triangle_mask(state: WorldState, resolution: int = 32) -> np.ndarray:
    """Pixel mask (pre-camera-transform) of the agent marker: a triangle
    pointing along the heading, centered on the agent's cell."""
    g = state.grid_size
    bounds = _cell_bounds(g, resolution)
    ax, ay = state.agent_pos
    cx = (bounds[ax] + bounds[ax + 1]) / 2.0
    cy = (bounds[ay] + bounds[ay + 1]) / 2.0
    size = _TRIANGLE_SPAN * resolution / g
    fx, fy = _HEADING_VEC[state.agent_heading]
    rx, ry = _right_vec(state.agent_heading)
    tip = (cx + fx * size * 0.9, cy + fy * size * 0.9)
    base_l = (cx - fx * size * 0.6 - rx * size * 0.7, cy - fy * size * 0.6 - ry * size * 0.7)
    base_r = (cx - fx * size * 0.6 + rx * size * 0.7, cy - fy * size * 0.6 + ry * size * 0.7)
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    return _point_in_triangle(xs + 0.5, ys + 0.5, (tip, base_l, base_r))


def render_tpv(state: WorldState, view: Viewpoint, resolution: int = 32) -> np.ndarray:
    """Fixed-camera frame: the whole grid in world coordinates with the target
    cell and a heading-oriented agent triangle, then the camera's rotation,
    mirror, and offset (vacated pixels black)."""
    g = state.grid_size
    cells = np.empty((g, g, 3))
    for y in range(g):
        for x in range(g):
            cells[y, x] = _floor_color(x, y, g)
    img = _expand_cells(cells, resolution)
    img[agent_triangle_mask(state, resolution)] = AGENT_COLOR
    # target painted last so the agent marker never hides it
    bounds = _cell_bounds(g, resolution)
    tx, ty = state.target_pos
    img[bounds[ty]:bounds[ty + 1], bounds[tx]:bounds[tx + 1]] = TARGET_COLOR

    if view.rotation % 360:
        img = np.rot90(img, k=(view.rotation // 90) % 4)
    if view.mirror:
        img = img[:, ::-1]
    dx, dy = view.offset
    if dx or dy:
        shifted = np.zeros_like(img)
        src_x = slice(max(0, -dx), img.shape[1] - max(0, dx))
        dst_x = slice(max(0, dx), img.shape[1] - max(0, -dx))
        src_y = slice(max(0, -dy), img.shape[0] - max(0, dy))
        dst_y = slice(max(0, dy), img.shape[0] - max(0, -dy))
        shifted[dst_y, dst_x] = img[src_y, src_x]
        img = shifted
    return np.ascontiguousarray(img, dtype=np.float32)


def viewpoints_for_seed(seed: int, n_views: int,
                        rotations: bool = False) -> List[Viewpoint]:
    """Per-trajectory camera set: pairwise-distinct seeded pixel offsets.

    By default every camera keeps the identity rotation. Rotated/mirrored
    cameras (rotations=True) form an exact symmetry group of the square
    grid, and a state representation that is invariant to that group aliases
    world states with their mirror images; real-scene cameras have no such
    exact symmetry. The transform machinery stays available for experiments.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7669]))
    views: List[Viewpoint] = []
    seen = set()
    for i in range(n_views):
        rotation = (i % 4) * 90 if rotations else 0
        mirror = rotations and (i // 4) % 2 == 1
        for _ in range(200):
            offset = (int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
            key = (rotation, mirror, offset)
            if key not in seen:
                seen.add(key)
                views.append(Viewpoint(id=i, rotation=rotation, mirror=mirror, offset=offset))
                break
        else:
            raise ConfigError(f"could not draw {n_views} distinct viewpoints")
    return views
