"""Closed-loop 2D navigation harness for the visual planner.

The world is a rectangle with circular obstacles, treated as infinitely tall
cylinders. The camera sees a pixel as blocked when its viewing ray meets an
obstacle before reaching the ground, or when the ground hit lies outside the
bounds (walls). Pose is ground truth.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numkit.rng import generator
from .numkit.tensor import ContractError
from .planner import (CameraModel, Planner, PlannerConfig, Pose, Primitive, unicycle,
                      write_mask_pgm, write_pgm)

ROBOT_RADIUS = 0.2
GOAL_EPS = 0.3
DT = 0.5


@dataclass
class World:
    bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    obstacles: list[tuple[float, float, float]]  # cx, cy, r
    start: Pose
    goal: Pose
    seed: int = 0

    def __post_init__(self):
        xmin, xmax, ymin, ymax = self.bounds
        if not (xmin < self.goal.x < xmax and ymin < self.goal.y < ymax):
            raise ContractError("goal must lie inside the bounds")
        for p in (self.start, self.goal):
            if self.clearance(p.x, p.y) < 0:
                raise ContractError(f"pose ({p.x}, {p.y}) overlaps an obstacle")

    def clearance(self, x: float, y: float) -> float:
        """Distance from the robot disk at (x, y) to the nearest obstacle or wall (negative = overlap)."""
        xmin, xmax, ymin, ymax = self.bounds
        d = min(x - xmin, xmax - x, y - ymin, ymax - y) - ROBOT_RADIUS
        for cx, cy, r in self.obstacles:
            d = min(d, math.hypot(x - cx, y - cy) - r - ROBOT_RADIUS)
        return d

    def to_dict(self) -> dict:
        return {"bounds": list(self.bounds), "obstacles": [list(o) for o in self.obstacles],
                "start": asdict(self.start), "goal": asdict(self.goal), "seed": self.seed}


def render_segmentation(world: World, pose: Pose, cam: CameraModel) -> np.ndarray:
    """Binary navigability mask (1 = navigable) seen from ``pose``."""
    X, Y, hits = cam.pixel_rays()
    c, s = math.cos(pose.psi), math.sin(pose.psi)
    gx = pose.x + c * X - s * Y
    gy = pose.y + s * X + c * Y
    xmin, xmax, ymin, ymax = world.bounds
    # rays above the horizon run into the boundary walls
    blocked = ~hits | (gx < xmin) | (gx > xmax) | (gy < ymin) | (gy > ymax)
    dx, dy = gx - pose.x, gy - pose.y
    L2 = dx * dx + dy * dy
    for cx, cy, r in world.obstacles:
        # closest point of the segment pose -> ground hit to the disk centre
        t = np.clip(((cx - pose.x) * dx + (cy - pose.y) * dy) / np.maximum(L2, 1e-18), 0.0, 1.0)
        ex = pose.x + t * dx - cx
        ey = pose.y + t * dy - cy
        blocked |= ex * ex + ey * ey <= r * r
    return (~blocked).astype(np.uint8)


def _segment_min_dist(p0, p1, q) -> float:
    d = np.subtract(p1, p0)
    L2 = float(d @ d)
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, float(np.subtract(q, p0) @ d) / L2))
    return float(np.hypot(*(np.add(p0, t * d) - q)))


def _arc_min_dist(pose: Pose, v: float, omega: float, dt: float, q) -> float:
    """Exact minimum distance from point ``q`` to the path driven from ``pose``."""
    end = pose.compose(unicycle(v, omega, dt))
    p0 = np.array([pose.x, pose.y])
    p1 = np.array([end.x, end.y])
    if omega == 0.0 or v == 0.0:
        return _segment_min_dist(p0, p1, q)
    R = v / omega
    # centre of the turning circle (left of heading for omega > 0)
    c = p0 + R * np.array([-math.sin(pose.psi), math.cos(pose.psi)])
    rad = abs(R)
    best = min(float(np.hypot(*(p0 - q))), float(np.hypot(*(p1 - q))))
    sweep = omega * dt
    a0 = math.atan2(p0[1] - c[1], p0[0] - c[0])
    aq = math.atan2(q[1] - c[1], q[0] - c[0])
    rel = (aq - a0) % (2 * math.pi) if sweep > 0 else (a0 - aq) % (2 * math.pi)
    if abs(sweep) >= 2 * math.pi or rel <= abs(sweep):
        best = min(best, abs(float(np.hypot(*(q - c))) - rad))
    return best


def _leaves_bounds(world: World, pose: Pose, v: float, omega: float, dt: float) -> bool:
    xmin, xmax, ymin, ymax = world.bounds
    n = max(2, int(math.ceil(v * dt / 0.01)) + 1)
    for t in np.linspace(0.0, dt, n):
        p = pose.compose(unicycle(v, omega, float(t)))
        if min(p.x - xmin, xmax - p.x, p.y - ymin, ymax - p.y) < ROBOT_RADIUS:
            return True
    return False


def step_world(world: World, pose: Pose, prim: Primitive, dt: float = DT) -> tuple[Pose, bool]:
    """Drive the primitive's controls for ``dt``; return the new pose and a collision flag."""
    if dt <= 0:
        raise ContractError("dt must be positive")
    new = pose.compose(unicycle(prim.v, prim.omega, dt))
    hit = any(_arc_min_dist(pose, prim.v, prim.omega, dt, np.array([cx, cy])) < r + ROBOT_RADIUS
              for cx, cy, r in world.obstacles)
    return new, hit or _leaves_bounds(world, pose, prim.v, prim.omega, dt)


@dataclass
class EpisodeLog:
    poses: list[list[float]] = field(default_factory=list)
    selected: list[int] = field(default_factory=list)
    costs: list[list[float]] = field(default_factory=list)
    outcome: str = "timeout"
    path_length: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def run_episode(world: World, config: PlannerConfig | None = None, max_steps: int = 200,
                cam: CameraModel | None = None, segmenter=None, dump_dir=None) -> EpisodeLog:
    """Render, plan, execute ``DT`` seconds; repeat until goal, collision or ``max_steps``.

    ``segmenter(world, pose, cam) -> mask`` replaces the ground-truth renderer,
    e.g. to close the loop with a trained segmentation model.
    """
    planner = Planner(config, cam)
    render = segmenter or render_segmentation
    pose = world.start
    log = EpisodeLog(poses=[[pose.x, pose.y, pose.psi]])
    dump = Path(dump_dir) if dump_dir is not None else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    for step in range(max_steps):
        if math.hypot(pose.x - world.goal.x, pose.y - world.goal.y) < GOAL_EPS:
            log.outcome = "reached"
            return log
        mask = render(world, pose, planner.cam)
        plan, fld = planner.plan(mask, pose, world.goal)
        if dump is not None:
            write_mask_pgm(mask, dump / f"mask_{step:04d}.pgm")
            write_pgm(fld, dump / f"sedf_{step:04d}.pgm")
        new, hit = step_world(world, pose, planner.library[plan.index], DT)
        log.selected.append(plan.index)
        log.costs.append(plan.total)
        log.path_length += math.hypot(new.x - pose.x, new.y - pose.y)
        pose = new
        log.poses.append([pose.x, pose.y, pose.psi])
        if hit:
            log.outcome = "collided"
            return log
    if math.hypot(pose.x - world.goal.x, pose.y - world.goal.y) < GOAL_EPS:
        log.outcome = "reached"
    return log


# -- scenarios --------------------------------------------------------------------------------

def empty_world(distance: float = 4.0) -> World:
    return World((-1.0, distance + 2.0, -3.0, 3.0), [], Pose(0, 0, 0), Pose(distance, 0, 0))


def random_world(seed: int, n_obstacles: int = 6, length: float = 8.0) -> World:
    """Start at the origin, goal ``length`` ahead, disks scattered in between."""
    rng = generator(seed, "navsim", "world")
    start, goal = Pose(0.0, 0.0, 0.0), Pose(length, 0.0, 0.0)
    bounds = (-1.5, length + 1.5, -3.0, 3.0)
    obs: list[tuple[float, float, float]] = []
    tries = 0
    while len(obs) < n_obstacles and tries < 1000:
        tries += 1
        cx = float(rng.uniform(1.5, length - 1.0))
        cy = float(rng.uniform(-2.0, 2.0))
        r = float(rng.uniform(0.2, 0.45))
        if math.hypot(cx - start.x, cy - start.y) < r + 1.0 or math.hypot(cx - goal.x, cy - goal.y) < r + 0.8:
            continue
        if any(math.hypot(cx - ox, cy - oy) < r + orr + 0.9 for ox, oy, orr in obs):
            continue
        obs.append((cx, cy, r))
    return World(bounds, obs, start, goal, seed)


def gap_wall_world(seed: int) -> World:
    """A row of touching disks across the arena with one gap at a seeded lateral offset."""
    rng = generator(seed, "navsim", "gap")
    wall_x, r = 3.5, 0.25
    gap_c = float(rng.uniform(-1.2, 1.2))
    gap_half = 0.55
    obs = []
    y = -3.0
    while y <= 3.0:
        if abs(y - gap_c) > gap_half + r:
            obs.append((wall_x, y, r))
        y += 2 * r
    return World((-1.5, 8.5, -3.0, 3.0), obs, Pose(0, 0, 0), Pose(7.0, 0.0, 0.0), seed)


def sealed_box_world(seed: int = 0) -> World:
    """Goal enclosed by a ring of overlapping disks."""
    gx, gy = 5.0, 0.0
    ring, r = 1.2, 0.3
    n = int(math.ceil(2 * math.pi * ring / (1.5 * r)))
    obs = [(gx + ring * math.cos(2 * math.pi * k / n), gy + ring * math.sin(2 * math.pi * k / n), r)
           for k in range(n)]
    return World((-1.5, 8.5, -3.0, 3.0), obs, Pose(0, 0, 0), Pose(gx, gy, 0), seed)


def benchmark_suite(seed: int = 0, n: int = 10) -> list[World]:
    return [random_world(int(seed) * 1000 + k) for k in range(n)]
