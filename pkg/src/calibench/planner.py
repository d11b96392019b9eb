"""Receding-horizon visual planner working directly in image space.

Pipeline for one frame: binary navigability mask -> boundary pixels below the
row gate ``v_thres`` -> exact Euclidean distance field -> clamp at
``alpha * d_max`` -> per-primitive collision risk from the projected poses, plus an
SE(3) goal distance summed along each primitive -> argmin.

Image arrays are indexed ``[v, u]`` (row, column); ``v`` grows downward, so rows
with ``v > v_thres`` are the ground closest to the robot.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numkit.tensor import ContractError


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: ``other`` expressed in this pose's frame, mapped to the world."""
        c, s = math.cos(self.psi), math.sin(self.psi)
        return Pose(self.x + c * other.x - s * other.y, self.y + s * other.x + c * other.y,
                    self.psi + other.psi)

    def inverse_apply(self, x: float, y: float) -> tuple[float, float]:
        """World point -> this pose's frame."""
        c, s = math.cos(self.psi), math.sin(self.psi)
        dx, dy = x - self.x, y - self.y
        return c * dx + s * dy, -s * dx + c * dy

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.psi), math.sin(self.psi)
        T = np.eye(4)
        T[:2, :2] = [[c, -s], [s, c]]
        T[0, 3], T[1, 3] = self.x, self.y
        return T

    def mirrored(self) -> "Pose":
        return Pose(self.x, -self.y, -self.psi)


def unicycle(v: float, omega: float, t: float) -> Pose:
    """Exact pose after driving (v, omega) for time t from the origin."""
    if omega == 0.0:
        return Pose(v * t, 0.0, 0.0)
    r = v / omega
    return Pose(r * math.sin(omega * t), r * (1.0 - math.cos(omega * t)), omega * t)


@dataclass
class Primitive:
    v: float
    omega: float
    horizon: float
    poses: list[Pose]
    image_points: list[tuple[int, int] | None] = field(default_factory=list)


def generate_primitives(n: int, v: float, omega_max: float, horizon: float, m: int) -> list[Primitive]:
    """``n`` constant-control arcs with omega evenly spaced over [-omega_max, omega_max]."""
    if n < 1 or m < 2:
        raise ContractError("need n >= 1 primitives and m >= 2 poses each")
    omegas = [0.0] if n == 1 else list(np.linspace(-omega_max, omega_max, n))
    ts = np.linspace(0.0, horizon, m)
    return [Primitive(v, float(w), horizon, [unicycle(v, float(w), float(t)) for t in ts]) for w in omegas]


# -- camera -----------------------------------------------------------------------------------

@dataclass
class CameraModel:
    """Pinhole camera at ``height`` above the ground, pitched down by ``pitch``.

    Robot frame: x forward, y left, z up. Camera frame: x right, y down, z along
    the optical axis.
    """

    fx: float = 24.0
    fy: float = 24.0
    cx: float = 31.5
    cy: float = 23.5
    height: float = 0.5
    pitch: float = 0.55
    image_h: int = 48
    image_w: int = 64

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")

    def to_camera(self, X, Y):
        """Ground point(s) in the robot frame -> camera-frame (x, y, z)."""
        fwd, right, down = np.asarray(X, float), -np.asarray(Y, float), self.height
        c, s = math.cos(self.pitch), math.sin(self.pitch)
        z = fwd * c + down * s
        y = -fwd * s + down * c
        return right, y, z

    def pixel_rays(self):
        """Ground hit of every pixel centre in the robot frame, with a validity mask.

        Pixels at or above the horizon get a far point along their ray instead.
        """
        v, u = np.mgrid[0:self.image_h, 0:self.image_w].astype(float)
        xc = (u - self.cx) / self.fx
        yc = (v - self.cy) / self.fy
        c, s = math.cos(self.pitch), math.sin(self.pitch)
        # camera ray (xc, yc, 1) in robot axes: forward, left, up
        fwd = c - yc * s
        up = -(s + yc * c)
        left = -xc
        hits = up < -1e-9
        t = np.where(hits, self.height / np.where(hits, -up, 1.0), 1e4)
        return fwd * t, left * t, hits


def project_to_image(p: Pose, cam: CameraModel, robot: Pose | None = None) -> tuple[int, int] | None:
    """Pixel ``(u, v)`` of a ground pose, or ``None`` when behind the camera or off-image.

    ``p`` is in the robot frame unless ``robot`` is given, in which case it is a
    world pose.
    """
    X, Y = (p.x, p.y) if robot is None else robot.inverse_apply(p.x, p.y)
    x, y, z = cam.to_camera(X, Y)
    if z <= 1e-6:
        return None
    u = cam.cx + cam.fx * x / z
    v = cam.cy + cam.fy * y / z
    ui, vi = int(math.floor(u + 0.5)), int(math.floor(v + 0.5))
    if not (0 <= ui < cam.image_w and 0 <= vi < cam.image_h):
        return None
    return ui, vi


def project_primitive(prim: Primitive, cam: CameraModel) -> Primitive:
    prim.image_points = [project_to_image(p, cam) for p in prim.poses]
    return prim


# -- boundary and distance fields -------------------------------------------------------------

def boundary_mask(mask, v_thres: float) -> np.ndarray:
    """Navigable pixels 4-adjacent to a non-navigable one, restricted to rows ``v > v_thres``."""
    nav = np.asarray(mask).astype(bool)
    blocked = ~nav
    near = np.zeros_like(nav)
    near[1:] |= blocked[:-1]
    near[:-1] |= blocked[1:]
    near[:, 1:] |= blocked[:, :-1]
    near[:, :-1] |= blocked[:, 1:]
    edge = nav & near
    rows = np.arange(nav.shape[0])[:, None]
    return edge & (rows > v_thres)


def extract_boundary(mask, v_thres: float) -> np.ndarray:
    """Boundary set as an (N, 2) array of ``(u, v)`` pixel coordinates."""
    vv, uu = np.nonzero(boundary_mask(mask, v_thres))
    return np.stack([uu, vv], axis=1) if len(uu) else np.zeros((0, 2), dtype=int)


_INF = 1e20


def _envelope_1d(f: np.ndarray) -> np.ndarray:
    """Squared distance transform of a sampled function (lower envelope of parabolas)."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=int)
    z = np.empty(n + 1)
    k = 0
    v[0] = 0
    z[0], z[1] = -np.inf, np.inf
    for q in range(1, n):
        if f[q] >= _INF:
            continue
        if f[v[0]] >= _INF and k == 0:
            v[0] = q
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2 * q - 2 * p)
            if s <= z[k] and k > 0:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if f[v[0]] >= _INF:
        d[:] = _INF
        return d
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def edf(omega: np.ndarray, height: int, width: int) -> np.ndarray:
    """Exact Euclidean distance (in pixels) from every pixel to the nearest point of ``omega``.

    Two separable passes: a column sweep giving vertical distances, then the
    lower-envelope transform along each row. An empty set yields the image
    diagonal everywhere.
    """
    omega = np.asarray(omega, dtype=int).reshape(-1, 2)
    if len(omega) == 0:
        return np.full((height, width), math.hypot(height, width))
    feat = np.zeros((height, width), dtype=bool)
    feat[omega[:, 1], omega[:, 0]] = True
    # column pass: distance to nearest feature in the same column
    big = height + width + 1
    g = np.where(feat, 0, big).astype(float)
    for r in range(1, height):
        g[r] = np.minimum(g[r], g[r - 1] + 1)
    for r in range(height - 2, -1, -1):
        g[r] = np.minimum(g[r], g[r + 1] + 1)
    f = np.where(g >= big, _INF, g * g)
    out = np.empty((height, width))
    for r in range(height):
        out[r] = _envelope_1d(f[r])
    return np.sqrt(out)


@dataclass
class DistanceField:
    values: np.ndarray
    alpha: float
    d_max: float

    @property
    def cap(self) -> float:
        return self.alpha * self.d_max


def sedf(E, alpha: float) -> DistanceField:
    """Clamp a distance field at ``alpha * max(E)``.

    Accepts a raw array (``d_max`` taken from it) or a ``DistanceField``, whose
    recorded ``d_max`` is kept so clamping twice with the same alpha is a no-op.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(E, DistanceField):
        values, d_max = E.values, E.d_max
    else:
        values = np.asarray(E, dtype=float)
        d_max = float(values.max()) if values.size else 0.0
    return DistanceField(np.minimum(values, alpha * d_max), alpha, d_max)


def collision_cost(prim: Primitive, field: DistanceField, literal_eq25: bool = False) -> float:
    """Summed per-pose collision term along a projected primitive.

    Default: risk ``(cap - E') / cap`` in [0, 1], out-of-view poses at 1.
    ``literal_eq25``: the clearance ``E'`` itself, out-of-view poses at ``cap``.
    """
    vals = field.values
    if vals.size == 0:
        raise ContractError("empty distance field")
    cap = field.cap
    total = 0.0
    for pt in prim.image_points:
        if literal_eq25:
            total += cap if pt is None else float(vals[pt[1], pt[0]])
        elif pt is None or cap <= 0.0:
            total += 1.0
        else:
            total += (cap - float(vals[pt[1], pt[0]])) / cap
    return total


# -- target progress ----------------------------------------------------------------------------

def rotation_angle(R: np.ndarray) -> float:
    """Magnitude of ``log(R)`` for a 3x3 rotation, in [0, pi]."""
    s = 0.5 * math.sqrt((R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2)
    c = 0.5 * (np.trace(R) - 1.0)
    return math.atan2(s, c)


def se3_distance(T1, T2, a: float, b: float) -> float:
    """``sqrt(a * |log(R1^-1 R2)|^2 + b * |t1 - t2|^2)``; accepts Poses or 4x4 matrices."""
    if a <= 0 or b <= 0:
        raise ContractError("scaling factors a and b must be strictly positive")
    M1 = T1.matrix() if isinstance(T1, Pose) else np.asarray(T1, float)
    M2 = T2.matrix() if isinstance(T2, Pose) else np.asarray(T2, float)
    theta = rotation_angle(M1[:3, :3].T @ M2[:3, :3])
    dt = M1[:3, 3] - M2[:3, 3]
    return math.sqrt(a * theta * theta + b * float(dt @ dt))


def target_cost(prim: Primitive, robot: Pose, goal: Pose, a: float, b: float) -> float:
    return sum(se3_distance(robot.compose(p), goal, a, b) for p in prim.poses)


# -- selection ----------------------------------------------------------------------------------

@dataclass
class PlannerConfig:
    n_primitives: int = 15
    v: float = 0.3
    omega_max: float = 0.8
    horizon: float = 4.0
    m: int = 9
    alpha: float = 0.5
    v_thres_frac: float = 0.4
    w1: float = 1.0
    w2: float = 0.05
    a: float = 0.5
    b: float = 1.0
    literal_eq25: bool = False


@dataclass
class PlanResult:
    index: int
    collision: list[float]
    target: list[float]
    total: list[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def select_primitive(lib: list[Primitive], field: DistanceField, robot: Pose, goal: Pose,
                     w1: float, w2: float, a: float, b: float, literal_eq25: bool = False) -> PlanResult:
    """Argmin of ``w1 * C_c + w2 * C_t`` over the library; ties go to the lowest index."""
    if not lib:
        raise ContractError("empty primitive library")
    cc = [collision_cost(p, field, literal_eq25) for p in lib]
    ct = [target_cost(p, robot, goal, a, b) for p in lib]
    tot = [w1 * c + w2 * t for c, t in zip(cc, ct)]
    best = min(range(len(lib)), key=lambda i: (tot[i], i))
    return PlanResult(best, cc, ct, tot)


class Planner:
    """Holds a projected primitive library and plans one frame at a time."""

    def __init__(self, config: PlannerConfig | None = None, cam: CameraModel | None = None):
        self.config = config or PlannerConfig()
        self.cam = cam or CameraModel()
        c = self.config
        self.library = [project_primitive(p, self.cam)
                        for p in generate_primitives(c.n_primitives, c.v, c.omega_max, c.horizon, c.m)]

    @property
    def v_thres(self) -> float:
        return self.config.v_thres_frac * self.cam.image_h

    def field(self, mask) -> DistanceField:
        omega = extract_boundary(mask, self.v_thres)
        return sedf(edf(omega, self.cam.image_h, self.cam.image_w), self.config.alpha)

    def plan(self, mask, robot: Pose, goal: Pose) -> tuple[PlanResult, DistanceField]:
        c = self.config
        fld = self.field(mask)
        return select_primitive(self.library, fld, robot, goal, c.w1, c.w2, c.a, c.b, c.literal_eq25), fld


def write_pgm(field: DistanceField, path) -> None:
    """16-bit binary PGM, value ``round(65535 * E' / cap)`` (0 when the cap is 0)."""
    cap = field.cap
    scaled = np.zeros_like(field.values) if cap <= 0 else np.rint(65535.0 * field.values / cap)
    data = np.clip(scaled, 0, 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(data.tobytes())


def write_mask_pgm(mask, path) -> None:
    data = (np.asarray(mask).astype(bool) * 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(data.tobytes())
