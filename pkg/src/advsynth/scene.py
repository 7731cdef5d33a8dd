"""Scenario sampling, differentiable rendering, label planning, collisions.

World model: a 100 m x 100 m plane, a start pinned at the origin, a
goal, and a fixed number of axis-aligned ellipse obstacles.  A scene
has an interpretable latent vector [goal_x, goal_y, (cx, cy, rx, ry)
per obstacle]; the renderer maps that vector to a grayscale image on
the tensor graph so every pixel is differentiable in every latent
entry.  Labels come from a lateral-offset lattice planner, and
collision checks are exact ellipse-interior tests on an interpolated
position trace.
"""

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

TRAIN = "Train"
OOD = "OoD"
ANALYTIC = "analytic"
VAE = "vae"

WORLD = 100.0
GOAL_DEFAULT = (100.0, 100.0)
N_OBS_DEFAULT = 4
MIN_RADIUS = 0.5
CLEARANCE = 3.0
SIGMOID_SHARPNESS = 8.0
GOAL_BLOB_GAIN = 0.5
GOAL_BLOB_FALLOFF = 0.125     # 1 / (2 * 2^2)


class SceneError(Exception):
    """Raised for invalid scenes, latents, and failed planning."""


@dataclass
class Obstacle:
    cx: float
    cy: float
    rx: float
    ry: float

    def __post_init__(self):
        if not (self.rx > 0 and self.ry > 0):
            raise SceneError("obstacle semi-axes must be positive")

    def level(self, x, y, inflate=0.0):
        """Ellipse level set: negative inside, zero on the boundary."""
        return (((x - self.cx) / (self.rx + inflate)) ** 2
                + ((y - self.cy) / (self.ry + inflate)) ** 2 - 1.0)


@dataclass
class Scenario:
    goal: tuple = GOAL_DEFAULT
    obstacles: list = field(default_factory=list)
    distribution: str = TRAIN
    start: tuple = (0.0, 0.0)

    def validate(self):
        for obs in self.obstacles:
            for px, py in (self.start, self.goal):
                if obs.level(px, py) <= 0:
                    raise SceneError("start/goal inside an obstacle")
        return self


@dataclass
class LatentScene:
    """A scene code: either the interpretable layout or a VAE code."""

    mode: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float).reshape(-1)
        if self.mode not in (ANALYTIC, VAE):
            raise SceneError("unknown latent mode %r" % (self.mode,))
        if self.mode == ANALYTIC and (len(self.values) < 6
                                      or (len(self.values) - 2) % 4):
            raise SceneError(
                "analytic latent length must be 2 + 4*n_obs, got %d"
                % len(self.values))

    @property
    def n_obs(self):
        if self.mode != ANALYTIC:
            raise SceneError("obstacle count undefined for %r mode"
                             % (self.mode,))
        return (len(self.values) - 2) // 4


# ---------------------------------------------------------------------------
# sampling


def sample_scenario(dist, rng, n_obs=N_OBS_DEFAULT, goal=GOAL_DEFAULT):
    """Draw one scenario; deterministic for a given generator state.

    Train: centers uniform in [15, 85]^2, semi-axes in [5, 12].
    OoD: semi-axes in [10, 18], centers uniform in the band within
    perpendicular distance 15 of the start-goal segment.  Obstacles
    too close to the start or goal (inside the 3 m inflation) are
    rejected and redrawn; more than 1000 rejections means the
    parameters are inconsistent and raises.
    """
    if dist not in (TRAIN, OOD):
        raise SceneError("unknown distribution %r" % (dist,))
    start = np.array([0.0, 0.0])
    g = np.asarray(goal, float)
    seg = g - start
    seg_len = float(np.linalg.norm(seg))
    if seg_len <= 1e-9:
        raise SceneError("goal coincides with start")
    tangent = seg / seg_len
    normal = np.array([-tangent[1], tangent[0]])

    obstacles = []
    rejections = 0
    while len(obstacles) < n_obs:
        if dist == TRAIN:
            cx, cy = rng.uniform(15.0, 85.0, 2)
            rx, ry = rng.uniform(5.0, 12.0, 2)
        else:
            rx, ry = rng.uniform(10.0, 18.0, 2)
            along = rng.uniform(0.0, seg_len)
            across = rng.uniform(-15.0, 15.0)
            cx, cy = start + along * tangent + across * normal
        obs = Obstacle(float(cx), float(cy), float(rx), float(ry))
        clear = all(obs.level(px, py, inflate=CLEARANCE) > 0
                    for px, py in (tuple(start), tuple(g)))
        if clear:
            obstacles.append(obs)
        else:
            rejections += 1
            if rejections > 1000:
                raise SceneError(
                    "rejection limit reached; sampling parameters leave "
                    "no room for obstacle %d" % len(obstacles))
    return Scenario(goal=tuple(float(v) for v in g), obstacles=obstacles,
                    distribution=dist).validate()


# ---------------------------------------------------------------------------
# latent layout


def latent_of(scenario):
    """Interpretable latent [goal, (cx, cy, rx, ry) per obstacle]."""
    values = list(scenario.goal)
    for obs in scenario.obstacles:
        values.extend((obs.cx, obs.cy, obs.rx, obs.ry))
    return LatentScene(mode=ANALYTIC, values=np.array(values, float))


def scenario_of(nu, distribution=TRAIN):
    """Inverse of latent_of; semi-axes are clamped up to 0.5 m.

    Perturbed latents may carry arbitrary geometry (obstacles over the
    start, negative radii), so no validity check beyond the clamp.
    """
    if isinstance(nu, LatentScene):
        if nu.mode != ANALYTIC:
            raise SceneError("scenario_of needs an analytic latent")
        values = nu.values
    else:
        values = np.asarray(nu, float).reshape(-1)
    if len(values) < 6 or (len(values) - 2) % 4:
        raise SceneError("analytic latent length must be 2 + 4*n_obs, "
                         "got %d" % len(values))
    obstacles = []
    for k in range((len(values) - 2) // 4):
        cx, cy, rx, ry = values[2 + 4 * k:6 + 4 * k]
        obstacles.append(Obstacle(float(cx), float(cy),
                                  max(float(rx), MIN_RADIUS),
                                  max(float(ry), MIN_RADIUS)))
    return Scenario(goal=(float(values[0]), float(values[1])),
                    obstacles=obstacles, distribution=distribution)


# ---------------------------------------------------------------------------
# rendering


def _pixel_grids(size):
    axis = np.linspace(0.0, WORLD, size, dtype=T.DTYPE)
    px = np.tile(axis, size)                    # column index varies fastest
    py = np.repeat(axis, size)
    return px, py


def render_scene_node(graph, nu_node, size):
    """Build the image as a graph node: (size, size) pixels in [0, 1].

    Pixel (i, j) sits at world (x = j * 100/(size-1), y = i * 100/(size-1)),
    so row 0 is the y = 0 edge.  Intensity is a sum of soft ellipse
    indicators sigmoid(-8 * level) and a Gaussian goal blob of height
    0.5, clamped above at 1.  Semi-axes pass through max(r, 0.5),
    written with relu so the clamp stays on the graph.
    """
    nvals = nu_node.shape[0] if nu_node.shape else 0
    if nvals < 6 or (nvals - 2) % 4:
        raise SceneError("latent node length must be 2 + 4*n_obs, got %d"
                         % nvals)
    n_obs = (nvals - 2) // 4
    g = graph
    npix = size * size
    px_a, py_a = _pixel_grids(size)
    px = g.constant(px_a)
    py = g.constant(py_a)
    neg_one = g.constant(np.full(npix, -1.0, dtype=T.DTYPE))

    def entry(i):
        return g.reshape(g.slice(nu_node, ((i, i + 1),)), ())

    def smear(scalar_node):
        return g.bcast(scalar_node, (npix,))

    acc = None
    for k in range(n_obs):
        base = 2 + 4 * k
        cx, cy, rx, ry = (entry(base + j) for j in range(4))
        half = g.constant(np.asarray(0.5, dtype=T.DTYPE))
        rx_eff = g.add(g.relu(g.sub(rx, half)), half)
        ry_eff = g.add(g.relu(g.sub(ry, half)), half)
        tx = g.mul(g.sub(px, smear(cx)), smear(g.recip(rx_eff)))
        ty = g.mul(g.sub(py, smear(cy)), smear(g.recip(ry_eff)))
        level = g.add(g.add(g.mul(tx, tx), g.mul(ty, ty)), neg_one)
        blob = g.sigmoid(g.scale(level, -SIGMOID_SHARPNESS))
        acc = blob if acc is None else g.add(acc, blob)

    gx = g.sub(px, smear(entry(0)))
    gy = g.sub(py, smear(entry(1)))
    d2 = g.add(g.mul(gx, gx), g.mul(gy, gy))
    goal_blob = g.scale(g.exp(g.scale(d2, -GOAL_BLOB_FALLOFF)),
                        GOAL_BLOB_GAIN)
    acc = g.add(acc, goal_blob)
    clamped = g.sub(acc, g.relu(g.add(acc, neg_one)))
    return g.reshape(clamped, (size, size))


def render_analytic(nu, size=100):
    """Render an interpretable latent to a (size, size) float32 image.

    Accepts a LatentScene or a bare vector.  VAE-mode latents have no
    geometry here; decode those with vae.decode instead.
    """
    if isinstance(nu, LatentScene):
        if nu.mode != ANALYTIC:
            raise SceneError("vae-mode latent has no analytic geometry; "
                             "decode it with vae.decode")
        values = nu.values
    else:
        values = np.asarray(nu, float).reshape(-1)
    g = T.Graph()
    node = render_scene_node(g, g.constant(values.astype(T.DTYPE)), size)
    return node.value.copy()


# ---------------------------------------------------------------------------
# label planner


LATTICE_OFFSETS = np.linspace(-30.0, 30.0, 21)
OBSTACLE_PENALTY = 1e6
PLAN_INFLATION = 2.0


def _station_penalties(scenario, stations, offsets, normal):
    """penalty[t, k] for the lattice point at station t, offset k."""
    pts = stations[:, None, :] + offsets[None, :, None] * normal[None, None]
    pen = np.zeros(pts.shape[:2])
    for obs in scenario.obstacles:
        inside = obs.level(pts[..., 0], pts[..., 1],
                           inflate=PLAN_INFLATION) <= 0
        pen[inside] = OBSTACLE_PENALTY
    return pen


def _lattice_objective(offsets_path, penalties_path):
    """Sum of squared second differences plus station penalties."""
    o = np.asarray(offsets_path, float)
    jerk = float(np.sum((o[2:] - 2 * o[1:-1] + o[:-2]) ** 2))
    return jerk + float(np.sum(penalties_path))


def oracle_plan(scenario, P, F, dt=1.0):
    """Collision-free smooth labels: past run-up and future waypoints.

    Dynamic program over lateral offsets from the start-goal segment
    with both endpoints pinned on the segment; cost is squared offset
    second-differences plus a large penalty for lattice points inside
    any obstacle inflated by 2 m.  The chosen positions are lifted to
    (x, y, v, theta) states by finite differences, and the past
    trajectory is a constant-velocity run-up along the initial heading
    ending one step before the first waypoint.
    """
    start = np.asarray(scenario.start, float)
    goal = np.asarray(scenario.goal, float)
    seg = goal - start
    seg_len = float(np.linalg.norm(seg))
    if seg_len <= 1e-9:
        raise SceneError("degenerate scenario: start equals goal")
    tangent = seg / seg_len
    normal = np.array([-tangent[1], tangent[0]])
    stations = start[None] + np.outer(np.arange(F + 1) / F, seg)
    offsets = LATTICE_OFFSETS
    K = len(offsets)
    zero_idx = int(np.argmin(np.abs(offsets)))
    pen = _station_penalties(scenario, stations, offsets, normal)

    # cost[j, k]: best path ending with offsets (o_{t-1}=j, o_t=k)
    big = np.inf
    cost = np.full((K, K), big)
    cost[zero_idx, :] = pen[0, zero_idx] + pen[1, :]
    parents = np.zeros((F + 1, K, K), dtype=np.int8)
    second = (offsets[None, None, :] - 2.0 * offsets[None, :, None]
              + offsets[:, None, None]) ** 2          # [i, j, k]
    for t in range(2, F + 1):
        through = cost[:, :, None] + second           # [i, j, k]
        pick = np.argmin(through, axis=0)             # [j, k]
        cost = np.take_along_axis(through, pick[None], axis=0)[0]
        cost += pen[t][None, :]
        parents[t] = pick
    final = cost[:, zero_idx]                         # o_F pinned to 0
    j_best = int(np.argmin(final))
    if final[j_best] >= OBSTACLE_PENALTY:
        raise SceneError("no collision-free lattice path for this scenario")

    idx = np.zeros(F + 1, dtype=int)
    idx[F] = zero_idx
    idx[F - 1] = j_best
    for t in range(F, 1, -1):
        idx[t - 2] = parents[t][idx[t - 1], idx[t]]
    assert idx[0] == zero_idx
    positions = stations + offsets[idx][:, None] * normal[None]

    w_F = np.zeros((F + 1, 4))
    w_F[:, :2] = positions
    deltas = np.diff(positions, axis=0)
    speeds = np.linalg.norm(deltas, axis=1) / dt
    heads = np.arctan2(deltas[:, 1], deltas[:, 0])
    w_F[:F, 2] = speeds
    w_F[:F, 3] = heads
    w_F[F, 2] = speeds[-1]
    w_F[F, 3] = heads[-1]

    w_P = np.zeros((P, 4))
    dir0 = np.array([math.cos(heads[0]), math.sin(heads[0])])
    for k in range(P):
        w_P[k, :2] = positions[0] - (P - k) * speeds[0] * dt * dir0
        w_P[k, 2] = speeds[0]
        w_P[k, 3] = heads[0]
    return w_P, w_F


def advance(state, dt=1.0):
    """Constant-velocity step of an (x, y, v, theta) state.

    Labels satisfy advance(w_P[-1]) == w_F[0] exactly, which is how the
    current state is recovered from the past at prediction time.
    """
    x, y, v, th = (float(s) for s in np.asarray(state).reshape(4))
    return np.array([x + dt * v * math.cos(th),
                     y + dt * v * math.sin(th), v, th])


# ---------------------------------------------------------------------------
# collisions


def _segment_points(p0, p1, step):
    length = float(np.linalg.norm(p1 - p0))
    npts = max(2, int(math.ceil(length / step)) + 1)
    ts = np.linspace(0.0, 1.0, npts)
    return p0[None] + ts[:, None] * (p1 - p0)[None]


def _points_collide(points, scenario):
    for obs in scenario.obstacles:
        if np.any(obs.level(points[:, 0], points[:, 1]) <= 0):
            return True
    return False


def check_collisions(trajectory, scenario, step=0.5):
    """1 if the interpolated position trace enters any obstacle, else 0.

    One scenario counts at most a single collision; use
    count_collision_steps for the per-timestep breakdown.
    """
    traj = np.asarray(trajectory, float)
    if traj.ndim != 2 or traj.shape[0] < 1:
        raise SceneError("trajectory must be a nonempty state sequence")
    pos = traj[:, :2]
    if pos.shape[0] == 1:
        return int(_points_collide(pos, scenario))
    for t in range(pos.shape[0] - 1):
        if _points_collide(_segment_points(pos[t], pos[t + 1], step),
                           scenario):
            return 1
    return 0


def count_collision_steps(trajectory, scenario, step=0.5):
    """Number of trajectory segments whose interpolation hits an obstacle."""
    traj = np.asarray(trajectory, float)
    pos = traj[:, :2]
    hits = 0
    for t in range(pos.shape[0] - 1):
        if _points_collide(_segment_points(pos[t], pos[t + 1], step),
                           scenario):
            hits += 1
    return hits


# ---------------------------------------------------------------------------
# image export


def write_pgm(path, image):
    """Binary PGM, maxval 255, intensity = round(255 * pixel).

    Row 0 of the array (the y = 0 world edge) is written first.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise SceneError("image must be 2-d")
    data = np.round(255.0 * np.asarray(img, float)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(data.tobytes())


def read_pgm(path):
    """Read a binary PGM written by write_pgm; returns uint8 (h, w)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise SceneError("not a binary PGM file: %s" % (path,))
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise SceneError("malformed PGM header in %s" % (path,)) from None
    if maxval != 255:
        raise SceneError("unsupported PGM maxval %d" % maxval)
    payload = parts[3]
    if len(payload) < w * h:
        raise SceneError("PGM payload truncated: expected %d bytes, got %d"
                         % (w * h, len(payload)))
    return np.frombuffer(payload[:w * h], dtype=np.uint8).reshape(h, w)
