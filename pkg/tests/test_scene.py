"""Scene tests: sampler laws, renderer values/gradients, planner, collisions."""

import numpy as np
import pytest

from advsynth import scene
from advsynth import tensor as T


# ---------------------------------------------------------------------------
# sampling


def test_sampler_deterministic():
    a = scene.sample_scenario(scene.TRAIN, np.random.default_rng(42))
    b = scene.sample_scenario(scene.TRAIN, np.random.default_rng(42))
    assert a == b


def test_sampler_train_ranges():
    rng = np.random.default_rng(7)
    for _ in range(50):
        s = scene.sample_scenario(scene.TRAIN, rng)
        assert s.distribution == scene.TRAIN
        assert len(s.obstacles) == 4
        for o in s.obstacles:
            assert 15.0 <= o.cx <= 85.0 and 15.0 <= o.cy <= 85.0
            assert 5.0 <= o.rx <= 12.0 and 5.0 <= o.ry <= 12.0
            for p in (s.start, s.goal):
                assert o.level(p[0], p[1], inflate=3.0) > 0


def test_sampler_ood_band():
    rng = np.random.default_rng(8)
    tangent = np.array([1.0, 1.0]) / np.sqrt(2.0)
    normal = np.array([-tangent[1], tangent[0]])
    for _ in range(50):
        s = scene.sample_scenario(scene.OOD, rng)
        assert s.distribution == scene.OOD
        for o in s.obstacles:
            assert 10.0 <= o.rx <= 18.0 and 10.0 <= o.ry <= 18.0
            across = float(np.array([o.cx, o.cy]) @ normal)
            assert abs(across) <= 15.0 + 1e-9


def test_ood_obstacles_bigger_on_average():
    rng = np.random.default_rng(9)
    train, ood = [], []
    for _ in range(1250):
        for o in scene.sample_scenario(scene.TRAIN, rng).obstacles:
            train.extend((o.rx, o.ry))
        for o in scene.sample_scenario(scene.OOD, rng).obstacles:
            ood.extend((o.rx, o.ry))
    assert len(train) == len(ood) == 10 ** 4
    assert np.mean(ood) > np.mean(train)


class _MidpointRng:
    """Stand-in generator whose every draw is the interval midpoint."""

    def uniform(self, lo, hi, size=None):
        mid = (lo + hi) / 2.0
        return mid if size is None else np.full(size, mid)


def test_sampler_rejection_limit():
    # every proposal lands the obstacle center exactly on the goal, so
    # the sampler must give up after its rejection budget, not loop
    with pytest.raises(scene.SceneError) as err:
        scene.sample_scenario(scene.TRAIN, _MidpointRng(), goal=(50.0, 50.0))
    assert "rejection" in str(err.value)


def test_sampler_unknown_distribution():
    with pytest.raises(scene.SceneError):
        scene.sample_scenario("Test", np.random.default_rng(0))


def test_scenario_validate_rejects_covered_start():
    bad = scene.Scenario(goal=(100.0, 100.0),
                         obstacles=[scene.Obstacle(0.0, 0.0, 5.0, 5.0)])
    with pytest.raises(scene.SceneError):
        bad.validate()


# ---------------------------------------------------------------------------
# latent layout


def test_latent_roundtrip_exact():
    s = scene.sample_scenario(scene.TRAIN, np.random.default_rng(11))
    nu = scene.latent_of(s)
    assert nu.mode == scene.ANALYTIC
    assert len(nu.values) == 2 + 4 * 4
    assert scene.scenario_of(nu) == s


def test_latent_radius_clamp():
    nu = np.array([100.0, 100.0, 50.0, 50.0, -1.0, 0.2])
    s = scene.scenario_of(nu)
    assert s.obstacles[0].rx == 0.5
    assert s.obstacles[0].ry == 0.5


def test_latent_bad_length():
    with pytest.raises(scene.SceneError):
        scene.scenario_of(np.zeros(7))
    with pytest.raises(scene.SceneError):
        scene.LatentScene(mode=scene.ANALYTIC, values=np.zeros(4))


def test_vae_mode_latent():
    nu = scene.LatentScene(mode=scene.VAE, values=np.zeros(20))
    with pytest.raises(scene.SceneError):
        _ = nu.n_obs
    with pytest.raises(scene.SceneError) as err:
        scene.render_analytic(nu)
    assert "vae.decode" in str(err.value)


# ---------------------------------------------------------------------------
# renderer


def test_render_shape_and_range():
    s = scene.sample_scenario(scene.TRAIN, np.random.default_rng(12))
    img = scene.render_analytic(scene.latent_of(s), 100)
    assert img.shape == (100, 100)
    assert img.dtype == np.float32
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_range_for_wild_latents(seeded_rng):
    for _ in range(10):
        nu = np.concatenate([seeded_rng.uniform(-50, 150, 2),
                             seeded_rng.uniform(-100, 200, 16)])
        img = scene.render_analytic(nu, 32)
        assert np.all(np.isfinite(img))
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_goal_pixel_intensity():
    # goal blob peaks at exactly 0.5 when no obstacle reaches the pixel
    nu = np.array([100.0, 100.0, 5.0, 95.0, 1.0, 1.0])
    img = scene.render_analytic(nu, 100)
    assert img[99, 99] == pytest.approx(0.5, abs=1e-6)


def test_render_deterministic():
    nu = scene.latent_of(
        scene.sample_scenario(scene.TRAIN, np.random.default_rng(13)))
    a = scene.render_analytic(nu, 64)
    b = scene.render_analytic(nu, 64)
    assert a.tobytes() == b.tobytes()


def _render_with_grad(values, size, pixel):
    """Image pixel as a scalar graph loss; returns (value, d/d nu)."""
    g = T.Graph()
    leaf = g.leaf(T.Tensor(np.asarray(values, np.float32),
                           requires_grad=True))
    img = scene.render_scene_node(g, leaf, size)
    i, j = pixel
    cell = g.slice(img, ((i, i + 1), (j, j + 1)))
    loss = g.sum(cell)
    grads = T.backward(g, loss)
    return float(loss.value), grads[leaf.idx].copy()


def test_render_grad_zero_at_obstacle_center():
    # level-set gradient in cx vanishes at the exact center pixel
    nu = np.array([100.0, 100.0, 50.0, 30.0, 6.0, 4.0])
    size = 101                      # 1 m lattice: (50, 30) is a pixel
    val, grad = _render_with_grad(nu, size, (30, 50))
    assert val > 0.9
    assert abs(grad[2]) <= 1e-6

    def pixel_value(v):
        return float(scene.render_analytic(v, size)[30, 50])

    h = 1e-2
    plus, minus = nu.copy(), nu.copy()
    plus[2] += h
    minus[2] -= h
    fd = (pixel_value(plus) - pixel_value(minus)) / (2 * h)
    assert abs(fd) <= 1e-3


def test_render_grad_matches_fd(seeded_rng):
    """Autodiff vs central differences on 20 live (latent, pixel) pairs.

    Pixels are drawn away from the clamp kink (value in [0.05, 0.9])
    so both sides differentiate the same smooth expression; float32
    rendering puts the comparison floor near 1e-5."""
    size = 64
    pairs = 0
    while pairs < 20:
        s = scene.sample_scenario(scene.TRAIN, seeded_rng)
        nu = scene.latent_of(s).values
        img = scene.render_analytic(nu, size)
        live = np.argwhere((img > 0.05) & (img < 0.9))
        if len(live) == 0:
            continue
        i, j = live[seeded_rng.integers(len(live))]
        _val, grad = _render_with_grad(nu, size, (int(i), int(j)))
        fd = np.zeros_like(nu)
        h = 1e-2
        for k in range(len(nu)):
            plus, minus = nu.copy(), nu.copy()
            plus[k] += h
            minus[k] -= h
            fd[k] = (float(scene.render_analytic(plus, size)[i, j])
                     - float(scene.render_analytic(minus, size)[i, j])) / (2 * h)
        assert T.rel_close(grad.astype(np.float64), fd,
                           rtol=1e-3, atol=1e-5)
        pairs += 1


# ---------------------------------------------------------------------------
# planner


def test_plan_shapes_and_handoff():
    s = scene.sample_scenario(scene.TRAIN, np.random.default_rng(21))
    w_P, w_F = scene.oracle_plan(s, 10, 20)
    assert w_P.shape == (10, 4)
    assert w_F.shape == (21, 4)
    # constant-velocity advance of the last past state lands on w_F[0]
    last = w_P[-1]
    nxt = last[:2] + last[2] * np.array([np.cos(last[3]), np.sin(last[3])])
    assert np.allclose(nxt, w_F[0, :2], atol=1e-9)


def test_plan_straight_without_obstacles():
    s = scene.Scenario(goal=(100.0, 100.0), obstacles=[])
    _w_P, w_F = scene.oracle_plan(s, 10, 20)
    # all positions on the segment: lateral offset exactly zero
    tangent = np.array([1.0, 1.0]) / np.sqrt(2.0)
    normal = np.array([-tangent[1], tangent[0]])
    lateral = w_F[:, :2] @ normal
    assert np.abs(lateral).max() <= 1e-9


def test_plan_collision_free_on_train(seeded_rng):
    for _ in range(200):
        s = scene.sample_scenario(scene.TRAIN, seeded_rng)
        _w_P, w_F = scene.oracle_plan(s, 10, 20)
        assert scene.check_collisions(w_F, s) == 0


def test_plan_beats_straight_line(seeded_rng):
    """The DP objective of the chosen path never exceeds the all-zero
    offset path's objective (re-derived here independently)."""

    def objective(s, positions):
        start = np.asarray(s.start)
        goal = np.asarray(s.goal)
        seg = goal - start
        tangent = seg / np.linalg.norm(seg)
        normal = np.array([-tangent[1], tangent[0]])
        F = positions.shape[0] - 1
        stations = start[None] + np.outer(np.arange(F + 1) / F, seg)
        off = (positions - stations) @ normal
        jerk = float(np.sum((off[2:] - 2 * off[1:-1] + off[:-2]) ** 2))
        pen = 0.0
        for t in range(F + 1):
            x, y = positions[t]
            if any(o.level(x, y, inflate=2.0) <= 0 for o in s.obstacles):
                pen += 1e6
        return jerk + pen

    for _ in range(25):
        s = scene.sample_scenario(scene.TRAIN, seeded_rng)
        _w_P, w_F = scene.oracle_plan(s, 10, 20)
        start = np.asarray(s.start)
        goal = np.asarray(s.goal)
        straight = start[None] + np.outer(np.arange(21) / 20, goal - start)
        assert objective(s, w_F[:, :2]) <= objective(s, straight) + 1e-9


def test_plan_error_when_blocked():
    # start station sits inside the inflated obstacle: no lattice path
    s = scene.Scenario(goal=(100.0, 100.0),
                       obstacles=[scene.Obstacle(0.0, 0.0, 40.0, 40.0)])
    with pytest.raises(scene.SceneError):
        scene.oracle_plan(s, 10, 20)


# ---------------------------------------------------------------------------
# collisions


def test_collisions_separated():
    s = scene.Scenario(goal=(100.0, 0.0),
                       obstacles=[scene.Obstacle(30.0, 40.0, 8.0, 8.0),
                                  scene.Obstacle(70.0, 25.0, 5.0, 5.0)])
    traj = np.column_stack([np.linspace(0, 100, 21), np.zeros(21),
                            np.full(21, 5.0), np.zeros(21)])
    assert scene.check_collisions(traj, s) == 0


def test_collisions_through_center():
    s = scene.Scenario(goal=(100.0, 0.0),
                       obstacles=[scene.Obstacle(50.0, 0.0, 5.0, 5.0)])
    traj = np.column_stack([np.linspace(0, 100, 21), np.zeros(21)])
    assert scene.check_collisions(traj, s) == 1
    assert scene.count_collision_steps(traj, s) >= 1


def test_collisions_interpolation_catches_gaps():
    # waypoints straddle a small obstacle; only interpolation sees it
    s = scene.Scenario(goal=(100.0, 0.0),
                       obstacles=[scene.Obstacle(50.0, 0.0, 2.0, 2.0)])
    traj = np.array([[40.0, 0.0], [60.0, 0.0]])
    assert scene.check_collisions(traj, s) == 1


def test_collisions_refinement_agreement(seeded_rng):
    """Coarse 0.5 m sampling agrees with 0.01 m on 100 random pairs."""
    agree = 0
    for _ in range(100):
        s = scene.sample_scenario(scene.TRAIN, seeded_rng)
        pts = np.column_stack([
            np.linspace(0, 100, 21),
            np.clip(seeded_rng.normal(50, 25, 21), 0, 100)])
        coarse = scene.check_collisions(pts, s, step=0.5)
        fine = scene.check_collisions(pts, s, step=0.01)
        assert coarse == fine
        agree += 1
    assert agree == 100


def test_collisions_monotone_under_shrink(seeded_rng):
    checked = 0
    while checked < 30:
        s = scene.sample_scenario(scene.TRAIN, seeded_rng)
        pts = np.column_stack([
            np.linspace(0, 100, 21),
            np.clip(seeded_rng.normal(50, 20, 21), 0, 100)])
        if scene.check_collisions(pts, s) != 0:
            continue
        shrunk = scene.Scenario(
            goal=s.goal, distribution=s.distribution,
            obstacles=[scene.Obstacle(o.cx, o.cy, 0.6 * o.rx, 0.6 * o.ry)
                       for o in s.obstacles])
        assert scene.check_collisions(pts, shrunk) == 0
        checked += 1


def test_collisions_rejects_empty():
    s = scene.Scenario(goal=(100.0, 0.0), obstacles=[])
    with pytest.raises(scene.SceneError):
        scene.check_collisions(np.zeros((0, 4)), s)


# ---------------------------------------------------------------------------
# PGM export


def test_pgm_roundtrip(tmp_path, seeded_rng):
    img = seeded_rng.uniform(0.0, 1.0, (48, 32))
    path = tmp_path / "scene.pgm"
    scene.write_pgm(path, img)
    back = scene.read_pgm(path)
    assert back.shape == (48, 32)
    assert np.array_equal(back, np.round(255.0 * img).astype(np.uint8))


def test_pgm_header_and_truncation(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(scene.SceneError):
        scene.read_pgm(bad)
    trunc = tmp_path / "trunc.pgm"
    trunc.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
    with pytest.raises(scene.SceneError) as err:
        scene.read_pgm(trunc)
    assert "16" in str(err.value) and "7" in str(err.value)
