"""Optimizer, initializer, and layer-helper tests."""

import numpy as np
import pytest

from advsynth import nn
from advsynth import tensor as T


def test_adam_first_step_is_signed_lr():
    # with bias correction, step one moves by ~lr*sign(grad)
    params = {"x": np.array([1.0, -2.0], np.float32)}
    opt = nn.Adam(lr=0.1)
    opt.step(params, {"x": np.array([0.5, -0.25], np.float32)})
    assert np.allclose(params["x"], [0.9, -1.9], atol=1e-6)


def test_adam_minimizes_quadratic():
    params = {"x": np.array([10.0], np.float32)}
    opt = nn.Adam(lr=0.1)
    for _ in range(500):
        grad = 2.0 * (params["x"] - 3.0)
        opt.step(params, {"x": grad})
    assert abs(float(params["x"][0]) - 3.0) < 1e-2


def test_adam_skips_missing_and_none():
    params = {"x": np.ones(2, np.float32), "y": np.ones(2, np.float32)}
    opt = nn.Adam(lr=0.5)
    opt.step(params, {"x": np.ones(2, np.float32), "y": None})
    assert not np.allclose(params["x"], 1.0)
    assert np.allclose(params["y"], 1.0)


def test_checksum_sensitivity():
    rng = np.random.default_rng(0)
    params = {"a": rng.standard_normal(5).astype(np.float32),
              "b": rng.standard_normal((2, 3)).astype(np.float32)}
    base = nn.params_checksum(params)
    assert nn.params_checksum(nn.clone_params(params)) == base
    tweaked = nn.clone_params(params)
    tweaked["b"][1, 2] += 1e-6
    assert nn.params_checksum(tweaked) != base
    # insertion order does not matter, names do
    reordered = {"b": params["b"], "a": params["a"]}
    assert nn.params_checksum(reordered) == base
    renamed = {"a": params["a"], "c": params["b"]}
    assert nn.params_checksum(renamed) != base


def test_params_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    params = {"w": rng.standard_normal((3, 4)).astype(np.float32),
              "s": np.float32(2.5).reshape(())}
    path = tmp_path / "p.advw"
    nn.save_params(path, params)
    back = nn.load_params(path)
    assert set(back) == set(params)
    for k in params:
        assert np.array_equal(back[k], params[k])


def test_avg_pool_exact_means(seeded_rng):
    img = seeded_rng.uniform(0, 1, (1, 8, 8, 1)).astype(np.float32)
    g = T.Graph()
    node = g.constant(img)
    pooled = nn.avg_pool(g, node, 2)
    assert pooled.shape == (1, 4, 4, 1)
    want = img.reshape(1, 4, 2, 4, 2, 1).mean(axis=(2, 4))
    assert np.allclose(pooled.value, want, atol=1e-6)
    assert nn.avg_pool(g, node, 1) is node


def test_avg_pool_rejects_multichannel():
    g = T.Graph()
    node = g.constant(np.zeros((1, 4, 4, 2), np.float32))
    with pytest.raises(ValueError):
        nn.avg_pool(g, node, 2)


def test_fc_block_bias_and_activation(seeded_rng):
    params = {}
    nn.fc_params(params, seeded_rng, "fc", 3, 2)
    params["fc.b"][:] = (5.0, -5.0)
    g = T.Graph()
    leaves = nn.Leaves(g, params)
    x = g.constant(np.zeros((4, 3), np.float32))
    out = nn.fc_block(g, x, leaves, "fc", act="relu")
    assert out.shape == (4, 2)
    assert np.allclose(out.value, [[5.0, 0.0]] * 4)


def test_leaves_route_gradients_by_name(seeded_rng):
    params = {}
    nn.fc_params(params, seeded_rng, "fc", 3, 2)
    g = T.Graph()
    leaves = nn.Leaves(g, params)
    x = g.constant(seeded_rng.standard_normal((5, 3)).astype(np.float32))
    out = nn.fc_block(g, x, leaves, "fc", act=None)
    grads = leaves.grads(T.backward(g, g.l2sq(out)))
    assert set(grads) == {"fc.w", "fc.b"}
    assert grads["fc.w"].shape == (3, 2)
    # frozen leaves produce no gradients at all
    g2 = T.Graph()
    frozen = nn.Leaves(g2, params, trainable=False)
    x2 = g2.constant(np.ones((2, 3), np.float32))
    out2 = nn.fc_block(g2, x2, frozen, "fc", act=None)
    assert frozen.grads(T.backward(g2, g2.l2sq(out2))) == {}
