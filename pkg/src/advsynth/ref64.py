"""Float64 forward replicas used as finite-difference oracles.

The production stack computes in float32, whose arithmetic noise is
amplified by 1/(2h) in central differences.  These mirrors re-run the
same architectures in float64 so FD checks (in the test suite and the
command-line self-test) compare against a clean derivative; they are
forward-only and deliberately independent of the tape implementation.
"""

import numpy as np

from . import scene


def conv64(x, w, pad, stride=1):
    """Stride-s convolution of an (H, W, C) array in float64."""
    (pt, pb), (pl, pr) = pad
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(
        xp, (w.shape[0], w.shape[1]), axis=(0, 1))
    win = win[::stride, ::stride]
    return np.einsum("ijcab,abcd->ijd", win, w)


def relu64(x):
    return np.maximum(x, 0.0)


def sigmoid64(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _p64(params):
    return {k: np.asarray(v, np.float64) for k, v in params.items()}


def render64(nu, size):
    """Analytic renderer in float64: soft ellipses plus the goal blob."""
    nu = np.asarray(nu, np.float64).reshape(-1)
    axis = np.linspace(0.0, scene.WORLD, size)
    px, py = np.meshgrid(axis, axis)          # row i is y = axis[i]
    acc = np.zeros((size, size))
    for k in range((nu.size - 2) // 4):
        cx, cy, rx, ry = nu[2 + 4 * k:6 + 4 * k]
        rx = max(rx - 0.5, 0.0) + 0.5
        ry = max(ry - 0.5, 0.0) + 0.5
        level = ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 - 1.0
        acc += sigmoid64(-scene.SIGMOID_SHARPNESS * level)
    d2 = (px - nu[0]) ** 2 + (py - nu[1]) ** 2
    acc += scene.GOAL_BLOB_GAIN * np.exp(-scene.GOAL_BLOB_FALLOFF * d2)
    return np.minimum(acc, 1.0)


def vae_decode64(vp, nu):
    """Mirror of vae.decode for one code."""
    p = _p64(vp.params)
    h = relu64(np.asarray(nu, np.float64) @ p["dec_fc.w"] + p["dec_fc.b"])
    h = h.reshape(vp.grid, vp.grid, vp.dec_channels[0])
    h = h.repeat(2, axis=0).repeat(2, axis=1)
    h = relu64(conv64(h, p["dec1.w"], ((2, 3), (2, 3))) + p["dec1.b"])
    h = h.repeat(2, axis=0).repeat(2, axis=1)
    h = relu64(conv64(h, p["dec2.w"], ((2, 3), (2, 3))) + p["dec2.b"])
    h = conv64(h, p["dec3.w"], ((2, 2), (2, 2))) + p["dec3.b"]
    return sigmoid64(h[:, :, 0])


def encoder64(params, img):
    """Conv stack + mean head shared by the VAE and the task model."""
    p = _p64(params)
    h = relu64(conv64(img[:, :, None], p["enc1.w"], ((1, 1), (1, 1)))
               + p["enc1.b"])
    h = relu64(conv64(h, p["enc2.w"], ((1, 1), (1, 1)), stride=2)
               + p["enc2.b"])
    h = relu64(conv64(h, p["enc3.w"], ((2, 2), (2, 2)), stride=2)
               + p["enc3.b"])
    return h.reshape(-1) @ p["enc_mu.w"] + p["enc_mu.b"]


def taskmodel_predict64(tm, params, image, past, in_scale, out_scale):
    """One record's waypoint prediction, float64 end to end."""
    p = _p64(params)
    img = np.asarray(image, np.float64)
    if tm.pool > 1:
        k = tm.pool
        s = img.shape[0] // k
        img = img.reshape(s, k, s, k).mean(axis=(1, 3))
    z = encoder64(p, img)
    past = np.asarray(past, np.float64)
    x = np.concatenate([z, (past / in_scale).reshape(-1)])
    x = relu64(x @ p["plan1.w"] + p["plan1.b"])
    x = relu64(x @ p["plan2.w"] + p["plan2.b"])
    x = relu64(x @ p["plan3.w"] + p["plan3.b"])
    out = x @ p["head.w"] + p["head.b"]
    deltas = out.reshape(tm.horizon, 4) * out_scale
    return np.vstack([scene.advance(past[-1], tm.dt)[None],
                      past[-1][None] + deltas])


def taskmodel_loss64(tm, params, images, pasts, labels, in_scale,
                     out_scale):
    """Full-batch waypoint MSE of the task model, float64 end to end."""
    total = 0.0
    n = images.shape[0]
    for i in range(n):
        pred = taskmodel_predict64(tm, params, images[i], pasts[i],
                                   in_scale, out_scale)
        total += np.mean((pred - np.asarray(labels[i], np.float64)) ** 2)
    return total / n
