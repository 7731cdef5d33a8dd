"""Variational autoencoder with a learned global decoder variance.

The encoder doubles as the perception backbone elsewhere; the decoder,
once trained and frozen, is the learned rendering mode: a length-20
code decodes to a grayscale scene image in (0, 1), differentiably.

Upsampling layers realize stride-2 transposed convolutions as
nearest-neighbor upsample + ordinary convolution.  The two 6x6 kernels
use asymmetric (2, 3) padding so the spatial chain closes exactly
(size/4 -> size); the 5x5 kernel keeps symmetric padding 2.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T

DTYPE = np.float32

LATENT_DIM = 20
IMAGE_SIZE = 64
ENC_CHANNELS = (4, 8, 16)
DEC_CHANNELS = (8, 6, 4)

_PAD_EVEN = ((2, 3), (2, 3))    # 6x6 kernels, size-preserving


class VaeError(RuntimeError):
    """Bad inputs to the VAE or a diverged training run."""


@dataclass
class VaeParams:
    image_size: int = IMAGE_SIZE
    latent_dim: int = LATENT_DIM
    enc_channels: tuple = ENC_CHANNELS
    dec_channels: tuple = DEC_CHANNELS
    params: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise VaeError("image size must be divisible by 4, got %d"
                           % self.image_size)

    @property
    def grid(self):
        """Spatial size at the encoder/decoder bottleneck."""
        return self.image_size // 4

    def decoder_checksum(self):
        dec = {k: v for k, v in self.params.items() if k.startswith("dec")}
        return nn.params_checksum(dec)


def init_vae(rng, image_size=IMAGE_SIZE, latent_dim=LATENT_DIM,
             enc_channels=ENC_CHANNELS, dec_channels=DEC_CHANNELS):
    vp = VaeParams(image_size=image_size, latent_dim=latent_dim,
                   enc_channels=tuple(enc_channels),
                   dec_channels=tuple(dec_channels))
    p = vp.params
    c1, c2, c3 = vp.enc_channels
    nn.conv_params(p, rng, "enc1", 3, 3, 1, c1)
    nn.conv_params(p, rng, "enc2", 4, 4, c1, c2)
    nn.conv_params(p, rng, "enc3", 5, 5, c2, c3)
    flat = vp.grid * vp.grid * c3
    nn.fc_params(p, rng, "enc_mu", flat, latent_dim, head=True)
    nn.fc_params(p, rng, "enc_lv", flat, latent_dim, head=True)
    d1, d2, d3 = vp.dec_channels
    nn.fc_params(p, rng, "dec_fc", latent_dim, vp.grid * vp.grid * d1)
    nn.conv_params(p, rng, "dec1", 6, 6, d1, d2)
    nn.conv_params(p, rng, "dec2", 6, 6, d2, d3)
    nn.conv_params(p, rng, "dec3", 5, 5, d3, 1)
    p["log_sigma_rec"] = np.zeros((), DTYPE)
    return vp


# ---------------------------------------------------------------------------
# graph forward passes


def encode_node(g, img_node, leaves, vp):
    """(B, S, S, 1) image batch -> (mu, logvar) nodes, (B, latent) each."""
    if (len(img_node.shape) != 4 or img_node.shape[1] != vp.image_size
            or img_node.shape[2] != vp.image_size or img_node.shape[3] != 1):
        raise VaeError("encoder wants (B, %d, %d, 1) images, got %r"
                       % (vp.image_size, vp.image_size,
                          tuple(img_node.shape)))
    h = nn.conv_block(g, img_node, leaves, "enc1", stride=1, padding=1)
    h = nn.conv_block(g, h, leaves, "enc2", stride=2, padding=1)
    h = nn.conv_block(g, h, leaves, "enc3", stride=2, padding=2)
    batch = h.shape[0]
    flat = g.reshape(h, (batch, h.shape[1] * h.shape[2] * h.shape[3]))
    mu = nn.fc_block(g, flat, leaves, "enc_mu", act=None)
    lv = nn.fc_block(g, flat, leaves, "enc_lv", act=None)
    return mu, lv


def decode_node(g, nu_node, leaves, vp):
    """(B, latent) codes -> (B, S, S, 1) images in (0, 1)."""
    if len(nu_node.shape) != 2 or nu_node.shape[1] != vp.latent_dim:
        raise VaeError("decoder wants (B, %d) codes, got %r"
                       % (vp.latent_dim, tuple(nu_node.shape)))
    batch = nu_node.shape[0]
    d1 = vp.dec_channels[0]
    h = nn.fc_block(g, nu_node, leaves, "dec_fc", act="relu")
    h = g.reshape(h, (batch, vp.grid, vp.grid, d1))
    h = g.upsample2d(h, 2)
    h = nn.conv_block(g, h, leaves, "dec1", stride=1, padding=_PAD_EVEN)
    h = g.upsample2d(h, 2)
    h = nn.conv_block(g, h, leaves, "dec2", stride=1, padding=_PAD_EVEN)
    h = nn.conv_block(g, h, leaves, "dec3", stride=1, padding=2,
                      act="sigmoid")
    return h


# ---------------------------------------------------------------------------
# numpy conveniences (forward only)


def encode(vp, image):
    """Single image -> (mu, logvar), each a latent_dim vector."""
    img = np.asarray(image, DTYPE)
    if img.shape != (vp.image_size, vp.image_size):
        raise VaeError("expected a %dx%d image, got %r"
                       % (vp.image_size, vp.image_size, img.shape))
    g = T.Graph()
    leaves = nn.Leaves(g, vp.params, trainable=False)
    node = g.constant(img.reshape(1, vp.image_size, vp.image_size, 1))
    mu, lv = encode_node(g, node, leaves, vp)
    return mu.value.reshape(-1).copy(), lv.value.reshape(-1).copy()


def decode(vp, nu):
    """Length-20 code -> image array (S, S)."""
    code = np.asarray(nu, DTYPE).reshape(-1)
    if code.shape != (vp.latent_dim,):
        raise VaeError("expected a length-%d code, got shape %r"
                       % (vp.latent_dim, np.asarray(nu).shape))
    g = T.Graph()
    leaves = nn.Leaves(g, vp.params, trainable=False)
    node = g.constant(code.reshape(1, -1))
    img = decode_node(g, node, leaves, vp)
    return img.value.reshape(vp.image_size, vp.image_size).copy()


def vae_loss(image, mu, logvar, reconstruction, log_sigma_rec):
    """Per-image loss: N*(0.5*MSE*e^(-2*ls) + ls) + KL."""
    x = np.asarray(image, np.float64)
    r = np.asarray(reconstruction, np.float64)
    if x.shape != r.shape:
        raise VaeError("image/reconstruction shape mismatch: %r vs %r"
                       % (x.shape, r.shape))
    mu = np.asarray(mu, np.float64)
    lv = np.asarray(logvar, np.float64)
    if mu.shape != lv.shape:
        raise VaeError("mu/logvar shape mismatch: %r vs %r"
                       % (mu.shape, lv.shape))
    ls = float(log_sigma_rec)
    n = x.size
    mse = float(np.mean((x - r) ** 2))
    kl = 0.5 * float(np.sum(np.exp(lv) + mu * mu - 1.0 - lv))
    return n * (0.5 * mse * np.exp(-2.0 * ls) + ls) + kl


# ---------------------------------------------------------------------------
# training


def _batch_loss_node(g, leaves, vp, images, eps):
    """Mean per-image loss over one minibatch, as a scalar node."""
    batch, n_pix = images.shape[0], vp.image_size ** 2
    img = g.constant(images.reshape(batch, vp.image_size, vp.image_size, 1))
    mu, lv = encode_node(g, img, leaves, vp)
    std = g.exp(g.scale(lv, 0.5))
    nu = g.add(mu, g.mul(std, g.constant(eps)))
    recon = decode_node(g, nu, leaves, vp)

    ls = leaves["log_sigma_rec"]
    mse = g.mse(recon, img)
    rec_term = g.add(g.scale(g.mul(mse, g.exp(g.scale(ls, -2.0))),
                             0.5 * n_pix),
                     g.scale(ls, float(n_pix)))
    kl_sum = g.sub(g.add(g.sum(g.exp(lv)), g.l2sq(mu)),
                   g.add(g.sum(lv),
                         g.constant(DTYPE(batch * vp.latent_dim))))
    return g.add(rec_term, g.scale(kl_sum, 0.5 / batch))


def train_vae(images, epochs, lr=1e-3, seed=0, batch_size=32,
              image_size=IMAGE_SIZE, latent_dim=LATENT_DIM,
              enc_channels=ENC_CHANNELS, dec_channels=DEC_CHANNELS):
    """Adam training with reparameterized sampling; returns VaeParams.

    Deterministic for a given seed: the init draw, every shuffle, and
    every noise draw consume one generator in a fixed order.
    """
    data = np.asarray(images, DTYPE)
    if data.ndim != 3 or data.shape[0] == 0:
        raise VaeError("expected a nonempty (N, S, S) image stack, got %r"
                       % (data.shape,))
    if data.shape[1] != image_size or data.shape[2] != image_size:
        raise VaeError("images are %dx%d but image_size=%d"
                       % (data.shape[1], data.shape[2], image_size))
    rng = np.random.default_rng(seed)
    vp = init_vae(rng, image_size=image_size, latent_dim=latent_dim,
                  enc_channels=enc_channels, dec_channels=dec_channels)
    opt = nn.Adam(lr=lr)
    n = data.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            batch = data[order[lo:lo + batch_size]]
            eps = rng.standard_normal(
                (batch.shape[0], latent_dim)).astype(DTYPE)
            g = T.Graph()
            leaves = nn.Leaves(g, vp.params)
            loss = _batch_loss_node(g, leaves, vp, batch, eps)
            grads = leaves.grads(T.backward(g, loss))
            opt.step(vp.params, grads)
            losses.append(float(loss.value))
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise VaeError("non-finite training loss at epoch %d" % epoch)
        vp.trace.append(mean_loss)
    return vp


def reconstruction_mse(vp, images, chunk=64):
    """Mean per-pixel MSE of mean-code reconstructions over a stack."""
    data = np.asarray(images, DTYPE)
    if data.ndim != 3 or data.shape[0] == 0:
        raise VaeError("expected a nonempty (N, S, S) image stack")
    total, count = 0.0, 0
    for lo in range(0, data.shape[0], chunk):
        batch = data[lo:lo + chunk]
        g = T.Graph()
        leaves = nn.Leaves(g, vp.params, trainable=False)
        img = g.constant(batch.reshape(batch.shape[0], vp.image_size,
                                       vp.image_size, 1))
        mu, _lv = encode_node(g, img, leaves, vp)
        recon = decode_node(g, mu, leaves, vp)
        diff = (recon.value.reshape(batch.shape)
                - batch).astype(np.float64)
        total += float(np.sum(diff * diff))
        count += batch.size
    return total / count
