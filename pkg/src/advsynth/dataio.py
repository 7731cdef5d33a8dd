"""Dataset records and their binary on-disk format.

A record bundles everything one training example needs: the image the
model sees, the scene code it was rendered from, the waypoint history
fed to the planner, the label waypoints, and the ground-truth obstacle
geometry so collision checks never have to re-derive it from pixels.

Files carry a fixed header (magic ``ADVD``) followed by packed records,
little-endian throughout.  Images are stored as one byte per pixel;
records quantize their image to that 256-level grid at construction so
a write/read round trip is bit-exact.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import scene

MAGIC = b"ADVD"
VERSION = 1

_MODE_CODE = {scene.ANALYTIC: 0, scene.VAE: 1}
_CODE_MODE = {v: k for k, v in _MODE_CODE.items()}

_HEADER = struct.Struct("<4sIIHHHHHB")


class DataError(Exception):
    """Raised for malformed records and unreadable dataset files."""


def quantize_image(image):
    """Snap a [0, 1] image onto the 256-level grid used on disk."""
    arr = np.clip(np.asarray(image, np.float32), 0.0, 1.0)
    return (np.round(arr * 255.0).astype(np.uint8).astype(np.float32)
            / np.float32(255.0))


def _snap32(x):
    return float(np.float32(x))


def _snap_scenario(scn):
    """Rebuild a scenario with float32-representable geometry.

    The file stores the block as f32; snapping at record creation makes
    the in-memory scenario identical to what a reader will see, so the
    geometry used for evaluation does not depend on whether the dataset
    visited disk.
    """
    obstacles = [scene.Obstacle(_snap32(o.cx), _snap32(o.cy),
                                _snap32(o.rx), _snap32(o.ry))
                 for o in scn.obstacles]
    return scene.Scenario(goal=(_snap32(scn.goal[0]), _snap32(scn.goal[1])),
                          obstacles=obstacles,
                          distribution=scn.distribution,
                          start=scn.start)


@dataclass
class DataRecord:
    """One (image, latent, past, label) example plus its geometry."""

    image: np.ndarray                 # (S, S) float32 in [0, 1]
    latent: scene.LatentScene
    w_past: np.ndarray                # (P, 4) float32
    w_future: np.ndarray              # (F+1, 4) float32
    scenario: scene.Scenario = None
    adversarial: bool = False
    relabeled: bool = False

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 2 or img.shape[0] != img.shape[1]:
            raise DataError("image must be square 2-d, got %r"
                            % (img.shape,))
        self.image = quantize_image(img)
        if not isinstance(self.latent, scene.LatentScene):
            raise DataError("latent must be a LatentScene")
        self.latent = scene.LatentScene(
            self.latent.mode,
            self.latent.values.astype(np.float32).astype(float))
        wp = np.asarray(self.w_past, np.float32)
        wf = np.asarray(self.w_future, np.float32)
        if wp.ndim != 2 or wp.shape[1] != 4:
            raise DataError("w_past must be (P, 4), got %r" % (wp.shape,))
        if wf.ndim != 2 or wf.shape[1] != 4 or wf.shape[0] < 2:
            raise DataError("w_future must be (F+1, 4) with F >= 1, got %r"
                            % (wf.shape,))
        self.w_past, self.w_future = wp, wf
        if self.scenario is not None:
            self.scenario = _snap_scenario(self.scenario)

    @property
    def image_size(self):
        return self.image.shape[0]

    @property
    def past_len(self):
        return self.w_past.shape[0]

    @property
    def horizon(self):
        return self.w_future.shape[0] - 1


@dataclass
class DatasetMeta:
    """Header fields shared by every record in one file."""

    mode: str
    image_size: int
    past_len: int
    horizon: int
    latent_dim: int
    count: int = 0


def _meta_from_records(records, mode, image_size, past_len, horizon,
                       latent_dim):
    if records:
        first = records[0]
        mode = first.latent.mode if mode is None else mode
        image_size = first.image_size if image_size is None else image_size
        past_len = first.past_len if past_len is None else past_len
        horizon = first.horizon if horizon is None else horizon
        if latent_dim is None:
            latent_dim = first.latent.values.size
    missing = [name for name, val in (("mode", mode),
                                      ("image_size", image_size),
                                      ("past_len", past_len),
                                      ("horizon", horizon),
                                      ("latent_dim", latent_dim))
               if val is None]
    if missing:
        raise DataError("empty dataset needs explicit header fields: %s"
                        % ", ".join(missing))
    if mode not in _MODE_CODE:
        raise DataError("unknown renderer mode %r" % (mode,))
    return DatasetMeta(mode=mode, image_size=int(image_size),
                       past_len=int(past_len), horizon=int(horizon),
                       latent_dim=int(latent_dim), count=len(records))


def write_dataset(path, records, mode=None, image_size=None, past_len=None,
                  horizon=None, latent_dim=None):
    """Serialize records; header fields are inferred from the first one.

    Pass the header fields explicitly to write a valid empty file.
    Returns the DatasetMeta written.
    """
    meta = _meta_from_records(records, mode, image_size, past_len, horizon,
                              latent_dim)
    chunks = [_HEADER.pack(MAGIC, VERSION, meta.count, meta.image_size,
                           meta.image_size, meta.past_len, meta.horizon,
                           meta.latent_dim, _MODE_CODE[meta.mode])]
    for i, rec in enumerate(records):
        chunks.append(_pack_record(rec, i, meta))
    data = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(data)
    return meta


def _pack_record(rec, i, meta):
    if rec.image_size != meta.image_size:
        raise DataError("record %d image size %d does not match header %d"
                        % (i, rec.image_size, meta.image_size))
    if rec.latent.mode != meta.mode:
        raise DataError("record %d latent mode %r does not match header %r"
                        % (i, rec.latent.mode, meta.mode))
    if rec.latent.values.size != meta.latent_dim:
        raise DataError("record %d latent length %d does not match header %d"
                        % (i, rec.latent.values.size, meta.latent_dim))
    if rec.past_len != meta.past_len or rec.horizon != meta.horizon:
        raise DataError("record %d waypoint shapes (%d, %d) do not match "
                        "header (%d, %d)" % (i, rec.past_len, rec.horizon,
                                             meta.past_len, meta.horizon))
    if rec.scenario is None:
        raise DataError("record %d has no scenario geometry; the format "
                        "stores ground truth alongside the latent" % i)
    scn = rec.scenario
    if len(scn.obstacles) > 255:
        raise DataError("record %d has %d obstacles; the block caps at 255"
                        % (i, len(scn.obstacles)))
    parts = [
        np.round(rec.image * 255.0).astype(np.uint8).tobytes(),
        rec.latent.values.astype("<f4").tobytes(),
        rec.w_past.astype("<f4").tobytes(),
        rec.w_future.astype("<f4").tobytes(),
        struct.pack("<ffB", scn.goal[0], scn.goal[1], len(scn.obstacles)),
    ]
    for obs in scn.obstacles:
        parts.append(struct.pack("<ffff", obs.cx, obs.cy, obs.rx, obs.ry))
    flags = (1 if rec.adversarial else 0) | (2 if rec.relabeled else 0)
    parts.append(struct.pack("<B", flags))
    return b"".join(parts)


class _Cursor:
    """Byte reader that reports the offset of any truncation."""

    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise DataError(
                "file truncated at byte %d: need %d more bytes for %s"
                % (len(self.data), self.off + n - len(self.data), what))
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def f32(self, n, what):
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def read_dataset(path):
    """Parse a dataset file; returns (records, meta)."""
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data)
    magic, version, count, w, h, past_len, horizon, latent_dim, mode_code = \
        _HEADER.unpack(cur.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise DataError("bad magic %r; not a dataset file" % (magic,))
    if version != VERSION:
        raise DataError("unsupported dataset version %d (expected %d)"
                        % (version, VERSION))
    if w != h:
        raise DataError("non-square image size %dx%d in header" % (w, h))
    if mode_code not in _CODE_MODE:
        raise DataError("unknown renderer mode code %d" % mode_code)
    meta = DatasetMeta(mode=_CODE_MODE[mode_code], image_size=w,
                       past_len=past_len, horizon=horizon,
                       latent_dim=latent_dim, count=count)
    records = []
    for i in range(count):
        records.append(_unpack_record(cur, i, meta))
    if cur.off != len(data):
        raise DataError("%d trailing bytes after record %d"
                        % (len(data) - cur.off, count - 1))
    return records, meta


def _unpack_record(cur, i, meta):
    s = meta.image_size
    raw = cur.take(s * s, "record %d image" % i)
    image = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
             / np.float32(255.0)).reshape(s, s)
    latent = scene.LatentScene(
        meta.mode, cur.f32(meta.latent_dim, "record %d latent" % i))
    w_past = cur.f32(meta.past_len * 4,
                     "record %d past waypoints" % i).reshape(-1, 4)
    w_future = cur.f32((meta.horizon + 1) * 4,
                       "record %d label waypoints" % i).reshape(-1, 4)
    gx, gy, n_obs = struct.unpack(
        "<ffB", cur.take(9, "record %d scenario header" % i))
    obstacles = []
    for k in range(n_obs):
        cx, cy, rx, ry = struct.unpack(
            "<ffff", cur.take(16, "record %d obstacle %d" % (i, k)))
        obstacles.append(scene.Obstacle(cx, cy, rx, ry))
    flags, = struct.unpack("<B", cur.take(1, "record %d flags" % i))
    scn = scene.Scenario(goal=(gx, gy), obstacles=obstacles)
    return DataRecord(image=image, latent=latent, w_past=w_past,
                      w_future=w_future, scenario=scn,
                      adversarial=bool(flags & 1),
                      relabeled=bool(flags & 2))
