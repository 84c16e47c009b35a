"""Dataset plumbing: IDX files, dynamic binarization, splits, synthesis.

Images are stored as real intensities in [0, 1]; binarization is not
baked into a dataset but re-drawn per epoch from a counter-based key,
so the Bernoulli noise for (image i, pixel j) depends only on
(seed, epoch, i, j) and never on mini-batch order.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .gaussian import Streams, stream_rng
from .models.vae import Vae

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_MAX_ELEMENTS = 2**40  # dimension-overflow guard for hostile headers

SPLIT_IDS = ("train", "valid", "test")


@dataclass(frozen=True)
class Dataset:
    """n x obs matrix of intensities in [0, 1] plus provenance tags."""

    images: np.ndarray
    source_tag: str
    split_id: str = None

    def __post_init__(self):
        img = self.images
        if img.ndim != 2 or img.shape[0] == 0:
            raise ValueError("images must be a non-empty (n, obs) matrix")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("pixel intensities must lie in [0, 1]")
        if self.split_id is not None and self.split_id not in SPLIT_IDS:
            raise ValueError(f"unknown split id {self.split_id!r}")

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def obs(self):
        return self.images.shape[1]


def read_idx(path):
    """Raw IDX payload as a uint8 array, images (3-d) or labels (1-d)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    total = 1
    for d in dims:
        total *= d
    if total > _MAX_ELEMENTS:
        raise ValueError(f"{path}: dimension overflow {dims}")
    found = len(raw) - header
    if found < total:
        raise ValueError(f"{path}: truncated payload, expected {total} bytes, found {found}")
    if found > total:
        raise ValueError(f"{path}: {found - total} trailing bytes after payload")
    return np.frombuffer(raw[header:], dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    """Serialize a uint8 array back to IDX (3-d images or 1-d labels)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ValueError("IDX writer handles 3-d images or 1-d labels")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(path):
    """IDX3 image file as a Dataset with row-major flattening, /255."""
    raw = read_idx(path)
    if raw.ndim != 3:
        raise ValueError(f"{path}: expected an IDX3 image file")
    n = raw.shape[0]
    images = raw.reshape(n, -1).astype(np.float64) / 255.0
    return Dataset(images=images, source_tag="idx")


def dynamic_binarize(d, seed, epoch):
    """Fresh Bernoulli(intensity) draw for every pixel, keyed per epoch.

    The uniform block is indexed (image, pixel), so the draw for any
    pixel is a pure function of (seed, epoch, image, pixel).
    """
    u = stream_rng(seed, Streams.BINARIZE, epoch).random(d.images.shape)
    return (u < d.images).astype(np.float64)


def _decoder_intensities(p, latent, hidden, obs, z):
    w1 = p.view("dec_w1").reshape(hidden, latent)
    w2 = p.view("dec_w2").reshape(hidden, hidden)
    w3 = p.view("dec_w3").reshape(obs, hidden)
    h1 = np.tanh(z @ w1.T + p.view("dec_b1"))
    h2 = np.tanh(h1 @ w2.T + p.view("dec_b2"))
    logits = h2 @ w3.T + p.view("dec_b3")
    return 1.0 / (1.0 + np.exp(-logits))


def synthetic_dataset(n, obs_dim, latent_dim, seed, hidden=20, weight_scale=2.0):
    """Intensity matrix sampled from a randomly initialized generator.

    Draws z ~ N(0, I) and emits the decoder's Bernoulli means; the
    per-epoch Bernoulli sampling is dynamic_binarize's job.  The
    decoder weights are scaled by weight_scale: plain random init
    yields washed-out mid-gray images, and the scaling restores enough
    contrast for bound improvements to be measurable at desk scale.
    """
    if n <= 0 or obs_dim <= 0 or latent_dim <= 0:
        raise ValueError("all sizes must be positive")
    fam = Vae(latent=latent_dim, hidden=hidden, obs=obs_dim)
    p = fam.init_params(seed=seed)
    flat = p.flat.copy()
    for name in ("dec_w1", "dec_w2", "dec_w3"):
        off, length = p.layout[name]
        flat[off : off + length] *= weight_scale
    p = p.with_flat(flat)
    z = stream_rng(seed, Streams.DATA, 0).standard_normal((n, latent_dim))
    images = _decoder_intensities(p, latent_dim, hidden, obs_dim, z)
    return Dataset(images=images, source_tag="synthetic")


def split(d, fractions, seed=None):
    """(train, valid, test) by fractions; contiguous, or shuffled by seed.

    Contiguous order-preserving ranges suit pre-shuffled corpora whose
    conventional splits are positional; synthetic data should pass a
    seed so the split is an explicit part of the experiment key.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("need three positive fractions")
    if sum(fractions) > 1.0 + 1e-12:
        raise ValueError("fractions must sum to at most 1")
    sizes = [int(round(d.n * f)) for f in fractions]
    if sum(sizes) > d.n:
        sizes[2] = d.n - sizes[0] - sizes[1]
    if any(s <= 0 for s in sizes):
        raise ValueError(f"empty split from fractions {fractions} on n={d.n}")
    order = np.arange(d.n)
    if seed is not None:
        order = stream_rng(seed, Streams.DATA, 1).permutation(d.n)
    bounds = np.cumsum([0] + sizes)
    out = []
    for split_id, lo, hi in zip(SPLIT_IDS, bounds[:-1], bounds[1:]):
        out.append(
            Dataset(images=d.images[order[lo:hi]], source_tag=d.source_tag, split_id=split_id)
        )
    return tuple(out)
