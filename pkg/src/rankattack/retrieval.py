"""The black-box target: gallery storage, exact nearest-neighbor ranking, and
the query-counting session every attacker-facing call goes through.

The engine is deliberately exact (full sort, squared Euclidean in embedding
space, ties broken by ascending id) so tests can compare against a brute-force
reference. Every image entering the system through a session is first snapped
to the 1/255 pixel grid, like an upload converted to integers.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .embed_net import forward_embed, forward_embed_batch
from .errors import FormatError
from .numerics import make_rng, quantize_to_grid

QIRD_MAGIC = b"QIRD"
QIRD_VERSION = 1


@dataclass
class Gallery:
    images: np.ndarray        # (n, C, H, W) float32
    labels: np.ndarray        # (n,) uint32
    embeddings: np.ndarray    # (n, embed_dim) float64
    model: object             # MlpParams of the target

    def __len__(self):
        return len(self.images)

    def image(self, item_id):
        """Pixel data for a returned id. Attackers may fetch these; the fetch
        is not a ranking query and is not counted."""
        return self.images[int(item_id)]


@dataclass
class RankedList:
    ids: np.ndarray           # (k,) int64, distinct
    distances: np.ndarray     # (k,) float64, non-decreasing

    def __len__(self):
        return len(self.ids)

    def id_list(self):
        return [int(i) for i in self.ids]


@dataclass
class QuerySession:
    """Counts every ranking query against the target.

    query_count holds attack-loop traffic; setup_count holds initialization
    and stealing traffic. recorded, when not None, keeps a copy of every
    quantized image the target actually saw (used by audit tests).
    """

    gallery: Gallery
    query_count: int = 0
    setup_count: int = 0
    recorded: list = None


def build_gallery_index(images, labels, model):
    """Embed every gallery image once and freeze the result."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint32)
    if len(images) == 0:
        raise ValueError("cannot index an empty gallery")
    if len(images) != len(labels):
        raise ValueError("images and labels length mismatch")
    emb = forward_embed_batch(model, images)
    return Gallery(images, labels, emb, model)


def retrieve_top_n(gallery, query, n):
    """Exact top-n by squared Euclidean embedding distance.

    Ties are broken by ascending gallery id so results are reproducible.
    """
    n = int(n)
    if n < 1 or n > len(gallery):
        raise ValueError(f"n must be in [1, {len(gallery)}], got {n}")
    emb, _ = forward_embed(gallery.model, query)
    diff = gallery.embeddings - emb
    dists = np.einsum("nd,nd->n", diff, diff)
    order = np.lexsort((np.arange(len(gallery)), dists))[:n]
    return RankedList(order.astype(np.int64), dists[order])


def oracle_query(session, image, k, setup=False):
    """One black-box ranking query: quantize, rank, count.

    setup=True charges the call to setup_count (initialization and stealing
    traffic) instead of the per-attack query_count.
    """
    q = quantize_to_grid(image)
    if session.recorded is not None:
        session.recorded.append(q.copy())
    if setup:
        session.setup_count += 1
    else:
        session.query_count += 1
    return retrieve_top_n(session.gallery, q, k)


def gen_synthetic_dataset(classes, per_class, shape, noise, seed):
    """Class prototypes drawn uniform in [0,1], samples jittered around them.

    Returns (images float32 (classes*per_class, *shape), labels uint32),
    ordered class-major and fully determined by the seed.
    """
    if classes < 2:
        raise ValueError(f"need >= 2 classes, got {classes}")
    if per_class < 2:
        raise ValueError(f"need >= 2 samples per class, got {per_class}")
    if not (0.0 <= noise <= 0.5):
        raise ValueError(f"noise must be in [0, 0.5], got {noise}")
    if len(shape) == 0 or any(int(d) <= 0 for d in shape):
        raise ValueError(f"image shape must have positive dims, got {shape}")
    rng = make_rng(seed)
    images = np.empty((classes * per_class,) + tuple(shape), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.uint32)
    for c in range(classes):
        proto = rng.uniform(0.0, 1.0, size=shape)
        jitter = rng.uniform(-noise, noise, size=(per_class,) + tuple(shape))
        block = np.clip(proto[None] + jitter, 0.0, 1.0)
        images[c * per_class:(c + 1) * per_class] = block.astype(np.float32)
        labels[c * per_class:(c + 1) * per_class] = c
    return images, labels


# ---------------------------------------------------------------------------
# QIRD dataset file, little-endian:
#   magic "QIRD" | version u32 | item count u32 | channels u32 | height u32 |
#   width u32 | per item: label u32 + f32 pixels (C*H*W)
# ---------------------------------------------------------------------------

def save_dataset(path, images, labels):
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint32)
    if images.ndim != 4:
        raise ValueError(f"images must be (n, C, H, W), got shape {images.shape}")
    if len(images) != len(labels):
        raise ValueError("images and labels length mismatch")
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(QIRD_MAGIC)
        fh.write(struct.pack("<IIIII", QIRD_VERSION, n, c, h, w))
        for img, lab in zip(images, labels):
            fh.write(struct.pack("<I", int(lab)))
            fh.write(img.astype("<f4").tobytes())


def _read_exact(fh, count, offset, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated file while reading {what}", offset + len(buf))
    return buf


def load_dataset(path):
    with open(path, "rb") as fh:
        offset = 0
        magic = _read_exact(fh, 4, offset, "magic")
        if magic != QIRD_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {QIRD_MAGIC!r}", 0)
        offset += 4
        version, n, c, h, w = struct.unpack(
            "<IIIII", _read_exact(fh, 20, offset, "header"))
        if version != QIRD_VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        offset += 20
        if n > 0 and (c == 0 or h == 0 or w == 0):
            raise FormatError(f"zero image dimension ({c},{h},{w})", 8)
        pix = c * h * w
        images = np.empty((n, c, h, w), dtype=np.float32)
        labels = np.empty(n, dtype=np.uint32)
        for i in range(n):
            labels[i] = struct.unpack("<I", _read_exact(fh, 4, offset,
                                                        f"item {i} label"))[0]
            offset += 4
            buf = _read_exact(fh, pix * 4, offset, f"item {i} pixels")
            offset += pix * 4
            images[i] = np.frombuffer(buf, dtype="<f4").reshape(c, h, w)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last item", offset)
    return images, labels
