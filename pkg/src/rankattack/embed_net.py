"""Small MLP embedding networks with hand-written gradients.

Both the retrieval target and the stolen substitute are plain fully connected
nets: ReLU on hidden layers, linear output, no normalization of the output
embedding. Distances between embeddings are squared Euclidean throughout.

Parameters live in float64; checkpoints store float32 (see QEMB format at the
bottom), so a save/load round trip rounds parameters to float32 values.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .numerics import make_rng

QEMB_MAGIC = b"QEMB"
QEMB_VERSION = 1


@dataclass
class MlpParams:
    """Layer weights and biases. weights[i] has shape (fan_out, fan_in)."""

    weights: list
    biases: list

    @property
    def layer_count(self):
        return len(self.weights)

    @property
    def embed_dim(self):
        return self.weights[-1].shape[0]

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    def copy(self):
        return MlpParams([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])


@dataclass
class ForwardTrace:
    """Cached activations from one forward pass, needed for backprop."""

    image_shape: tuple
    flat_input: np.ndarray
    pre_acts: list        # pre-activation of every layer
    acts: list            # post-activation of every layer (last is linear)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    loss: str = "contrastive"       # or "triplet"
    margin: float = 1.0
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.loss not in ("contrastive", "triplet"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def init_params(arch, seed):
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    if len(arch) < 2:
        raise ValueError(f"arch needs at least input and output widths, got {arch}")
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases)


def forward_embed(params, image):
    """Embed one image. Returns (embedding vector, ForwardTrace)."""
    image = np.asarray(image)
    flat = image.reshape(-1).astype(np.float64)
    if flat.shape[0] != params.input_dim:
        raise ValueError(
            f"flattened image length {flat.shape[0]} does not match "
            f"first layer input width {params.input_dim}"
        )
    pre_acts, acts = [], []
    a = flat
    last = params.layer_count - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w @ a + b
        pre_acts.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    trace = ForwardTrace(tuple(image.shape), flat, pre_acts, acts)
    return a, trace


def forward_embed_batch(params, images):
    """Embed a stack of images at once, shape (n, C, H, W) -> (n, embed_dim).

    No trace is kept; use _forward_batch_trace when gradients are needed.
    """
    x = np.asarray(images).reshape(len(images), -1).astype(np.float64)
    return _forward_batch_trace(params, x)[0]


def _forward_batch_trace(params, x):
    """Batched forward over flat inputs (n, d). Returns (out, pre_acts, acts)."""
    pre_acts, acts = [], []
    a = x
    last = params.layer_count - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        pre_acts.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return a, pre_acts, acts


def _backward_batch(params, x, pre_acts, upstream, want_input_grad=False):
    """Batched reverse pass. upstream is (n, embed_dim) = dLoss/dEmbedding.

    Returns (weight grads, bias grads, input grads or None), summed over the
    batch for the parameter grads.
    """
    n_layers = params.layer_count
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    g = upstream
    for i in range(n_layers - 1, -1, -1):
        a_prev = x if i == 0 else np.maximum(pre_acts[i - 1], 0.0)
        grads_w[i] = g.T @ a_prev
        grads_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i]) * (pre_acts[i - 1] > 0.0)
        elif want_input_grad:
            g = g @ params.weights[0]
    return grads_w, grads_b, (g if want_input_grad else None)


def _check_trace(params, trace):
    if len(trace.pre_acts) != params.layer_count:
        raise RuntimeError(
            f"stale trace: {len(trace.pre_acts)} cached layers for a "
            f"{params.layer_count}-layer net"
        )


def input_gradient(params, trace, upstream):
    """Exact gradient of (embedding . upstream) w.r.t. the input pixels."""
    _check_trace(params, trace)
    g = np.asarray(upstream, dtype=np.float64)
    for i in range(params.layer_count - 1, -1, -1):
        g = params.weights[i].T @ g
        if i > 0:
            g = g * (trace.pre_acts[i - 1] > 0.0)
    return g.reshape(trace.image_shape)


def parameter_gradient(params, trace, upstream):
    """Exact gradient of (embedding . upstream) w.r.t. weights and biases.

    Returned in MlpParams shape so it can be fed straight to an optimizer.
    """
    _check_trace(params, trace)
    g = np.asarray(upstream, dtype=np.float64)
    grads_w = [None] * params.layer_count
    grads_b = [None] * params.layer_count
    for i in range(params.layer_count - 1, -1, -1):
        a_prev = trace.flat_input if i == 0 else trace.acts[i - 1]
        grads_w[i] = np.outer(g, a_prev)
        grads_b[i] = g.copy()
        if i > 0:
            g = (params.weights[i].T @ g) * (trace.pre_acts[i - 1] > 0.0)
    return MlpParams(grads_w, grads_b)


def _sgd_step(params, grads_w, grads_b, vel_w, vel_b, lr, mu, scale):
    for i in range(params.layer_count):
        vel_w[i] = mu * vel_w[i] - lr * grads_w[i] * scale
        vel_b[i] = mu * vel_b[i] - lr * grads_b[i] * scale
        params.weights[i] += vel_w[i]
        params.biases[i] += vel_b[i]


def train_embedding_model(images, labels, cfg, arch):
    """Train an embedding net on labeled images.

    Contrastive: per anchor draw a same-class or other-class partner with
    equal probability; pull positives together (squared distance) and push
    negatives past the margin. Triplet: per anchor draw one of each and apply
    the hinge on the distance difference. Plain SGD with classical momentum,
    fixed order, fully determined by cfg.seed.

    Returns (params, per-epoch mean losses).
    """
    cfg.validate()
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise ValueError("images and labels length mismatch")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("need at least 2 classes to form negative pairs")
    counts = {int(c): np.flatnonzero(labels == c) for c in classes}
    if any(len(ix) < 2 for ix in counts.values()):
        raise ValueError("need at least 2 samples per class")

    flat = images.reshape(len(images), -1).astype(np.float64)
    if flat.shape[1] != arch[0] or arch[-1] < 1:
        raise ValueError(f"arch {arch} does not fit image size {flat.shape[1]}")

    params = init_params(arch, cfg.seed)
    rng = make_rng(cfg.seed + 1)
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    epoch_losses = []

    n = len(images)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            anchor_ix = order[start:start + cfg.batch_size]
            if cfg.loss == "contrastive":
                loss = _contrastive_batch(params, flat, labels, counts, anchor_ix,
                                          rng, cfg, vel_w, vel_b)
            else:
                loss = _triplet_batch(params, flat, labels, counts, anchor_ix,
                                      rng, cfg, vel_w, vel_b)
            total += loss * len(anchor_ix)
            seen += len(anchor_ix)
        epoch_losses.append(total / seen)
    return params, epoch_losses


def _partner_same(rng, counts, labels, i):
    pool = counts[int(labels[i])]
    j = i
    while j == i:
        j = int(pool[rng.integers(len(pool))])
    return j


def _partner_other(rng, labels, i, n):
    j = int(rng.integers(n))
    while labels[j] == labels[i]:
        j = int(rng.integers(n))
    return j


def _contrastive_batch(params, flat, labels, counts, anchor_ix, rng, cfg,
                       vel_w, vel_b):
    n = len(flat)
    partner_ix = np.empty(len(anchor_ix), dtype=np.int64)
    is_pos = rng.random(len(anchor_ix)) < 0.5
    for t, i in enumerate(anchor_ix):
        partner_ix[t] = (_partner_same(rng, counts, labels, int(i)) if is_pos[t]
                         else _partner_other(rng, labels, int(i), n))

    xa = flat[anchor_ix]
    xb = flat[partner_ix]
    ea, pre_a, _ = _forward_batch_trace(params, xa)
    eb, pre_b, _ = _forward_batch_trace(params, xb)
    diff = ea - eb
    d_sq = np.sum(diff * diff, axis=1)

    # positive pairs: loss d_sq; negative: hinge max(0, margin - d_sq)
    neg_active = (~is_pos) & (d_sq < cfg.margin)
    losses = np.where(is_pos, d_sq, np.maximum(0.0, cfg.margin - d_sq))
    up_a = np.zeros_like(ea)
    up_a[is_pos] = 2.0 * diff[is_pos]
    up_a[neg_active] = -2.0 * diff[neg_active]
    up_b = -up_a

    scale = 1.0 / len(anchor_ix)
    gw_a, gb_a, _ = _backward_batch(params, xa, pre_a, up_a)
    gw_b, gb_b, _ = _backward_batch(params, xb, pre_b, up_b)
    gw = [a + b for a, b in zip(gw_a, gw_b)]
    gb = [a + b for a, b in zip(gb_a, gb_b)]
    _sgd_step(params, gw, gb, vel_w, vel_b, cfg.learning_rate, cfg.momentum, scale)
    return float(np.mean(losses))


def _triplet_batch(params, flat, labels, counts, anchor_ix, rng, cfg,
                   vel_w, vel_b):
    n = len(flat)
    pos_ix = np.empty(len(anchor_ix), dtype=np.int64)
    neg_ix = np.empty(len(anchor_ix), dtype=np.int64)
    for t, i in enumerate(anchor_ix):
        pos_ix[t] = _partner_same(rng, counts, labels, int(i))
        neg_ix[t] = _partner_other(rng, labels, int(i), n)
    loss = _triplet_sgd_step(params, flat[anchor_ix], flat[pos_ix], flat[neg_ix],
                             cfg, vel_w, vel_b)
    return loss


def _triplet_sgd_step(params, xa, xp, xn, cfg, vel_w, vel_b):
    """One SGD step on hinge(d(a,p) - d(a,n) + margin). Returns batch mean loss."""
    ea, pre_a, _ = _forward_batch_trace(params, xa)
    ep, pre_p, _ = _forward_batch_trace(params, xp)
    en, pre_n, _ = _forward_batch_trace(params, xn)
    d_pos = np.sum((ea - ep) ** 2, axis=1)
    d_neg = np.sum((ea - en) ** 2, axis=1)
    hinge = d_pos - d_neg + cfg.margin
    active = hinge > 0.0
    losses = np.maximum(hinge, 0.0)

    up_a = np.zeros_like(ea)
    up_p = np.zeros_like(ep)
    up_n = np.zeros_like(en)
    up_a[active] = 2.0 * (en[active] - ep[active])
    up_p[active] = -2.0 * (ea[active] - ep[active])
    up_n[active] = 2.0 * (ea[active] - en[active])

    scale = 1.0 / len(xa)
    gw_a, gb_a, _ = _backward_batch(params, xa, pre_a, up_a)
    gw_p, gb_p, _ = _backward_batch(params, xp, pre_p, up_p)
    gw_n, gb_n, _ = _backward_batch(params, xn, pre_n, up_n)
    gw = [a + p + q for a, p, q in zip(gw_a, gw_p, gw_n)]
    gb = [a + p + q for a, p, q in zip(gb_a, gb_p, gb_n)]
    _sgd_step(params, gw, gb, vel_w, vel_b, cfg.learning_rate, cfg.momentum, scale)
    return float(np.mean(losses))


def assert_finite(params):
    """NaN/Inf sweep over all parameters."""
    for arr in params.weights + params.biases:
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite parameter detected")


# ---------------------------------------------------------------------------
# QEMB checkpoint format, little-endian:
#   magic "QEMB" | version u32 | layer count u32 |
#   per layer: rows u32 | cols u32 | f32 weights row-major | f32 biases (rows)
# ---------------------------------------------------------------------------

def save_model(path, params):
    with open(path, "wb") as fh:
        fh.write(QEMB_MAGIC)
        fh.write(struct.pack("<II", QEMB_VERSION, params.layer_count))
        for w, b in zip(params.weights, params.biases):
            rows, cols = w.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(w.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())


def _read_exact(fh, count, offset, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated file while reading {what}", offset + len(buf))
    return buf


def load_model(path):
    with open(path, "rb") as fh:
        offset = 0
        magic = _read_exact(fh, 4, offset, "magic")
        if magic != QEMB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {QEMB_MAGIC!r}", 0)
        offset += 4
        version, n_layers = struct.unpack("<II", _read_exact(fh, 8, offset, "header"))
        if version != QEMB_VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        offset += 8
        weights, biases = [], []
        for li in range(n_layers):
            rows, cols = struct.unpack("<II", _read_exact(fh, 8, offset,
                                                          f"layer {li} dims"))
            offset += 8
            if rows == 0 or cols == 0:
                raise FormatError(f"layer {li} has zero dimension", offset - 8)
            wbuf = _read_exact(fh, rows * cols * 4, offset, f"layer {li} weights")
            offset += rows * cols * 4
            bbuf = _read_exact(fh, rows * 4, offset, f"layer {li} biases")
            offset += rows * 4
            w = np.frombuffer(wbuf, dtype="<f4").reshape(rows, cols)
            b = np.frombuffer(bbuf, dtype="<f4")
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last layer", offset)
    for i in range(1, n_layers):
        if weights[i].shape[1] != weights[i - 1].shape[0]:
            raise FormatError(
                f"layer {i} input width {weights[i].shape[1]} does not chain "
                f"with previous output {weights[i - 1].shape[0]}")
    return MlpParams(weights, biases)
