"""White-box momentum attack on the substitute, producing the probe basis for
the query attack.

The substitute is driven away from a weighted combination of the original
top-k embeddings; the accumulated momentum direction, unit-normalized, becomes
the basis the query attack probes along.
"""

from dataclasses import dataclass

import numpy as np

from .embed_net import forward_embed, forward_embed_batch, input_gradient
from .numerics import gaussian_direction, linf_clip_project


@dataclass
class PriorConfig:
    n_i: int = 5            # momentum iterations per basis
    beta: float = 0.9       # momentum decay
    alpha_w: float = 0.01   # white-box step size
    epsilon: float = 0.05   # perturbation budget shared with the attack

    def validate(self):
        if self.n_i < 1:
            raise ValueError(f"need at least 1 momentum iteration, got {self.n_i}")
        if not (0.0 <= self.beta < 1.0):
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        if self.alpha_w <= 0:
            raise ValueError(f"alpha_w must be > 0, got {self.alpha_w}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


def weighted_target_feature(sub, list_images, weights):
    """Weighted sum of substitute embeddings of the original top-k images.

    Weights are re-normalized to sum 1; a truncated image list (shorter than
    the weight vector) uses the leading weights, re-normalized.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(list_images) > len(weights):
        raise ValueError(
            f"{len(list_images)} images but only {len(weights)} weights")
    w = weights[:len(list_images)]
    total = w.sum()
    if total <= 0:
        raise ValueError("weights over the image list sum to zero")
    w = w / total
    emb = forward_embed_batch(sub, np.asarray(list_images))
    return emb.T @ w


def feature_distance_gradient(sub, x_hat, target_feat):
    """Gradient of ||s(x_hat) - target_feat||^2 w.r.t. the input pixels."""
    emb, trace = forward_embed(sub, x_hat)
    return input_gradient(sub, trace, 2.0 * (emb - target_feat))


def momentum_basis(sub, x_hat, x_original, target_feat, cfg, rng):
    """Accumulate momentum over cfg.n_i sign-step iterations on the substitute.

    Each iteration adds the current feature-distance gradient to the decayed
    momentum and advances a local iterate by a clipped sign step (sign(0) is 0,
    so a dead gradient moves nothing). Returns (unit basis, advanced iterate,
    used_fallback). The advanced iterate is diagnostic only; the query attack
    restarts from its own iterate. If the gradient is zero through every
    iteration the basis would be zero, so a fresh Gaussian direction is
    returned instead and flagged.
    """
    cfg.validate()
    u = np.zeros(np.asarray(x_hat).shape, dtype=np.float64)
    xt = np.asarray(x_hat, dtype=np.float32).copy()
    for _ in range(cfg.n_i):
        g = feature_distance_gradient(sub, xt, target_feat)
        u = cfg.beta * u + g
        xt = linf_clip_project(x_original, xt + cfg.alpha_w * np.sign(u), cfg.epsilon)
    norm = np.linalg.norm(u)
    if norm == 0.0:
        return gaussian_direction(rng, u.shape), xt, True
    return u / norm, xt, False
