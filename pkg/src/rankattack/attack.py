"""The query attack: prior-guided finite-difference gradient estimation over
the ranking loss, sign-step updates inside the pixel budget, step-size
doubling on stalls, and early exit once the retrieved list is fully displaced.

Query accounting per iteration is q probe queries plus one evaluation query of
the updated iterate; the base loss in the finite difference reuses the
previous iteration's evaluation, and the very first base value is the analytic
identity-list loss, which costs nothing. With q=1 and no early exit the attack
spends exactly its max_queries budget.

The printed form of this algorithm ascends the loss (the update adds
alpha * sign of the estimated loss gradient, and the loss starts at its global
maximum); since the loss is a failure probability that must reach zero, the
update here descends instead. The probe/update clip radius is the largest
multiple of 1/255 inside epsilon, measured from the quantized original, so
every image the target sees stays strictly inside the stated budget even
after grid quantization.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import (gaussian_direction, grid_aligned_radius,
                       linf_clip_project, make_rng, quantize_to_grid)
from .objective import identity_loss, ranking_loss, relevance_weights
from .prior import PriorConfig, momentum_basis, weighted_target_feature
from .retrieval import oracle_query


@dataclass
class AttackConfig:
    epsilon: float = 0.05
    max_queries: int = 200
    k: int = 16
    q: int = 1
    sigma: float = 0.1
    sigma_max: float = 1.0
    alpha: float = 0.01
    loss: str = "relevance"            # or "count"
    basis: str = "substitute_prior"    # or "gaussian"
    prior: PriorConfig = field(default_factory=PriorConfig)
    seed: int = 0

    def validate(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.max_queries < 2:
            raise ValueError(f"max_queries must be >= 2, got {self.max_queries}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.loss not in ("relevance", "count"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.basis not in ("gaussian", "substitute_prior"):
            raise ValueError(f"unknown basis kind {self.basis!r}")
        if self.loss == "relevance" and self.k < 2:
            raise ValueError("relevance loss needs k >= 2")


@dataclass
class AttackResult:
    success: bool
    queries_used: int
    final_image: np.ndarray
    final_linf: float
    loss_trace: list                  # (iteration, oracle-evaluated loss)
    basis_fallback_count: int
    sigma_trace: list                 # probe step after each iteration


def estimate_gradient(session, x_ref, x_hat, y, bases, sigma, eps_radius,
                      loss_kind, base_loss=None):
    """Finite-difference gradient estimate of the ranking loss.

    One probe query per basis direction, each probe clipped into the budget
    around x_ref before the session quantizes it. When base_loss is None the
    loss at x_hat is measured with one extra query; passing a cached value
    skips that query. Returns (estimate, base loss used).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    k = len(y)
    if base_loss is None:
        base_list = oracle_query(session, linf_clip_project(x_ref, x_hat, eps_radius), k)
        base_loss = ranking_loss(y, base_list, loss_kind)
    ghat = np.zeros(np.asarray(x_hat).shape, dtype=np.float64)
    for u in bases:
        probe = linf_clip_project(x_ref, x_hat + sigma * u, eps_radius)
        probe_list = oracle_query(session, probe, k)
        d = ranking_loss(y, probe_list, loss_kind) - base_loss
        ghat += (d / sigma) * u
    return ghat / len(bases), base_loss


def run_query_attack(session, x, cfg, substitute=None):
    """Full attack on one query image through its own session.

    The initial top-k lookup is charged to setup_count; every in-loop query
    goes to query_count, which is what queries_used reports.
    """
    cfg.validate()
    if cfg.basis == "substitute_prior" and substitute is None:
        raise ValueError("substitute_prior basis needs a substitute model")

    rng = make_rng(cfg.seed)
    x = np.asarray(x, dtype=np.float32)
    x_ref = quantize_to_grid(x)
    eps_radius = grid_aligned_radius(cfg.epsilon)

    y = oracle_query(session, x, cfg.k, setup=True)

    target_feat = None
    prior_cfg = None
    if cfg.basis == "substitute_prior":
        w = relevance_weights(cfg.k) if cfg.k >= 2 else np.array([1.0])
        list_images = np.stack([session.gallery.image(i) for i in y.ids])
        target_feat = weighted_target_feature(substitute, list_images, w)
        prior_cfg = PriorConfig(cfg.prior.n_i, cfg.prior.beta, cfg.prior.alpha_w,
                                eps_radius)

    x_hat = x.copy()
    loss_cur = identity_loss(cfg.k, cfg.loss)
    loss_prev = 1.0
    sigma = cfg.sigma
    sigma_trace = [sigma]
    loss_trace = []
    fallback_count = 0
    success = False

    iterations = cfg.max_queries // (cfg.q + 1)
    for t in range(1, iterations + 1):
        if cfg.basis == "substitute_prior":
            u, _, used_fb = momentum_basis(substitute, x_hat, x_ref, target_feat,
                                           prior_cfg, rng)
            if used_fb:
                fallback_count += 1
            bases = [u] * cfg.q
        else:
            bases = [gaussian_direction(rng, x.shape) for _ in range(cfg.q)]

        ghat, _ = estimate_gradient(session, x_ref, x_hat, y, bases, sigma,
                                    eps_radius, cfg.loss, base_loss=loss_cur)
        x_hat = linf_clip_project(x_ref, x_hat - cfg.alpha * np.sign(ghat),
                                  eps_radius)
        eval_list = oracle_query(session, x_hat, cfg.k)
        loss_new = ranking_loss(y, eval_list, cfg.loss)
        loss_trace.append((t, loss_new))
        if loss_new == 0.0:
            success = True
            break
        if loss_new == loss_prev:
            sigma = min(2.0 * sigma, cfg.sigma_max)
        sigma_trace.append(sigma)
        loss_prev = loss_new
        loss_cur = loss_new

    final_image = quantize_to_grid(linf_clip_project(x_ref, x_hat, eps_radius))
    final_linf = float(np.max(np.abs(final_image.astype(np.float64)
                                     - x_ref.astype(np.float64)))) if final_image.size else 0.0
    return AttackResult(
        success=success,
        queries_used=int(session.query_count),
        final_image=final_image,
        final_linf=final_linf,
        loss_trace=loss_trace,
        basis_fallback_count=fallback_count,
        sigma_trace=sigma_trace,
    )
