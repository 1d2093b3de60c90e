"""Stealing the target's metric through its own query interface.

A breadth-first crawl seeds itself with one attacker-owned image, queries the
target for ranked lists, keeps a few returned images at evenly spaced ranks,
and queries those in turn. The collected set is then queried once more to
harvest ordered pairs, which train the substitute net on a hinge loss. All
crawl and extraction traffic is charged to the session's setup counter; the
substitute sees nothing but images and the target's orderings of them.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .embed_net import (TrainConfig, forward_embed_batch, init_params,
                        _triplet_sgd_step)
from .numerics import quantize_to_grid
from .retrieval import oracle_query


@dataclass
class StealConfig:
    n: int = 50                 # returned-list length per crawl query
    n_c: int = 5                # images kept per list
    c: int = 2                  # recursive expansion rounds after the seed
    lam: float = 0.05           # hinge margin for substitute training
    triplet_top_m: int = 8      # ranks harvested per extraction query
    train: TrainConfig = field(default_factory=lambda: TrainConfig(loss="triplet"))

    def validate(self):
        if not (self.n >= self.n_c >= 1):
            raise ValueError(f"need n >= n_c >= 1, got n={self.n}, n_c={self.n_c}")
        if self.c < 0:
            raise ValueError(f"recursion depth must be >= 0, got {self.c}")
        if self.lam < 0:
            raise ValueError(f"hinge margin must be >= 0, got {self.lam}")
        if not (1 <= self.triplet_top_m <= self.n):
            raise ValueError(
                f"triplet_top_m must be in [1, n={self.n}], got {self.triplet_top_m}")


@dataclass
class TripletSet:
    """Anchor/positive/negative stacks; positive ranked above negative by the
    target for that anchor."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.anchors)


def _keep_ranks(n, n_c):
    return [(t * n) // n_c for t in range(n_c)]


def recursive_crawl(session, seed_image, cfg):
    """Breadth-first crawl of the gallery through ranked responses.

    Level 0 queries the seed; every kept image is queried at the next level,
    for cfg.c expansion rounds. Each query keeps cfg.n_c of its cfg.n returned
    images at evenly spaced ranks. Every kept slot costs one query at the next
    level even if the same image was seen before (the query budget is the
    geometric series over levels); duplicates are folded away only in the
    returned set, so the extraction phase pays each distinct image once.

    Returns (stolen image stack, crawl log dict).
    """
    cfg.validate()
    gallery = session.gallery
    if len(gallery) < cfg.n:
        raise ValueError(
            f"gallery has {len(gallery)} items, crawl needs at least {cfg.n}")

    ranks = _keep_ranks(cfg.n, cfg.n_c)
    seen = {}
    order = []

    def note(img):
        key = quantize_to_grid(img).tobytes()
        if key in seen:
            return True
        seen[key] = len(order)
        order.append(np.asarray(img, dtype=np.float32))
        return False

    note(seed_image)
    frontier = [np.asarray(seed_image, dtype=np.float32)]
    queries_per_level = []
    dup_slots = 0

    for _level in range(cfg.c + 1):
        next_frontier = []
        for img in frontier:
            ranked = oracle_query(session, img, cfg.n, setup=True)
            for r in ranks:
                kept = gallery.image(ranked.ids[r])
                if note(kept):
                    dup_slots += 1
                next_frontier.append(kept)
        queries_per_level.append(len(frontier))
        frontier = next_frontier

    log = {
        "queries_per_level": queries_per_level,
        "total_queries": int(sum(queries_per_level)),
        "kept_slots": int(sum(queries_per_level) * cfg.n_c),
        "dup_slots": int(dup_slots),
        "distinct_images": len(order),
    }
    return np.stack(order), log


def extract_triplets(session, stolen, cfg):
    """Query each stolen image once and expand its top-m list into all ordered
    pairs (rank i beats rank j for every i < j)."""
    cfg.validate()
    stolen = np.asarray(stolen)
    if len(stolen) == 0:
        raise ValueError("stolen image set is empty")
    m = cfg.triplet_top_m
    anchors, positives, negatives = [], [], []
    for img in stolen:
        ranked = oracle_query(session, img, m, setup=True)
        items = [session.gallery.image(i) for i in ranked.ids]
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                anchors.append(img)
                positives.append(items[i])
                negatives.append(items[j])
    return TripletSet(np.stack(anchors), np.stack(positives), np.stack(negatives))


def train_substitute(triplets, cfg, arch):
    """Fit the substitute net to the target's orderings.

    Hinge per triplet: max(0, D(a,p) - D(a,n) + lam) on squared embedding
    distances. SGD with momentum, deterministic under cfg.train.seed.
    Returns (params, per-epoch mean losses).
    """
    cfg.validate()
    if len(triplets) == 0:
        raise ValueError("cannot train on an empty triplet set")
    tc = cfg.train
    tc.validate()
    eff = TrainConfig(tc.learning_rate, tc.momentum, tc.epochs, tc.batch_size,
                      "triplet", cfg.lam, tc.seed)

    flat_a = triplets.anchors.reshape(len(triplets), -1).astype(np.float64)
    flat_p = triplets.positives.reshape(len(triplets), -1).astype(np.float64)
    flat_n = triplets.negatives.reshape(len(triplets), -1).astype(np.float64)
    if flat_a.shape[1] != arch[0]:
        raise ValueError(f"arch {arch} does not fit image size {flat_a.shape[1]}")

    params = init_params(arch, eff.seed)
    rng = np.random.Generator(np.random.PCG64(eff.seed + 1))
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    epoch_losses = []
    n = len(triplets)
    for _epoch in range(eff.epochs):
        order_ix = rng.permutation(n)
        total = 0.0
        for start in range(0, n, eff.batch_size):
            ix = order_ix[start:start + eff.batch_size]
            loss = _triplet_sgd_step(params, flat_a[ix], flat_p[ix], flat_n[ix],
                                     eff, vel_w, vel_b)
            total += loss * len(ix)
        epoch_losses.append(total / n)
    return params, epoch_losses


def ranking_fidelity(model_a, model_b, queries, candidate_sets):
    """Mean Kendall tau between two models' distance orderings.

    For every (query, candidates) pair, rank the candidates by squared
    embedding distance under each model and correlate the two rankings.
    Degenerate constant rankings contribute 0.
    """
    taus = []
    for q, cands in zip(queries, candidate_sets):
        ea = forward_embed_batch(model_a, np.concatenate([q[None], cands]))
        eb = forward_embed_batch(model_b, np.concatenate([q[None], cands]))
        da = np.sum((ea[1:] - ea[0]) ** 2, axis=1)
        db = np.sum((eb[1:] - eb[0]) ** 2, axis=1)
        tau = stats.kendalltau(da, db).statistic
        taus.append(0.0 if np.isnan(tau) else float(tau))
    return float(np.mean(taus))
