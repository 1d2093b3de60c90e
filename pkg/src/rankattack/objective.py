"""Rank-weighted overlap losses between the original and adversarial top-k
lists, plus the success predicate.

The loss is a failure probability: it is largest when the adversarial list
equals the original one and reaches exactly zero when the two lists share no
item, which is the attack goal. Only ids and ranks matter; distances are
invisible to a black-box attacker and are ignored here.
"""

import numpy as np


def relevance_weights(k):
    """Exponentially decaying rank weights.

    Rank i (1-based) gets relevance k - i, and weight
    (2^(k-i) - 1) / sum_j (2^(k-j) - 1). The weights sum to 1, decrease
    strictly over the first k-1 ranks, and the last entry is exactly 0.
    k = 1 would make the denominator zero and is rejected.
    """
    k = int(k)
    if k <= 1:
        raise ValueError(f"rank weights need k >= 2, got {k}")
    raw = np.power(2.0, np.arange(k - 1, -1, -1, dtype=np.float64)) - 1.0
    return raw / raw.sum()


def _as_id_tuple(ranked, name):
    ids = tuple(int(i) for i in getattr(ranked, "ids", ranked))
    if len(set(ids)) != len(ids):
        raise ValueError(f"{name} list contains duplicate ids")
    return ids


def failure_weight(original, adversarial, i, weights):
    """Weight of original rank i (1-based) surviving into the adversarial list.

    If the item at original rank i reappears at adversarial rank j, the
    surviving mass is weights[j]; if it vanished from the list, 0.
    """
    orig = _as_id_tuple(original, "original")
    adv = _as_id_tuple(adversarial, "adversarial")
    if len(orig) != len(adv):
        raise ValueError(f"list length mismatch: {len(orig)} vs {len(adv)}")
    if not (1 <= i <= len(orig)):
        raise ValueError(f"rank index {i} out of range 1..{len(orig)}")
    item = orig[i - 1]
    try:
        j = adv.index(item)
    except ValueError:
        return 0.0
    return float(weights[j])


def relevance_loss(original, adversarial):
    """Sum over ranks of weight(i) * surviving weight of the rank-i item.

    Maximal (sum of squared weights) when the lists are identical, exactly 0
    when they are disjoint as sets.
    """
    orig = _as_id_tuple(original, "original")
    adv = _as_id_tuple(adversarial, "adversarial")
    if len(orig) != len(adv):
        raise ValueError(f"list length mismatch: {len(orig)} vs {len(adv)}")
    w = relevance_weights(len(orig))
    pos = {item: j for j, item in enumerate(adv)}
    total = 0.0
    for i, item in enumerate(orig):
        j = pos.get(item)
        if j is not None:
            total += w[i] * w[j]
    return float(total)


def count_loss(original, adversarial):
    """Plain overlap fraction |original ∩ adversarial| / k."""
    orig = _as_id_tuple(original, "original")
    adv = _as_id_tuple(adversarial, "adversarial")
    if len(orig) != len(adv):
        raise ValueError(f"list length mismatch: {len(orig)} vs {len(adv)}")
    return len(set(orig) & set(adv)) / len(orig)


def ranking_loss(original, adversarial, kind):
    if kind == "relevance":
        return relevance_loss(original, adversarial)
    if kind == "count":
        return count_loss(original, adversarial)
    raise ValueError(f"unknown loss kind {kind!r}")


def identity_loss(k, kind):
    """Loss value when the adversarial list equals the original one.

    This is the analytic value of the loss at the unperturbed image, so the
    attack loop can start without spending a query on it.
    """
    if kind == "relevance":
        w = relevance_weights(k)
        return float(np.sum(w * w))
    if kind == "count":
        return 1.0
    raise ValueError(f"unknown loss kind {kind!r}")


def attack_success(original, adversarial, perturbation_linf, epsilon):
    """True when the lists share nothing and the perturbation is in budget.

    A 1e-9 slack absorbs float round-off in the norm computation.
    """
    if perturbation_linf < 0:
        raise ValueError(f"perturbation norm must be >= 0, got {perturbation_linf}")
    orig = _as_id_tuple(original, "original")
    adv = _as_id_tuple(adversarial, "adversarial")
    if len(orig) != len(adv):
        raise ValueError(f"list length mismatch: {len(orig)} vs {len(adv)}")
    return not (set(orig) & set(adv)) and perturbation_linf <= epsilon + 1e-9
