"""Experiment orchestration: data and model lifecycle, attack batches, the
standard retrieval metrics, loss-landscape scans, and deterministic result
files.

Everything is a pure function of the experiment config; the master seed fans
out into per-stage seeds, so re-running a config reproduces summary.csv and
results.jsonl byte for byte.
"""

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig, run_query_attack
from .embed_net import TrainConfig, train_embedding_model
from .errors import ConfigError
from .numerics import gaussian_direction, make_rng, spawn_seeds
from .objective import ranking_loss
from .prior import feature_distance_gradient, forward_embed
from .retrieval import (Gallery, QuerySession, build_gallery_index,
                        gen_synthetic_dataset, oracle_query, retrieve_top_n)
from .stealing import StealConfig, extract_triplets, recursive_crawl, train_substitute


@dataclass
class ExperimentConfig:
    classes: int = 20
    per_class: int = 50
    shape: tuple = (3, 16, 16)
    noise: float = 0.1
    target_arch: list = field(default_factory=lambda: [64, 16])
    target_train: TrainConfig = field(default_factory=TrainConfig)
    substitute_arch: list = field(default_factory=lambda: [48, 16])
    steal: StealConfig = field(default_factory=StealConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval_queries: int = 50
    recall_ks: list = field(default_factory=lambda: [1, 2, 4, 8])
    out_dir: str = "out"
    master_seed: int = 0
    label: str = "run"

    def validate(self):
        if self.classes < 2 or self.per_class < 2:
            raise ConfigError("dataset needs >= 2 classes and >= 2 per class")
        if self.eval_queries < 1:
            raise ConfigError("need at least one evaluation query")
        if self.recall_ks != sorted(self.recall_ks) or len(set(self.recall_ks)) != len(self.recall_ks):
            raise ConfigError(f"recall_ks must be strictly ascending, got {self.recall_ks}")
        if 1 not in self.recall_ks:
            raise ConfigError("recall_ks must include 1 (drop rate is computed at 1)")
        total = self.classes * self.per_class
        if self.eval_queries + 1 >= total:
            raise ConfigError("eval split would leave no gallery")


@dataclass
class MetricsReport:
    label: str
    master_seed: int
    recall_before: dict           # k -> fraction
    recall_after: dict
    asr: float
    aq: float
    drr1: float
    results: list                 # AttackResult per eval query
    attack_seeds: list
    setup_queries: int
    crawl_log: dict = None


def recall_at_k(gallery, images, labels, k, adversarial=None, member_ids=None):
    """Fraction of queries with at least one same-class item in the top k.

    adversarial, when given, maps query index -> replacement image (the
    attacked query). member_ids, when given, marks queries that are themselves
    gallery items by id; the self match is removed before counting, as a real
    evaluation protocol would.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty query set")
    if len(images) != len(labels):
        raise ValueError("images and labels length mismatch")
    if k < 1 or k > len(gallery):
        raise ValueError(f"k must be in [1, {len(gallery)}], got {k}")
    hits = 0
    for i in range(len(images)):
        img = images[i] if adversarial is None or adversarial.get(i) is None \
            else adversarial[i]
        self_id = None if member_ids is None else member_ids[i]
        depth = k if self_id is None else min(k + 1, len(gallery))
        ranked = retrieve_top_n(gallery, img, depth)
        ids = [int(g) for g in ranked.ids if self_id is None or int(g) != int(self_id)]
        ids = ids[:k]
        if any(gallery.labels[g] == labels[i] for g in ids):
            hits += 1
    return hits / len(images)


def attack_success_rate(results):
    if not results:
        raise ValueError("no attack results")
    return sum(1 for r in results if r.success) / len(results)


def average_queries(results):
    """Mean queries over every attack, failures included."""
    if not results:
        raise ValueError("no attack results")
    return float(np.mean([r.queries_used for r in results]))


def drop_rate_at_1(recall_before, recall_after):
    """Relative drop of Recall@1 caused by the attack."""
    if recall_before <= 0:
        raise ValueError("recall before the attack is zero, drop rate undefined")
    return (recall_before - recall_after) / recall_before


def landscape_scan(session, x, grid, seed, substitute=None, use_target=False,
                   k=8, loss_kind="relevance"):
    """Ranking loss over a 2-D slice of pixel space around x.

    grid is ((i_lo, i_hi), (j_lo, j_hi), step); the scanned point at (i, j) is
    x + i*step*gamma + j*step*eta clamped to [0, 1], where gamma is a seeded
    unit Gaussian direction and eta is the elementwise sign of the
    feature-distance gradient. That gradient vanishes exactly at x, so it is
    taken one grid step (1/255) along gamma. By default eta comes from the
    substitute (all an attacker can have); use_target=True switches to the
    target model for white-box diagnostics. step=0 collapses to the single
    point x. Returns (matrix, meta dict).
    """
    (i_lo, i_hi), (j_lo, j_hi), step = grid
    if i_lo > i_hi or j_lo > j_hi:
        raise ValueError(f"empty grid ranges {grid}")
    model = session.gallery.model if use_target else substitute
    if model is None:
        raise ValueError("landscape needs a substitute model unless use_target=True")

    rng = make_rng(seed)
    x = np.asarray(x, dtype=np.float32)
    gamma = gaussian_direction(rng, x.shape)
    base_feat, _ = forward_embed(model, x)
    probe_point = np.clip(x + (1.0 / 255.0) * gamma, 0.0, 1.0).astype(np.float32)
    eta = np.sign(feature_distance_gradient(model, probe_point, base_feat))

    y = oracle_query(session, x, k, setup=True)
    if step == 0:
        i_vals, j_vals = [0], [0]
    else:
        i_vals = list(range(int(i_lo), int(i_hi) + 1))
        j_vals = list(range(int(j_lo), int(j_hi) + 1))
    mat = np.empty((len(i_vals), len(j_vals)), dtype=np.float64)
    for a, i in enumerate(i_vals):
        for b, j in enumerate(j_vals):
            point = np.clip(x + (i * step) * gamma + (j * step) * eta,
                            0.0, 1.0).astype(np.float32)
            ranked = oracle_query(session, point, k)
            mat[a, b] = ranking_loss(y, ranked, loss_kind)
    meta = {"i_values": i_vals, "j_values": j_vals, "step": step, "seed": seed,
            "direction_source": "target" if use_target else "substitute",
            "k": k, "loss": loss_kind}
    return mat, meta


def _split_dataset(images, labels, eval_queries):
    """Hold out eval queries plus one crawl seed, round-robin over classes."""
    classes = np.unique(labels)
    per_class_ix = {int(c): list(np.flatnonzero(labels == c)) for c in classes}
    held = []
    want = eval_queries + 1
    turn = 0
    while len(held) < want:
        pool = per_class_ix[int(classes[turn % len(classes)])]
        if pool:
            held.append(pool.pop(0))
        turn += 1
        if turn > want * len(classes) + len(classes):
            raise ConfigError("not enough samples to build the eval split")
    held = np.array(held)
    mask = np.ones(len(images), dtype=bool)
    mask[held] = False
    return (images[mask], labels[mask],
            images[held[:eval_queries]], labels[held[:eval_queries]],
            images[held[eval_queries]])


def steal_substitute(gallery, crawl_seed_image, steal_cfg, arch, seed):
    """Crawl, extract, train. Returns (params, crawl log, setup queries)."""
    session = QuerySession(gallery)
    stolen, log = recursive_crawl(session, crawl_seed_image, steal_cfg)
    triplets = extract_triplets(session, stolen, steal_cfg)
    cfg = replace(steal_cfg, train=replace(steal_cfg.train, seed=seed))
    params, losses = train_substitute(triplets, cfg, arch)
    log = dict(log, triplet_count=len(triplets),
               extraction_queries=int(session.setup_count - log["total_queries"]),
               final_train_loss=(losses[-1] if losses else None))
    return params, log, int(session.setup_count)


def run_experiment(cfg, threads=1):
    """Full pipeline for one configuration. Deterministic per master seed."""
    cfg.validate()
    data_seed, target_seed, steal_seed, attack_root = spawn_seeds(cfg.master_seed, 4)

    images, labels = gen_synthetic_dataset(cfg.classes, cfg.per_class, cfg.shape,
                                           cfg.noise, data_seed)
    gal_images, gal_labels, ev_images, ev_labels, crawl_seed_img = \
        _split_dataset(images, labels, cfg.eval_queries)

    input_dim = int(np.prod(cfg.shape))
    t_train = replace(cfg.target_train, seed=target_seed)
    target_params, _ = train_embedding_model(gal_images, gal_labels, t_train,
                                             [input_dim] + list(cfg.target_arch))
    gallery = build_gallery_index(gal_images, gal_labels, target_params)

    recall_before = {k: recall_at_k(gallery, ev_images, ev_labels, k)
                     for k in cfg.recall_ks}

    substitute = None
    crawl_log = None
    setup_queries = 0
    if cfg.attack.basis == "substitute_prior":
        substitute, crawl_log, setup_queries = steal_substitute(
            gallery, crawl_seed_img, cfg.steal,
            [input_dim] + list(cfg.substitute_arch), steal_seed)

    attack_seeds = spawn_seeds(attack_root, cfg.eval_queries)

    def one_attack(ix):
        session = QuerySession(gallery)
        acfg = replace(cfg.attack, seed=attack_seeds[ix])
        res = run_query_attack(session, ev_images[ix], acfg, substitute)
        return res, int(session.setup_count)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one_attack, range(cfg.eval_queries)))
    else:
        out = [one_attack(i) for i in range(cfg.eval_queries)]
    results = [r for r, _ in out]
    setup_queries += sum(s for _, s in out)

    adversarial = {i: results[i].final_image for i in range(len(results))}
    recall_after = {k: recall_at_k(gallery, ev_images, ev_labels, k,
                                   adversarial=adversarial)
                    for k in cfg.recall_ks}

    return MetricsReport(
        label=cfg.label,
        master_seed=cfg.master_seed,
        recall_before=recall_before,
        recall_after=recall_after,
        asr=attack_success_rate(results),
        aq=average_queries(results),
        drr1=drop_rate_at_1(recall_before[1], recall_after[1]),
        results=results,
        attack_seeds=attack_seeds,
        setup_queries=setup_queries,
        crawl_log=crawl_log,
    )


def run_sweep(base_cfg, variants, seeds, threads=1):
    """One report per (variant, seed). variants are (tag, loss, basis) triples."""
    reports = []
    for tag, loss_kind, basis_kind in variants:
        for seed in seeds:
            cfg = replace(base_cfg,
                          attack=replace(base_cfg.attack, loss=loss_kind,
                                         basis=basis_kind),
                          master_seed=seed,
                          label=f"{tag}_s{seed}")
            reports.append(run_experiment(cfg, threads=threads))
    return reports


COMPONENT_VARIANTS = [
    ("count_gaussian", "count", "gaussian"),
    ("count_prior", "count", "substitute_prior"),
    ("relevance_prior", "relevance", "substitute_prior"),
]

GRID_VARIANTS = COMPONENT_VARIANTS + [
    ("relevance_gaussian", "relevance", "gaussian"),
]


# ---------------------------------------------------------------------------
# Persistence. Floats are written with repr so identical runs produce
# identical bytes; summary.csv is fully recomputable from results.jsonl.
# ---------------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _summary_rows(reports):
    ks = sorted({k for r in reports for k in r.recall_before})
    header = (["label", "master_seed", "asr", "aq", "drr1"]
              + [f"recall_before@{k}" for k in ks]
              + [f"recall_after@{k}" for k in ks])
    rows = [header]
    for r in reports:
        rows.append([r.label, str(r.master_seed), _fmt(float(r.asr)),
                     _fmt(float(r.aq)), _fmt(float(r.drr1))]
                    + [_fmt(float(r.recall_before[k])) if k in r.recall_before else ""
                       for k in ks]
                    + [_fmt(float(r.recall_after[k])) if k in r.recall_after else ""
                       for k in ks])
    return rows


def summary_csv_bytes(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(_summary_rows(reports))
    return buf.getvalue().encode()


def results_jsonl_bytes(reports):
    lines = []
    for r in reports:
        for i, res in enumerate(r.results):
            rec = {
                "type": "attack",
                "label": r.label,
                "image_id": i,
                "success": bool(res.success),
                "queries_used": int(res.queries_used),
                "final_linf": float(res.final_linf),
                "loss_trace": [[int(t), float(v)] for t, v in res.loss_trace],
                "basis_fallback_count": int(res.basis_fallback_count),
                "seed": int(r.attack_seeds[i]),
            }
            lines.append(json.dumps(rec, sort_keys=True))
        summary = {
            "type": "run_summary",
            "label": r.label,
            "master_seed": int(r.master_seed),
            "recall_before": {str(k): float(v) for k, v in r.recall_before.items()},
            "recall_after": {str(k): float(v) for k, v in r.recall_after.items()},
            "setup_queries": int(r.setup_queries),
        }
        lines.append(json.dumps(summary, sort_keys=True))
    return ("\n".join(lines) + "\n").encode()


def write_results(reports, out_dir):
    """Write summary.csv and results.jsonl. Returns the two paths."""
    if not reports:
        raise ValueError("no reports to write")
    if isinstance(reports, MetricsReport):
        reports = [reports]
    for r in reports:
        if not r.results:
            raise ValueError(f"report {r.label} has no attack results")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "summary.csv")
    jsonl_path = os.path.join(out_dir, "results.jsonl")
    with open(csv_path, "wb") as fh:
        fh.write(summary_csv_bytes(reports))
    with open(jsonl_path, "wb") as fh:
        fh.write(results_jsonl_bytes(reports))
    return csv_path, jsonl_path


def write_landscape(matrix, meta, out_dir, name="landscape.csv"):
    """Matrix as CSV with axis values; metadata in a leading comment line."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["i\\j"] + [str(j) for j in meta["j_values"]])
        for a, i in enumerate(meta["i_values"]):
            writer.writerow([str(i)] + [repr(float(v)) for v in matrix[a]])
    return path


def rebuild_summary_from_jsonl(jsonl_path):
    """Recompute the summary.csv bytes from persisted per-attack records."""
    by_label = {}
    order = []
    with open(jsonl_path) as fh:
        for line in fh:
            rec = json.loads(line)
            label = rec["label"]
            if label not in by_label:
                by_label[label] = {"attacks": [], "summary": None}
                order.append(label)
            if rec["type"] == "attack":
                by_label[label]["attacks"].append(rec)
            elif rec["type"] == "run_summary":
                by_label[label]["summary"] = rec

    class _Row:
        pass

    reports = []
    for label in order:
        group = by_label[label]
        s = group["summary"]
        if s is None:
            raise ValueError(f"results file has no run_summary for {label}")
        r = _Row()
        r.label = label
        r.master_seed = s["master_seed"]
        r.recall_before = {int(k): v for k, v in s["recall_before"].items()}
        r.recall_after = {int(k): v for k, v in s["recall_after"].items()}
        attacks = group["attacks"]
        r.asr = sum(1 for a in attacks if a["success"]) / len(attacks)
        r.aq = float(np.mean([a["queries_used"] for a in attacks]))
        r.drr1 = drop_rate_at_1(r.recall_before[1], r.recall_after[1])
        reports.append(r)
    return summary_csv_bytes(reports)
