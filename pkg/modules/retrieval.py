"""
Retrieval evaluation: ranks from pairwise cosine similarity, medR and R@K
averaged over random bags, and optional re-ranking of each query's top-k
candidates with a pair scorer.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import partial
from typing import Optional

import numpy as np
import pandas as pd

from modules.errors import ConfigError, InputError

DIRECTIONS = ("image_to_recipe", "recipe_to_image")
RECALL_KS = (1, 5, 10)


@dataclass(frozen=True)
class EvalConfig:
    bag_size: int = 100
    num_bags: int = 10
    directions: tuple = DIRECTIONS
    rerank_top_k: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "directions", tuple(self.directions))
        unknown = set(self.directions) - set(DIRECTIONS)
        if unknown or not self.directions:
            raise ConfigError(f"directions must be a non-empty subset of {DIRECTIONS}, got {self.directions}")
        if self.bag_size < 1 or self.num_bags < 1:
            raise ConfigError(f"bag_size and num_bags must be positive, got {self.bag_size} and {self.num_bags}")
        if self.rerank_top_k is not None and not 1 <= self.rerank_top_k <= self.bag_size:
            raise ConfigError(f"rerank_top_k must lie in [1, bag_size={self.bag_size}], got {self.rerank_top_k}")


@dataclass
class EvalReport:
    direction: str
    medR: float
    recall_at: dict
    per_bag: list = field(default_factory=list)
    bag_size: int = 0
    reranked: bool = False


def eval_threads():
    value = os.environ.get("TFOOD_EVAL_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ConfigError(f"TFOOD_EVAL_THREADS must be an integer, got {value!r}") from None
    return min(8, os.cpu_count() or 1)


# ==============================
#  Ranks and metrics
# ==============================
def ranks_from_similarity(similarity):
    """1-based rank of the diagonal entry in each row; ties go to the lower index."""
    n = similarity.shape[0]
    truth = np.diag(similarity)[:, None]
    index = np.arange(n)
    higher = (similarity > truth).sum(axis=1)
    tied_before = ((similarity == truth) & (index[None, :] < index[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def rank_matrix(queries, candidates):
    """Rank of candidate i for query i under cosine similarity (rows unit-norm)."""
    return ranks_from_similarity(np.asarray(queries) @ np.asarray(candidates).T)


def median_rank(ranks):
    return float(np.median(ranks))


def recall_at_k(ranks, k):
    return 100.0 * float(np.mean(np.asarray(ranks) <= k))


def rerank(query_idx, candidates, scorer, bag_size=None):
    """
    Reorder candidates by descending scorer probability.

    `scorer(query_idx, candidates)` returns one match probability per
    candidate; equal scores keep the incoming order.
    """
    candidates = np.asarray(candidates)
    if bag_size is not None and len(candidates) > bag_size:
        raise InputError(f"cannot re-rank {len(candidates)} candidates in a bag of {bag_size}")
    if len(candidates) <= 1:
        return candidates
    scores = np.asarray(scorer(query_idx, candidates), dtype=np.float64)
    return candidates[np.argsort(-scores, kind="stable")]


def _reranked_ranks(similarity, ranks, bag, top_k, scorer):
    ranks = ranks.copy()
    for q in range(similarity.shape[0]):
        if ranks[q] > top_k:
            continue
        order = np.argsort(-similarity[q], kind="stable")[:top_k]
        reordered = rerank(int(bag[q]), bag[order], scorer, bag_size=len(bag))
        ranks[q] = int(np.flatnonzero(reordered == bag[q])[0]) + 1
    return ranks


def _evaluate_bag(E_r, E_v, bag, cfg, scorer):
    results = {}
    for direction in cfg.directions:
        queries, candidates = (E_v, E_r) if direction == "image_to_recipe" else (E_r, E_v)
        similarity = queries[bag] @ candidates[bag].T
        ranks = ranks_from_similarity(similarity)
        if scorer is not None and cfg.rerank_top_k:
            ranks = _reranked_ranks(similarity, ranks, bag, cfg.rerank_top_k, partial(scorer, direction))
        results[direction] = ranks
    return results


def _summarise(ranks):
    row = {"medR": median_rank(ranks)}
    row.update({f"R@{k}": recall_at_k(ranks, k) for k in RECALL_KS})
    return row


def evaluate(E_r, E_v, cfg, scorer=None):
    """
    Mean medR / R@K over cfg.num_bags bags of cfg.bag_size aligned pairs.

    `scorer(direction, query_idx, candidate_idx)` enables re-ranking of each
    query's top cfg.rerank_top_k candidates; indices are rows of E_r / E_v.
    Returns {direction: EvalReport}.
    """
    E_r, E_v = np.asarray(E_r), np.asarray(E_v)
    n = E_r.shape[0]
    if n < cfg.bag_size:
        raise InputError(f"bag_size {cfg.bag_size} exceeds the {n} available pairs")

    rng = np.random.default_rng(cfg.seed)
    bags = [rng.choice(n, cfg.bag_size, replace=False) for _ in range(cfg.num_bags)]
    per_bag = [None] * len(bags)
    with ThreadPoolExecutor(max_workers=eval_threads()) as executor:
        futures = {executor.submit(_evaluate_bag, E_r, E_v, bag, cfg, scorer): b for b, bag in enumerate(bags)}
        for future in as_completed(futures):
            per_bag[futures[future]] = future.result()

    reports = {}
    reranked = scorer is not None and bool(cfg.rerank_top_k)
    for direction in cfg.directions:
        rows = [_summarise(result[direction]) for result in per_bag]
        reports[direction] = EvalReport(
            direction=direction,
            medR=float(np.mean([r["medR"] for r in rows])),
            recall_at={k: float(np.mean([r[f"R@{k}"] for r in rows])) for k in RECALL_KS},
            per_bag=rows,
            bag_size=cfg.bag_size,
            reranked=reranked,
        )
        logging.info(
            f"{direction}: medR {reports[direction].medR:.2f}, "
            f"R@1 {reports[direction].recall_at[1]:.1f}, R@5 {reports[direction].recall_at[5]:.1f}, "
            f"R@10 {reports[direction].recall_at[10]:.1f} over {len(bags)} bags of {cfg.bag_size}"
        )
    return reports


def report_frame(reports):
    """One row per (direction, bag) plus a "mean" row per direction."""
    rows = []
    for report in reports:
        for b, bag_row in enumerate(report.per_bag):
            rows.append({"direction": report.direction, "bag_size": report.bag_size, "bag": str(b),
                         **bag_row, "reranked": report.reranked})
        rows.append({
            "direction": report.direction, "bag_size": report.bag_size, "bag": "mean", "medR": report.medR,
            **{f"R@{k}": v for k, v in report.recall_at.items()}, "reranked": report.reranked,
        })
    return pd.DataFrame(rows, columns=["direction", "bag_size", "bag", "medR", *[f"R@{k}" for k in RECALL_KS], "reranked"])
