#!/usr/bin/env python3
"""
Full-catalog top-k evaluation: every item is ranked for every test user,
training positives are masked out, and recall@k / ndcg@k are averaged over
users that have at least one held-out interaction.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from loguru import logger

from errors import ConfigError, DegenerateInputError
from model import LayerState, score_all

EVAL_CHUNK = 1024


@dataclass
class EvalReport:
    """Aggregated ranking metrics."""

    k: int
    recall: float
    ndcg: float
    users_evaluated: int
    per_user: Optional[List[Dict[str, Any]]] = None
    config_hash: Optional[str] = None

    def to_record(self) -> Dict[str, Any]:
        record = {
            "k": self.k,
            f"recall@{self.k}": self.recall,
            f"ndcg@{self.k}": self.ndcg,
            "users_evaluated": self.users_evaluated,
        }
        if self.config_hash is not None:
            record["config_hash"] = self.config_hash
        return record


def _check_k(k: int) -> None:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")


def _sorted_desc(scores: torch.Tensor) -> torch.Tensor:
    # stable sort keeps equal scores in ascending item order
    return torch.sort(scores, dim=-1, descending=True, stable=True).indices


def rank_items(final: LayerState, u: int, train_positives: Sequence[int], lam) -> np.ndarray:
    """All catalog items for user ``u`` by descending score; training positives sink to the end."""
    with torch.no_grad():
        scores = score_all(final, [u], lam)[0].clone()
        positives = np.asarray(train_positives, dtype=np.int64)
        if positives.size:
            scores[torch.from_numpy(positives)] = -torch.inf
        return _sorted_desc(scores).numpy()


def recall_at_k(ranked: Sequence[int], test_positives: Sequence[int], k: int) -> float:
    """Share of the user's test items that appear in the first k ranked items."""
    _check_k(k)
    test = np.unique(np.asarray(test_positives, dtype=np.int64))
    if test.size == 0:
        raise DegenerateInputError("recall is undefined for a user without test items")
    hits = np.isin(np.asarray(ranked, dtype=np.int64)[:k], test)
    return float(hits.sum()) / float(test.size)


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def ndcg_at_k(ranked: Sequence[int], test_positives: Sequence[int], k: int) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at min(k, |test|)."""
    _check_k(k)
    test = np.unique(np.asarray(test_positives, dtype=np.int64))
    if test.size == 0:
        raise DegenerateInputError("ndcg is undefined for a user without test items")
    prefix = np.asarray(ranked, dtype=np.int64)[:k]
    hits = np.isin(prefix, test)
    dcg = _discounts(prefix.size)[hits].sum()
    idcg = _discounts(min(k, test.size)).sum()
    return float(dcg / idcg)


def evaluate(
    final: LayerState,
    train,
    test,
    k: int,
    lam,
    per_user: bool = False,
    config_hash: Optional[str] = None,
    chunk_size: int = EVAL_CHUNK,
) -> EvalReport:
    """
    Mean recall@k and ndcg@k over users with held-out interactions.

    Args:
        final: Fused representation from the forward pass
        train: Anything with ``positives_by_user()`` (InteractionSet or InteractionGraph); masked out
        test: Held-out interactions (InteractionSet)
        k: Cut-off
        lam: Weight of the Lorentzian score term
        per_user: Keep per-user rows in the report
        config_hash: Stamped onto the report

    Returns:
        EvalReport
    """
    _check_k(k)
    if len(test) == 0:
        raise DegenerateInputError("cannot evaluate on an empty test set")

    train_pos = train.positives_by_user()
    test_pos = test.positives_by_user()
    users = np.array([u for u, items in enumerate(test_pos) if len(items)], dtype=np.int64)
    item_count = final.item_count

    recalls = np.zeros(users.size, dtype=np.float64)
    ndcgs = np.zeros(users.size, dtype=np.float64)
    rows: List[Dict[str, Any]] = []

    with torch.no_grad():
        for start in range(0, users.size, chunk_size):
            chunk = users[start : start + chunk_size]
            scores = score_all(final, chunk, lam).clone()
            masked = [train_pos[u] for u in chunk]
            row_idx = np.repeat(np.arange(chunk.size), [len(m) for m in masked])
            if row_idx.size:
                col_idx = np.concatenate(masked).astype(np.int64)
                scores[torch.from_numpy(row_idx), torch.from_numpy(col_idx)] = -torch.inf
            top = _sorted_desc(scores)[:, :k].numpy()

            for offset, u in enumerate(chunk):
                # never let a masked item into the evaluated prefix
                prefix = top[offset, : max(0, item_count - len(masked[offset]))]
                n = start + offset
                recalls[n] = recall_at_k(prefix, test_pos[u], k)
                ndcgs[n] = ndcg_at_k(prefix, test_pos[u], k)
                if per_user:
                    rows.append(
                        {
                            "user": int(u),
                            f"recall@{k}": recalls[n],
                            f"ndcg@{k}": ndcgs[n],
                            "test_items": int(len(test_pos[u])),
                        }
                    )

    report = EvalReport(
        k=k,
        recall=float(np.mean(recalls)),
        ndcg=float(np.mean(ndcgs)),
        users_evaluated=int(users.size),
        per_user=rows if per_user else None,
        config_hash=config_hash,
    )
    logger.debug("Evaluation complete", k=k, recall=report.recall, ndcg=report.ndcg, users=report.users_evaluated)
    return report
