"""nDCG@k, MAP@k and the paired sign-flip permutation test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .corpus import Judgments, Ranking

EXACT_LIMIT = 20


@dataclass
class MetricReport:
    metric: str
    k: int
    per_query: dict[str, float]
    excluded: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return math.fsum(self.per_query.values()) / len(self.per_query)

    @property
    def name(self) -> str:
        return f"{self.metric}@{self.k}"

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "k": self.k,
            "mean": self.mean,
            "per_query": dict(sorted(self.per_query.items())),
            "excluded": sorted(self.excluded),
        }

    def to_text(self) -> str:
        rows = [(q, f"{v:.4f}") for q, v in sorted(self.per_query.items())]
        rows.append(("all", f"{self.mean:.4f}"))
        w = max(len(q) for q, _ in rows)
        return "\n".join(f"{self.name:<12} {q:<{w}}  {v}" for q, v in rows) + "\n"


def _by_query(judgments: Judgments) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for (q, d), g in judgments.items():
        out.setdefault(q, {})[d] = g
    return out


def _as_map(rankings: Iterable[Ranking] | Mapping[str, Ranking]) -> dict[str, Ranking]:
    if isinstance(rankings, Mapping):
        return dict(rankings)
    return {r.query_id: r for r in rankings}


def gain(grade: int, kind: str) -> float:
    if kind == "linear":
        return float(grade)
    if kind == "exp":
        return 2.0 ** grade - 1.0
    raise ValueError(f"unknown gain {kind!r}")


def dcg(grades: Iterable[int], k: int, gain_kind: str = "linear") -> float:
    return math.fsum(gain(g, gain_kind) / math.log2(i + 2) for i, g in enumerate(list(grades)[:k]))


def ndcg_at_k(
    rankings: Iterable[Ranking] | Mapping[str, Ranking],
    judgments: Judgments,
    k: int = 20,
    gain_kind: str = "linear",
    queries: Iterable[str] | None = None,
) -> MetricReport:
    """nDCG@k; queries without any relevant judged document are excluded.

    Evaluated queries default to those with judgments; a judged query with no
    ranking scores 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    runs = _as_map(rankings)
    qrels = _by_query(judgments)
    per_query, excluded = {}, []
    for q in sorted(queries if queries is not None else qrels):
        grades = qrels.get(q, {})
        ideal = dcg(sorted((g for g in grades.values() if g > 0), reverse=True), k, gain_kind)
        if ideal <= 0:
            excluded.append(q)
            continue
        ranked = runs[q].doc_ids() if q in runs else []
        per_query[q] = dcg((grades.get(d, 0) for d in ranked), k, gain_kind) / ideal
    return MetricReport("ndcg", k, per_query, excluded)


def map_at_k(
    rankings: Iterable[Ranking] | Mapping[str, Ranking],
    judgments: Judgments,
    k: int = 100,
    queries: Iterable[str] | None = None,
) -> MetricReport:
    if k < 1:
        raise ValueError("k must be >= 1")
    runs = _as_map(rankings)
    qrels = _by_query(judgments)
    per_query, excluded = {}, []
    for q in sorted(queries if queries is not None else qrels):
        grades = qrels.get(q, {})
        R = sum(1 for g in grades.values() if g > 0)
        if R == 0:
            excluded.append(q)
            continue
        hits, total = 0, 0.0
        ranked = runs[q].doc_ids()[:k] if q in runs else []
        for i, d in enumerate(ranked, 1):
            if grades.get(d, 0) > 0:
                hits += 1
                total += hits / i
        per_query[q] = total / R
    return MetricReport("map", k, per_query, excluded)


def evaluate(rankings, judgments: Judgments, metric: str, k: int, gain_kind: str = "linear") -> MetricReport:
    if metric == "ndcg":
        return ndcg_at_k(rankings, judgments, k, gain_kind)
    if metric == "map":
        return map_at_k(rankings, judgments, k)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# significance

def _paired_diffs(a: Mapping[str, float], b: Mapping[str, float]) -> np.ndarray:
    if set(a) != set(b):
        raise ValueError("per-query maps must have identical query sets")
    if not a:
        raise ValueError("need at least one query")
    return np.array([a[q] - b[q] for q in sorted(a)], dtype=np.float64)


def _sign_matrix(n: int, start: int, stop: int) -> np.ndarray:
    codes = np.arange(start, stop, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(n, dtype=np.int64)) & 1
    return 1.0 - 2.0 * bits


def permutation_exact(diffs: np.ndarray) -> float:
    n = len(diffs)
    observed = abs(diffs.sum())
    tol = 1e-12 * max(1.0, observed)
    total = 1 << n
    hits = 0
    chunk = 1 << 16
    for s in range(0, total, chunk):
        stats = np.abs(_sign_matrix(n, s, min(total, s + chunk)) @ diffs)
        hits += int((stats >= observed - tol).sum())
    return hits / total


def permutation_monte_carlo(diffs: np.ndarray, n_samples: int, seed: int) -> float:
    """(1 + #{|sum of sign-flipped diffs| >= observed}) / (1 + n_samples).

    Signs come from a counter-based Philox stream keyed by ``seed``, so block
    ``j`` always holds the same draws.
    """
    n = len(diffs)
    observed = abs(diffs.sum())
    tol = 1e-12 * max(1.0, observed)
    hits = 0
    block = 8192
    for j, start in enumerate(range(0, n_samples, block)):
        m = min(block, n_samples - start)
        gen = np.random.Generator(np.random.Philox(key=[seed, j]))
        signs = 1.0 - 2.0 * gen.integers(0, 2, size=(m, n))
        hits += int((np.abs(signs @ diffs) >= observed - tol).sum())
    return (1 + hits) / (1 + n_samples)


def paired_permutation_test(
    per_query_a: Mapping[str, float],
    per_query_b: Mapping[str, float],
    n_samples: int = 100_000,
    seed: int = 0,
    exact_limit: int = EXACT_LIMIT,
) -> float:
    """Two-sided paired test of the mean difference by sign flipping.

    Exact over all 2^n sign assignments when n <= ``exact_limit``; Monte-Carlo
    otherwise.
    """
    diffs = _paired_diffs(per_query_a, per_query_b)
    if np.all(diffs == 0):
        return 1.0
    if len(diffs) <= exact_limit:
        return permutation_exact(diffs)
    return permutation_monte_carlo(diffs, n_samples, seed)


def reports_to_json(reports: Iterable[MetricReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2)
