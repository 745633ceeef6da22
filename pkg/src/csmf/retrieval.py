"""Exact top-k retrieval over exported vectors, Recall@N / nDCG@N and
serving-weight sweeps."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .stagenet import Stage
from .towers import ServingWeights, TwoTowerModel

OBJECTIVES = {"exposure": Stage.D, "click": Stage.O, "conversion": Stage.R}


class RetrievalIndex:
    """Item vectors stored row-major in ascending id order."""

    def __init__(self, ids, vectors):
        ids = np.asarray(ids, dtype=np.int64)
        vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != ids.size:
            raise ShapeError(f"{ids.size} ids for a {vectors.shape} matrix")
        if np.unique(ids).size != ids.size:
            raise ConfigError("item ids must be unique")
        order = np.argsort(ids, kind="stable")
        self.ids = ids[order]
        self.matrix = vectors[order]

    def __len__(self) -> int:
        return self.ids.size

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class TopK:
    ids: np.ndarray
    scores: np.ndarray
    truncated: bool = False  # k exceeded the index size


def topk(user_vec, index: RetrievalIndex, k: int) -> TopK:
    """Items with the largest dot products, descending; ties by ascending id."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    u = np.asarray(user_vec, dtype=np.float64)
    if u.shape != (index.dim,):
        raise ShapeError(f"query width {u.shape} does not match index width {index.dim}")
    scores = index.matrix @ u
    order = np.argsort(-scores, kind="stable")
    kk = min(k, len(index))
    return TopK(index.ids[order[:kk]], scores[order[:kk]], truncated=k > len(index))


def topk_batch(user_vecs: np.ndarray, index: RetrievalIndex, k: int, chunk: int = 512) -> np.ndarray:
    """Row-wise :func:`topk` ids for a matrix of queries."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    user_vecs = np.asarray(user_vecs, dtype=np.float64)
    if user_vecs.ndim != 2 or user_vecs.shape[1] != index.dim:
        raise ShapeError("query matrix width does not match the index")
    kk = min(k, len(index))
    out = np.empty((user_vecs.shape[0], kk), dtype=np.int64)
    for start in range(0, user_vecs.shape[0], chunk):
        s = user_vecs[start:start + chunk] @ index.matrix.T
        order = np.argsort(-s, axis=1, kind="stable")[:, :kk]
        out[start:start + chunk] = index.ids[order]
    return out


def recall_at_n(ranked, relevant, n: int) -> float:
    if n < 1:
        raise ConfigError("N must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise DataError("recall is undefined for an empty relevant set")
    hits = sum(1 for i in list(ranked)[:n] if i in relevant)
    return hits / len(relevant)


def ndcg_at_n(ranked, relevant, n: int) -> float:
    """Binary-gain nDCG."""
    if n < 1:
        raise ConfigError("N must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise DataError("nDCG is undefined for an empty relevant set")
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(list(ranked)[:n]) if i in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(relevant), n)))
    return dcg / idcg


def relevant_sets(records, objective: str) -> tuple[dict[int, set[int]], list[int]]:
    """Per-user relevant items in ``records`` and the users seen there."""
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    rel: dict[int, set[int]] = {}
    users: list[int] = []
    for rec in records:
        if rec.user_id not in rel:
            rel[rec.user_id] = set()
            users.append(rec.user_id)
        for e in rec.exposed:
            if objective == "exposure" or (objective == "click" and e.clicked) or (
                objective == "conversion" and e.converted
            ):
                rel[rec.user_id].add(e.item_id)
    return rel, users


@dataclass(frozen=True)
class EvalSpec:
    objectives: tuple[str, ...] = ("click", "conversion")
    n_list: tuple[int, ...] = (50,)
    weights: ServingWeights = field(default_factory=ServingWeights)

    def __post_init__(self):
        if any(n < 1 for n in self.n_list):
            raise ConfigError("every N must be >= 1")
        for o in self.objectives:
            if o not in OBJECTIVES:
                raise ConfigError(f"unknown objective {o!r}")


@dataclass
class MetricRow:
    objective: str
    n: int
    metric: str
    value: float
    users: int
    skipped: int


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)

    def get(self, objective: str, metric: str = "recall", n: int = 50) -> float:
        for r in self.rows:
            if (r.objective, r.metric, r.n) == (objective, metric, n):
                return r.value
        raise KeyError((objective, metric, n))

    def to_text(self) -> str:
        lines = ["objective\tN\tmetric\tvalue\tusers\tskipped"]
        for r in self.rows:
            lines.append(f"{r.objective}\t{r.n}\t{r.metric}\t{r.value:.6f}\t{r.users}\t{r.skipped}")
        return "\n".join(lines) + "\n"

    def to_dicts(self) -> list[dict]:
        return [r.__dict__.copy() for r in self.rows]


class Exporter:
    """Serving-vector export for one model over a catalog.

    Raw encodings of every catalog user and item are computed once.  The
    fused user matrix is rebuilt only when the weight triplet changes, and
    each rebuild is counted in ``exports``.
    """

    def __init__(self, model: TwoTowerModel, catalog):
        self.model = model
        self.catalog = catalog
        self.exports = 0
        self._raw: np.ndarray | None = None
        self._fused: np.ndarray | None = None
        self._weights: ServingWeights | None = None
        self._index: RetrievalIndex | None = None

    def raw_users(self) -> np.ndarray:
        """Stage-R encodings of all catalog users, rows in catalog order."""
        if self._raw is None:
            ids = self.catalog.user_ids
            self._raw = self.model.user.encode(self.catalog.user_batch(ids), Stage.R)
        return self._raw

    def index(self) -> RetrievalIndex:
        if self._index is None:
            ids = self.catalog.item_ids
            vecs = self.model.item.encode(self.catalog.item_batch(ids), Stage.R)
            self._index = RetrievalIndex(ids, vecs)
        return self._index

    def export(self, user_ids, weights: ServingWeights) -> tuple[np.ndarray, RetrievalIndex]:
        if weights != self._weights:
            self._fused = self.raw_users() * weights.scale_vector(self.model.final_layout)
            self._weights = weights
            self.exports += 1
        rows = self.catalog.users.rows(user_ids)
        return self._fused[rows], self.index()

    def segment_vectors(self, user_ids, stage) -> tuple[np.ndarray, RetrievalIndex]:
        """Prefix-pass vectors for one objective's own score (no fusion)."""
        stage = Stage.parse(stage)
        u = self.model.user.encode(self.catalog.user_batch(user_ids), stage)
        ids = self.catalog.item_ids
        v = self.model.item.encode(self.catalog.item_batch(ids), stage)
        return u, RetrievalIndex(ids, v)


def score_rankings(user_vecs, index, users, relevant, objective, n_list) -> list[MetricRow]:
    keep = [k for k, u in enumerate(users) if relevant.get(u)]
    skipped = len(users) - len(keep)
    if not keep:
        raise DataError(f"no evaluable users for objective {objective!r}")
    n_max = max(n_list)
    ranked = topk_batch(user_vecs[keep], index, n_max)
    rows = []
    for n in n_list:
        rec = [recall_at_n(ranked[j], relevant[users[k]], n) for j, k in enumerate(keep)]
        nd = [ndcg_at_n(ranked[j], relevant[users[k]], n) for j, k in enumerate(keep)]
        rows.append(MetricRow(objective, n, "recall", float(np.mean(rec)), len(keep), skipped))
        rows.append(MetricRow(objective, n, "ndcg", float(np.mean(nd)), len(keep), skipped))
    return rows


def evaluate(exporters: Mapping[str, Exporter] | Exporter, test_records, spec: EvalSpec) -> MetricsReport:
    """Fused-score retrieval metrics per objective over the whole catalog.

    ``exporters`` maps objective name to the model serving it, or is a
    single exporter used for every objective.
    """
    report = MetricsReport()
    for objective in spec.objectives:
        ex = exporters if isinstance(exporters, Exporter) else exporters[objective]
        relevant, users = relevant_sets(test_records, objective)
        u, index = ex.export(users, spec.weights)
        report.rows.extend(score_rankings(u, index, users, relevant, objective, spec.n_list))
    return report


def evaluate_segment(exporter: Exporter, test_records, objective: str, n_list=(50,)) -> MetricsReport:
    """Metrics of one objective ranked by its own segment score."""
    relevant, users = relevant_sets(test_records, objective)
    u, index = exporter.segment_vectors(users, OBJECTIVES[objective])
    return MetricsReport(score_rankings(u, index, users, relevant, objective, n_list))


def weight_grid(k_d: Iterable[float] = (1.0,), k_o: Iterable[float] = (1.8,),
                k_r: Iterable[float] = (1.2,)) -> list[ServingWeights]:
    return [ServingWeights(a, b, c) for a in k_d for b in k_o for c in k_r]


def weight_sweep(exporters, test_records, grid: Sequence[ServingWeights],
                 objectives=("click", "conversion"), n_list=(50,)) -> list[dict]:
    """One metrics row per weight triplet; reuses the trained model as is."""
    if not grid:
        raise ConfigError("empty sweep grid")
    rows = []
    for w in grid:
        rep = evaluate(exporters, test_records, EvalSpec(tuple(objectives), tuple(n_list), w))
        row = {"k_d": w.k_d, "k_o": w.k_o, "k_r": w.k_r}
        for r in rep.rows:
            row[f"{r.objective}_{r.metric}@{r.n}"] = r.value
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def benchmark_scan(index: RetrievalIndex, queries: np.ndarray, k: int = 50) -> dict:
    """Items scored per second by the exact scan (informational only)."""
    t0 = time.perf_counter()
    topk_batch(queries, index, k)
    dt = time.perf_counter() - t0
    n = queries.shape[0] * len(index)
    return {"queries": int(queries.shape[0]), "items": len(index), "seconds": dt,
            "items_per_sec": n / dt if dt > 0 else float("inf")}
