"""Synthetic cascaded-behaviour data, the JSON-lines record format, stage
views, recovery subsets and feature catalogs."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, IngestionError, ParseError
from .numerics import RngStream, derive_seed
from .stagenet import Stage
from .towers import FeatureBatch, TowerSpec


@dataclass(frozen=True)
class Candidate:
    item_id: int
    dense: tuple[float, ...]
    cats: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class Exposure:
    item_id: int
    dense: tuple[float, ...]
    cats: tuple[tuple[int, ...], ...]
    clicked: bool = False
    converted: bool = False


@dataclass(frozen=True)
class RequestRecord:
    request_id: int
    user_id: int
    ts: int
    user_dense: tuple[float, ...]
    user_cats: tuple[tuple[int, ...], ...]
    exposed: tuple[Exposure, ...]
    unexposed: tuple[Candidate, ...] = ()

    def validate(self) -> None:
        seen = set()
        for e in self.exposed:
            if e.converted and not e.clicked:
                raise DataError(
                    f"request {self.request_id}: item {e.item_id} converted-but-not-clicked"
                )
            if e.item_id in seen:
                raise DataError(f"request {self.request_id}: item {e.item_id} exposed twice")
            seen.add(e.item_id)
        for c in self.unexposed:
            if c.item_id in seen:
                raise DataError(
                    f"request {self.request_id}: item {c.item_id} both exposed and unexposed"
                )

    def to_json(self) -> str:
        obj = {
            "request_id": self.request_id,
            "user_id": self.user_id,
            "ts": self.ts,
            "user_dense": list(self.user_dense),
            "user_cats": [list(c) for c in self.user_cats],
            "exposed": [
                {"item_id": e.item_id, "dense": list(e.dense), "cats": [list(c) for c in e.cats],
                 "clicked": e.clicked, "converted": e.converted}
                for e in self.exposed
            ],
            "unexposed": [
                {"item_id": c.item_id, "dense": list(c.dense), "cats": [list(x) for x in c.cats]}
                for c in self.unexposed
            ],
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_obj(cls, obj: dict) -> "RequestRecord":
        def cats(v):
            return tuple(tuple(int(i) for i in c) for c in v)

        def dense(v):
            return tuple(float(x) for x in v)

        exposed = tuple(
            Exposure(int(e["item_id"]), dense(e["dense"]), cats(e["cats"]),
                     _bool(e["clicked"], "clicked"), _bool(e["converted"], "converted"))
            for e in obj["exposed"]
        )
        unexposed = tuple(
            Candidate(int(c["item_id"]), dense(c["dense"]), cats(c["cats"]))
            for c in obj.get("unexposed", [])
        )
        return cls(
            int(obj["request_id"]), int(obj["user_id"]), int(obj["ts"]),
            dense(obj["user_dense"]), cats(obj["user_cats"]), exposed, unexposed,
        )


def _bool(v, name):
    if not isinstance(v, bool):
        raise TypeError(f"{name} must be a boolean")
    return v


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 5000
    n_items: int = 2000
    requests_per_user: int = 3
    exposures_per_request: int = 10
    unexposed_per_request: int = 10
    latent_dim: int = 8
    n_user_clusters: int = 20
    n_item_clusters: int = 20
    rho_conflict: float = 0.5
    click_rate: float = 0.15
    conversion_rate: float = 0.04
    exposure_click_alignment: float = 0.5
    exposure_temperature: float = 1.0
    affinity_scale: float = 2.0
    feature_noise: float = 0.5
    n_ticks: int = 100
    split_tick: int = 80
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_users", "n_items", "requests_per_user", "exposures_per_request",
                     "latent_dim", "n_user_clusters", "n_item_clusters", "n_ticks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.unexposed_per_request < 0:
            raise ConfigError("unexposed_per_request must be >= 0")
        if self.exposures_per_request + self.unexposed_per_request > self.n_items:
            raise ConfigError("exposed + unexposed items per request exceed the catalog size")
        if not 0.0 <= self.rho_conflict <= 1.0:
            raise ConfigError("rho_conflict must lie in [0, 1]")
        if not (0.0 < self.click_rate < 1.0 and 0.0 < self.conversion_rate < 1.0):
            raise ConfigError("rates must lie in (0, 1)")
        if not self.conversion_rate < self.click_rate:
            raise ConfigError("conversion_rate must be below click_rate")
        if not 0 < self.split_tick <= self.n_ticks:
            raise ConfigError("split_tick must lie in (0, n_ticks]")

    def feature_schema(self) -> tuple[TowerSpec, TowerSpec]:
        """Tower input specs for data produced under this config."""
        user = TowerSpec(
            cat_vocab=(self.n_users, self.n_user_clusters, self.n_item_clusters),
            cat_width=(16, 8, 8),
            n_dense=self.latent_dim,
        )
        item = TowerSpec(
            cat_vocab=(self.n_items, self.n_item_clusters),
            cat_width=(16, 8),
            n_dense=self.latent_dim,
        )
        return user, item


@dataclass
class GroundTruth:
    user_latent: np.ndarray
    item_latent: np.ndarray
    exposure_matrix: np.ndarray
    click_matrix: np.ndarray
    conversion_matrix: np.ndarray
    click_bias: float
    conversion_bias: float

    def click_affinity(self, users, items) -> np.ndarray:
        return np.einsum("ij,jk,ik->i", self.user_latent[users], self.click_matrix,
                         self.item_latent[items])

    def conversion_affinity(self, users, items) -> np.ndarray:
        return np.einsum("ij,jk,ik->i", self.user_latent[users], self.conversion_matrix,
                         self.item_latent[items])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _bias_for_rate(aff: np.ndarray, rate: float, weight: np.ndarray | None = None) -> float:
    """Offset ``b`` so that mean(weight * sigmoid(b + aff)) equals ``rate``."""
    w = np.ones_like(aff) if weight is None else weight
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(w * _sigmoid(mid + aff)) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _round(x: np.ndarray) -> tuple[float, ...]:
    return tuple(float(v) for v in np.round(x, 5))


def generate(config: GeneratorConfig):
    """Sample users, items and request logs.

    Exposures follow a softmax over a latent platform score; clicks are
    Bernoulli on a click affinity; conversions happen only on clicks and
    use an affinity that rotates away from the click direction as
    ``rho_conflict`` goes from 0 to 1.

    Returns ``(train_records, test_records, ground_truth)``.
    """
    config.validate()
    rng = RngStream(derive_seed(config.seed, "generate"))
    L = config.latent_dim

    def gauss(*shape):
        return rng.normal(int(np.prod(shape))).reshape(shape)

    user_centers = gauss(config.n_user_clusters, L)
    item_centers = gauss(config.n_item_clusters, L)
    user_cluster = rng.integers(config.n_users, config.n_user_clusters)
    item_cluster = rng.integers(config.n_items, config.n_item_clusters)
    U = user_centers[user_cluster] + 0.6 * gauss(config.n_users, L)
    V = item_centers[item_cluster] + 0.6 * gauss(config.n_items, L)
    scale = 1.0 / L
    P = gauss(L, L) * scale
    P2 = gauss(L, L) * scale
    Q = gauss(L, L) * scale
    a = config.exposure_click_alignment * math.pi / 2
    C = math.cos(a) * P + math.sin(a) * P2
    t = config.rho_conflict * math.pi / 2
    R = math.cos(t) * C + math.sin(t) * Q
    user_dense = U + config.feature_noise * gauss(config.n_users, L)
    item_dense = V + config.feature_noise * gauss(config.n_items, L)
    item_pop = 0.5 * gauss(config.n_items)

    # user interest tags: the two item clusters with highest click affinity
    tag_aff = U @ C @ item_centers.T
    tags = np.argsort(-tag_aff, axis=1, kind="stable")[:, :2]

    item_feats = [
        (_round(item_dense[i]), ((i,), (int(item_cluster[i]),)))
        for i in range(config.n_items)
    ]
    user_feats = [
        (_round(user_dense[u]),
         ((u,), (int(user_cluster[u]),), tuple(sorted(int(x) for x in tags[u]))))
        for u in range(config.n_users)
    ]

    E = config.exposures_per_request
    K = config.unexposed_per_request
    PV = P @ V.T
    n_req = config.n_users * config.requests_per_user
    req_user = np.repeat(np.arange(config.n_users), config.requests_per_user)
    req_ts = rng.integers(n_req, config.n_ticks)
    exp_items = np.zeros((n_req, E), dtype=np.int64)
    unexp_items = np.zeros((n_req, K), dtype=np.int64)
    for r in range(n_req):
        u = req_user[r]
        logits = (config.affinity_scale * (U[u] @ PV) + item_pop) / config.exposure_temperature
        gumbel = -np.log(-np.log(rng.uniform(config.n_items)))
        exp_items[r] = np.argsort(-(logits + gumbel), kind="stable")[:E]
        if K:
            taken = np.zeros(config.n_items, dtype=bool)
            taken[exp_items[r]] = True
            pool = np.flatnonzero(~taken)
            unexp_items[r] = pool[rng.sample(pool.size, K)]

    flat_u = np.repeat(req_user, E)
    flat_i = exp_items.reshape(-1)
    s = config.affinity_scale
    aff_c = s * np.einsum("ij,jk,ik->i", U[flat_u], C, V[flat_i])
    aff_r = s * np.einsum("ij,jk,ik->i", U[flat_u], R, V[flat_i])
    b_c = _bias_for_rate(aff_c, config.click_rate)
    p_c = _sigmoid(b_c + aff_c)
    b_r = _bias_for_rate(aff_r, config.conversion_rate, weight=p_c)
    p_r = _sigmoid(b_r + aff_r)
    clicked = rng.uniform(flat_i.size) < p_c
    converted = clicked & (rng.uniform(flat_i.size) < p_r)
    clicked = clicked.reshape(n_req, E)
    converted = converted.reshape(n_req, E)

    records = []
    for r in range(n_req):
        u = int(req_user[r])
        ud, uc = user_feats[u]
        exposed = tuple(
            Exposure(int(i), *item_feats[i], bool(clicked[r, k]), bool(converted[r, k]))
            for k, i in enumerate(exp_items[r])
        )
        unexposed = tuple(Candidate(int(i), *item_feats[i]) for i in unexp_items[r])
        records.append(RequestRecord(r, u, int(req_ts[r]), ud, uc, exposed, unexposed))
    train = [rec for rec in records if rec.ts < config.split_tick]
    test = [rec for rec in records if rec.ts >= config.split_tick]
    truth = GroundTruth(U, V, P, s * C, s * R, b_c, b_r)
    return train, test, truth


def write_records(path, records: Iterable[RequestRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def load(path) -> list[RequestRecord]:
    """Read and validate a JSON-lines dataset."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", line=lineno) from None
            try:
                rec = RequestRecord.from_obj(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad record: {exc}", line=lineno) from None
            try:
                rec.validate()
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            records.append(rec)
    if not records:
        warnings.warn(f"{path}: dataset is empty", stacklevel=2)
    return records


@dataclass
class StageView:
    """Positive examples of one stage, one row per (request, item) event."""

    stage: Stage
    request: np.ndarray
    user_id: np.ndarray
    item_id: np.ndarray

    def __len__(self) -> int:
        return len(self.item_id)


def stage_view(records: Sequence[RequestRecord], stage) -> StageView:
    stage = Stage.parse(stage)
    req, users, items = [], [], []
    for r, rec in enumerate(records):
        for e in rec.exposed:
            if stage == Stage.D or (stage == Stage.O and e.clicked) or (stage == Stage.R and e.converted):
                req.append(r)
                users.append(rec.user_id)
                items.append(e.item_id)
    return StageView(stage, np.asarray(req, dtype=np.int64), np.asarray(users, dtype=np.int64),
                     np.asarray(items, dtype=np.int64))


def merge_views(*views: StageView) -> StageView:
    return StageView(
        views[0].stage,
        np.concatenate([v.request for v in views]),
        np.concatenate([v.user_id for v in views]),
        np.concatenate([v.item_id for v in views]),
    )


def recovery_indices(n: int, fraction: float, seed: int) -> list[int]:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"recovery fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0 or n == 0:
        return list(range(n))
    k = max(1, int(round(fraction * n)))
    return sorted(int(i) for i in RngStream(seed).sample(n, k))


def recovery_subset(records: Sequence[RequestRecord], fraction: float, seed: int) -> list[RequestRecord]:
    """Uniform request-level sample without replacement, in original order."""
    return [records[i] for i in recovery_indices(len(records), fraction, seed)]


class _Table:
    def __init__(self, kind: str):
        self.kind = kind
        self.ids: list[int] = []
        self.row: dict[int, int] = {}
        self.feats: list[tuple] = []

    def add(self, id_, dense, cats):
        row = self.row.get(id_)
        if row is None:
            self.row[id_] = len(self.ids)
            self.ids.append(id_)
            self.feats.append((dense, cats))
        elif self.feats[row] != (dense, cats):
            raise DataError(f"{self.kind} {id_} appears with conflicting features")

    def freeze(self):
        self.id_array = np.asarray(self.ids, dtype=np.int64)
        n = len(self.ids)
        self.dense = np.asarray([f[0] for f in self.feats], dtype=np.float64).reshape(n, -1)
        n_cat = len(self.feats[0][1]) if n else 0
        self.cat_flat, self.cat_off = [], []
        for c in range(n_cat):
            lens = np.asarray([len(f[1][c]) for f in self.feats], dtype=np.int64)
            off = np.concatenate([[0], np.cumsum(lens)])
            flat = np.asarray([x for f in self.feats for x in f[1][c]], dtype=np.int64)
            self.cat_flat.append(flat)
            self.cat_off.append(off)

    def rows(self, ids) -> np.ndarray:
        try:
            return np.asarray([self.row[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise IngestionError(f"unknown {self.kind} id {exc.args[0]}") from None

    def batch(self, rows: np.ndarray) -> FeatureBatch:
        rows = np.asarray(rows, dtype=np.int64)
        cats = []
        for flat, off in zip(self.cat_flat, self.cat_off):
            start, stop = off[rows], off[rows + 1]
            lens = stop - start
            seg = np.repeat(np.arange(rows.size), lens)
            within = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens)
            ids = flat[np.repeat(start, lens) + within]
            cats.append((ids, seg))
        return FeatureBatch(self.dense[rows], cats)


class Catalog:
    """Feature lookup for every user and item seen in a set of records."""

    def __init__(self, records: Iterable[RequestRecord]):
        self.users = _Table("user")
        self.items = _Table("item")
        for rec in records:
            self.users.add(rec.user_id, rec.user_dense, rec.user_cats)
            for e in rec.exposed:
                self.items.add(e.item_id, e.dense, e.cats)
            for c in rec.unexposed:
                self.items.add(c.item_id, c.dense, c.cats)
        self.users.freeze()
        self.items.freeze()

    def user_batch(self, user_ids) -> FeatureBatch:
        return self.users.batch(self.users.rows(user_ids))

    def item_batch(self, item_ids) -> FeatureBatch:
        return self.items.batch(self.items.rows(item_ids))

    @property
    def user_ids(self) -> np.ndarray:
        return self.users.id_array

    @property
    def item_ids(self) -> np.ndarray:
        return self.items.id_array


def event_counts(records: Sequence[RequestRecord]) -> dict[str, int]:
    exp = sum(len(r.exposed) for r in records)
    clk = sum(e.clicked for r in records for e in r.exposed)
    cvr = sum(e.converted for r in records for e in r.exposed)
    return {"requests": len(records), "exposures": exp, "clicks": clk, "conversions": cvr}


def config_dict(config: GeneratorConfig) -> dict:
    return asdict(config)


__all__ = [
    "Candidate", "Exposure", "RequestRecord", "GeneratorConfig", "GroundTruth", "generate",
    "write_records", "load", "StageView", "stage_view", "merge_views", "recovery_indices", "recovery_subset",
    "Catalog", "event_counts",
]
