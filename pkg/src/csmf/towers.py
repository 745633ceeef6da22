"""Two-tower model: feature embeddings, masked encoders, segment scores and
serving-vector export."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, ParseError, ShapeError, VersionError
from .numerics import RngStream
from .stagenet import (
    BlockLayout,
    MaskedLayer,
    Param,
    ParameterStore,
    Stage,
    backward,
    build_layer,
    forward,
    trainable,
)


@dataclass(frozen=True)
class TowerSpec:
    cat_vocab: tuple[int, ...] = ()
    cat_width: tuple[int, ...] = ()
    n_dense: int = 0

    def validate(self) -> None:
        if len(self.cat_vocab) != len(self.cat_width):
            raise ConfigError("cat_vocab and cat_width must have equal length")
        if any(v < 1 for v in self.cat_vocab):
            raise ConfigError("vocabulary sizes must be >= 1")
        if any(w < 3 for w in self.cat_width):
            raise ConfigError("embedding widths must be >= 3")
        if self.n_dense < 0:
            raise ConfigError("n_dense must be >= 0")
        if not self.cat_vocab and self.n_dense == 0:
            raise ConfigError("a tower needs at least one feature")


@dataclass(frozen=True)
class ModelSpec:
    user: TowerSpec
    item: TowerSpec
    hidden: tuple[int, ...] = (128, 64)
    final: tuple[int, int, int] = (32, 16, 16)
    block_fractions: tuple[float, float, float] = (0.5, 0.25, 0.25)
    init_gain: float = 1.0
    emb_init_scale: float = 0.1
    structure: bool = True

    @property
    def final_layout(self) -> BlockLayout:
        return BlockLayout(*self.final)

    def single_stage(self) -> "ModelSpec":
        """The same architecture with every unit in the exposure block."""
        from dataclasses import replace

        return replace(
            self,
            final=(sum(self.final), 0, 0),
            block_fractions=(1.0, 0.0, 0.0),
        )


@dataclass
class FeatureBatch:
    """Features of ``size`` entities.

    ``cats[f]`` is ``(ids, seg)``: flat feature ids and the row each id
    belongs to (multi-valued features are sum-pooled).
    """

    dense: np.ndarray
    cats: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.dense.shape[0]

    @classmethod
    def from_lists(cls, dense, cats_per_entity) -> "FeatureBatch":
        """Build from per-entity ``dense`` rows and per-entity lists of id lists."""
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim == 1:
            dense = dense.reshape(len(cats_per_entity), -1)
        n_feat = len(cats_per_entity[0]) if len(cats_per_entity) else 0
        cats = []
        for f in range(n_feat):
            ids, seg = [], []
            for row, entity in enumerate(cats_per_entity):
                vals = entity[f]
                ids.extend(vals)
                seg.extend([row] * len(vals))
            cats.append((np.asarray(ids, dtype=np.int64), np.asarray(seg, dtype=np.int64)))
        return cls(dense, cats)


class EmbeddingBag:
    def __init__(self, name, vocab, layout: BlockLayout, rng: RngStream, scale: float):
        layout.validate()
        self.name = name
        self.vocab = vocab
        self.layout = layout
        value = rng.normal(vocab * layout.width).reshape(vocab, layout.width) * scale
        tgt = np.repeat(layout.unit_stages()[None, :], vocab, axis=0)
        state = np.full(value.shape, trainable(Stage.D), dtype=np.uint8)
        self.table = Param(f"{name}.table", value, state, tgt, group=name)
        self._col_stage = layout.unit_stages()

    def check(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            bad = ids[(ids < 0) | (ids >= self.vocab)][0]
            raise IngestionError(f"{self.name}: id {bad} outside vocabulary of size {self.vocab}")

    def forward(self, ids, seg, n, prefix):
        self.check(ids)
        rows = np.where(self.table.active(prefix)[ids], self.table.value[ids], 0.0)
        rows *= (self._col_stage <= prefix)
        out = np.zeros((n, self.layout.width))
        np.add.at(out, seg, rows)
        return out

    def backward(self, ids, seg, grad, train_prefix):
        g = np.zeros_like(self.table.value)
        np.add.at(g, ids, grad[seg])
        return np.where(self.table.trainable(train_prefix), g, 0.0)


class Tower:
    def __init__(self, name, spec: TowerSpec, model_spec: ModelSpec, rng: RngStream):
        spec.validate()
        self.name = name
        self.spec = spec
        fr = model_spec.block_fractions
        self.embeddings = [
            EmbeddingBag(f"{name}.emb{f}", vocab, BlockLayout.from_fractions(width, fr), rng,
                         model_spec.emb_init_scale)
            for f, (vocab, width) in enumerate(zip(spec.cat_vocab, spec.cat_width))
        ]
        # raw input = [emb0 | emb1 | ... | dense]; reorder into D, O, R blocks
        offsets, pos = [], 0
        for e in self.embeddings:
            offsets.append(pos)
            pos += e.layout.width
        dense_start = pos
        perm = []
        for s in Stage:
            for e, off in zip(self.embeddings, offsets):
                sl = e.layout.block_slice(s)
                perm.extend(range(off + sl.start, off + sl.stop))
            if s == Stage.D:
                perm.extend(range(dense_start, dense_start + spec.n_dense))
        self.perm = np.asarray(perm, dtype=np.int64)
        self.in_layout = BlockLayout.concat(e.layout for e in self.embeddings)
        self.in_layout = BlockLayout(
            self.in_layout.n_d + spec.n_dense, self.in_layout.n_o, self.in_layout.n_r
        )
        widths = list(model_spec.hidden)
        layouts = [BlockLayout.from_fractions(w, fr) for w in widths]
        layouts.append(model_spec.final_layout)
        self.layers: list[MaskedLayer] = []
        prev = self.in_layout
        for k, lay in enumerate(layouts):
            last = k == len(layouts) - 1
            scale = model_spec.init_gain * np.sqrt((1.0 if last else 2.0) / prev.width)
            self.layers.append(build_layer(
                f"{name}.layer{k}", prev, lay, rng, scale,
                activation="identity" if last else "relu",
                structure=model_spec.structure,
            ))
            prev = lay

    @property
    def params(self) -> list[Param]:
        out = [e.table for e in self.embeddings]
        for layer in self.layers:
            out.extend(layer.params)
        return out

    def _input(self, feats: FeatureBatch, prefix: int) -> np.ndarray:
        if len(feats.cats) != len(self.embeddings):
            raise IngestionError(
                f"{self.name}: expected {len(self.embeddings)} categorical features, got {len(feats.cats)}"
            )
        if feats.dense.shape[1] != self.spec.n_dense:
            raise IngestionError(
                f"{self.name}: expected {self.spec.n_dense} dense features, got {feats.dense.shape[1]}"
            )
        n = feats.size
        parts = [e.forward(ids, seg, n, prefix) for e, (ids, seg) in zip(self.embeddings, feats.cats)]
        parts.append(feats.dense)
        raw = np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))
        return raw[:, self.perm]

    def encode(self, feats: FeatureBatch, prefix: int = Stage.R, keep: bool = False):
        prefix = int(prefix)
        x = self._input(feats, prefix)
        if prefix < Stage.R:
            x = x * (self.in_layout.unit_stages() <= prefix)
        cache = [] if keep else None
        for layer in self.layers:
            out, pre = forward(layer, x, prefix, return_pre=True)
            if keep:
                cache.append((x, pre))
            x = out
        if keep:
            return x, (feats, prefix, cache)
        return x

    def backward(self, cache, grad_out: np.ndarray, train_prefix: int) -> dict[str, np.ndarray]:
        feats, prefix, layer_cache = cache
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        for layer, (x, pre) in zip(reversed(self.layers), reversed(layer_cache)):
            g, pg = backward(layer, x, g, prefix, pre=pre, train_prefix=train_prefix)
            grads.update(pg)
        if prefix < Stage.R:
            g = g * (self.in_layout.unit_stages() <= prefix)
        raw = np.zeros((g.shape[0], len(self.perm)))
        raw[:, self.perm] = g
        off = 0
        for e, (ids, seg) in zip(self.embeddings, feats.cats):
            w = e.layout.width
            grads[e.table.name] = e.backward(ids, seg, raw[:, off:off + w], train_prefix)
            off += w
        return grads


class TwoTowerModel:
    def __init__(self, spec: ModelSpec, rng: RngStream):
        spec.final_layout.validate()
        self.spec = spec
        self.user = Tower("user", spec.user, spec, rng)
        self.item = Tower("item", spec.item, spec, rng)
        self.store = ParameterStore()
        for p in self.user.params + self.item.params:
            self.store.add(p)

    @property
    def final_layout(self) -> BlockLayout:
        return self.spec.final_layout

    @property
    def dim(self) -> int:
        return self.final_layout.width

    def tower(self, which: str) -> Tower:
        if which == "user":
            return self.user
        if which == "item":
            return self.item
        raise ConfigError(f"unknown tower {which!r}")


def encode(model: TwoTowerModel, tower: str, features: FeatureBatch, active_prefix=Stage.R) -> np.ndarray:
    return model.tower(tower).encode(features, int(Stage.parse(active_prefix)))


def score(u_vec, i_vec, objective, layout: BlockLayout) -> np.ndarray | float:
    """Dot product over the first 1, 2 or 3 final-layer segments.

    Works on single vectors or aligned batches of rows.
    """
    u = np.asarray(u_vec, dtype=np.float64)
    v = np.asarray(i_vec, dtype=np.float64)
    if u.shape[-1] != layout.width or v.shape[-1] != layout.width:
        raise ShapeError(f"score needs vectors of width {layout.width}")
    k = layout.prefix_width(Stage.parse(objective))
    out = np.sum(u[..., :k] * v[..., :k], axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ServingWeights:
    k_d: float = 1.0
    k_o: float = 1.8
    k_r: float = 1.2

    def __post_init__(self):
        w = (self.k_d, self.k_o, self.k_r)
        if any(x < 0 or not np.isfinite(x) for x in w):
            raise ConfigError(f"serving weights must be finite and nonnegative, got {w}")
        if not any(x > 0 for x in w):
            raise ConfigError("at least one serving weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "ServingWeights":
        try:
            parts = [float(x) for x in text.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse weights {text!r}") from None
        if len(parts) != 3:
            raise ConfigError(f"expected k_d,k_o,k_r, got {text!r}")
        return cls(*parts)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.k_d, self.k_o, self.k_r)

    def segment_scales(self) -> tuple[float, float, float]:
        return (self.k_d + self.k_o + self.k_r, self.k_o + self.k_r, self.k_r)

    def scale_vector(self, layout: BlockLayout) -> np.ndarray:
        return np.repeat(np.asarray(self.segment_scales()), layout.sizes)


def export_serving_vectors(model: TwoTowerModel, users: FeatureBatch, items: FeatureBatch,
                           weights: ServingWeights) -> tuple[np.ndarray, np.ndarray]:
    """User vectors with per-segment fusion scales applied; raw item vectors."""
    u = model.user.encode(users, Stage.R)
    v = model.item.encode(items, Stage.R)
    return u * weights.scale_vector(model.final_layout), v


VECTOR_MAGIC = "csmf-vectors"
VECTOR_VERSION = "v1"


def write_vectors(path, ids, vectors: np.ndarray, layout: BlockLayout) -> None:
    """Header line, then per entity an int64 id and ``m_e`` float32 values (little-endian)."""
    ids = np.asarray(ids, dtype=np.int64)
    vectors = np.asarray(vectors)
    if vectors.shape != (len(ids), layout.width):
        raise ShapeError(f"vectors shape {vectors.shape} does not match {len(ids)} x {layout.width}")
    header = f"{VECTOR_MAGIC} {VECTOR_VERSION} {layout.width} {layout.n_d} {layout.n_o} {layout.n_r}\n"
    rec = np.dtype([("id", "<i8"), ("v", "<f4", (layout.width,))])
    arr = np.empty(len(ids), dtype=rec)
    arr["id"] = ids
    arr["v"] = vectors
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes())


def read_vectors(path) -> tuple[np.ndarray, np.ndarray, BlockLayout]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError(f"{path}: missing header line", line=1)
    fields = data[:nl].decode("ascii", errors="replace").split()
    if len(fields) != 6 or fields[0] != VECTOR_MAGIC:
        raise ParseError(f"{path}: not a vector file", line=1)
    if fields[1] != VECTOR_VERSION:
        raise VersionError(f"{path}: vector format {fields[1]} is not {VECTOR_VERSION}")
    m_e, n_d, n_o, n_r = (int(x) for x in fields[2:])
    layout = BlockLayout(n_d, n_o, n_r)
    if layout.width != m_e:
        raise ParseError(f"{path}: segment sizes do not add up to {m_e}", line=1)
    rec = np.dtype([("id", "<i8"), ("v", "<f4", (m_e,))])
    body = data[nl + 1:]
    if len(body) % rec.itemsize:
        raise ParseError(f"{path}: truncated vector records")
    arr = np.frombuffer(body, dtype=rec)
    return arr["id"].astype(np.int64), arr["v"].astype(np.float64), layout


__all__ = [
    "TowerSpec", "ModelSpec", "FeatureBatch", "TwoTowerModel", "ServingWeights",
    "encode", "score", "export_serving_vectors", "write_vectors", "read_vectors",
]
