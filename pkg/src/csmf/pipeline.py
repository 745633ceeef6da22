"""Cascaded training lifecycle and the single-stage baselines.

csmf mode, per stage:

    D: train (full-vector dot) -> prune -> recover (exposure segment) -> freeze
    O: train (AML on exposure+click prefix) -> prune -> recover -> freeze
    R: train (AML on the full vector) -> freeze

Values are rounded to float32 at every stage boundary so that a run
resumed from a checkpoint continues from exactly the same state.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, CSMFError, DataError, LifecycleError
from .numerics import RngStream, derive_seed
from .objectives import MarginConfig, aml_loss, aml_margin, assemble_negatives, softmax_loss
from .pruning import TransitionReport, commit_stage, freeze_stage
from .retrieval import Exporter, evaluate_segment
from .stagenet import Adam, Stage, frozen, trainable
from .towers import ModelSpec, TowerSpec, TwoTowerModel
from . import data as data_mod

log = logging.getLogger(__name__)

MODES = ("csmf", "mixed_single", "separate_per_objective")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "csmf"
    structure: bool = True
    epochs: tuple[int, int, int] = (3, 2, 2)
    baseline_epochs: int = 4
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prune_method: str = "cpp"
    tau: float = 0.75
    fixed_ratio: float = 0.75
    margin: MarginConfig = field(default_factory=MarginConfig)
    use_aml: bool = True
    recovery: bool = True
    recovery_fraction: float = 0.1
    recovery_epochs: int = 1
    max_negatives: int = 63
    logq_correction: bool = False
    hidden: tuple[int, ...] = (128, 64)
    final: tuple[int, int, int] = (32, 16, 16)
    block_fractions: tuple[float, float, float] = (0.5, 0.25, 0.25)
    init_gain: float = 1.0
    emb_init_scale: float = 0.1
    stage_metrics: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.prune_method not in ("cpp", "fixed"):
            raise ConfigError(f"unknown pruning method {self.prune_method!r}")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if not 0 <= self.fixed_ratio < 1:
            raise ConfigError("fixed_ratio must lie in [0, 1)")
        if not 0 < self.recovery_fraction <= 1:
            raise ConfigError("recovery_fraction must lie in (0, 1]")
        if len(self.epochs) != 3 or any(e < 0 for e in self.epochs):
            raise ConfigError("epochs must be three nonnegative counts")
        if self.max_negatives < 1:
            raise ConfigError("max_negatives must be >= 1")
        if sum(self.final) < 1 or self.final[0] < 1:
            raise ConfigError("final layout needs an exposure segment")

    @property
    def prune_value(self) -> float:
        return self.tau if self.prune_method == "cpp" else self.fixed_ratio

    def model_spec(self, user: TowerSpec, item: TowerSpec) -> ModelSpec:
        return ModelSpec(
            user=user, item=item, hidden=tuple(self.hidden), final=tuple(self.final),
            block_fractions=tuple(self.block_fractions), init_gain=self.init_gain,
            emb_init_scale=self.emb_init_scale, structure=self.structure,
        )


@dataclass
class StageReport:
    stage: str
    model: str = "main"
    epoch_losses: list[float] = field(default_factory=list)
    transition: dict | None = None
    recovery_losses: list[float] = field(default_factory=list)
    metrics_before_recovery: dict | None = None
    metrics_after_recovery: dict | None = None
    frozen: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingData:
    """Records plus the catalog and per-request lookups the trainer needs."""

    def __init__(self, train: Sequence, test: Sequence = (), catalog=None):
        self.train = list(train)
        self.test = list(test)
        self.catalog = catalog or data_mod.Catalog(self.train + self.test)
        self.unexposed = [np.asarray([c.item_id for c in r.unexposed], dtype=np.int64)
                          for r in self.train]


# --------------------------------------------------------------------------- training


def _unexposed_for(td_unexposed, view, idx):
    return [td_unexposed[r] for r in view.request[idx]]


def _encode_pair(model, catalog, cb, prefix, keep):
    ub = catalog.user_batch(cb.user_ids)
    ib = catalog.item_batch(cb.item_ids)
    return model.user.encode(ub, prefix, keep=keep), model.item.encode(ib, prefix, keep=keep)


def _pair_scores(U, I, cb):
    S = U[cb.users] @ I.T
    rows = np.arange(cb.size)
    s_pos = S[rows, cb.pos]
    s_neg = np.take_along_axis(S, cb.negs, axis=1)
    return s_pos, s_neg


@dataclass
class StepOutcome:
    loss: float
    margins: np.ndarray | None = None
    upstream: tuple[np.ndarray, np.ndarray] | None = None


def train_step(model: TwoTowerModel, catalog, cb, forward_prefix: Stage, train_prefix: Stage,
               loss_stage: Stage, cfg: PipelineConfig, opt: Adam) -> StepOutcome:
    """One optimizer step on one contrastive batch.

    ``loss_stage`` D uses the sampled softmax; O and R use the adaptive
    margin loss with upstream scores from fresh prefix passes.
    """
    (U, ucache), (I, icache) = _encode_pair(model, catalog, cb, forward_prefix, keep=True)
    s_pos, s_neg = _pair_scores(U, I, cb)
    margins = upstream = None
    log_q = None
    if cfg.logq_correction:
        # uniform in-batch sampling: log q is the same for every negative of a row
        counts = cb.neg_mask.sum(axis=1, keepdims=True)
        log_q = np.broadcast_to(-np.log(np.maximum(counts, 1)), s_neg.shape)
    if loss_stage == Stage.D or not cfg.use_aml:
        loss, g_pos, g_neg = softmax_loss(s_pos, s_neg, cb.neg_mask, log_q=log_q)
    else:
        Ud, Id = _encode_pair(model, catalog, cb, Stage.D, keep=False)
        up_pos, up_neg = _pair_scores(Ud, Id, cb)
        if loss_stage == Stage.R:
            Uo, Io = _encode_pair(model, catalog, cb, Stage.O, keep=False)
            so_pos, so_neg = _pair_scores(Uo, Io, cb)
            up_pos, up_neg = up_pos * so_pos, up_neg * so_neg
        margins = aml_margin(loss_stage, up_pos, up_neg, cfg.margin)
        upstream = (up_pos, up_neg)
        s_shift = s_neg if log_q is None else s_neg - log_q
        loss, g_pos, g_neg = aml_loss(s_pos, s_shift, margins, cfg.margin.application, cb.neg_mask)
    b = cb.size
    G = np.zeros((b, I.shape[0]))
    rows = np.arange(b)
    np.add.at(G, (rows, cb.pos), g_pos / b)
    np.add.at(G, (np.repeat(rows, cb.negs.shape[1]), cb.negs.reshape(-1)),
              (np.where(cb.neg_mask, g_neg, 0.0) / b).reshape(-1))
    Urows = U[cb.users]
    dUrows = G @ I
    dU = np.zeros_like(U)
    np.add.at(dU, cb.users, dUrows)
    dI = G.T @ Urows
    grads = model.user.backward(ucache, dU, train_prefix)
    grads.update(model.item.backward(icache, dI, train_prefix))
    opt.step(model.store, grads, prefix=train_prefix)
    return StepOutcome(float(np.mean(loss)), margins, upstream)


def _iterate(view, batch_size, rng):
    order = rng.permutation(len(view))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if idx.size >= 2:
            yield idx


def run_epochs(model, td: TrainingData, view, epochs: int, *, forward_prefix, train_prefix,
               loss_stage, neg_stage, cfg: PipelineConfig, rng: RngStream,
               unexposed=None, on_step: Callable | None = None) -> list[float]:
    if len(view) == 0:
        raise DataError(f"no positive examples for stage {Stage(loss_stage).name}")
    if len(view) < 2:
        raise DataError("at least two positive examples are needed for in-batch negatives")
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    unexposed = td.unexposed if unexposed is None else unexposed
    losses = []
    for _ in range(epochs):
        total, n = 0.0, 0
        for idx in _iterate(view, cfg.batch_size, rng):
            unexp = _unexposed_for(unexposed, view, idx) if neg_stage == Stage.D else None
            cb = assemble_negatives(view.user_id[idx], view.item_id[idx], neg_stage, rng,
                                    cfg.max_negatives, unexp)
            out = train_step(model, td.catalog, cb, forward_prefix, train_prefix, loss_stage, cfg, opt)
            if on_step is not None:
                on_step(cb, out)
            total += out.loss * idx.size
            n += idx.size
        losses.append(total / n)
        log.info("stage %s epoch loss %.5f", Stage(loss_stage).name, losses[-1])
    return losses


def train_stage(model: TwoTowerModel, td: TrainingData, stage, cfg: PipelineConfig,
                rng: RngStream | None = None, on_step=None) -> StageReport:
    """Train the ``Trainable(stage)`` parameters on the stage's positives."""
    stage = Stage.parse(stage)
    if model.store.count(trainable(stage)) == 0:
        raise LifecycleError(f"no Trainable({stage.name}) parameters")
    rng = rng or RngStream(derive_seed(cfg.seed, f"train-{stage.name}"))
    view = data_mod.stage_view(td.train, stage)
    forward_prefix = Stage.R if stage == Stage.D else stage
    losses = run_epochs(model, td, view, cfg.epochs[stage], forward_prefix=forward_prefix,
                        train_prefix=stage, loss_stage=stage, neg_stage=stage, cfg=cfg, rng=rng,
                        on_step=on_step)
    return StageReport(stage.name, epoch_losses=losses)


def recover_stage(model: TwoTowerModel, td: TrainingData, stage, cfg: PipelineConfig,
                  rng: RngStream | None = None) -> list[float]:
    """Fine-tune the parameters just retained at ``stage`` on a data subset,
    scored by the stage's own segment score, then freeze them again."""
    stage = Stage.parse(stage)
    if stage == Stage.R:
        raise LifecycleError("the conversion stage has no recovery step")
    if model.store.count(trainable(stage)) != 0:
        raise LifecycleError(f"recover_stage({stage.name}) must follow commit_stage({stage.name})")
    if model.store.count(frozen(stage)) == 0:
        raise LifecycleError(f"nothing was retained at stage {stage.name}")
    subset_idx = data_mod.recovery_indices(len(td.train), cfg.recovery_fraction,
                                           derive_seed(cfg.seed, f"recovery-{stage.name}"))
    records = [td.train[i] for i in subset_idx]
    unexposed = [td.unexposed[i] for i in subset_idx]
    view = data_mod.stage_view(records, stage)
    rng = rng or RngStream(derive_seed(cfg.seed, f"recover-{stage.name}"))
    for p in model.store:
        p.state[p.state == frozen(stage)] = trainable(stage)
    try:
        losses = run_epochs(model, td, view, cfg.recovery_epochs, forward_prefix=stage,
                            train_prefix=stage, loss_stage=stage, neg_stage=stage, cfg=cfg,
                            rng=rng, unexposed=unexposed)
    finally:
        freeze_stage(model.store, stage)
    return losses


# --------------------------------------------------------------------------- lifecycle


@dataclass
class RunState:
    """Everything needed to continue or serve a run (the checkpoint payload)."""

    config: PipelineConfig
    spec: ModelSpec
    models: dict[str, TwoTowerModel]
    progress: list[str] = field(default_factory=list)
    reports: list[StageReport] = field(default_factory=list)
    rng_positions: dict[str, list[int]] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return "done" in self.progress

    def exporters(self, catalog) -> dict[str, Exporter]:
        if "main" in self.models:
            ex = Exporter(self.models["main"], catalog)
            return {"exposure": ex, "click": ex, "conversion": ex}
        return {
            "click": Exporter(self.models["click"], catalog),
            "conversion": Exporter(self.models["conversion"], catalog),
        }


def init_state(cfg: PipelineConfig, user: TowerSpec, item: TowerSpec) -> RunState:
    cfg.validate()
    spec = cfg.model_spec(user, item)
    rng = RngStream(derive_seed(cfg.seed, "init"))
    if cfg.mode == "csmf":
        models = {"main": TwoTowerModel(spec, rng)}
    elif cfg.mode == "mixed_single":
        models = {"main": TwoTowerModel(spec.single_stage(), rng)}
    else:
        single = spec.single_stage()
        models = {"click": TwoTowerModel(single, rng), "conversion": TwoTowerModel(single, rng)}
    return RunState(cfg, spec, models)


def _stage_metrics(model, td, objective):
    if not td.test:
        return None
    rep = evaluate_segment(Exporter(model, td.catalog), td.test, objective)
    return {"recall@50": rep.get(objective, "recall"), "ndcg@50": rep.get(objective, "ndcg")}


def _boundary(state: RunState, marker: str, on_boundary):
    for m in state.models.values():
        m.store.snap_float32()
    state.progress.append(marker)
    if on_boundary is not None:
        on_boundary(state)


def _csmf_stage(state: RunState, td: TrainingData, stage: Stage):
    cfg = state.config
    model = state.models["main"]
    rng = RngStream(derive_seed(cfg.seed, f"train-{stage.name}"))
    report = train_stage(model, td, stage, cfg, rng)
    state.rng_positions[f"train-{stage.name}"] = list(rng.state())
    objective = {Stage.D: "exposure", Stage.O: "click", Stage.R: "conversion"}[stage]
    if stage == Stage.R:
        report.frozen = freeze_stage(model.store, stage)
        if cfg.stage_metrics:
            report.metrics_after_recovery = _stage_metrics(model, td, objective)
        return report
    tr: TransitionReport = commit_stage(model.store, stage, cfg.prune_method, cfg.prune_value,
                                        structure=cfg.structure)
    report.transition = tr.to_dict()
    report.frozen = tr.totals()["frozen"]
    if cfg.stage_metrics:
        report.metrics_before_recovery = _stage_metrics(model, td, objective)
    if cfg.recovery:
        report.recovery_losses = recover_stage(model, td, stage, cfg)
    if cfg.stage_metrics:
        report.metrics_after_recovery = _stage_metrics(model, td, objective)
    return report


def _single_stage(state: RunState, td: TrainingData, name: str, view):
    cfg = state.config
    model = state.models[name]
    rng = RngStream(derive_seed(cfg.seed, f"train-{name}"))
    losses = run_epochs(model, td, view, cfg.baseline_epochs, forward_prefix=Stage.R,
                        train_prefix=Stage.D, loss_stage=Stage.D, neg_stage=Stage.O,
                        cfg=cfg, rng=rng)
    state.rng_positions[f"train-{name}"] = list(rng.state())
    report = StageReport(stage="single", model=name, epoch_losses=losses)
    report.frozen = freeze_stage(model.store, Stage.D)
    return report


@contextmanager
def _naming_stage(name: str):
    """Prefix errors raised inside a stage with the stage name."""
    try:
        yield
    except CSMFError as exc:
        if exc.args and isinstance(exc.args[0], str) and not exc.args[0].startswith("stage "):
            exc.args = (f"stage {name}: {exc.args[0]}",) + exc.args[1:]
        raise


def run(cfg: PipelineConfig, td: TrainingData, user: TowerSpec | None = None,
        item: TowerSpec | None = None, resume: RunState | None = None,
        on_boundary: Callable[[RunState], None] | None = None) -> RunState:
    """Execute the configured mode, continuing from ``resume`` if given."""
    if resume is None:
        if user is None or item is None:
            raise ConfigError("tower specs are required for a fresh run")
        state = init_state(cfg, user, item)
    else:
        state = resume
        cfg = state.config
        if state.complete:
            return state
    cfg.validate()
    if cfg.mode == "csmf":
        for stage in Stage:
            if stage.name in state.progress:
                continue
            log.info("csmf stage %s", stage.name)
            with _naming_stage(stage.name):
                state.reports.append(_csmf_stage(state, td, stage))
            _boundary(state, stage.name, on_boundary)
    elif cfg.mode == "mixed_single":
        if "main" not in state.progress:
            clicks = data_mod.stage_view(td.train, Stage.O)
            convs = data_mod.stage_view(td.train, Stage.R)
            view = data_mod.merge_views(clicks, convs)
            with _naming_stage("main"):
                state.reports.append(_single_stage(state, td, "main", view))
            _boundary(state, "main", on_boundary)
    else:
        for name, stage in (("click", Stage.O), ("conversion", Stage.R)):
            if name in state.progress:
                continue
            view = data_mod.stage_view(td.train, stage)
            with _naming_stage(name):
                state.reports.append(_single_stage(state, td, name, view))
            _boundary(state, name, on_boundary)
    state.progress.append("done")
    if on_boundary is not None:
        on_boundary(state)
    return state


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, **kw)


_TUPLE_FIELDS = ("epochs", "hidden", "final", "block_fractions")


def config_to_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    for k in _TUPLE_FIELDS:
        d[k] = list(d[k])
    return d


def config_from_dict(d: dict) -> PipelineConfig:
    """Inverse of :func:`config_to_dict`; unknown keys are rejected."""
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown pipeline config keys: {', '.join(unknown)}")
    kw = dict(d)
    for k in _TUPLE_FIELDS:
        if k in kw:
            kw[k] = tuple(kw[k])
    if "margin" in kw and isinstance(kw["margin"], dict):
        m = kw["margin"]
        bad = sorted(set(m) - {f.name for f in fields(MarginConfig)})
        if bad:
            raise ConfigError(f"unknown margin config keys: {', '.join(bad)}")
        kw["margin"] = MarginConfig(**m)
    try:
        cfg = PipelineConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    for k in ("hidden", "final", "block_fractions"):
        d[k] = list(d[k])
    for t in ("user", "item"):
        d[t] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[t].items()}
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    kw = dict(d)
    for t in ("user", "item"):
        tw = dict(kw[t])
        tw["cat_vocab"] = tuple(tw["cat_vocab"])
        tw["cat_width"] = tuple(tw["cat_width"])
        kw[t] = TowerSpec(**tw)
    for k in ("hidden", "final", "block_fractions"):
        kw[k] = tuple(kw[k])
    return ModelSpec(**kw)
