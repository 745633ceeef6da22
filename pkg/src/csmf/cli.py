"""Command-line interface.

    csmf print-config [--config run.json] [--set key=value ...]
    csmf gen-data     --config run.json --out DIR
    csmf train        --config run.json --data DIR --out DIR [--mode M] [--resume CKPT]
    csmf eval         --config run.json --data DIR --checkpoint CKPT
    csmf export       --data DIR --checkpoint CKPT --out DIR [--weights a,b,c]
    csmf retrieve     --data DIR --checkpoint CKPT --user-id U --k K [--weights a,b,c]
    csmf sweep        --config run.json --data DIR --checkpoint CKPT --k-o ... --k-r ...

One JSON document configures everything; ``--set section.key=value``
overrides it and ``CSMF_SEED`` overrides the seed.  Exit codes: 0 ok,
1 runtime or data failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as data_mod
from .errors import ConfigError, CSMFError, DataError, IngestionError
from .pipeline import PipelineConfig, TrainingData, config_from_dict, config_to_dict, run
from .retrieval import (
    EvalSpec,
    Exporter,
    RetrievalIndex,
    evaluate,
    format_table,
    topk,
    weight_grid,
    weight_sweep,
)
from .towers import ServingWeights, read_vectors, write_vectors

log = logging.getLogger("csmf")

TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
SUMMARY_FILE = "summary.json"
FINAL_CKPT = "final.ckpt"
REPORTS_FILE = "reports.jsonl"


@dataclass(frozen=True)
class RunConfig:
    """The single config document: generator, pipeline, evaluation, seed."""

    seed: int = 0
    generator: data_mod.GeneratorConfig = field(default_factory=data_mod.GeneratorConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def resolved(self) -> "RunConfig":
        """Copy with the document seed pushed into both sub-configs."""
        return replace(self, generator=replace(self.generator, seed=self.seed),
                       pipeline=replace(self.pipeline, seed=self.seed))

    def to_dict(self) -> dict:
        gen = asdict(self.generator)
        gen.pop("seed")
        pipe = config_to_dict(self.pipeline)
        pipe.pop("seed")
        return {
            "seed": self.seed,
            "generator": gen,
            "pipeline": pipe,
            "eval": {
                "objectives": list(self.eval.objectives),
                "n_list": list(self.eval.n_list),
                "weights": list(self.eval.weights.as_tuple()),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(d, {"seed", "generator", "pipeline", "eval"}, "")
        gen_d = dict(d.get("generator", {}))
        _reject_unknown(gen_d, {f.name for f in fields(data_mod.GeneratorConfig)} - {"seed"},
                        "generator.")
        pipe_d = dict(d.get("pipeline", {}))
        _reject_unknown(pipe_d, {f.name for f in fields(PipelineConfig)} - {"seed"}, "pipeline.")
        ev_d = dict(d.get("eval", {}))
        _reject_unknown(ev_d, {"objectives", "n_list", "weights"}, "eval.")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        try:
            gen = data_mod.GeneratorConfig(**gen_d, seed=seed)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        gen.validate()
        pipe = config_from_dict({**pipe_d, "seed": seed})
        weights = ev_d.get("weights", (1.0, 1.8, 1.2))
        if len(weights) != 3:
            raise ConfigError("eval.weights needs three values")
        ev = EvalSpec(tuple(ev_d.get("objectives", EvalSpec.objectives)),
                      tuple(int(n) for n in ev_d.get("n_list", EvalSpec.n_list)),
                      ServingWeights(*(float(w) for w in weights)))
        return cls(seed, gen, pipe, ev)


def _reject_unknown(d: dict, known: set, prefix: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    bad = sorted(set(d) - known)
    if bad:
        raise ConfigError("unknown config keys: " + ", ".join(prefix + k for k in bad))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if "," in text:
            return [_parse_value(t) for t in text.split(",")]
        return text


def apply_overrides(doc: dict, items: list[str]) -> dict:
    """Apply ``key=value`` overrides; keys may be dotted (``pipeline.tau``)."""
    doc = json.loads(json.dumps(doc))
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside {key!r}")
        node[parts[-1]] = _parse_value(value)
    return doc


def load_config(path: str | None, overrides: list[str] | None = None,
                env: dict | None = None) -> RunConfig:
    """defaults < file < CSMF_SEED < --set."""
    env = os.environ if env is None else env
    doc = RunConfig().to_dict()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
        _reject_unknown(user, {"seed", "generator", "pipeline", "eval"}, "")
        for k, v in user.items():
            if isinstance(v, dict):
                _reject_unknown(v, set(doc[k]), k + ".")
                doc[k].update(v)
            else:
                doc[k] = v
    if env.get("CSMF_SEED"):
        try:
            doc["seed"] = int(env["CSMF_SEED"])
        except ValueError:
            raise ConfigError(f"CSMF_SEED must be an integer, got {env['CSMF_SEED']!r}") from None
    doc = apply_overrides(doc, overrides or [])
    return RunConfig.from_dict(doc)


# --------------------------------------------------------------------------- commands


def _load_dataset(data_dir) -> tuple[list, list]:
    d = Path(data_dir)
    for name in (TRAIN_FILE, TEST_FILE):
        if not (d / name).is_file():
            raise DataError(f"{d / name} not found (run gen-data first)")
    return data_mod.load(d / TRAIN_FILE), data_mod.load(d / TEST_FILE)


def cmd_print_config(args, rc: RunConfig) -> int:
    print(json.dumps(rc.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_gen_data(args, rc: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test, _ = data_mod.generate(rc.resolved().generator)
    data_mod.write_records(out / TRAIN_FILE, train)
    data_mod.write_records(out / TEST_FILE, test)
    summary = {"train": data_mod.event_counts(train), "test": data_mod.event_counts(test),
               "config": rc.to_dict()["generator"], "seed": rc.seed}
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for split in ("train", "test"):
        c = summary[split]
        print(f"{split}: requests={c['requests']} exposures={c['exposures']} "
              f"clicks={c['clicks']} conversions={c['conversions']}")
    return 0


def _tower_specs(rc: RunConfig):
    return rc.generator.feature_schema()


def cmd_train(args, rc: RunConfig) -> int:
    cfg = rc.resolved().pipeline
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
        cfg.validate()
    train, test = _load_dataset(args.data)
    td = TrainingData(train, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_boundary(state):
        marker = state.progress[-1]
        name = FINAL_CKPT if marker == "done" else f"stage-{marker}.ckpt"
        ckpt.save(state, out / name)
        log.info("wrote %s", out / name)

    resume = ckpt.load(args.resume) if args.resume else None
    user, item = _tower_specs(rc)
    state = run(cfg, td, user, item, resume=resume, on_boundary=on_boundary)
    with open(out / REPORTS_FILE, "w", encoding="utf-8") as fh:
        for r in state.reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    for r in state.reports:
        losses = ", ".join(f"{x:.4f}" for x in r.epoch_losses)
        print(f"stage {r.stage} [{r.model}] epoch losses: {losses}")
    return 0


def _state_and_data(args):
    state = ckpt.load(args.checkpoint)
    if not state.complete:
        raise DataError(f"{args.checkpoint} is a partial checkpoint (progress: "
                        f"{', '.join(state.progress) or 'none'})")
    train, test = _load_dataset(args.data)
    return state, TrainingData(train, test)


def cmd_eval(args, rc: RunConfig) -> int:
    state, td = _state_and_data(args)
    spec = rc.eval
    if args.weights:
        spec = replace(spec, weights=ServingWeights.parse(args.weights))
    report = evaluate(state.exporters(td.catalog), td.test, spec)
    sys.stdout.write(report.to_text())
    return 0


def _serving_model(state, objective: str):
    if "main" in state.models:
        return state.models["main"]
    if objective not in state.models:
        raise ConfigError(f"no model serves objective {objective!r}")
    return state.models[objective]


def cmd_export(args, rc: RunConfig) -> int:
    state, td = _state_and_data(args)
    w = ServingWeights.parse(args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, model in state.models.items():
        ex = Exporter(model, td.catalog)
        users = td.catalog.user_ids
        u, index = ex.export(users, w)
        suffix = "" if name == "main" else f"-{name}"
        write_vectors(out / f"users{suffix}.vec", users, u, model.final_layout)
        write_vectors(out / f"items{suffix}.vec", index.ids, index.matrix, model.final_layout)
        print(f"{name}: {len(users)} user vectors, {len(index)} item vectors -> {out}")
    return 0


def cmd_retrieve(args, rc: RunConfig) -> int:
    w = ServingWeights.parse(args.weights)
    if args.vectors:
        vdir = Path(args.vectors)
        suffix = "" if args.objective is None else f"-{args.objective}"
        if not (vdir / f"users{suffix}.vec").exists():
            suffix = ""
        uids, uvecs, _ = read_vectors(vdir / f"users{suffix}.vec")
        iids, ivecs, _ = read_vectors(vdir / f"items{suffix}.vec")
        hit = np.flatnonzero(uids == args.user_id)
        if hit.size == 0:
            raise IngestionError(f"unknown user id {args.user_id}")
        query = uvecs[hit[0]].astype(np.float64)
        index = RetrievalIndex(iids, ivecs.astype(np.float64))
    else:
        state, td = _state_and_data(args)
        model = _serving_model(state, args.objective or "conversion")
        query_m, index = Exporter(model, td.catalog).export([args.user_id], w)
        query = query_m[0]
    res = topk(query, index, args.k)
    if res.truncated:
        print(f"# only {len(index)} items in the index", file=sys.stderr)
    for rank, (i, s) in enumerate(zip(res.ids, res.scores), start=1):
        print(f"{rank}\t{int(i)}\t{s:.6f}")
    return 0


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse number list {text!r}") from None


def cmd_sweep(args, rc: RunConfig) -> int:
    if args.tau or args.eta:
        return _retraining_sweep(args, rc)
    state, td = _state_and_data(args)
    grid = weight_grid(_floats(args.k_d), _floats(args.k_o), _floats(args.k_r))
    rows = weight_sweep(state.exporters(td.catalog), td.test, grid,
                        objectives=rc.eval.objectives, n_list=rc.eval.n_list)
    sys.stdout.write(format_table(rows))
    return 0


def _retraining_sweep(args, rc: RunConfig) -> int:
    """tau / eta grids: one training run per point."""
    train, test = _load_dataset(args.data)
    td = TrainingData(train, test)
    user, item = _tower_specs(rc)
    base = rc.resolved().pipeline
    rows = []
    for tau in _floats(args.tau) or [base.tau]:
        for eta in _floats(args.eta) or [base.margin.eta]:
            cfg = replace(base, tau=tau, margin=replace(base.margin, eta=eta))
            state = run(cfg, td, user, item)
            rep = evaluate(state.exporters(td.catalog), td.test, rc.eval)
            row = {"tau": tau, "eta": eta}
            for r in rep.rows:
                row[f"{r.objective}_{r.metric}@{r.n}"] = r.value
            rows.append(row)
            log.info("tau=%s eta=%s done", tau, eta)
    sys.stdout.write(format_table(rows))
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csmf", description="Cascaded selective-mask fine-tuning "
                                "for multi-objective embedding retrieval")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True, data=True, checkpoint=False):
        sp.add_argument("--config", required=config_required, help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable), e.g. pipeline.tau=0.5")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory from gen-data")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("print-config", help="print the fully resolved config")
    common(sp, config_required=False, data=False)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="run the training lifecycle")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=["csmf", "mixed_single", "separate_per_objective"])
    sp.add_argument("--resume", help="checkpoint written at a stage boundary")

    sp = sub.add_parser("eval", help="Recall@N / nDCG@N on the test split")
    common(sp, checkpoint=True)
    sp.add_argument("--weights", help="k_d,k_o,k_r (default: from config)")

    sp = sub.add_parser("export", help="write fused user vectors and raw item vectors")
    common(sp, config_required=False, checkpoint=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights", default="1,1.8,1.2")

    sp = sub.add_parser("retrieve", help="top-k items for one user")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--vectors", help="directory written by export (instead of a checkpoint)")
    sp.add_argument("--user-id", type=int, required=True)
    sp.add_argument("--k", type=int, default=50)
    sp.add_argument("--weights", default="1,1.8,1.2")
    sp.add_argument("--objective", choices=["click", "conversion"],
                    help="which model to use when objectives have separate models")

    sp = sub.add_parser("sweep", help="serving-weight grid (no retraining) or tau/eta grid")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--k-d", default="1")
    sp.add_argument("--k-o", default="1.8")
    sp.add_argument("--k-r", default="1.2")
    sp.add_argument("--tau", default="", help="comma list; retrains per point")
    sp.add_argument("--eta", default="", help="comma list; retrains per point")
    return p


COMMANDS = {
    "print-config": cmd_print_config,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "retrieve": cmd_retrieve,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = load_config(args.config, args.set)
        if args.command == "retrieve" and not args.vectors and not (args.checkpoint and args.data):
            raise ConfigError("retrieve needs --checkpoint and --data, or --vectors")
        if args.command == "sweep" and not (args.tau or args.eta) and not args.checkpoint:
            raise ConfigError("a weight sweep needs --checkpoint")
        return COMMANDS[args.command](args, rc)
    except ConfigError as exc:
        print(f"csmf: config error: {exc}", file=sys.stderr)
        return 2
    except CSMFError as exc:
        print(f"csmf: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"csmf: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
