import json

import numpy as np
import pytest

from csmf import checkpoint
from csmf.cli import RunConfig, apply_overrides, load_config, main
from csmf.errors import ConfigError

TINY = {
    "seed": 3,
    "generator": {"n_users": 150, "n_items": 100},
    "pipeline": {"hidden": [8], "final": [4, 2, 2], "batch_size": 64, "epochs": [1, 1, 1],
                 "baseline_epochs": 1, "lr": 1e-3, "stage_metrics": False},
}


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(d / "cfg.json"), "--out", str(d / "data")]) == 0
    assert main(["train", "--config", str(d / "cfg.json"), "--data", str(d / "data"),
                 "--out", str(d / "run")]) == 0
    return d


def args(workdir, *extra):
    return ["--config", workdir / "cfg.json", "--data", workdir / "data", *extra]


def ranking(out):
    return [line.split("\t") for line in out.strip().splitlines()]


# ---------------------------------------------------------------- config


def test_print_config_round_trip(capsys, tmp_path):
    code, out, _ = cli(capsys, "print-config")
    assert code == 0
    doc = json.loads(out)
    assert doc["pipeline"]["tau"] == 0.75 and doc["eval"]["weights"] == [1.0, 1.8, 1.2]
    (tmp_path / "c.json").write_text(out)
    assert load_config(str(tmp_path / "c.json"), env={}) == RunConfig()


def test_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "pipeline": {"tau": 0.5}}))
    rc = load_config(str(p), env={})
    assert rc.seed == 1 and rc.pipeline.tau == 0.5 and rc.pipeline.seed == 1
    rc = load_config(str(p), env={"CSMF_SEED": "7"})
    assert rc.seed == 7 and rc.generator.seed == 7
    rc = load_config(str(p), ["seed=9", "pipeline.tau=0.6"], env={"CSMF_SEED": "7"})
    assert rc.seed == 9 and rc.pipeline.tau == 0.6


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.json"
    for doc in ({"pipelin": {}}, {"pipeline": {"taux": 0.5}}, {"eval": {"k": 1}}):
        p.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="unknown"):
            load_config(str(p), env={})
    with pytest.raises(ConfigError):
        load_config(None, ["generator.n_user=5"], env={})


def test_apply_overrides_values():
    doc = apply_overrides({"a": {"b": 1}}, ["a.b=0.5", "a.c=[1,2]", "a.d=x,y", "e=true"])
    assert doc == {"a": {"b": 0.5, "c": [1, 2], "d": ["x", "y"]}, "e": True}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_missing_config_exit_2(capsys, tmp_path):
    code, _, err = cli(capsys, "gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path)
    assert code == 2 and "config error" in err


def test_invalid_config_exit_2(capsys, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"generator": {"conversion_rate": 0.5}}))
    code, _, _ = cli(capsys, "gen-data", "--config", p, "--out", tmp_path / "d")
    assert code == 2


# ---------------------------------------------------------------- gen-data / train


def test_gen_data_deterministic_and_summary(capsys, workdir, tmp_path):
    code, out, _ = cli(capsys, "gen-data", "--config", workdir / "cfg.json", "--out", tmp_path)
    assert code == 0 and out.startswith("train: requests=")
    for name in ("train.jsonl", "test.jsonl", "summary.json"):
        assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes()
    c = json.loads((tmp_path / "summary.json").read_text())["train"]
    assert c["exposures"] > c["clicks"] > c["conversions"]


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in ("stage-D.ckpt", "stage-O.ckpt", "stage-R.ckpt", "final.ckpt", "reports.jsonl"):
        assert (run / name).is_file()
    reports = [json.loads(x) for x in (run / "reports.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in reports] == ["D", "O", "R"]


def test_train_mixed_single_one_report(capsys, workdir, tmp_path):
    code, out, _ = cli(capsys, "train", *args(workdir, "--out", tmp_path, "--mode", "mixed_single"))
    assert code == 0
    assert len((tmp_path / "reports.jsonl").read_text().splitlines()) == 1
    assert out.count("stage single") == 1


def test_resume_matches_uninterrupted(capsys, workdir, tmp_path):
    code, _, _ = cli(capsys, "train", *args(workdir, "--out", tmp_path,
                                             "--resume", workdir / "run" / "stage-O.ckpt"))
    assert code == 0
    assert (tmp_path / "final.ckpt").read_bytes() == (workdir / "run" / "final.ckpt").read_bytes()
    ev = [cli(capsys, "eval", *args(workdir, "--checkpoint", d / "final.ckpt"))[1]
          for d in (tmp_path, workdir / "run")]
    assert ev[0] == ev[1]


def test_train_missing_data_exit_1(capsys, workdir, tmp_path):
    code, _, err = cli(capsys, "train", "--config", workdir / "cfg.json", "--data", tmp_path,
                       "--out", tmp_path / "o")
    assert code == 1 and "gen-data" in err


def test_train_error_names_stage(capsys, workdir, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for name in ("train.jsonl", "test.jsonl"):
        lines = (workdir / "data" / name).read_text().splitlines()
        docs = [json.loads(x) for x in lines]
        for d in docs:
            for e in d["exposed"]:
                e["converted"] = False
        (data / name).write_text("".join(json.dumps(d) + "\n" for d in docs))
    code, _, err = cli(capsys, "train", "--config", workdir / "cfg.json", "--data", data,
                       "--out", tmp_path / "o")
    assert code == 1 and "stage R" in err


# ---------------------------------------------------------------- eval / export / retrieve / sweep


def test_eval_report(capsys, workdir):
    code, out, _ = cli(capsys, "eval", *args(workdir, "--checkpoint", workdir / "run" / "final.ckpt"))
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "objective\tN\tmetric\tvalue\tusers\tskipped"
    assert {l.split("\t")[0] for l in lines[1:]} == {"click", "conversion"}


def test_eval_partial_checkpoint_exit_1(capsys, workdir):
    code, _, err = cli(capsys, "eval", *args(workdir, "--checkpoint", workdir / "run" / "stage-D.ckpt"))
    assert code == 1 and "partial" in err


def test_retrieve_scores_match_eval_path(capsys, workdir):
    ck = workdir / "run" / "final.ckpt"
    code, out, _ = cli(capsys, "retrieve", *args(workdir, "--checkpoint", ck, "--user-id", 5, "--k", 10))
    assert code == 0
    rows = ranking(out)
    assert [r[0] for r in rows] == [str(i) for i in range(1, 11)]
    from csmf.data import Catalog, load
    from csmf.retrieval import Exporter
    from csmf.towers import ServingWeights

    state = checkpoint.load(ck)
    recs = load(workdir / "data" / "train.jsonl") + load(workdir / "data" / "test.jsonl")
    u, index = Exporter(state.models["main"], Catalog(recs)).export([5], ServingWeights())
    scores = dict(zip(index.ids.tolist(), index.matrix @ u[0]))
    for _, item, s in rows:
        assert float(s) == pytest.approx(scores[int(item)], abs=1e-6)


def test_export_then_retrieve_from_files(capsys, workdir, tmp_path):
    ck = workdir / "run" / "final.ckpt"
    assert cli(capsys, "export", "--data", workdir / "data", "--checkpoint", ck, "--out", tmp_path)[0] == 0
    assert (tmp_path / "users.vec").is_file() and (tmp_path / "items.vec").is_file()
    mem = ranking(cli(capsys, "retrieve", *args(workdir, "--checkpoint", ck, "--user-id", 7, "--k", 20))[1])
    files = ranking(cli(capsys, "retrieve", "--vectors", tmp_path, "--user-id", 7, "--k", 20)[1])
    assert [r[1] for r in mem] == [r[1] for r in files]
    assert np.allclose([float(r[2]) for r in mem], [float(r[2]) for r in files], rtol=1e-5, atol=1e-5)


def test_retrieve_exposure_weights_equal_exposure_ranking(capsys, workdir):
    ck = workdir / "run" / "final.ckpt"
    out = cli(capsys, "retrieve", *args(workdir, "--checkpoint", ck, "--user-id", 3, "--k", 15,
                                         "--weights", "1,0,0"))[1]
    from csmf.data import Catalog, load
    from csmf.retrieval import Exporter, topk
    from csmf.stagenet import Stage

    state = checkpoint.load(ck)
    recs = load(workdir / "data" / "train.jsonl") + load(workdir / "data" / "test.jsonl")
    u, index = Exporter(state.models["main"], Catalog(recs)).segment_vectors([3], Stage.D)
    assert [int(r[1]) for r in ranking(out)] == topk(u[0], index, 15).ids.tolist()


def test_retrieve_unknown_user_exit_1(capsys, workdir):
    code, _, err = cli(capsys, "retrieve", *args(workdir, "--checkpoint", workdir / "run" / "final.ckpt",
                                                  "--user-id", 10**9))
    assert code == 1 and "unknown user" in err


def test_retrieve_needs_a_source(capsys):
    assert cli(capsys, "retrieve", "--user-id", 1)[0] == 2


def test_weight_sweep(capsys, workdir):
    code, out, _ = cli(capsys, "sweep", *args(workdir, "--checkpoint", workdir / "run" / "final.ckpt",
                                               "--k-o", "1,2", "--k-r", "1,2,3"))
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("k_d\tk_o\tk_r\tclick_recall@50") and len(lines) == 7


def test_tau_sweep_retrains(capsys, workdir):
    code, out, _ = cli(capsys, "sweep", *args(workdir, "--tau", "0.5,0.75"))
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("tau\teta") and len(lines) == 3


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "csmf", "print-config"], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["seed"] == 0
