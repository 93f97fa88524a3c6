import csv
import json

import numpy as np
import pytest

from topk_attack import cli
from topk_attack.attacks import AttackResult, Perturbation, read_perturbations_csv
from topk_attack.datakit import load_dataset
from topk_attack.evaluation import EvalRecord, label_consistency, pert
from topk_attack.predictor import load_model

SMALL = ["--m", "6", "--d", "8", "--n", "150", "--n-test", "60", "--noise", "1.0", "--max-labels", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", d / "tr.jsonl", "--test-out", d / "te.jsonl", *SMALL) == 0
    assert run("train", "--data", d / "tr.jsonl", "--out", d / "m.json", "--epochs", 40, "--lr", 0.2, "--k", 2) == 0
    return d


def attack(ws, out, *extra):
    return run("attack", "--model", ws / "m.json", "--data", ws / "te.jsonl", "--out", out, "--max-iter", 200, *extra)


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# -- gen-data / train -----------------------------------------------------------------


def test_gen_data_writes_requested_counts(workspace):
    assert len(load_dataset(workspace / "tr.jsonl")) == 150
    assert len(load_dataset(workspace / "te.jsonl")) == 60


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / f"{name}.jsonl", *SMALL, "--seed", 7) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_gen_data_bad_m_names_the_field(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "x.jsonl", "--m", 2) == 1
    assert "m must be" in capsys.readouterr().err


def test_train_missing_data_is_io_error(tmp_path):
    assert run("train", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "m.json") == 2


def test_train_prints_accuracy_and_is_deterministic(workspace, tmp_path, capsys):
    args = ("train", "--data", workspace / "tr.jsonl", "--epochs", 40, "--lr", 0.2, "--k", 2, "--out")
    assert run(*args, tmp_path / "m.json") == 0
    assert "subset accuracy (k=2)" in capsys.readouterr().out
    assert (tmp_path / "m.json").read_bytes() == (workspace / "m.json").read_bytes()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# desk run\nm = 5\nd=3\nn = 12\navg-labels = 1.2\nseed = 4\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "a.jsonl", "--n", 7) == 0
    ds = load_dataset(tmp_path / "a.jsonl")
    assert (ds.m, ds.d, len(ds), ds.seed) == (5, 3, 7, 4)


@pytest.mark.parametrize("text", ["m 5\n", "colour = red\n"])
def test_bad_config_is_parameter_error(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "a.jsonl") == 1


def test_unknown_flag_is_parameter_error(tmp_path):
    assert run("gen-data", "--out", tmp_path / "a.jsonl", "--bogus", 1) == 1


# -- attack ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def untargeted_run(workspace):
    out = workspace / "u.jsonl"
    assert attack(workspace, out, "--mode", "untargeted", "--k", 2, "--k-prime", 1, "--k-prime", 2,
                  "--k-prime", 3, "--k-prime", 5, "--eta", 0.05) == 0
    return out


def test_attack_only_uses_correct_instances(workspace, untargeted_run):
    model = load_model(workspace / "m.json")
    data = load_dataset(workspace / "te.jsonl")
    recs = records(untargeted_run)
    assert recs
    for r in recs:
        assert label_consistency(model.predict(data.x[r["instance"]]), data.labels[r["instance"]], 2) == 1
    eligible = [i for i, (x, y) in enumerate(data) if label_consistency(model.predict(x), y, 2) == 1]
    assert [r["instance"] for r in recs] == eligible


def test_k_prime_success_trend(untargeted_run):
    recs = records(untargeted_run)
    rate = {kp: np.mean([r["success_at"][str(kp)] for r in recs]) for kp in (1, 2, 3, 5)}
    assert rate[2] >= rate[3] >= rate[5]
    for r in recs:
        if r["success"]:
            assert r["success_at"]["1"] and r["success_at"]["2"]


def test_resume_matches_fresh_run(workspace, untargeted_run, tmp_path):
    out = tmp_path / "u.jsonl"
    common = ("--mode", "untargeted", "--k", 2, "--k-prime", 1, "--k-prime", 2, "--k-prime", 3, "--k-prime", 5,
              "--eta", 0.05)
    assert attack(workspace, out, *common, "--limit", 4) == 0
    assert len(records(out)) == 4
    assert attack(workspace, out, *common) == 0
    assert out.read_bytes() == untargeted_run.read_bytes()


def test_resume_refuses_mixed_runs(workspace, untargeted_run, tmp_path):
    out = tmp_path / "mixed.jsonl"
    out.write_bytes(untargeted_run.read_bytes())
    assert attack(workspace, out, "--mode", "untargeted", "--k", 3) == 1


def test_workers_do_not_change_results(workspace, tmp_path):
    common = ("--mode", "targeted", "--k", 2, "--strategy", "random", "--limit", 8, "--eta", 0.05)
    assert attack(workspace, tmp_path / "a.jsonl", *common) == 0
    assert attack(workspace, tmp_path / "b.jsonl", *common, "--workers", 3) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_mlap_and_targeted_share_a_schema(workspace, tmp_path):
    common = ("--k", 2, "--strategy", "worst", "--limit", 5)
    assert attack(workspace, tmp_path / "t.jsonl", "--mode", "targeted", *common) == 0
    assert attack(workspace, tmp_path / "p.jsonl", "--mode", "mlap", *common) == 0
    t, p = records(tmp_path / "t.jsonl"), records(tmp_path / "p.jsonl")
    assert [sorted(r) for r in t] == [sorted(r) for r in p]
    assert [r["target"] for r in t] == [r["target"] for r in p]


def test_targeted_rejects_k_prime(workspace, tmp_path):
    assert attack(workspace, tmp_path / "t.jsonl", "--mode", "targeted", "--k", 2, "--k-prime", 3) == 1


def test_bad_mode_is_parameter_error(workspace, tmp_path):
    assert attack(workspace, tmp_path / "t.jsonl", "--mode", "blackbox") == 1


def test_k_too_large(workspace, tmp_path):
    assert attack(workspace, tmp_path / "t.jsonl", "--k", 6) == 1


def test_universal_emits_one_perturbation(workspace, tmp_path):
    out = tmp_path / "uv.jsonl"
    assert attack(workspace, out, "--mode", "universal", "--k", 2, "--max-epochs", 2, "--eta", 0.05,
                  "--epsilon", 5.0, "--k-prime", 1, "--k-prime", 2) == 0
    zs = read_perturbations_csv(tmp_path / "uv.jsonl.z.csv")
    assert list(zs) == [0]
    recs = records(out)
    assert len({r["norm"] for r in recs}) == 1
    assert recs[0]["norm"] == pytest.approx(np.linalg.norm(zs[0]), rel=1e-15)
    assert recs[0]["norm"] <= 5.0 + 1e-9
    meta = json.loads((tmp_path / "uv.jsonl.meta.json").read_text())
    assert meta["epochs"] <= 2


def test_invariant_violation_exit_code(workspace, tmp_path, monkeypatch):
    def oversized(model, x, truth, cfg):
        z = np.full(x.size, 100.0)
        return AttackResult(True, Perturbation(z), 1, model.predict(x), 0.0)

    monkeypatch.setattr(cli, "attack_untargeted", oversized)
    assert attack(workspace, tmp_path / "u.jsonl", "--mode", "untargeted", "--k", 2, "--limit", 1) == 3


def test_missing_model_is_io_error(workspace, tmp_path):
    assert run("attack", "--model", tmp_path / "none.json", "--data", workspace / "te.jsonl", "--out",
               tmp_path / "x.jsonl") == 2


# -- report ---------------------------------------------------------------------------


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_report_all_success(tmp_path):
    res = tmp_path / "r.jsonl"
    rows = [{"instance": i, "attack": "untargeted", "k": 3, "strategy": "-", "success": True, "norm": 2.0 * (i + 1),
             "d": 4, "success_at": {"3": True}} for i in range(3)]
    res.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert run("report", res, "--out", tmp_path / "t.csv") == 0
    table = read_csv(tmp_path / "t.csv")
    assert table == [{"attack": "untargeted", "k": "3", "k_prime": "3", "strategy": "-", "n": "3",
                      "Pert": "1.0", "ASR": "1.0"}]
    js = json.loads((tmp_path / "t.json").read_text())
    assert js["rows"][0]["ASR"] == 1.0


def test_report_pert_matches_independent_recompute(untargeted_run, tmp_path):
    assert run("report", untargeted_run, "--out", tmp_path / "t.csv") == 0
    for row in read_csv(tmp_path / "t.csv"):
        kp = row["k_prime"]
        recs = records(untargeted_run)
        wins = [r["norm"] / r["d"] for r in recs if r["success_at"][kp]]
        expected = sum(wins) / len(wins) if wins else float("nan")
        if wins:
            assert abs(float(row["Pert"]) - expected) <= 1e-12
        assert float(row["ASR"]) == len(wins) / len(recs)


def test_report_uses_evaluation_metrics(untargeted_run):
    rows = cli.summarize([untargeted_run])
    recs = records(untargeted_run)
    ev = [EvalRecord(r["instance"], None, r["success_at"]["2"], r["norm"], r["d"]) for r in recs]
    row = next(r for r in rows if r["k_prime"] == 2)
    assert row["Pert"] == pert(ev)


def test_report_order_is_deterministic(untargeted_run, tmp_path, workspace):
    t = tmp_path / "t.jsonl"
    assert attack(workspace, t, "--mode", "targeted", "--k", 2, "--limit", 3) == 0
    a = cli.rows_to_csv(cli.summarize([t, untargeted_run]))
    b = cli.rows_to_csv(cli.summarize([untargeted_run, t]))
    assert a == b
    assert [line.split(",")[0] for line in a.splitlines()[1:]] == ["untargeted"] * 4 + ["targeted"]


def test_report_empty_selection_is_header_only(untargeted_run, tmp_path):
    assert run("report", untargeted_run, "--attack", "universal", "--out", tmp_path / "t.csv") == 0
    assert (tmp_path / "t.csv").read_text() == "attack,k,k_prime,strategy,n,Pert,ASR\n"


def test_report_schema_error_names_file(tmp_path, capsys):
    bad = tmp_path / "broken.jsonl"
    bad.write_text(json.dumps({"instance": 0, "attack": "untargeted"}) + "\n")
    assert run("report", bad) == 2
    assert "broken.jsonl" in capsys.readouterr().err


def test_report_nan_pert_when_nothing_succeeds(tmp_path):
    res = tmp_path / "r.jsonl"
    rec = {"instance": 0, "attack": "mlap", "k": 2, "strategy": "worst", "success": False, "norm": 1.0, "d": 4,
           "success_at": {"2": False}}
    res.write_text(json.dumps(rec) + "\n")
    assert run("report", res, "--out", tmp_path / "t.csv") == 0
    assert read_csv(tmp_path / "t.csv")[0]["Pert"] == "nan"
    assert json.loads((tmp_path / "t.json").read_text())["rows"][0]["Pert"] is None
