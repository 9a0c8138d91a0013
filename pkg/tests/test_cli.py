import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from oocnmf import fileio
from oocnmf.cli import main


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "--m", 100, "--n", 80, "--k", 4, "--seed", 0, "--out", d / "a.pdn1",
               "--w0", d / "w0.pdn1", "--h0", d / "h0.pdn1") == 0
    return d


def trace(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [(int(r["iteration"]), float(r["relative_error"])) for r in rows]


def test_gen_deterministic_and_roundtrip(tmp_path, data):
    assert run("gen", "--m", 100, "--n", 80, "--k", 4, "--seed", 0, "--out", tmp_path / "b.pdn1") == 0
    assert (tmp_path / "b.pdn1").read_bytes() == (data / "a.pdn1").read_bytes()
    a = fileio.read_pdn1(data / "a.pdn1")
    assert np.allclose(a, fileio.read_pdn1(data / "w0.pdn1") @ fileio.read_pdn1(data / "h0.pdn1"))
    assert run("gen", "--kind", "sparse", "--m", 30, "--n", 20, "--density", 0.1,
               "--out", tmp_path / "s.mtx") == 0
    assert fileio.load_matrix(tmp_path / "s.mtx").shape == (30, 20)


def test_gen_invalid(tmp_path, capsys):
    assert run("gen", "--m", 5, "--n", 5, "--k", 9, "--out", tmp_path / "x.pdn1") == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2


def test_factorize_outputs(tmp_path, data):
    out = tmp_path / "o"
    assert run("factorize", "--input", data / "a.pdn1", "--k", 4, "--max-iters", 200, "--out", out) == 0
    w, h = fileio.read_pdn1(out / "W.pdn1"), fileio.read_pdn1(out / "H.pdn1")
    assert w.shape == (100, 4) and h.shape == (4, 80)
    rep = json.loads((out / "report_rank0.json").read_text())
    assert rep["error_normalization"] == "relative_to_norm_A"
    assert set(rep["counters"]["seconds"]) >= {"h_update", "w_update", "allreduce", "error_check", "io"}
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "factorize" and man["version"].startswith("oocnmf")
    assert trace(out / "error_trace.csv")[-1][0] == 200


def test_threads_match_single(tmp_path, data):
    one, three = tmp_path / "one", tmp_path / "three"
    base = ["factorize", "--input", data / "a.pdn1", "--k", 4, "--max-iters", 100]
    assert run(*base, "--out", one) == 0
    assert run(*base, "--workers", 3, "--backend", "threads", "--batches", 2, "--out", three) == 0
    t1, t3 = trace(one / "error_trace.csv"), trace(three / "error_trace.csv")
    assert np.allclose([e for _, e in t1], [e for _, e in t3], rtol=1e-8, atol=0)
    w1, w3 = fileio.read_pdn1(one / "W.pdn1"), fileio.read_pdn1(three / "W.pdn1")
    assert np.allclose(w1, w3, rtol=1e-6)


def test_replay_bitwise(tmp_path, data):
    out = tmp_path / "o"
    assert run("factorize", "--input", data / "a.pdn1", "--k", 3, "--max-iters", 50,
               "--workers", 2, "--out", out) == 0
    assert run("replay", out / "manifest.json", "--out", tmp_path / "r") == 0
    assert (out / "error_trace.csv").read_bytes() == (tmp_path / "r" / "error_trace.csv").read_bytes()
    assert (out / "W.pdn1").read_bytes() == (tmp_path / "r" / "W.pdn1").read_bytes()


def test_missing_input(tmp_path, capsys):
    assert run("factorize", "--input", tmp_path / "nope.pdn1", "--k", 2) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] and err["exit_code"] == 2


def test_usage_errors(capsys):
    assert run("factorize", "--k", 2) == 2
    assert run("nonsense") == 2


def test_runtime_error_exit_3(tmp_path, capsys):
    z = tmp_path / "z.pdn1"
    fileio.write_pdn1(z, np.zeros((4, 4)))
    assert run("factorize", "--input", z, "--k", 1, "--out", tmp_path / "o") == 3
    assert json.loads(capsys.readouterr().err)["error"] == "ZeroNormError"


def test_dump_plan_and_budget(data, capsys):
    assert run("factorize", "--input", data / "a.pdn1", "--k", 4, "--budget", 40000, "--dump-plan") == 0
    d = json.loads(capsys.readouterr().out)
    assert d["plan"]["strategy"] == "RNMF" and d["plan"]["n_batches"] > 1
    assert d["memory_estimate"]["peak"] <= 40000


def test_budgeted_run_within_budget(tmp_path, data):
    out = tmp_path / "b"
    assert run("factorize", "--input", data / "a.pdn1", "--k", 4, "--max-iters", 30,
               "--budget", 40000, "--out", out) == 0
    rep = json.loads((out / "report_rank0.json").read_text())
    assert rep["store_counters"]["peak_resident_bytes"] <= rep["store"]["budget_bytes"]


def test_spawn_local_tcp(tmp_path, data):
    out = tmp_path / "tcp"
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    proc = subprocess.run([sys.executable, "-m", "oocnmf", "factorize", "--input", str(data / "a.pdn1"),
                           "--k", "4", "--max-iters", "40", "--spawn-local", "3", "--out", str(out)],
                          env=env, capture_output=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert sorted(os.listdir(out)) == ["H.pdn1", "W.pdn1", "error_trace.csv", "manifest.json",
                                       "report_rank0.json", "report_rank1.json", "report_rank2.json"]
    ref = tmp_path / "thr"
    assert run("factorize", "--input", data / "a.pdn1", "--k", 4, "--max-iters", 40, "--workers", 3,
               "--out", ref) == 0
    assert (ref / "W.pdn1").read_bytes() == (out / "W.pdn1").read_bytes()


def test_select_k(tmp_path, data, capsys):
    out = tmp_path / "s"
    assert run("select-k", "--input", data / "a.pdn1", "--k-min", 1, "--k-max", 1,
               "--perturbations", 3, "--max-iters", 50, "--out", out) == 0
    rep = json.loads((out / "selection.json").read_text())
    assert rep["chosen_k"] == 1
    assert run("select-k", "--input", data / "a.pdn1", "--k-min", 5, "--k-max", 2) == 2


def test_bench(tmp_path):
    out = tmp_path / "bench.csv"
    assert run("bench", "--m", 40, "--n", 60, "--k", "8,16", "--workers", "1,2", "--iters", 3,
               "--out", out) == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    phases = {"h_update", "w_update", "allreduce", "error_check", "io", "total"}
    assert len(rows) == 2 * 2 * len(phases)
    assert list(rows[0])[:7] == ["strategy", "N", "n_B", "k", "phase", "seconds", "bytes"]
    by_cfg = {}
    for r in rows:
        by_cfg.setdefault((r["N"], r["k"]), {})[r["phase"]] = float(r["seconds"])
    for ph in by_cfg.values():
        assert sum(v for p, v in ph.items() if p != "total") <= ph["total"] * 1.05
    assert run("bench", "--k", "", "--out", out) == 2
