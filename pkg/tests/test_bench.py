"""Evaluation harness: sweeps, controls, timing rows and report files."""

import json

import numpy as np
import pytest

from csmud.bench import (
    ExperimentConfig,
    MetricsRow,
    MissingArtifact,
    emit_report,
    evaluate,
    halfwidth,
    load_manifest_config,
    make_detector,
    run_convergence,
    run_detection_sweep,
    run_mse_sweep,
    run_timing,
    write_csv,
)
from csmud.neural import TrainConfig, build_network
from csmud.sysmodel import SplitPolicy, SystemConfig, generate_dataset, make_dictionary

SMALL = SystemConfig(K=8, Ns=8, L=2, n=2, seed=1)


def _models(c):
    return {a: build_network(a, c.K, c.L, c.M, seed=0) for a in ("BRNN", "DNN")}


def test_halfwidth():
    assert halfwidth(0.5, 100) == pytest.approx(1.96 * 0.05)
    assert halfwidth(1.0, 10) == 0.0


def test_config_validation():
    with pytest.raises(ValueError, match="unknown methods"):
        ExperimentConfig(SMALL, methods=("LASSO",))
    with pytest.raises(ValueError, match="ORACLE"):
        ExperimentConfig(SystemConfig(K=100, Ns=40, L=6, n=6), methods=("ORACLE",),
                         sweep_values=(6,))
    with pytest.raises(ValueError):
        ExperimentConfig(SMALL, trials=0)


def test_sweep_points_follow_axis():
    exp = ExperimentConfig(SMALL, sweep_axis="Ns", sweep_values=(6, 9))
    assert [c.Ns for c in exp.points()] == [6, 9]
    assert all(c.n == 2 for c in exp.points())


def test_missing_model_is_reported():
    with pytest.raises(MissingArtifact):
        make_detector("BRNN", SMALL, make_dictionary(SMALL), {})
    wrong = {"BRNN": build_network("BRNN", 9, 2, 9)}
    with pytest.raises(MissingArtifact):
        make_detector("BRNN", SMALL, make_dictionary(SMALL), wrong)


def test_empty_activity_point_is_always_detected():
    methods = ("OMP", "BOMP", "IHT", "BIHT", "DNN", "BRNN", "ORACLE", "GENIE", "RANDOM")
    exp = ExperimentConfig(SMALL, methods=methods, sweep_values=(0,), trials=20)
    rows = run_detection_sweep(exp, _models(SMALL))
    assert [r.method for r in rows] == list(methods)
    for r in rows:
        assert r.exact_set_success_rate == 1.0 and r.user_hit_ratio == 1.0
        assert r.channel_mse == 0.0


def test_bomp_single_user_generous_pilots():
    c = SystemConfig(K=20, Ns=32, L=3, n=1, seed=0)
    exp = ExperimentConfig(c, methods=("BOMP",), sweep_values=(1,), trials=1000, noiseless=True)
    (row,) = run_detection_sweep(exp)
    assert row.exact_set_success_rate >= 0.99


def test_genie_and_random_controls():
    c = SystemConfig(K=20, Ns=16, L=3, n=2, seed=0)
    noiseless = generate_dataset(c, SplitPolicy("test", n=2), 300, noiseless=True)
    genie, rand = evaluate(noiseless, ("GENIE", "RANDOM"))
    assert genie.exact_set_success_rate == 1.0
    assert genie.channel_mse < 1e-20
    noisy = generate_dataset(c, SplitPolicy("test", n=2), 300)
    genie, rand = evaluate(noisy, ("GENIE", "RANDOM"))
    assert rand.channel_mse > genie.channel_mse
    # a missed block costs its whole energy; fitted noise on wrong blocks adds to it
    assert 0.9 < rand.channel_mse < 2.0


def test_oracle_support_dominates_in_residual_terms():
    exp = ExperimentConfig(SMALL, methods=("ORACLE", "BOMP", "BIHT"), sweep_values=(2,),
                           trials=200, noiseless=True)
    rows = {r.method: r for r in run_detection_sweep(exp)}
    assert rows["ORACLE"].exact_set_success_rate == 1.0
    assert rows["ORACLE"].exact_set_success_rate >= max(rows["BOMP"].exact_set_success_rate,
                                                        rows["BIHT"].exact_set_success_rate)


def test_doubled_trials_within_halfwidth():
    c = SystemConfig(K=20, Ns=16, L=3, n=2, seed=0)
    one = run_detection_sweep(ExperimentConfig(c, methods=("BOMP",), sweep_values=(2,), trials=400))
    two = run_detection_sweep(ExperimentConfig(c, methods=("BOMP",), sweep_values=(2,), trials=800))
    assert abs(one[0].exact_set_success_rate - two[0].exact_set_success_rate) <= one[0].confidence_halfwidth


def test_mse_sweep_shares_detection_rows():
    exp = ExperimentConfig(SMALL, methods=("BOMP",), sweep_values=(1, 2), trials=30)
    strip = lambda rows: [{**vars(r), "mean_time_s": None} for r in rows]
    assert strip(run_mse_sweep(exp)) == strip(run_detection_sweep(exp))


def test_timing_single_sample():
    exp = ExperimentConfig(SMALL, methods=("IHT",), timing_samples=1, warmup=0)
    (row,) = run_timing(exp)
    assert row.samples == 1 and row.mean_time_s > 0 and row.method == "IHT"


def test_timing_grid_rows():
    exp = ExperimentConfig(SMALL, methods=("BOMP", "BRNN"), timing_samples=5, warmup=1,
                           timing_grid=((6, 1), (8, 2)))
    models = {("BRNN", 6): build_network("BRNN", 8, 2, 7), ("BRNN", 8): build_network("BRNN", 8, 2, 9)}
    rows = run_timing(exp, models)
    assert [(r.method, r.Ns, r.n) for r in rows] == [("BOMP", 6, 1), ("BRNN", 6, 1),
                                                      ("BOMP", 8, 2), ("BRNN", 8, 2)]


def test_convergence_traces():
    c = SystemConfig(K=8, Ns=8, L=2, n=2, seed=3)
    tr = generate_dataset(c, SplitPolicy("train", n=2), 2000)
    va = generate_dataset(c, SplitPolicy("val", n=2), 200)
    traces = run_convergence(c, tr, va, TrainConfig(batch_size=10, epochs=1, eval_every=100), seed=0)
    assert set(traces) == {"DNN", "BRNN"}
    for t in traces.values():
        np.testing.assert_array_equal(t.column("batch"), [100, 200])
    first = [t.column("loss")[0] for t in traces.values()]
    assert abs(first[0] - first[1]) <= 0.1 * max(first)


# --- reports ---------------------------------------------------------------------------

def test_empty_rows_give_header_only(tmp_path):
    p = tmp_path / "r.csv"
    write_csv([], p)
    assert p.read_text().strip() == ",".join(MetricsRow.__dataclass_fields__)


def test_report_rerun_is_byte_identical(tmp_path):
    exp = ExperimentConfig(SMALL, methods=("BOMP", "IHT"), sweep_values=(1, 2), trials=40)
    cols = [c for c in MetricsRow.__dataclass_fields__ if c != "mean_time_s"]
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        m = emit_report(run_detection_sweep(exp), d / "detection.csv", exp, columns=cols)
        outs.append(((d / "detection.csv").read_bytes(), m.read_bytes()))
    assert outs[0] == outs[1]


def test_manifest_round_trip(tmp_path):
    exp = ExperimentConfig(SMALL, methods=("IHT",), sweep_axis="Ns", sweep_values=(6, 8),
                           trials=3, timing_grid=((6, 1),), seed=4)
    inp = tmp_path / "input.bin"
    inp.write_bytes(b"abc")
    m = emit_report([], tmp_path / "x.csv", exp, inputs=[inp])
    assert load_manifest_config(m) == exp
    doc = json.loads(m.read_text())
    assert doc["seed"] == 4 and "input.bin" in doc["inputs"]
