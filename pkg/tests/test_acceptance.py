"""One test per acceptance criterion; the terminal summary prints PASS/FAIL for each."""

import time

import numpy as np
import pytest

from pipelearn import nn
from pipelearn.cli import main
from pipelearn.cost import EpochShape, NetworkProfile, network, random_profile
from pipelearn.experiments import (directional_checks, directional_profiles, efficiency_rows,
                                   optimizer_sweep, score_summary)
from pipelearn.optimizer import PipelineParams
from pipelearn.orchestrator import TrainingConfig, run_fl_reference, run_training
from pipelearn.partition import microbatch, split_model
from pipelearn.sim import lane_intervals, simulate, simulate_iteration
from pipelearn.stages import build_iteration_graph, estimate_makespan, stage_times

from conftest import labels_for, random_model
from test_stages import TABLE, _positions, _resolve


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def test_estimator_equals_simulation(criterion):
    criterion("estimator-simulator equivalence (1000 profiles, 1e-9 s, < 10 s)")
    simulate_iteration(1, 2, random_profile(0), NetworkProfile(1, 1), lanes="uncontended")  # compile
    rng = np.random.default_rng(2024)
    worst = 0.0
    with Clock() as clock:
        for seed in range(1000):
            prof = random_profile(seed, q_range=(2, 12))
            net = NetworkProfile(float(rng.uniform(5, 60)), float(rng.uniform(10, 60)))
            P, N = int(rng.integers(1, prof.Q + 1)), int(rng.integers(1, 21))
            dp = estimate_makespan(build_iteration_graph(N), stage_times(P, N, prof, net))
            sim = simulate_iteration(P, N, prof, net, lanes="uncontended").epoch_makespan
            worst = max(worst, abs(dp - sim))
    assert worst <= 1e-9
    assert clock.elapsed < 10


def test_dependency_table_fidelity(criterion):
    criterion("dependency-table fidelity (18 rows, N in {1,2,3,5}, < 1 s)")
    with Clock() as clock:
        checked = set()
        for N in (1, 2, 3, 5):
            g = build_iteration_graph(N)
            nxt = g.successors()
            for (kind, position), _ in TABLE.items():
                for n in range(1, N + 1):
                    pos = _positions(n, N)
                    if position not in pos:
                        continue
                    prev = set().union(*(_resolve(TABLE[(kind, p)][0], n, N) for p in pos))
                    after = set().union(*(_resolve(TABLE[(kind, p)][1], n, N) for p in pos))
                    stage = next(s for s in g.stages if s.kind == kind and s.n == n)
                    assert set(g.prev[stage]) == prev, (N, stage)
                    assert set(nxt[stage]) == after, (N, stage)
                    checked.add((kind, position))
    assert len(checked) == 18
    assert clock.elapsed < 1


def test_split_gradient_equivalence(criterion):
    criterion("split-gradient equivalence (200 triples, 1e-12, < 5 s)")
    rng = np.random.default_rng(7)
    worst = 0.0
    with Clock() as clock:
        for _ in range(200):
            Q = int(rng.integers(1, 7))
            model = random_model(rng, Q, out_act=str(rng.choice(["softmax", "identity"])), width=(1, 8))
            P = int(rng.integers(1, Q + 1))
            rows = int(rng.integers(1, 17))
            x = rng.normal(size=(rows, model.in_features))
            y = labels_for(model, rows, rng)
            full, _, _ = nn.backward(model, nn.forward(model, x)[1], y)
            pair = split_model(model, P)
            a, dc = nn.forward(pair.device_part, x)
            out, sc = nn.forward(pair.server_part, a)
            g = nn.loss_and_grad(out, y, pair.loss)[1]
            sg, ga = nn.backward_from(pair.server_part, sc, g)
            dg, _ = nn.backward_from(pair.device_part, dc, ga)
            for (fw, fb), (w, b) in zip(full, dg + sg):
                worst = max(worst, float(np.max(np.abs(fw - w))), float(np.max(np.abs(fb - b))))
    assert worst <= 1e-12
    assert clock.elapsed < 5


def _micro_update(model, x, y, N, eta):
    acc = None
    for xn, yn in microbatch(x, N, labels=y):
        acc = nn.add_grads(acc, nn.backward(model, nn.forward(model, xn)[1], yn)[0])
    return nn.sgd_step(model, acc, eta, N)


def test_reorder_equivalence(criterion):
    criterion("reorder equivalence (100 cases N|B 1e-8, drop semantics for N not dividing B, < 5 s)")
    rng = np.random.default_rng(11)
    worst_div = worst_drop = 0.0
    with Clock() as clock:
        for _ in range(100):
            model = random_model(rng, int(rng.integers(1, 5)), out_act=str(rng.choice(["softmax", "identity"])))
            N = int(rng.integers(1, 9))
            B = N * int(rng.integers(1, 9))
            eta = float(rng.uniform(0.01, 1.0))
            x = rng.normal(size=(B, model.in_features))
            y = labels_for(model, B, rng)
            full = nn.sgd_step(model, nn.backward(model, nn.forward(model, x)[1], y)[0], eta)
            worst_div = max(worst_div, nn.max_abs_diff(_micro_update(model, x, y, N, eta), full))
            # N does not divide B: the trailing B mod N rows are dropped
            N2 = int(rng.integers(2, 9))
            B2 = N2 * int(rng.integers(1, 6)) + int(rng.integers(1, N2))
            x2 = rng.normal(size=(B2, model.in_features))
            y2 = labels_for(model, B2, rng)
            kept = N2 * (B2 // N2)
            ref = nn.sgd_step(model, nn.backward(model, nn.forward(model, x2[:kept])[1], y2[:kept])[0], eta)
            worst_drop = max(worst_drop, nn.max_abs_diff(_micro_update(model, x2, y2, N2, eta), ref))
    assert worst_div <= 1e-8
    assert worst_drop <= 1e-8
    assert clock.elapsed < 5


def test_end_to_end_fl_parity(criterion):
    criterion("end-to-end FL parity (K=2, 500 samples, 10 epochs, 1e-6, < 30 s)")
    cfg = TrainingConfig(widths=[4, 16, 2], activations=["relu", "softmax"], devices=2,
                         samples_per_device=500, batch_size=50, epochs=10, eta=0.1, seed=3,
                         params=[1, 5])
    with Clock() as clock:
        pl, fl = run_training(cfg), run_fl_reference(cfg)
    assert nn.max_abs_diff(pl.model, fl.model) <= 1e-6
    assert abs(pl.trace[-1].val_loss - fl.trace[-1].val_loss) <= 1e-6
    assert abs(pl.trace[-1].train_loss - fl.trace[-1].train_loss) <= 1e-6
    assert clock.elapsed < 30


def test_optimizer_quality(criterion):
    criterion("optimizer quality (100 profiles x 3 presets, >=90% score >= 0.95, all >= 0.90, < 2 min)")
    with Clock() as clock:
        rows, _ = optimizer_sweep(range(100))
    s = score_summary(rows)
    print(f"optimizer sweep: {s}")
    assert s["cases"] == 300
    assert all(0 < r.score <= 1 for r in rows)
    assert clock.elapsed < 120
    assert s["frac_ge_095"] >= 0.90, f"only {s['frac_ge_095']:.1%} of cases score >= 0.95"
    assert s["min"] >= 0.90, f"minimum score {s['min']:.3f}"


def test_directional_claims(criterion):
    criterion("directional claims (epoch time, server idle 2x, throughput 10x, P = 1, < 1 min)")
    with Clock() as clock:
        checks = []
        for prof in directional_profiles():
            checks.extend(directional_checks(efficiency_rows(prof)))
    failed = [name for name, ok in checks if not ok]
    assert len(checks) == 10 * 3 * 4
    assert not failed, failed
    assert clock.elapsed < 60


def test_conservation_metrics(criterion):
    criterion("conservation metrics (busy + idle = makespan 1e-9, throughput exact)")
    shape = EpochShape(600, 60)
    for seed in range(4):
        prof = random_profile(seed, Q=5)
        for preset in ("4g", "4g+", "wifi"):
            for mode in ("pipelearn", "pipelearn-seq", "sfl", "fl"):
                m = simulate(mode, PipelineParams(1 + seed % 5, 1 + seed * 3), prof, network(preset),
                             shape, devices=3)
                spans: dict[str, list] = {}
                for lane, _, s, e in lane_intervals(m.trace):
                    spans.setdefault(lane, []).append((s, e))
                for lane, busy in m.lane_busy.items():
                    idle, reach = 0.0, 0.0
                    for s, e in sorted(spans[lane]):
                        idle += max(0.0, s - reach)
                        reach = max(reach, e)
                    idle += m.epoch_makespan - reach
                    assert abs(busy + idle - m.epoch_makespan) <= 1e-9, (mode, lane)
                    assert abs(m.lane_idle(lane) - idle) <= 1e-9
                assert m.avg_throughput == m.transmitted_mb / m.epoch_makespan


def test_cli_determinism(criterion, tmp_path):
    criterion("determinism (every CLI scenario byte-identical on re-run)")
    import json
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "training": {"widths": [3, 6, 2], "activations": ["relu", "softmax"], "samples_per_device": 60,
                     "batch_size": 20, "epochs": 2, "params": [1, 4]},
        "opt_score": {"seeds": 2, "min_frac_095": 0.0, "min_score": 0.0},
    }))
    for cmd in ("efficiency", "opt-score", "equivalence", "trace", "train"):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / cmd / run
            assert main([cmd, "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
            outs.append({f.name: f.read_bytes() for f in sorted(out.iterdir())})
        assert outs[0] == outs[1], cmd
