"""Tests for gate/norm telemetry: averaging, CSV export, PGM heatmaps."""

import csv

import numpy as np
import pytest

from mole.diffusion import make_schedule, p_sample_loop
from mole.errors import ContractError, DimensionError
from mole.net import init_denoiser, wrap_denoiser
from mole.expert import expert_apply
from mole.tensor import Tensor
from mole.telemetry import (
    GateTrace,
    NormTrace,
    collect_runs,
    expert_norms,
    export_csv,
    export_heatmap,
    steered_init,
    trace_gates,
    write_analysis,
)


def tiny_net(hidden_layers=2, seed=0, randomize_gates=True):
    net = init_denoiser(image_size=8, patch=4, hidden_width=16, hidden_layers=hidden_layers, seed=seed)
    wrap_denoiser(net, rank=2, seed=seed + 1)
    if randomize_gates:
        rng = np.random.default_rng(seed + 2)
        for _, layer in net.mole_layers():
            for p in layer.gates.named_parameters().values():
                p.data[...] = rng.normal(scale=0.7, size=p.data.shape)
    return net


SCHED = make_schedule(5)


# ---------------------------------------------------------------- averaging


def test_average_of_one_equals_the_run():
    net = tiny_net()
    runs = collect_runs(net, SCHED, [3])
    trace = trace_gates(None, net, SCHED, runs=runs)
    assert trace.runs == 1
    for ti, rec in enumerate(runs[0].steps):
        for li, lay in enumerate(rec.layers):
            assert np.array_equal(trace.g[ti, li], lay.g)
            assert np.array_equal(trace.s_maps[ti, li], lay.s)


def test_two_identical_seeds_average_to_either():
    net = tiny_net()
    one = trace_gates([7], net, SCHED)
    two = trace_gates([7, 7], net, SCHED)
    assert np.allclose(one.g, two.g, atol=1e-15)
    assert np.allclose(one.s_mean, two.s_mean, atol=1e-15)
    assert two.runs == 2


def test_twenty_run_average_matches_explicit_recomputation():
    net = tiny_net()
    seeds = list(range(20))
    runs = collect_runs(net, SCHED, seeds)
    trace = trace_gates(None, net, SCHED, runs=runs)

    g_manual = np.zeros_like(trace.g)
    smin_manual = np.zeros_like(trace.s_min)
    for run in runs:
        for ti, rec in enumerate(run.steps):
            for li, lay in enumerate(rec.layers):
                g_manual[ti, li] += lay.g
                smin_manual[ti, li] += lay.s.min(axis=0)
    assert np.max(np.abs(trace.g - g_manual / 20)) <= 1e-12
    assert np.max(np.abs(trace.s_min - smin_manual / 20)) <= 1e-12


def test_trace_structure_and_ranges():
    net = tiny_net()
    trace = trace_gates([0, 1], net, SCHED, group="scene")
    assert trace.group == "scene"
    assert list(trace.steps) == [4, 3, 2, 1, 0]
    assert trace.g.shape == (5, 2, 2)
    assert np.all((trace.g > 0.0) & (trace.g < 1.0))
    assert np.all(trace.s_min <= trace.s_mean) and np.all(trace.s_mean <= trace.s_max)


def test_layer_average_collapses_layer_axis():
    net = tiny_net()
    trace = trace_gates([0, 1, 2], net, SCHED)
    avg = trace.layer_average()
    assert avg.g.shape == (5, 1, 2)
    assert list(avg.layers) == [-1]
    assert np.allclose(avg.g[:, 0], trace.g.mean(axis=1), atol=1e-15)


def test_unwrapped_net_is_rejected():
    plain = init_denoiser(image_size=8, patch=4, hidden_width=16)
    with pytest.raises(ContractError):
        trace_gates([0], plain, SCHED)
    with pytest.raises(ContractError):
        expert_norms([0], plain, SCHED)


# ------------------------------------------------------------ expert norms


def test_fresh_experts_give_zero_norms():
    net = tiny_net(randomize_gates=False)  # experts still have b = 0
    trace = expert_norms([0, 1], net, SCHED)
    assert trace.y_norms.shape == (5, 2)
    assert np.all(trace.y_norms == 0.0)


def test_saturated_gates_recover_plain_expert_norms():
    net = tiny_net(hidden_layers=1, randomize_gates=False)
    _, layer = net.mole_layers()[0]
    rng = np.random.default_rng(5)
    for expert in layer.experts:
        expert.b.data[...] = rng.normal(size=expert.b.data.shape)
    layer.gates.phi_bias.data[...] = 30.0
    layer.gates.omega_bias.data[...] = 30.0

    x = rng.standard_normal((8, 8))
    t = 2
    _, run = p_sample_loop(net, SCHED, seed=9, trace=True, x_init=x)
    rec = run.steps[0]  # first sampled step is t = T-1 = 4 with input x
    tokens = Tensor(net.token_input(x, 4))
    for i, expert in enumerate(layer.experts):
        plain = np.linalg.norm(expert_apply(expert, tokens).data)
        assert abs(rec.layers[0].y_norms[i] - plain) <= 1e-6 * max(1.0, plain)


def test_norms_match_independent_sampler_replication():
    net = tiny_net(seed=3)
    rng = np.random.default_rng(11)
    for _, layer in net.mole_layers():
        for expert in layer.experts:
            expert.b.data[...] = rng.normal(scale=0.1, size=expert.b.data.shape)

    trace = expert_norms([21], net, SCHED)

    # Replicate the sampler arithmetic step by step and recompute the
    # per-layer branch norms directly from the forward pass.
    sample_rng = np.random.default_rng(21)
    x = sample_rng.standard_normal((8, 8))
    manual = []
    for t in range(SCHED.T - 1, -1, -1):
        collect = []
        eps_hat = net.predict_eps(x, t, collect)
        norms = np.array([[np.linalg.norm(b.data) for b in obs.branches] for obs in collect])
        manual.append(norms.mean(axis=0))
        beta, abar = SCHED.betas[t], SCHED.alpha_bars[t]
        mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(SCHED.alphas[t])
        if t > 0:
            var = beta * (1.0 - SCHED.alpha_bars[t - 1]) / (1.0 - abar)
            x = mean + np.sqrt(var) * sample_rng.standard_normal((8, 8))
        else:
            x = mean
    assert np.max(np.abs(trace.y_norms - np.array(manual))) <= 1e-10


def test_steered_init_matches_forward_noising():
    img = steered_init("face_closeup", 4, SCHED, t_steer=2)
    assert img.shape == (16, 16)
    assert np.all(np.isfinite(img))
    # Deterministic per seed, distinct across seeds.
    assert np.array_equal(img, steered_init("face_closeup", 4, SCHED, t_steer=2))
    assert not np.array_equal(img, steered_init("face_closeup", 5, SCHED, t_steer=2))


# ------------------------------------------------------------------- CSV


def test_empty_gate_trace_gives_header_only(tmp_path):
    empty = GateTrace(
        group="x",
        steps=np.zeros((0,), dtype=int),
        layers=np.array([0]),
        g=np.zeros((0, 1, 2)),
        s_mean=np.zeros((0, 1, 2)),
        s_min=np.zeros((0, 1, 2)),
        s_max=np.zeros((0, 1, 2)),
        s_maps=None,
        runs=0,
    )
    path = tmp_path / "gates.csv"
    export_csv(empty, path)
    assert path.read_bytes() == b"step,layer,expert,g,s_mean,s_min,s_max\n"


def test_gate_csv_row_count_and_lf_endings(tmp_path):
    net = tiny_net()
    sched2 = make_schedule(2)
    trace = trace_gates([0], net, sched2)
    path = tmp_path / "gates.csv"
    export_csv(trace, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert len(lines) == 1 + 2 * 2 * 2  # steps * layers * experts


def test_gate_csv_parses_back_to_trace_values(tmp_path):
    net = tiny_net()
    trace = trace_gates([0, 1, 2], net, SCHED)
    path = tmp_path / "gates.csv"
    export_csv(trace, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 * 2 * 2
    for row in rows:
        ti = list(trace.steps).index(int(row["step"]))
        li = list(trace.layers).index(int(row["layer"]))
        e = int(row["expert"])
        assert abs(float(row["g"]) - trace.g[ti, li, e]) <= 1e-9
        assert abs(float(row["s_mean"]) - trace.s_mean[ti, li, e]) <= 1e-9
        assert abs(float(row["s_min"]) - trace.s_min[ti, li, e]) <= 1e-9
        assert abs(float(row["s_max"]) - trace.s_max[ti, li, e]) <= 1e-9


def test_norm_csv_round_trip(tmp_path):
    net = tiny_net()
    rng = np.random.default_rng(0)
    for _, layer in net.mole_layers():
        for expert in layer.experts:
            expert.b.data[...] = rng.normal(scale=0.1, size=expert.b.data.shape)
    trace = expert_norms([0, 1], net, SCHED)
    path = tmp_path / "norms.csv"
    export_csv(trace, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0].keys()) == ["step", "y1_norm", "y2_norm"]
    assert len(rows) == 5
    for ti, row in enumerate(rows):
        assert int(row["step"]) == trace.steps[ti]
        assert abs(float(row["y1_norm"]) - trace.y_norms[ti, 0]) <= 1e-9
        assert abs(float(row["y2_norm"]) - trace.y_norms[ti, 1]) <= 1e-9


# ------------------------------------------------------------------- PGM


def test_heatmap_all_half_rounds_up_to_128(tmp_path):
    path = tmp_path / "map.pgm"
    export_heatmap(np.full(16, 0.5), (4, 4), path)
    raw = path.read_bytes()
    assert raw == b"P5\n4 4\n255\n" + bytes([128] * 16)


def test_heatmap_range_ends(tmp_path):
    path = tmp_path / "map.pgm"
    export_heatmap(np.array([0.0, 1.0]), (1, 2), path)
    assert path.read_bytes() == b"P5\n2 1\n255\n" + bytes([0, 255])


def test_heatmap_2x2_payload_bytes(tmp_path):
    path = tmp_path / "map.pgm"
    export_heatmap(Tensor(np.array([0.0, 0.25, 0.5, 1.0])), (2, 2), path)
    payload = path.read_bytes().split(b"255\n", 1)[1]
    assert payload == bytes([0, 64, 128, 255])


def test_heatmap_grid_mismatch_rejected(tmp_path):
    with pytest.raises(DimensionError):
        export_heatmap(np.zeros(5), (2, 2), tmp_path / "bad.pgm")


# ------------------------------------------------------------ run layout


def test_write_analysis_layout(tmp_path):
    net = tiny_net()
    runs = collect_runs(net, SCHED, [0, 1])
    gates = trace_gates(None, net, SCHED, group="face_closeup", runs=runs)
    norms = expert_norms(None, net, SCHED, group="face_closeup", runs=runs)
    written = write_analysis(tmp_path, "face_closeup", gates, norms, grid=(2, 2))

    expect = {
        tmp_path / "analysis" / "gates" / "face_closeup.csv",
        tmp_path / "analysis" / "gates" / "face_closeup.layer0.csv",
        tmp_path / "analysis" / "gates" / "face_closeup.layer1.csv",
        tmp_path / "analysis" / "norms" / "face_closeup.csv",
        tmp_path / "analysis" / "gates" / "face_closeup.expert0.pgm",
        tmp_path / "analysis" / "gates" / "face_closeup.expert1.pgm",
    }
    assert set(written) == expect
    for path in expect:
        assert path.is_file() and path.stat().st_size > 0
