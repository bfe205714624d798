"""Acceptance gate: one test per shipped claim.

The ten tests below are the contract for the whole package: the worked
protocol examples reproduce exactly, gradients match finite differences,
the protocol state machine is safe under random traffic, the channel
tooling round-trips, trained models show the regularizer effects, and
every subcommand is byte-deterministic. The trained-model criteria pull
session fixtures from conftest (5 seeds x two smoothing weights on the
pursuit grid, one coverage-grid run).
"""

import json
import os
import time

import numpy as np
import pytest

from commarl import agent as ag
from commarl import channel as ch
from commarl import cli
from commarl import diffnet
from commarl import metrics as mx
from commarl import training as tr
from commarl.env import GridWorld, pp_default
from commarl.rollout import EpisodeRecord, run_episode

from conftest import ACCEPT_SEEDS

EVAL_EPISODES = 100
ROBUST_EPISODES = 300


def proto_runtime(index, n_agents=3, n_actions=3, delta=2.0, window=4,
                  store=None):
    if store is None:
        store = ag.build_network(np.random.default_rng(0), 4, n_actions,
                                 hidden=4)
    proto = ag.ProtocolConfig(n_agents, n_actions, delta=delta,
                              window=window)
    return ag.AgentRuntime(index, store, proto)


def test_c01_send_walkthrough_matches_worked_example():
    # Receiver (agent 1 of 3) holds a valid buffered message from agent 3.
    recv = proto_runtime(0)
    recv.receive_and_update([(2, np.array([-1.0, 2.0, 4.0]))], 0)

    # Both teammates' new messages sit within delta=2 of their sent
    # buffers, so neither rebroadcasts.
    sender2 = proto_runtime(1)
    sender2.sent.m_s = np.array([2.0, -3.0, 0.0], dtype=np.float32)
    sender2.sent.t_last = 0
    sender3 = proto_runtime(2)
    sender3.sent.m_s = np.array([-1.0, 2.0, 4.0], dtype=np.float32)
    sender3.sent.t_last = 0
    d2 = np.linalg.norm(np.array([2.0, -3.0, 1.0]) - sender2.sent.m_s)
    d3 = np.linalg.norm(np.array([-1.0, 1.0, 4.0]) - sender3.sent.m_s)
    assert d2 < 2.0 and d3 < 2.0
    assert not sender2.decide_send(np.array([2.0, -3.0, 1.0]), 1)
    assert not sender3.decide_send(np.array([-1.0, 1.0, 4.0]), 1)

    # The receiver combines its local values with the buffered message.
    q_loc = np.array([1.8, 0.1, 1.2])
    recv.receive_and_update([], 1)
    q_glb = recv.combine_global(q_loc)
    assert np.array_equal(q_glb, q_loc + np.array([-1.0, 2.0, 4.0]))
    assert np.allclose(q_glb, [0.8, 2.1, 5.2], rtol=0.0, atol=1e-9)

    # A later message far from the buffer triggers a send.
    new_msg = np.array([2.0, 0.0, 1.0])
    dist = np.linalg.norm(new_msg - sender2.sent.m_s.astype(np.float64))
    assert abs(dist - 3.162) <= 1e-3
    assert sender2.decide_send(new_msg, 2)
    assert np.array_equal(sender2.sent.m_s, new_msg)

    # Lost in transit: the receiver keeps combining with the old buffer.
    recv.receive_and_update([], 2)
    assert np.allclose(recv.combine_global(q_loc), [0.8, 2.1, 5.2],
                       rtol=0.0, atol=1e-9)
    # Delivered instead: both teammates' messages now contribute.
    recv.receive_and_update([(1, new_msg)], 3)
    assert np.allclose(recv.combine_global(q_loc), [2.8, 2.1, 6.2],
                       rtol=0.0, atol=1e-9)


def test_c02_stale_message_flips_action():
    recv = proto_runtime(0, n_agents=2)
    q_loc = np.array([0.5, 0.1, 0.1])
    recv.receive_and_update([(1, np.array([2.3, 2.8, 0.2]))], 0)
    stale = recv.combine_global(q_loc)
    assert np.allclose(stale, [2.8, 2.9, 0.3])
    assert ag.select_action(stale, 0.0, np.random.default_rng(0)) == 1

    recv.receive_and_update([(1, np.array([2.4, 2.7, 0.2]))], 1)
    fresh = recv.combine_global(q_loc)
    assert np.allclose(fresh, [2.9, 2.8, 0.3])
    assert ag.select_action(fresh, 0.0, np.random.default_rng(0)) == 0


def test_c03_gradient_matches_finite_differences():
    started = time.time()
    rng = np.random.default_rng(303)
    obs_dim, n_actions = 6, 3
    store = ag.build_network(rng, obs_dim, n_actions, hidden=8,
                             dtype=np.float64)
    target = store.copy()
    batch = []
    for i, length in enumerate((4, 6)):
        r = np.random.default_rng(30 + i)
        batch.append(EpisodeRecord(
            obs=r.normal(scale=0.5, size=(length + 1, 2, obs_dim)),
            actions=r.integers(n_actions, size=(length, 2)),
            rewards=r.normal(size=length),
            messages=np.zeros((length, 2, n_actions)),
            info={}, comm=None))
    cfg = tr.TrainingConfig(hidden=8, window=2, betas=(1.5, 1.0),
                            lambda_s=1.0, lambda_r=0.3, gamma=0.9)

    tape = diffnet.Tape()
    _, _ = tr.total_loss(store, target, batch, cfg, tape)
    diffnet.backward(tape)
    grads = {name: store[name].grad.copy() for name in store.names()}

    names = store.names()
    sizes = np.array([store[n].value.size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.random.default_rng(7).choice(offsets[-1], size=100,
                                            replace=False)
    h = 1e-6
    for flat in sorted(int(p) for p in picks):
        where = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[where], flat - offsets[where]
        vec = store[name].value.reshape(-1)
        orig = vec[idx]
        vec[idx] = orig + h
        up, _ = tr.total_loss(store, target, batch, cfg, diffnet.Tape())
        vec[idx] = orig - h
        down, _ = tr.total_loss(store, target, batch, cfg, diffnet.Tape())
        vec[idx] = orig
        fd = (float(up.value) - float(down.value)) / (2 * h)
        an = grads[name].reshape(-1)[idx]
        scale = max(abs(fd), abs(an), 1e-8)
        assert abs(fd - an) / scale < 1e-3, (name, int(idx), fd, an)
    assert time.time() - started < 60.0


def test_c04_protocol_safety_random_traces():
    started = time.time()
    rng = np.random.default_rng(404)
    n_act = 4
    store = ag.build_network(np.random.default_rng(0), 4, n_act, hidden=4)
    for _ in range(10000):
        window = int(rng.integers(1, 7))
        delta = float(rng.uniform(0.0, 1.5))
        length = int(rng.integers(2, 9))
        recv = proto_runtime(0, n_actions=n_act, delta=delta,
                             window=window, store=store)
        full = proto_runtime(0, n_actions=n_act, delta=0.0, window=window,
                             store=store)
        gated = proto_runtime(1, n_actions=n_act, delta=delta,
                              window=window, store=store)
        always = proto_runtime(1, n_actions=n_act, delta=0.0,
                               window=window, store=store)
        truth = {}
        scale = float(rng.choice((0.05, 1.0)))
        for t in range(length):
            msgs = (scale * rng.normal(size=(3, n_act))).astype(np.float32)

            # (b) a suppressed send implies proximity and a live timer.
            prev_m = gated.sent.m_s.astype(np.float64)
            prev_t = gated.sent.t_last
            if not gated.decide_send(msgs[1], t):
                gap = np.linalg.norm(msgs[1].astype(np.float64) - prev_m)
                assert gap < delta
                assert t - prev_t <= window
            # with delta=0 the threshold branch always fires
            assert always.decide_send(msgs[1], t)

            arrivals = []
            for peer in (1, 2):
                if rng.random() < 0.6 and rng.random() < 0.7:
                    arrivals.append((peer, msgs[peer]))
                    truth[peer] = (t, msgs[peer].copy())
            buf = recv.receive_and_update(arrivals, t)

            # (a) only fresh-enough slots are valid, and a valid slot
            # holds exactly the last delivered payload for that peer.
            expect = np.zeros((3, n_act), dtype=np.float32)
            mask = np.zeros(3, dtype=bool)
            for peer in (1, 2):
                if peer in truth and t - truth[peer][0] <= window:
                    mask[peer] = True
                    expect[peer] = truth[peer][1]
            assert np.array_equal(buf.val, mask)
            for peer in np.flatnonzero(mask):
                assert np.array_equal(buf.msgs[peer], expect[peer])

            q_loc = rng.normal(size=n_act)
            q_glb = recv.combine_global(q_loc)
            assert np.array_equal(q_glb, q_loc + expect[mask].sum(axis=0))

            # (c) delta=0 over a lossless link equals all-to-all exchange.
            full.receive_and_update([(1, msgs[1]), (2, msgs[2])], t)
            q_full = full.combine_global(q_loc)
            assert np.array_equal(q_full,
                                  q_loc + msgs[1:3].sum(axis=0))

    # End to end: a delta=0 lossless protocol rollout acts identically to
    # the training-time full exchange.
    scen = pp_default()
    net = ag.build_network(np.random.default_rng(1), scen.obs_dim, 5,
                           hidden=16)
    base = run_episode(GridWorld(scen, seed=11), net,
                       ag.ProtocolConfig(3, 5), "collect",
                       np.random.default_rng(5), epsilon=0.3)
    tight = run_episode(GridWorld(scen, seed=11), net,
                        ag.ProtocolConfig(3, 5, delta=0.0, window=10 ** 6),
                        "tmc", np.random.default_rng(5), epsilon=0.3)
    assert np.array_equal(base.actions, tight.actions)
    assert np.array_equal(base.rewards, tight.rewards)
    assert time.time() - started < 60.0


def test_c05_channel_fit_round_trip_and_rates():
    known = ch.MarkovLossModel([[0.90, 0.07, 0.03],
                                [1.00, 0.00, 0.00],
                                [1.00, 0.00, 0.00]])
    trace = ch.simulate(known, 100_000, seed=505)
    refit = ch.fit([trace], max_burst=2)
    assert refit.n_states == 3
    assert np.abs(refit.transitions - known.transitions).max() <= 0.02

    targets = {"light": 0.015, "medium": 0.082, "heavy": 0.156}
    for name, rate in targets.items():
        model = ch.default_model(name)
        analytic = ch.loss_rate(model)
        assert abs(analytic - rate) <= 0.005
        sim = float(ch.simulate(model, 1_000_000, seed=506).mean())
        assert abs(analytic - sim) <= 0.005


def eval_protocol(scenario, delta=0.02, window=4):
    return ag.ProtocolConfig(scenario.n_agents, 5, delta=delta,
                             window=window)


def test_c06_smoothing_raises_within_window_similarity(pp_models,
                                                       pp_scenario):
    # Always-send evaluation under the medium channel exposes every lost
    # message; the within-window similarity CDF at the shipped threshold
    # should rise when training used the smoothing weight.
    proto = eval_protocol(pp_scenario)
    wins = []
    for seed in ACCEPT_SEEDS:
        cdf = {}
        for lam in (0.0, 1.0):
            _, _, logs = cli.run_eval(pp_models[(seed, lam)], pp_scenario,
                                      proto, "ac", EVAL_EPISODES,
                                      1000 + seed, "medium")
            out = mx.l2_correlation_pdf(logs, window=proto.window,
                                        threshold=proto.delta)
            assert out["within"]["n"] > 100
            cdf[lam] = out["within"]["cdf_at_threshold"]
        wins.append(cdf[1.0] > cdf[0.0])
    assert sum(wins) >= 4, wins


def test_c07_threshold_halves_communication(pp_models, pp_scenario):
    # Lossless execution: the gated protocol should send at most half of
    # what always-on communication sends.
    proto = eval_protocol(pp_scenario)
    pooled = []
    for seed in ACCEPT_SEEDS:
        store = pp_models[(seed, 1.0)]
        _, _, logs = cli.run_eval(store, pp_scenario, proto, "tmc",
                                  EVAL_EPISODES, 2000 + seed, "none")
        pooled.extend(logs)
        ac_summary, _, _ = cli.run_eval(store, pp_scenario, proto, "ac",
                                        10, 2000 + seed, "none")
        assert ac_summary.overhead == 1.0
    assert mx.aggregate_overhead(pooled) <= 0.5


def test_c08_buffers_soften_heavy_loss(pp_models, pp_scenario):
    proto = eval_protocol(pp_scenario)
    kept_lead = []
    deg_tmc, deg_bare = [], []
    for seed in ACCEPT_SEEDS:
        store = pp_models[(seed, 1.0)]
        means = {}
        for mode in ("tmc", "buffer-disabled"):
            for cond in ("none", "heavy"):
                summary, _, _ = cli.run_eval(store, pp_scenario, proto,
                                             mode, ROBUST_EPISODES,
                                             3000 + seed, cond)
                means[(mode, cond)] = summary.mean_reward
        kept_lead.append(means[("tmc", "heavy")]
                         >= means[("buffer-disabled", "heavy")])
        deg_tmc.append(means[("tmc", "none")] - means[("tmc", "heavy")])
        deg_bare.append(means[("buffer-disabled", "none")]
                        - means[("buffer-disabled", "heavy")])
    assert sum(kept_lead) >= 4, kept_lead
    assert float(np.mean(deg_tmc)) < float(np.mean(deg_bare)), \
        (deg_tmc, deg_bare)


def test_c09_training_beats_random_baseline(pp_models, cn_model,
                                            pp_scenario, cn_scenario):
    cases = (("pp", pp_models[(0, 1.0)], pp_scenario),
             ("cn", cn_model, cn_scenario))
    for name, store, scenario in cases:
        proto = eval_protocol(scenario)
        # Baseline first: uniform-random actions over the same episodes
        # budget, measured before looking at the trained result.
        base, _, _ = cli.run_eval(store, scenario, proto, "ac",
                                  2 * EVAL_EPISODES, 4000, "none",
                                  epsilon=1.0)
        trained, _, _ = cli.run_eval(store, scenario, proto, "tmc",
                                     EVAL_EPISODES, 4100, "none")
        gap = trained.mean_reward - base.mean_reward
        floor = 3.0 * np.hypot(trained.stderr, base.stderr)
        assert gap >= floor, (name, gap, floor, trained.mean_reward,
                              base.mean_reward)


def _tiny_train_config(tmp_path, tag):
    out_dir = tmp_path / ("run-%s" % tag)
    data = {
        "scenario": {"name": "pp"},
        "training": {"episodes": 5, "hidden": 8, "batch_size": 2,
                     "buffer_capacity": 8, "eval_every": 2,
                     "eval_episodes": 1, "target_sync": 4},
        "seed": 9,
        "output_dir": str(out_dir),
    }
    path = tmp_path / ("cfg-%s.json" % tag)
    path.write_text(json.dumps(data))
    return path, out_dir


def test_c10_subcommand_reruns_are_byte_identical(tmp_path):
    outs = []
    for tag in ("a", "b"):
        cfg_path, out_dir = _tiny_train_config(tmp_path, tag)
        assert cli.main(["train", str(cfg_path), "--quiet"]) == 0
        outs.append(out_dir)
    for artifact in ("checkpoint.bin", "curves.csv"):
        first = (outs[0] / artifact).read_bytes()
        second = (outs[1] / artifact).read_bytes()
        assert first == second, artifact

    ckpt = str(outs[0] / "checkpoint.bin")
    evals = []
    for tag in ("a", "b"):
        out = tmp_path / ("eval-%s" % tag)
        assert cli.main(["eval", ckpt, "--episodes", "4", "--seed", "2",
                         "--channel", "medium", "--out", str(out)]) == 0
        evals.append(out)
    for artifact in ("summary.json", "comm.log"):
        assert (evals[0] / artifact).read_bytes() == \
            (evals[1] / artifact).read_bytes(), artifact

    model = tmp_path / "model.txt"
    ch.write_model(model, ch.default_model("light"))
    traces = []
    for tag in ("a", "b"):
        out = tmp_path / ("trace-%s.txt" % tag)
        assert cli.main(["gen-loss", str(model), "--length", "20000",
                         "--seed", "3", "--out", str(out)]) == 0
        traces.append(out)
    assert traces[0].read_bytes() == traces[1].read_bytes()
