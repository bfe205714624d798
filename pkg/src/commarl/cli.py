"""Command line front end.

Subcommands: train, eval, fit-channel, gen-loss, analyze. Every run is
driven by a single root seed split into named streams, writes a manifest
next to its artifacts, and reruns of the same config and seed produce
byte-identical numeric outputs. Exit codes: 0 success, 1 user error
(bad config, unreadable input, mismatched checkpoint), 2 internal error.
"""

import argparse
import json
import os
import sys
import traceback

import numpy as np

from . import __version__
from . import agent as ag
from . import channel as ch
from . import config as cf
from . import diffnet as dn
from . import metrics as mx
from . import training as tr
from .env import EnvError, GridWorld

EVAL_MODES = ("tmc", "ac", "buffer-disabled")

_USER_ERRORS = (cf.ConfigError, EnvError, ch.ChannelError, mx.MetricsError,
                ag.ProtocolError, dn.ShapeError, OSError, KeyError,
                ValueError)

CURVE_COLUMNS = ("episode", "updates", "epsilon", "eval_reward", "eval_se",
                 "loss", "td", "smooth", "conf")


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; we reserve 2 for bugs."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write("%s: error: %s\n" % (self.prog, message))
        raise SystemExit(1)


def _write_curves(path, curves):
    with open(path, "w") as fh:
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for point in curves:
            cells = []
            for col in CURVE_COLUMNS:
                value = point[col]
                cells.append(str(value) if isinstance(value, int)
                             else repr(float(value)))
            fh.write(",".join(cells) + "\n")


def _print_progress(point):
    print("episode %6d  eps %.3f  eval %9.4f +/- %.4f  loss %.5f"
          % (point["episode"], point["epsilon"], point["eval_reward"],
             point["eval_se"], point["loss"]), flush=True)


def cmd_train(args):
    cfg = cf.load_config(args.config)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    out_dir = cf.resolve_output_dir(cfg.output_dir)
    os.makedirs(out_dir, exist_ok=True)
    manifest = cf.RunManifest("train", cfg.to_dict(), cfg.seed)

    progress = None if args.quiet else _print_progress
    diverged = None
    try:
        store, curves = tr.train_run(cfg.scenario, cfg.training, cfg.seed,
                                     progress=progress)
    except dn.TrainingError as exc:
        if not hasattr(exc, "store"):
            raise
        store, curves = exc.store, exc.curves
        diverged = str(exc)

    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    meta_path = os.path.join(out_dir, "checkpoint.json")
    curves_path = os.path.join(out_dir, "curves.csv")
    dn.save_checkpoint(ckpt_path, store.state_dict())
    meta = {
        "version": __version__,
        "scenario": cf.scenario_to_dict(cfg.scenario),
        "protocol": {"delta": cfg.training.delta,
                     "window": cfg.training.window},
        "hidden": cfg.training.hidden,
        "n_actions": 5,
        "obs_dim": cfg.scenario.obs_dim,
        "seed": cfg.seed,
    }
    cf.write_json_atomic(meta_path, meta)
    _write_curves(curves_path, curves)
    manifest.artifacts = {"checkpoint": ckpt_path, "checkpoint_meta":
                          meta_path, "curves": curves_path}
    if diverged:
        manifest.artifacts["diverged"] = diverged
    manifest.write(os.path.join(out_dir, "manifest.json"))
    if curves and args.quiet:
        _print_progress(curves[-1])
    print("wrote %s" % ckpt_path)
    if diverged:
        print("error: training aborted (%s); last checkpoint kept"
              % diverged, file=sys.stderr)
        return 2
    return 0


def load_trained(checkpoint_path):
    """Checkpoint plus its metadata sidecar -> (store, meta, scenario)."""
    tensors = dn.load_checkpoint(checkpoint_path)
    meta_path = os.path.splitext(str(checkpoint_path))[0] + ".json"
    if not os.path.exists(meta_path):
        raise cf.ConfigError("missing checkpoint metadata file %s"
                             % meta_path)
    with open(meta_path) as fh:
        meta = json.load(fh)
    for field in ("scenario", "protocol", "hidden", "n_actions"):
        if field not in meta:
            raise cf.ConfigError("checkpoint metadata missing field: %s"
                                 % field)
    for field in ("delta", "window"):
        if field not in meta["protocol"]:
            raise cf.ConfigError("checkpoint metadata missing field: "
                                 "protocol.%s" % field)
    scenario = cf.scenario_from_dict(meta["scenario"])
    store = ag.build_network(np.random.default_rng(0), scenario.obs_dim,
                             int(meta["n_actions"]),
                             hidden=int(meta["hidden"]))
    try:
        store.load_state(tensors)
    except (KeyError, dn.ShapeError) as exc:
        raise cf.ConfigError("checkpoint does not match its metadata: %s"
                             % exc) from exc
    return store, meta, scenario


def build_bank(condition, model_file, n_agents, seed):
    """Channel state for every ordered agent pair, or None for lossless."""
    if condition == "none":
        return None
    if condition == "custom":
        if not model_file:
            raise cf.ConfigError("channel condition 'custom' needs "
                                 "--model-file")
        model = ch.read_model(model_file)
    else:
        model = ch.default_model(condition)
    links = [(s, r) for s in range(n_agents) for r in range(n_agents)
             if s != r]
    return ch.LinkLossBank(model, links, seed=seed)


def run_eval(store, scenario, protocol, mode, episodes, seed, condition,
             model_file=None, epsilon=0.0):
    """Seeded evaluation batch -> (EvalSummary, episode records, comm logs)."""
    env_rng = tr.stream_rng(seed, "eval-env")
    action_rng = tr.stream_rng(seed, "eval-action")
    channel_seed = int(tr.stream_rng(seed, "channel").integers(2 ** 31))
    bank = build_bank(condition, model_file, scenario.n_agents, channel_seed)
    exec_mode = "nobuf" if mode == "buffer-disabled" else mode
    world = GridWorld(scenario, seed=0)
    mean, se, records = tr.evaluate(world, store, protocol, episodes,
                                    env_rng, action_rng, mode=exec_mode,
                                    bank=bank, epsilon=epsilon,
                                    log_comm=True)
    breakdown = {"condition": condition, "mode": mode, "seed": seed}
    if not records:
        return mx.EvalSummary(0, 0.0, 0.0, 0.0, 0.0, breakdown), [], []
    logs = [mx.CommLog.from_record(r, scenario.n_agents) for r in records]
    overhead = mx.aggregate_overhead(logs)
    if scenario.name == "pp":
        wins = [bool(r.info.get("capture")) for r in records]
    else:
        wins = [r.info.get("covered", 0) == scenario.n_targets
                for r in records]
    breakdown["mean_length"] = float(np.mean([r.length for r in records]))
    summary = mx.EvalSummary(len(records), mean, se, float(np.mean(wins)),
                             overhead, breakdown)
    return summary, records, logs


def cmd_eval(args):
    store, meta, scenario = load_trained(args.checkpoint)
    delta = meta["protocol"]["delta"] if args.delta is None else args.delta
    window = meta["protocol"]["window"] if args.window is None \
        else args.window
    protocol = ag.ProtocolConfig(scenario.n_agents, int(meta["n_actions"]),
                                 delta=float(delta), window=int(window))
    summary, _, logs = run_eval(store, scenario, protocol, args.mode,
                                args.episodes, args.seed, args.channel,
                                model_file=args.model_file,
                                epsilon=args.epsilon)
    text = json.dumps(summary.as_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        out_dir = cf.resolve_output_dir(args.out)
        os.makedirs(out_dir, exist_ok=True)
        summary_path = os.path.join(out_dir, "summary.json")
        cf.write_json_atomic(summary_path, summary.as_dict())
        comm_path = os.path.join(out_dir, "comm.log")
        mx.write_comm_logs(comm_path, logs)
        manifest = cf.RunManifest("eval", {"checkpoint": str(args.checkpoint),
                                           "episodes": args.episodes,
                                           "channel": args.channel,
                                           "mode": args.mode,
                                           "epsilon": args.epsilon},
                                  args.seed)
        manifest.artifacts = {"summary": summary_path, "comm_log": comm_path}
        manifest.write(os.path.join(out_dir, "manifest.json"))
    return 0


def cmd_fit_channel(args):
    traces = [ch.read_trace(path) for path in args.traces]
    model = ch.fit(traces, max_burst=args.max_burst)
    ch.write_model(args.out, model)
    print("fit %d-state model from %d trace(s), analytic loss rate %.4f"
          % (model.n_states, len(traces), ch.loss_rate(model)))
    print("wrote %s" % args.out)
    return 0


def cmd_gen_loss(args):
    model = ch.read_model(args.model)
    if args.length < 1:
        raise cf.ConfigError("length must be positive")
    trace = ch.simulate(model, args.length, args.seed)
    ch.write_trace(args.out, trace)
    print("wrote %d bits to %s, loss fraction %.4f"
          % (len(trace), args.out, trace.mean()))
    return 0


def _print_histogram(title, pack):
    print(title)
    if pack["n"] == 0:
        print("  (empty)")
        return
    edges = pack["edges"]
    for i, mass in enumerate(pack["mass"]):
        if mass > 0:
            print("  [%10.4f, %10.4f)  %.4f" % (edges[i], edges[i + 1],
                                                mass))


def cmd_analyze(args):
    logs = []
    for path in args.logs:
        logs.extend(mx.read_comm_logs(path))
    out = mx.l2_correlation_pdf(logs, window=args.window,
                                threshold=args.delta, bins=args.bins)
    print("losses %d  within-window %d  excluded (no prior delivery) %d"
          % (out["all"]["n"], out["within"]["n"], out["excluded"]))
    if out["all"]["n"] == 0:
        print("no losses recorded; nothing to analyze")
        return 0
    print("fraction below delta=%g:  all %.4f  within %s"
          % (args.delta, out["all"]["cdf_at_threshold"],
             "n/a" if out["within"]["n"] == 0
             else "%.4f" % out["within"]["cdf_at_threshold"]))
    _print_histogram("distance histogram (all losses)", out["all"])
    _print_histogram("distance histogram (within window)", out["within"])
    return 0


def build_parser():
    parser = _Parser(prog="commarl",
                     description="Cooperative Q-learning with thresholded "
                                 "message exchange over lossy links.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train a team from a config file")
    p.add_argument("config", help="path to a JSON experiment config")
    p.add_argument("--dry-run", action="store_true",
                   help="echo the validated config and exit")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-evaluation progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("checkpoint", help="checkpoint file written by train")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channel", choices=cf.CHANNEL_CONDITIONS,
                   default="none", help="loss model applied to messages")
    p.add_argument("--model-file", default=None,
                   help="model file for --channel custom")
    p.add_argument("--mode", choices=EVAL_MODES, default="tmc",
                   help="tmc runs the full protocol; ac sends every step "
                        "with no buffering; buffer-disabled keeps the send "
                        "gating but drops the receive buffers")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--delta", type=float, default=None,
                   help="override the checkpoint's send threshold")
    p.add_argument("--window", type=int, default=None,
                   help="override the checkpoint's validity window")
    p.add_argument("--out", default=None,
                   help="directory for summary, comm log and manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-channel",
                       help="fit a burst-loss chain to loss traces")
    p.add_argument("traces", nargs="+", help="loss trace files (0/1 lines)")
    p.add_argument("--max-burst", type=int, default=2)
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_fit_channel)

    p = sub.add_parser("gen-loss",
                       help="simulate a loss trace from a model file")
    p.add_argument("model", help="model file")
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output trace file")
    p.set_defaults(func=cmd_gen_loss)

    p = sub.add_parser("analyze",
                       help="distance-to-last-delivery histograms from "
                            "comm logs")
    p.add_argument("logs", nargs="+", help="comm log files written by eval")
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--delta", type=float, default=0.02)
    p.add_argument("--bins", type=int, default=40)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print("error: %s" % (exc,), file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
