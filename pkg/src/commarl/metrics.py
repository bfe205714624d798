"""Measurements over message logs: overhead, loss analysis, normalization.

The message log is the line-oriented record the rollout layer produces:
one event per ordered agent pair per timestep, tagged sent-delivered,
sent-lost or suppressed, with the encoder output as payload. Overhead is
a transmitter-side bandwidth measure (a pair counts when a send was
attempted, delivered or not); the l2 analysis quantifies how far lost
messages sit from the stale ones the receiver keeps using instead.
"""

import warnings

import numpy as np

STATUSES = ("sent-delivered", "sent-lost", "suppressed")


class MetricsError(ValueError):
    """Malformed log, file, or summary input."""


class CommLog:
    """One episode's message events plus the episode horizon."""

    def __init__(self, events, horizon, n_agents):
        self.horizon = int(horizon)
        self.n_agents = int(n_agents)
        if self.horizon < 1 or self.n_agents < 2:
            raise MetricsError("need horizon >= 1 and at least two agents")
        seen = set()
        for t, s, r, status, payload in events:
            if status not in STATUSES:
                raise MetricsError("unknown status %r" % (status,))
            if not (0 <= t < self.horizon and 0 <= s < self.n_agents
                    and 0 <= r < self.n_agents and s != r):
                raise MetricsError("bad event (%r, %r, %r)" % (t, s, r))
            key = (t, s, r)
            if key in seen:
                raise MetricsError("pair (%d, %d) logged twice at t=%d"
                                   % (s, r, t))
            seen.add(key)
        self.events = list(events)

    @classmethod
    def from_record(cls, record, n_agents):
        if record.comm is None:
            raise MetricsError("episode was run without comm logging")
        return cls(record.comm, record.length, n_agents)

    @property
    def pair_count(self):
        return self.n_agents * (self.n_agents - 1)

    def send_count(self):
        return sum(e[3] != "suppressed" for e in self.events)


def comm_overhead(log, z=None, t=None):
    """Fraction of pair-steps with an attempted transmission."""
    z = log.pair_count if z is None else int(z)
    t = log.horizon if t is None else int(t)
    if z <= 0 or t <= 0:
        raise MetricsError("need positive pair count and horizon")
    return log.send_count() / (z * t)


def aggregate_overhead(logs):
    """Pooled overhead across episodes: total sends / total pair-steps."""
    if not logs:
        raise MetricsError("no logs to aggregate")
    sends = sum(log.send_count() for log in logs)
    steps = sum(log.pair_count * log.horizon for log in logs)
    return sends / steps


def l2_correlation_pdf(logs, window, threshold, bins=40):
    """Distance from each lost message to its link's last delivered one.

    Returns a dict with the raw distance arrays (``all`` and the subset
    where the loss happened within ``window`` steps of the delivery),
    normalized histograms whose masses sum to 1, the fraction of each
    set lying strictly below ``threshold``, and the count of losses that
    had no prior delivery on their link and were excluded.
    """
    if isinstance(logs, CommLog):
        logs = [logs]
    dist_all, dist_within, excluded = [], [], 0
    for log in logs:
        last = {}
        for t, s, r, status, payload in sorted(
                log.events, key=lambda e: (e[0], e[1], e[2])):
            link = (s, r)
            if status == "sent-delivered":
                last[link] = (t, np.asarray(payload, dtype=np.float64))
            elif status == "sent-lost":
                if link not in last:
                    excluded += 1
                    continue
                t_del, ref = last[link]
                d = float(np.linalg.norm(
                    np.asarray(payload, dtype=np.float64) - ref))
                dist_all.append(d)
                if t - t_del <= window:
                    dist_within.append(d)

    def pack(dists):
        arr = np.asarray(dists, dtype=np.float64)
        if arr.size == 0:
            edges = np.linspace(0.0, 1.0, bins + 1)
            return {"n": 0, "edges": edges, "mass": np.zeros(bins),
                    "cdf_at_threshold": float("nan")}
        upper = max(float(arr.max()), float(threshold)) * (1 + 1e-9) + 1e-12
        counts, edges = np.histogram(arr, bins=bins, range=(0.0, upper))
        return {"n": int(arr.size), "edges": edges,
                "mass": counts / arr.size,
                "cdf_at_threshold": float((arr < threshold).mean())}

    out = {"all": pack(dist_all), "within": pack(dist_within),
           "excluded": excluded,
           "distances_all": np.asarray(dist_all),
           "distances_within": np.asarray(dist_within)}
    return out


def normalize_rewards(values):
    """Min-max normalization of per-method mean rewards onto [0, 1]."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise MetricsError("no rewards to normalize")
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        warnings.warn("all methods scored identically; normalizing to 1.0",
                      RuntimeWarning)
        return np.ones_like(vals)
    return (vals - lo) / (hi - lo)


class EvalSummary:
    """Aggregate result of one evaluation batch."""

    def __init__(self, episodes, mean_reward, stderr, win_rate, overhead,
                 breakdown=None):
        if episodes and not 0.0 <= overhead <= 1.0:
            raise MetricsError("overhead %r outside [0, 1]" % (overhead,))
        if episodes and not 0.0 <= win_rate <= 1.0:
            raise MetricsError("win rate %r outside [0, 1]" % (win_rate,))
        self.episodes = int(episodes)
        self.mean_reward = float(mean_reward)
        self.stderr = float(stderr)
        self.win_rate = float(win_rate)
        self.overhead = float(overhead)
        self.breakdown = dict(breakdown or {})

    def as_dict(self):
        out = {"episodes": self.episodes, "mean_reward": self.mean_reward,
               "stderr": self.stderr, "win_rate": self.win_rate,
               "overhead": self.overhead}
        out.update(self.breakdown)
        return out


# -- file formats ---------------------------------------------------------

def write_comm_logs(path, logs):
    """Line-oriented log file: an E header per episode, M lines per event."""
    with open(path, "w") as fh:
        for i, log in enumerate(logs):
            fh.write("E %d %d %d\n" % (i, log.horizon, log.n_agents))
            for t, s, r, status, payload in log.events:
                vec = ",".join(repr(float(v)) for v in payload)
                fh.write("M %d %d %d %s %s\n" % (t, s, r, status, vec))


def read_comm_logs(path):
    logs = []
    horizon = n_agents = None
    events = []

    def flush():
        if horizon is not None:
            logs.append(CommLog(events, horizon, n_agents))

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "E":
                    flush()
                    horizon, n_agents = int(parts[2]), int(parts[3])
                    events = []
                elif parts[0] == "M":
                    if horizon is None:
                        raise ValueError("event before episode header")
                    t, s, r = int(parts[1]), int(parts[2]), int(parts[3])
                    status = parts[4]
                    payload = np.asarray([float(v)
                                          for v in parts[5].split(",")],
                                         dtype=np.float32)
                    events.append((t, s, r, status, payload))
                else:
                    raise ValueError("unknown record type %r" % (parts[0],))
            except (ValueError, IndexError) as exc:
                raise MetricsError("%s: line %d: %s" % (path, lineno, exc)) \
                    from exc
    flush()
    return logs
