"""Episode execution under the three communication regimes.

``collect``
    Training-time behavior: every agent's fresh message reaches every
    teammate, nothing is gated or lost and line of sight is ignored. This
    is the regime the replay buffer is filled from.
``tmc``
    The full execution protocol: threshold-or-timeout send decisions,
    per-link line-of-sight and channel loss, receive buffers with
    expiration.
``ac``
    Always-send without buffers: each receiver combines only the messages
    delivered this very step, anything lost or blocked simply contributes
    nothing. With a lossless channel this is the all-to-all ablation.
``nobuf``
    The sender side of the protocol without the receiver side: sends are
    still gated by threshold-or-timeout, but nothing is retained, so a
    suppressed, lost or blocked message leaves its receiver with no
    contribution that step. Isolates what the receive buffer is worth.
"""

import numpy as np

from . import agent as ag

SENT_DELIVERED = "sent-delivered"
SENT_LOST = "sent-lost"
SUPPRESSED = "suppressed"

MODES = ("collect", "tmc", "ac", "nobuf")


class EpisodeRecord:
    """Everything the learner and the metrics need from one episode.

    ``obs`` has T+1 rows (the final observation included); ``actions``,
    ``rewards`` and ``messages`` have T. ``messages`` holds the fresh
    encoder output f_msg(c) of every agent at every step regardless of
    whether it was broadcast. ``comm`` is a list of per-link events
    (t, sender, receiver, status, payload) when logging was requested.
    """

    __slots__ = ("obs", "actions", "rewards", "messages", "length",
                 "episode_return", "info", "comm")

    def __init__(self, obs, actions, rewards, messages, info, comm):
        self.obs = obs
        self.actions = actions
        self.rewards = rewards
        self.messages = messages
        self.length = len(rewards)
        self.episode_return = float(np.sum(rewards))
        self.info = info
        self.comm = comm


def run_episode(world, store, protocol, mode, action_rng, epsilon=0.0,
                bank=None, log_comm=False):
    """Play one episode to termination and record it.

    The caller owns seeding: reset ``world`` beforehand, hand in the
    action rng, and (for lossy runs) a LinkLossBank ready to go. In
    ``collect`` mode ``bank`` must be None.
    """
    if mode not in MODES:
        raise ValueError("unknown mode %r" % (mode,))
    if mode == "collect" and bank is not None:
        raise ValueError("collect mode is lossless; no channel bank applies")
    cfg = world.config
    n = cfg.n_agents
    n_act = protocol.n_actions
    runtimes = None
    if mode in ("tmc", "nobuf"):
        runtimes = [ag.AgentRuntime(i, store, protocol) for i in range(n)]

    hidden = np.zeros((n, ag.network_hidden_dim(store)), dtype=store.dtype)
    obs_mat = np.stack([world.observe(i) for i in range(n)])
    obs_log = [obs_mat]
    act_log, rew_log, msg_log = [], [], []
    comm = [] if log_comm else None
    info = {}
    t = 0
    while True:
        q_loc, c, hidden = ag.local_forward_np(store, obs_mat, hidden)
        msgs = ag.message_forward_np(store, c)
        msg_log.append(msgs.copy())

        if mode == "collect":
            q_glb = _combine_full(q_loc, msgs)
        elif mode == "tmc":
            q_glb = _exchange_tmc(world, runtimes, q_loc, msgs, t, bank, comm)
        elif mode == "nobuf":
            q_glb = _exchange_nobuf(world, runtimes, q_loc, msgs, t, bank,
                                    comm)
        else:
            q_glb = _exchange_ac(world, q_loc, msgs, t, bank, comm)

        actions = [ag.select_action(q_glb[i], epsilon, action_rng)
                   for i in range(n)]
        res = world.step(actions)
        obs_mat = np.stack(res.observations)
        obs_log.append(obs_mat)
        act_log.append(actions)
        rew_log.append(res.reward)
        t += 1
        if res.terminal:
            info = dict(res.info)
            break

    return EpisodeRecord(
        obs=np.stack(obs_log).astype(np.float32),
        actions=np.asarray(act_log, dtype=np.int64),
        rewards=np.asarray(rew_log, dtype=np.float64),
        messages=np.stack(msg_log).reshape(t, n, n_act),
        info=info,
        comm=comm,
    )


def _combine_full(q_loc, msgs):
    # Sum teammate rows explicitly so that a lossless delta=0 protocol run
    # reproduces this combination bit for bit.
    n = len(q_loc)
    out = np.empty_like(q_loc)
    for i in range(n):
        others = [msgs[j] for j in range(n) if j != i]
        out[i] = q_loc[i] + np.sum(others, axis=0)
    return out


def _deliveries(world, senders, msgs, t, bank, comm):
    """Per-link filtering: line of sight first, then the loss channel."""
    n = world.config.n_agents
    attempts = []
    for s in senders:
        for r in range(n):
            if r != s:
                attempts.append((s, r))
    in_sight = [(s, r) for s, r in attempts
                if world.line_of_sight(world.agent_pos[s], world.agent_pos[r])]
    if bank is None:
        delivered = set(in_sight)
    else:
        kept = bank.apply([(s, r, None) for s, r in in_sight])
        delivered = {(s, r) for s, r, _ in kept}
    if comm is not None:
        for s, r in attempts:
            status = SENT_DELIVERED if (s, r) in delivered else SENT_LOST
            comm.append((t, s, r, status, msgs[s].copy()))
    return delivered


def _gated_senders(runtimes, msgs, t, comm):
    n = len(runtimes)
    senders = [i for i in range(n) if runtimes[i].decide_send(msgs[i], t)]
    if comm is not None:
        for s in range(n):
            if s not in senders:
                for r in range(n):
                    if r != s:
                        comm.append((t, s, r, SUPPRESSED, msgs[s].copy()))
    return senders


def _exchange_tmc(world, runtimes, q_loc, msgs, t, bank, comm):
    n = len(runtimes)
    senders = _gated_senders(runtimes, msgs, t, comm)
    delivered = _deliveries(world, senders, msgs, t, bank, comm)
    q_glb = np.empty_like(q_loc)
    for r in range(n):
        arrivals = [(s, msgs[s]) for s in senders
                    if s != r and (s, r) in delivered]
        runtimes[r].receive_and_update(arrivals, t)
        q_glb[r] = runtimes[r].combine_global(q_loc[r])
    return q_glb


def _exchange_nobuf(world, runtimes, q_loc, msgs, t, bank, comm):
    senders = _gated_senders(runtimes, msgs, t, comm)
    delivered = _deliveries(world, senders, msgs, t, bank, comm)
    return _combine_arrivals(q_loc, msgs, delivered)


def _exchange_ac(world, q_loc, msgs, t, bank, comm):
    delivered = _deliveries(world, range(len(q_loc)), msgs, t, bank, comm)
    return _combine_arrivals(q_loc, msgs, delivered)


def _combine_arrivals(q_loc, msgs, delivered):
    q_glb = q_loc.copy()
    for s, r in sorted(delivered):
        q_glb[r] += msgs[s]
    return q_glb
