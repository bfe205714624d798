"""Per-agent inference and the threshold+timeout messaging protocol.

Each agent runs the same recurrent network (parameters are shared through a
single store): an observation embedding, a GRU whose output doubles as the
message source, a Q head, and a message encoder whose output width equals
the action count so that Q-vectors and messages can be summed elementwise.

The protocol side keeps two buffers per agent. The sent buffer remembers the
last broadcast message and when it went out; a new message is only broadcast
when it moved at least ``delta`` away from the buffered one (Euclidean) or
when more than ``window`` steps passed since the last broadcast. The receive
buffer holds one slot per teammate with a validity bit; slots go stale once
nothing arrived for ``window`` steps, after which they stop contributing to
the combined Q.
"""

import numpy as np

from . import diffnet
from .diffnet import ParamStore, ShapeError

# t_last sentinel low enough that the very first decide_send always times out.
NEVER_SENT = -(10 ** 9)


class ProtocolError(ValueError):
    """Invalid protocol input (bad peer index, bad epsilon, empty Q)."""


class ProtocolConfig:
    """Constants of the messaging protocol."""

    def __init__(self, n_agents, n_actions, delta=0.02, window=4):
        self.n_agents = int(n_agents)
        self.n_actions = int(n_actions)
        self.delta = float(delta)
        self.window = int(window)
        if self.n_agents < 1 or self.n_actions < 1:
            raise ProtocolError("need at least one agent and one action")
        if self.delta < 0:
            raise ProtocolError("send threshold must be >= 0")
        if self.window < 1:
            raise ProtocolError("window must be >= 1")


def build_network(rng, obs_dim, n_actions, hidden=64, dtype=np.float32):
    """Parameter store for the shared agent network.

    Layout: ``embed`` linear (obs -> hidden, ReLU applied by the forward),
    ``gru`` cell (hidden -> hidden), ``qhead`` and ``msg`` two-layer MLPs
    (hidden -> hidden -> n_actions).
    """
    store = ParamStore(dtype=dtype)
    diffnet.add_linear(store, rng, "embed", obs_dim, hidden)
    diffnet.add_gru(store, rng, "gru", hidden, hidden)
    diffnet.add_linear(store, rng, "qhead", hidden, hidden, index=0)
    diffnet.add_linear(store, rng, "qhead", hidden, n_actions, index=1)
    diffnet.add_linear(store, rng, "msg", hidden, hidden, index=0)
    diffnet.add_linear(store, rng, "msg", hidden, n_actions, index=1)
    # Untrained teams start silent: with a zeroed output layer the message
    # encoder emits exactly 0 until gradients give it something to say, so
    # early send decisions are driven by the timeout instead of init noise
    # and message amplitude is earned rather than injected.
    store["msg.w1"].value[:] = 0.0
    store["msg.b1"].value[:] = 0.0
    return store


def network_hidden_dim(store):
    return store["gru.w_hid"].value.shape[0]


def network_obs_dim(store):
    return store["embed.w0"].value.shape[0]


# -- forward passes -------------------------------------------------------
# Taped versions build the graph for training; the _np twins follow the
# same op order bit for bit and serve rollouts and target evaluation.

def local_forward(store, obs, h_prev, tape):
    """Taped local pass: returns (q_loc, c, h) with c the GRU output."""
    w = store["embed.w0"]
    if obs.value.shape[-1] != w.value.shape[0]:
        raise ShapeError("observation width %d != embedding input %d"
                         % (obs.value.shape[-1], w.value.shape[0]))
    x = diffnet.relu(tape, diffnet.add(tape, diffnet.matmul(tape, obs, w),
                                       store["embed.b0"]))
    h = diffnet.gru_step(store, "gru", x, h_prev, tape)
    q = diffnet.mlp_forward(store, "qhead", h, tape)
    return q, h, h


def message_forward(store, c, tape):
    """Taped message encoder."""
    return diffnet.mlp_forward(store, "msg", c, tape)


def local_forward_np(store, obs, h_prev):
    w = store["embed.w0"].value
    if obs.shape[-1] != w.shape[0]:
        raise ShapeError("observation width %d != embedding input %d"
                         % (obs.shape[-1], w.shape[0]))
    x = np.maximum(obs @ w + store["embed.b0"].value, 0)
    h = diffnet.gru_step_np(store, "gru", x, h_prev)
    q = diffnet.mlp_forward_np(store, "qhead", h)
    return q, h, h


def message_forward_np(store, c):
    return diffnet.mlp_forward_np(store, "msg", c)


# -- protocol state -------------------------------------------------------

class SentMessageBuffer:
    """Last broadcast message and its timestep."""

    __slots__ = ("m_s", "t_last")

    def __init__(self, n_actions):
        self.m_s = np.zeros(n_actions, dtype=np.float32)
        self.t_last = NEVER_SENT


class ReceivedMessageBuffer:
    """One slot per teammate: message, valid bit, last update time."""

    def __init__(self, n_agents, n_actions, owner):
        self.owner = owner
        self.msgs = np.zeros((n_agents, n_actions), dtype=np.float32)
        self.val = np.zeros(n_agents, dtype=bool)
        self.t_updated = np.full(n_agents, NEVER_SENT, dtype=np.int64)

    def clear(self):
        self.msgs[:] = 0.0
        self.val[:] = False
        self.t_updated[:] = NEVER_SENT


class AgentRuntime:
    """Recurrent state plus both protocol buffers for one agent.

    The parameter store is shared across all runtimes of a team and is
    treated as read-only here.
    """

    def __init__(self, index, store, protocol):
        if not 0 <= index < protocol.n_agents:
            raise ProtocolError("agent index %r out of range" % (index,))
        self.index = index
        self.store = store
        self.protocol = protocol
        self.hidden = np.zeros(network_hidden_dim(store), dtype=store.dtype)
        self.sent = SentMessageBuffer(protocol.n_actions)
        self.recv = ReceivedMessageBuffer(protocol.n_agents,
                                          protocol.n_actions, index)

    def begin_episode(self):
        self.hidden[:] = 0.0
        self.sent = SentMessageBuffer(self.protocol.n_actions)
        self.recv.clear()

    def compute_local(self, obs):
        """Advance the GRU on one observation; returns (q_loc, c, h)."""
        q, c, h = local_forward_np(self.store, np.asarray(obs, self.store.dtype),
                                   self.hidden)
        self.hidden = h
        return q, c, h

    def encode_message(self, c):
        return message_forward_np(self.store, c)

    def decide_send(self, msg, t):
        """Threshold-or-timeout send rule; updates the sent buffer on send."""
        msg = np.asarray(msg)
        diff = msg.astype(np.float64) - self.sent.m_s.astype(np.float64)
        moved = float(np.sqrt(np.dot(diff, diff))) >= self.protocol.delta
        timed_out = t - self.sent.t_last > self.protocol.window
        if moved or timed_out:
            self.sent.m_s = msg.astype(np.float32).copy()
            self.sent.t_last = t
            return True
        return False

    def receive_and_update(self, arrivals, t):
        """Store arrived messages, then expire slots idle for > window steps."""
        seen = set()
        for peer, msg in arrivals:
            if peer == self.index or not 0 <= peer < self.protocol.n_agents:
                raise ProtocolError("arrival from invalid peer %r" % (peer,))
            if peer in seen:
                raise ProtocolError("duplicate arrival from peer %r" % (peer,))
            seen.add(peer)
            msg = np.asarray(msg, dtype=np.float32)
            if msg.shape != (self.protocol.n_actions,):
                raise ProtocolError("message shape %r does not match action "
                                    "count %d" % (msg.shape,
                                                  self.protocol.n_actions))
            self.recv.msgs[peer] = msg
            self.recv.val[peer] = True
            self.recv.t_updated[peer] = t
        stale = (t - self.recv.t_updated) > self.protocol.window
        self.recv.val[stale] = False
        return self.recv

    def combine_global(self, q_loc):
        """Q_glb = Q_loc plus the sum of currently valid teammate messages."""
        q_loc = np.asarray(q_loc)
        if q_loc.shape != (self.protocol.n_actions,):
            raise ProtocolError("q_loc shape %r does not match action count %d"
                                % (q_loc.shape, self.protocol.n_actions))
        if not self.recv.val.any():
            return q_loc.copy()
        return q_loc + self.recv.msgs[self.recv.val].sum(axis=0)


def select_action(q_glb, epsilon, rng):
    """Epsilon-greedy action pick; exact ties resolve to the lowest index."""
    q = np.asarray(q_glb)
    if q.ndim != 1 or q.size == 0:
        raise ProtocolError("need a non-empty 1-d Q vector")
    if not 0.0 <= epsilon <= 1.0:
        raise ProtocolError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))
