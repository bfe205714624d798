"""Centralized training loop: replay, VDN mixing, and the full objective.

The loss on a batch of episodes is

    L = mean_over_batch( sum_t [ (y_t - Q_team_t)^2
                                 + lambda_s * L_s^t
                                 - lambda_r * L_r^t ] )

with y_t the one-step TD target from the frozen copy of the parameters,
L_s the windowed message-smoothing penalty and L_r the (maximized, hence
subtracted) squared gap between the two largest global Q-values. Training
rollouts use full lossless message exchange; the send protocol and the
loss channel only apply at execution time.
"""

import numpy as np

from . import agent as ag
from . import diffnet
from .diffnet import Tape, TrainingError
from .env import GridWorld
from .rollout import run_episode

# Stream labels for deriving independent generators from one root seed.
_STREAMS = {"init": 0, "env": 1, "action": 2, "replay": 3,
            "eval-env": 4, "eval-action": 5, "channel": 6}


def stream_rng(root_seed, stream):
    """Named child generator of the root seed."""
    return np.random.default_rng(
        np.random.SeedSequence([int(root_seed), _STREAMS[stream]]))


def beta_schedule(beta1, window):
    """Linearly decaying window weights: beta_k = max(beta1 - 0.5(k-1), 0)."""
    return tuple(max(float(beta1) - 0.5 * k, 0.0) for k in range(window))


class TrainingConfig:
    """Hyperparameters of one training run."""

    def __init__(self, episodes=500, gamma=0.99, lambda_s=1.0, lambda_r=0.3,
                 window=4, delta=0.02, betas=None, hidden=64,
                 learning_rate=5e-4, batch_size=32, buffer_capacity=5000,
                 target_sync=200, grad_clip=10.0, eps_start=1.0,
                 eps_end=0.05, eps_anneal_frac=0.2, eval_every=100,
                 eval_episodes=10, divergence_limit=1e8,
                 divergence_patience=50):
        self.episodes = int(episodes)
        self.gamma = float(gamma)
        self.lambda_s = float(lambda_s)
        self.lambda_r = float(lambda_r)
        self.window = int(window)
        self.delta = float(delta)
        self.betas = beta_schedule(1.5, self.window) if betas is None \
            else tuple(float(b) for b in betas)
        self.hidden = int(hidden)
        self.learning_rate = float(learning_rate)
        self.batch_size = int(batch_size)
        self.buffer_capacity = int(buffer_capacity)
        self.target_sync = int(target_sync)
        self.grad_clip = float(grad_clip)
        self.eps_start = float(eps_start)
        self.eps_end = float(eps_end)
        self.eps_anneal_frac = float(eps_anneal_frac)
        self.eval_every = int(eval_every)
        self.eval_episodes = int(eval_episodes)
        self.divergence_limit = float(divergence_limit)
        self.divergence_patience = int(divergence_patience)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.lambda_s < 0 or self.lambda_r < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if len(self.betas) != self.window or any(b < 0 for b in self.betas):
            raise ValueError("need %d nonnegative beta weights" % self.window)
        if self.episodes < 0 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("bad episode/batch/capacity settings")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("epsilon schedule must run inside [0, 1]")

    def epsilon_at(self, episode):
        """Linear anneal from eps_start to eps_end over the first fraction."""
        horizon = max(1, int(self.episodes * self.eps_anneal_frac))
        frac = min(1.0, episode / horizon)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class ReplayBuffer:
    """Ring of episode records with uniform sampling over filled slots."""

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self._slots = []
        self._next = 0

    def __len__(self):
        return len(self._slots)

    def push(self, record):
        if len(self._slots) < self.capacity:
            self._slots.append(record)
        else:
            self._slots[self._next] = record
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size, rng):
        if not self._slots:
            raise TrainingError("cannot sample from an empty replay buffer")
        idx = rng.integers(len(self._slots), size=batch_size)
        return [self._slots[i] for i in idx]


# -- reference implementations of the loss pieces -------------------------
# Plain numpy, used directly in tests and as oracles for the taped batch
# builder below.

def vdn_mix(values):
    """Team value as the plain sum of per-agent chosen-action values."""
    return float(np.sum(values))


def td_target(reward, next_q_glb, gamma, terminal=False):
    """y = r + gamma * sum_n max_a Q_glb_n(next), or just r on terminal.

    The max over joint actions decomposes into per-agent maxes because the
    mixing is additive.
    """
    if terminal:
        return float(reward)
    return float(reward) + float(gamma) * float(
        np.sum([np.max(q) for q in next_q_glb]))


def smoothing_loss(messages, betas):
    """Windowed squared-distance penalty over one episode's messages.

    ``messages`` has shape (T, N, A); the window size is len(betas).
    """
    msgs = np.asarray(messages, dtype=np.float64)
    total = 0.0
    for t in range(1, len(msgs)):
        for k, beta in enumerate(betas, start=1):
            if beta == 0.0 or t - k < 0:
                continue
            diff = msgs[t] - msgs[t - k]
            total += beta * float((diff * diff).sum())
    return total


def confidence_loss(q_glb_seq):
    """Sum of squared top-2 gaps of the global Q-vectors, shape (T, N, A)."""
    q = np.asarray(q_glb_seq, dtype=np.float64)
    if q.shape[-1] < 2:
        raise ValueError("confidence loss needs at least two actions")
    s = np.sort(q, axis=-1)
    gap = s[..., -1] - s[..., -2]
    return float((gap * gap).sum())


# -- batched, differentiable loss -----------------------------------------

def _pad_batch(batch):
    """Stack a batch of episodes into padded arrays plus a step mask."""
    b = len(batch)
    t_max = max(r.length for r in batch)
    n, d = batch[0].obs.shape[1], batch[0].obs.shape[2]
    obs = np.zeros((b, t_max + 1, n, d), dtype=np.float32)
    acts = np.zeros((b, t_max, n), dtype=np.int64)
    rew = np.zeros((b, t_max), dtype=np.float64)
    mask = np.zeros((b, t_max), dtype=np.float64)
    for i, rec in enumerate(batch):
        t = rec.length
        obs[i, :t + 1] = rec.obs
        acts[i, :t] = rec.actions
        rew[i, :t] = rec.rewards
        mask[i, :t] = 1.0
    return obs, acts, rew, mask


def _target_max_sums(target_store, obs, n_agents):
    """sum_n max_a Q_glb_n at every padded step, under the frozen params."""
    b, t1, n, d = obs.shape
    flat = obs.transpose(1, 0, 2, 3).reshape(t1, b * n, d)
    h = np.zeros((b * n, ag.network_hidden_dim(target_store)),
                 dtype=target_store.dtype)
    out = np.zeros((b, t1))
    for t in range(t1):
        q_loc, c, h = ag.local_forward_np(target_store, flat[t], h)
        msgs = ag.message_forward_np(target_store, c)
        q3 = q_loc.reshape(b, n, -1)
        m3 = msgs.reshape(b, n, -1)
        q_glb = q3 + (m3.sum(axis=1, keepdims=True) - m3)
        out[:, t] = q_glb.max(axis=2).sum(axis=1)
    return out


def total_loss(store, target_store, batch, cfg, tape):
    """Differentiable batch loss; returns (loss Var, float parts dict)."""
    if not batch:
        raise TrainingError("empty batch")
    obs, acts, rew, mask = _pad_batch(batch)
    b, t_max, n = acts.shape
    rows = b * n
    lengths = np.asarray([r.length for r in batch])

    q_next = _target_max_sums(target_store, obs, n)
    is_last = np.zeros((b, t_max))
    is_last[np.arange(b), lengths - 1] = 1.0
    bootstrap = np.zeros((b, t_max))
    bootstrap[:, :] = q_next[:, 1:]
    y = rew + cfg.gamma * bootstrap * (1.0 - is_last)

    dt = store.dtype
    flat_obs = obs.transpose(1, 0, 2, 3).reshape(t_max + 1, rows, -1)
    h = diffnet.constant(tape, np.zeros((rows, cfg.hidden), dtype=dt))
    l_td = diffnet.constant(tape, np.zeros(()))
    l_s = diffnet.constant(tape, np.zeros(()))
    l_r = diffnet.constant(tape, np.zeros(()))
    msg_hist = []
    for t in range(t_max):
        o = diffnet.constant(tape, flat_obs[t])
        q_loc, c, h = ag.local_forward(store, o, h, tape)
        msg = ag.message_forward(store, c, tape)
        msg_hist.append(msg)

        q3 = diffnet.reshape(tape, q_loc, (b, n, -1))
        m3 = diffnet.reshape(tape, msg, (b, n, -1))
        team = diffnet.sum_axis(tape, m3, axis=1, keepdims=True)
        q_glb3 = diffnet.add(tape, q3, diffnet.sub(tape, team, m3))
        q_glb = diffnet.reshape(tape, q_glb3, (rows, -1))

        chosen = diffnet.take_per_row(tape, q_glb, acts[:, t].reshape(rows))
        q_team = diffnet.sum_axis(tape, diffnet.reshape(tape, chosen, (b, n)),
                                  axis=1)
        err = diffnet.sub(tape, diffnet.constant(tape, y[:, t]), q_team)
        masked = diffnet.mul(tape, diffnet.square(tape, err),
                             diffnet.constant(tape, mask[:, t]))
        l_td = diffnet.add(tape, l_td, diffnet.sum_all(tape, masked))

        if cfg.lambda_r != 0.0:
            gap = diffnet.top2_gap_per_row(tape, q_glb)
            g2 = diffnet.sum_axis(
                tape, diffnet.reshape(tape, diffnet.square(tape, gap), (b, n)),
                axis=1)
            g2 = diffnet.mul(tape, g2, diffnet.constant(tape, mask[:, t]))
            l_r = diffnet.add(tape, l_r, diffnet.sum_all(tape, g2))

        if cfg.lambda_s != 0.0:
            for k, beta in enumerate(cfg.betas, start=1):
                if beta == 0.0 or t - k < 0:
                    continue
                diff = diffnet.sub(tape, msg, msg_hist[t - k])
                sq = diffnet.sum_axis(tape, diffnet.square(tape, diff), axis=1)
                sq = diffnet.sum_axis(
                    tape, diffnet.reshape(tape, sq, (b, n)), axis=1)
                pair_mask = mask[:, t] * mask[:, t - k]
                sq = diffnet.mul(tape, sq, diffnet.constant(tape, pair_mask))
                l_s = diffnet.add(tape, l_s,
                                  diffnet.scale(tape, diffnet.sum_all(tape, sq),
                                                beta))

    loss = l_td
    if cfg.lambda_s != 0.0:
        loss = diffnet.add(tape, loss, diffnet.scale(tape, l_s, cfg.lambda_s))
    if cfg.lambda_r != 0.0:
        loss = diffnet.sub(tape, loss, diffnet.scale(tape, l_r, cfg.lambda_r))
    loss = diffnet.scale(tape, loss, 1.0 / b)
    parts = {"td": float(l_td.value) / b, "smooth": float(l_s.value) / b,
             "conf": float(l_r.value) / b, "loss": float(loss.value)}
    if not np.isfinite(parts["loss"]):
        raise TrainingError("non-finite loss: %r" % (parts,))
    return loss, parts


class Learner:
    """Owns the live parameters, the frozen copy, and the update counter."""

    def __init__(self, store, cfg):
        self.store = store
        self.target = store.copy()
        self.cfg = cfg
        self.updates = 0
        self._bad_streak = 0

    def update(self, batch):
        tape = Tape()
        loss, parts = total_loss(self.store, self.target, batch, self.cfg,
                                 tape)
        if parts["loss"] > self.cfg.divergence_limit:
            self._bad_streak += 1
            if self._bad_streak >= self.cfg.divergence_patience:
                raise TrainingError(
                    "loss above %.3g for %d consecutive updates"
                    % (self.cfg.divergence_limit, self._bad_streak))
        else:
            self._bad_streak = 0
        diffnet.backward(tape)
        if self.cfg.grad_clip:
            diffnet.clip_gradients(self.store, self.cfg.grad_clip)
        diffnet.optimizer_step(self.store, self.cfg.learning_rate)
        self.updates += 1
        if self.updates % self.cfg.target_sync == 0:
            self.sync_target()
        return parts

    def sync_target(self):
        self.target.load_state(self.store.state_dict())


def evaluate(world, store, protocol, episodes, env_rng, action_rng,
             mode="collect", bank=None, epsilon=0.0, log_comm=False):
    """Greedy-by-default evaluation; returns (mean, stderr, records)."""
    records = []
    for _ in range(episodes):
        world.reset(int(env_rng.integers(2 ** 31)))
        records.append(run_episode(world, store, protocol, mode, action_rng,
                                   epsilon=epsilon, bank=bank,
                                   log_comm=log_comm))
    if not records:
        return 0.0, 0.0, records
    returns = np.asarray([r.episode_return for r in records])
    se = returns.std(ddof=1) / np.sqrt(len(returns)) if len(returns) > 1 else 0.0
    return float(returns.mean()), float(se), records


def train_run(scenario_cfg, cfg, seed, progress=None):
    """Full training run; returns (store, curves).

    Deterministic in (scenario_cfg, cfg, seed): parameter init, episode
    seeds, exploration, replay sampling and periodic evaluation each draw
    from their own child stream of the root seed.
    """
    init_rng = stream_rng(seed, "init")
    env_rng = stream_rng(seed, "env")
    action_rng = stream_rng(seed, "action")
    replay_rng = stream_rng(seed, "replay")
    eval_env_rng = stream_rng(seed, "eval-env")
    eval_action_rng = stream_rng(seed, "eval-action")

    n_actions = 5
    store = ag.build_network(init_rng, scenario_cfg.obs_dim, n_actions,
                             hidden=cfg.hidden)
    protocol = ag.ProtocolConfig(scenario_cfg.n_agents, n_actions,
                                 delta=cfg.delta, window=cfg.window)
    world = GridWorld(scenario_cfg, seed=0)
    eval_world = GridWorld(scenario_cfg, seed=0)
    learner = Learner(store, cfg)
    replay = ReplayBuffer(cfg.buffer_capacity)
    curves = []
    running = {"loss": 0.0, "td": 0.0, "smooth": 0.0, "conf": 0.0}
    seen = 0

    for episode in range(cfg.episodes):
        eps = cfg.epsilon_at(episode)
        world.reset(int(env_rng.integers(2 ** 31)))
        record = run_episode(world, store, protocol, "collect", action_rng,
                             epsilon=eps)
        replay.push(record)
        if len(replay) >= cfg.batch_size:
            batch = replay.sample(cfg.batch_size, replay_rng)
            try:
                parts = learner.update(batch)
            except TrainingError as exc:
                # Let callers persist whatever the run produced so far.
                exc.store = store
                exc.curves = curves
                raise
            for key in running:
                running[key] += parts[key]
            seen += 1
        if cfg.eval_every and (episode + 1) % cfg.eval_every == 0:
            mean, se, _ = evaluate(eval_world, store, protocol,
                                   cfg.eval_episodes, eval_env_rng,
                                   eval_action_rng)
            point = {"episode": episode + 1, "updates": learner.updates,
                     "epsilon": eps, "eval_reward": mean, "eval_se": se}
            for key in running:
                point[key] = running[key] / max(seen, 1)
            curves.append(point)
            running = dict.fromkeys(running, 0.0)
            seen = 0
            if progress is not None:
                progress(point)
    return store, curves
