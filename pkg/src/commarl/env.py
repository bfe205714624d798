"""Grid-world scenarios with obstacle-aware movement and line of sight.

Two cooperative tasks on a small grid. In predator-prey (``pp``) a team of
predators chases a single randomly moving prey and is rewarded for closing
in and for the capture itself. In cooperative navigation (``cn``) the agents
must spread out so that every landmark cell is occupied, with a penalty for
piling onto the same cell.

Obstacle cells block movement (a move into one becomes a stay) and block the
line-of-sight test that the communication layer uses to decide whether a
message between two agents can get through at all.

Coordinates are (x, y) with x the column and y the row, origin at the top
left. Action encoding: 0=up, 1=down, 2=left, 3=right, 4=stay, where "up"
decreases y.
"""

import numpy as np


class EnvError(ValueError):
    """Bad scenario configuration or invalid input to the environment."""


UP, DOWN, LEFT, RIGHT, STAY = range(5)
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))

# Cross-shaped obstacle block sitting a little off the grid middle. Fig-style
# layouts vary; this one is plain config data and can be overridden.
DEFAULT_OBSTACLES = ((4, 3), (3, 3), (5, 3), (4, 2), (4, 4))


class ScenarioConfig:
    """Static description of one scenario instance.

    Everything the environment needs to build episodes: grid size, obstacle
    cells, how many agents and targets (prey for pp, landmarks for cn), the
    Chebyshev sight range used for observation masking, reward constants and
    the episode step limit.
    """

    def __init__(self, name, width=7, height=7, n_agents=None, n_targets=None,
                 sight=None, obstacles=DEFAULT_OBSTACLES, episode_limit=60,
                 capture_bonus=10.0, collision_penalty=1.0):
        if name not in ("pp", "cn"):
            raise EnvError("unknown scenario name: %r" % (name,))
        self.name = name
        self.width = int(width)
        self.height = int(height)
        if self.width < 2 or self.height < 2:
            raise EnvError("grid must be at least 2x2")
        if name == "pp":
            self.n_agents = 3 if n_agents is None else int(n_agents)
            self.n_targets = 1 if n_targets is None else int(n_targets)
            self.sight = 3 if sight is None else int(sight)
        else:
            self.n_agents = 5 if n_agents is None else int(n_agents)
            self.n_targets = 5 if n_targets is None else int(n_targets)
            self.sight = 1 if sight is None else int(sight)
        if self.n_agents < 1 or self.n_targets < 1 or self.sight < 0:
            raise EnvError("entity counts must be positive and sight >= 0")
        self.obstacles = frozenset((int(x), int(y)) for x, y in obstacles)
        for x, y in self.obstacles:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise EnvError("obstacle (%d, %d) outside the grid" % (x, y))
        self.episode_limit = int(episode_limit)
        if self.episode_limit < 1:
            raise EnvError("episode_limit must be positive")
        self.capture_bonus = float(capture_bonus)
        self.collision_penalty = float(collision_penalty)
        # pp places predators + prey together; cn needs agents and landmarks
        # on distinct cells at reset.
        needed = self.n_agents + self.n_targets
        free = self.width * self.height - len(self.obstacles)
        if free < needed:
            raise EnvError(
                "obstacle layout leaves %d free cells but %d entities "
                "need placing" % (free, needed))

    @property
    def obs_dim(self):
        per_entity = 3  # visibility flag, dx, dy
        window = (2 * self.sight + 1) ** 2
        return (per_entity * (self.n_agents - 1)   # teammates
                + per_entity * self.n_targets      # prey or landmarks
                + window                           # obstacle occupancy
                + 2                                # own position, normalized
                + 1)                               # timestep fraction

    def reward_bounds(self):
        """Documented per-step reward range [r_min, r_max]."""
        span = self.width + self.height
        far = (self.width - 1) + (self.height - 1)
        if self.name == "pp":
            return (-far / span, self.capture_bonus)
        n_pairs = self.n_agents * (self.n_agents - 1) // 2
        return (-(self.n_targets * far / span
                  + self.collision_penalty * n_pairs), 0.0)


def pp_default(**overrides):
    return ScenarioConfig("pp", **overrides)


def cn_default(**overrides):
    return ScenarioConfig("cn", **overrides)


def supercover_cells(a, b):
    """All grid cells touched by the segment between the centers of a and b.

    Works on doubled integer coordinates so boundary and corner crossings
    are decided exactly. A crossing through a lattice corner counts every
    cell meeting at that corner, which makes the traversal conservative:
    grazing an obstacle's corner already blocks sight.
    """
    ax, ay = a
    bx, by = b
    cells = [(ax, ay)]
    if a == b:
        return cells
    # Doubled coordinates: cell (x, y) spans [2x, 2x+2] x [2y, 2y+2] and its
    # center sits at (2x+1, 2y+1), never on a boundary.
    x0, y0 = 2 * ax + 1, 2 * ay + 1
    x1, y1 = 2 * bx + 1, 2 * by + 1
    dx, dy = x1 - x0, y1 - y0
    sx = (dx > 0) - (dx < 0)
    sy = (dy > 0) - (dy < 0)
    if sy == 0:
        # Horizontal: the segment stays strictly inside one row.
        for x in range(ax + sx, bx + sx, sx):
            cells.append((x, ay))
        return cells
    if sx == 0:
        for y in range(ay + sy, by + sy, sy):
            cells.append((ax, y))
        return cells
    x, y = ax, ay
    adx, ady = abs(dx), abs(dy)
    while (x, y) != (bx, by):
        # Parameters of the next vertical / horizontal boundary crossing,
        # compared by cross-multiplication: tx = nx/adx vs ty = ny/ady.
        nx = abs((2 * x + (2 if sx > 0 else 0)) - x0)
        ny = abs((2 * y + (2 if sy > 0 else 0)) - y0)
        lhs = nx * ady
        rhs = ny * adx
        if lhs < rhs:
            x += sx
            cells.append((x, y))
        elif lhs > rhs:
            y += sy
            cells.append((x, y))
        else:
            # Exact corner crossing: the segment touches all four cells
            # meeting there. Record the two side cells, then continue from
            # the diagonal one.
            cells.append((x + sx, y))
            cells.append((x, y + sy))
            x += sx
            y += sy
            cells.append((x, y))
    return cells


class StepResult:
    """Outcome of one environment step."""

    __slots__ = ("reward", "observations", "terminal", "info")

    def __init__(self, reward, observations, terminal, info):
        self.reward = reward
        self.observations = observations
        self.terminal = terminal
        self.info = info


class GridWorld:
    """One seeded episode generator for a scenario.

    Construction places entities; ``reset`` starts a fresh episode (with a
    new seed if given). All randomness, including the pp prey's moves, comes
    from the seed, so (seed, action sequence) pins down the trajectory.
    """

    def __init__(self, config, seed=0):
        self.config = config
        self._los_cache = {}
        self.reset(seed)

    def reset(self, seed=None):
        """Start a new episode and return the list of initial observations."""
        if seed is not None:
            self._rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        elif not hasattr(self, "_rng"):
            self._rng = np.random.default_rng()
        cfg = self.config
        free = [(x, y) for y in range(cfg.height) for x in range(cfg.width)
                if (x, y) not in cfg.obstacles]
        picks = self._rng.choice(len(free), size=cfg.n_agents + cfg.n_targets,
                                 replace=False)
        cells = [free[i] for i in picks]
        self.agent_pos = cells[:cfg.n_agents]
        self.target_pos = cells[cfg.n_agents:]
        self.t = 0
        self.done = False
        return [self.observe(i) for i in range(cfg.n_agents)]

    # -- dynamics ---------------------------------------------------------

    def _apply_move(self, pos, action):
        mx, my = MOVES[action]
        nx, ny = pos[0] + mx, pos[1] + my
        cfg = self.config
        if not (0 <= nx < cfg.width and 0 <= ny < cfg.height):
            return pos
        if (nx, ny) in cfg.obstacles:
            return pos
        return (nx, ny)

    def step(self, actions):
        """Advance one timestep under the given joint action."""
        cfg = self.config
        if self.done:
            raise EnvError("step() called on a finished episode")
        if len(actions) != cfg.n_agents:
            raise EnvError("expected %d actions, got %d"
                           % (cfg.n_agents, len(actions)))
        for a in actions:
            if not 0 <= int(a) < len(MOVES):
                raise EnvError("action %r out of range" % (a,))
        self.agent_pos = [self._apply_move(p, int(a))
                          for p, a in zip(self.agent_pos, actions)]
        if cfg.name == "pp":
            # Prey takes a uniform random legal move (stay is always legal).
            prey = self.target_pos[0]
            legal = [a for a in range(len(MOVES))
                     if self._apply_move(prey, a) != prey or a == STAY]
            choice = legal[self._rng.integers(len(legal))]
            self.target_pos[0] = self._apply_move(prey, choice)
        self.t += 1
        reward, win, info = self._score()
        self.done = win or self.t >= cfg.episode_limit
        obs = [self.observe(i) for i in range(cfg.n_agents)]
        return StepResult(reward, obs, self.done, info)

    def _score(self):
        cfg = self.config
        span = cfg.width + cfg.height
        apos = np.asarray(self.agent_pos)
        tpos = np.asarray(self.target_pos)
        if cfg.name == "pp":
            dists = np.abs(apos - tpos[0]).sum(axis=1)
            reward = -float(dists.mean()) / span
            captured = bool((dists == 0).any())
            if captured:
                reward += cfg.capture_bonus
            return reward, captured, {"capture": captured}
        # cn: each landmark scores its nearest agent; stacked agents pay
        # a penalty per colliding pair.
        diff = np.abs(tpos[:, None, :] - apos[None, :, :]).sum(axis=2)
        nearest = diff.min(axis=1)
        reward = -float(nearest.sum()) / span
        counts = {}
        for p in self.agent_pos:
            counts[p] = counts.get(p, 0) + 1
        collisions = sum(c * (c - 1) // 2 for c in counts.values())
        reward -= cfg.collision_penalty * collisions
        covered = int((nearest == 0).sum())
        win = covered == cfg.n_targets
        return reward, win, {"covered": covered, "collisions": collisions}

    # -- sensing ----------------------------------------------------------

    def line_of_sight(self, a, b):
        """True iff no obstacle cell touches the segment between a and b."""
        key = (a, b) if a <= b else (b, a)
        hit = self._los_cache.get(key)
        if hit is None:
            hit = not any(c in self.config.obstacles
                          for c in supercover_cells(key[0], key[1]))
            self._los_cache[key] = hit
        return hit

    def observe(self, agent):
        """Flat float32 observation vector for one agent.

        Layout: per teammate (flag, dx, dy), per target (flag, dx, dy),
        obstacle window of side 2*sight+1 (out-of-grid cells read 1),
        own position scaled to [0, 1], and t / episode_limit. Entities
        outside the Chebyshev sight range get flag 0 and zeroed offsets.
        """
        cfg = self.config
        if not 0 <= agent < cfg.n_agents:
            raise EnvError("agent index %r out of range" % (agent,))
        ox, oy = self.agent_pos[agent]
        parts = []
        for i, (x, y) in enumerate(self.agent_pos):
            if i == agent:
                continue
            parts.extend(self._entity_entry(ox, oy, x, y))
        for x, y in self.target_pos:
            parts.extend(self._entity_entry(ox, oy, x, y))
        r = cfg.sight
        for wy in range(oy - r, oy + r + 1):
            for wx in range(ox - r, ox + r + 1):
                inside = 0 <= wx < cfg.width and 0 <= wy < cfg.height
                blocked = (not inside) or (wx, wy) in cfg.obstacles
                parts.append(1.0 if blocked else 0.0)
        parts.append(ox / (cfg.width - 1))
        parts.append(oy / (cfg.height - 1))
        parts.append(self.t / cfg.episode_limit)
        return np.asarray(parts, dtype=np.float32)

    def _entity_entry(self, ox, oy, x, y):
        dx, dy = x - ox, y - oy
        if max(abs(dx), abs(dy)) <= self.config.sight:
            return (1.0, float(dx), float(dy))
        return (0.0, 0.0, 0.0)
