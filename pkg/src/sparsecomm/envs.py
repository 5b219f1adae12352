"""Deterministic, seedable gridworld environments.

Three tasks share one interface: the blind traffic junction (cars on fixed
routes through one or more intersections, visibility limited to the car's
own cell), predator-prey on a bounded grid with 3x3 vision, and a tiny
two-agent signalling game used as a testbed where the value of a message
can be worked out by hand.

Episode traces are recorded as EpisodeLog objects and serialize to
line-delimited JSON, one step per line, with the field order documented in
StepRecord. Identical (config, seed, action sequence) triples reproduce
episodes bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .numerics import ConfigurationError

TJ_ACTIONS = ("gas", "brake")
PP_ACTIONS = ("up", "down", "left", "right", "stay")
_PP_MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1), 4: (0, 0)}

_TJ_DEFAULTS = {
    # difficulty: (grid side, horizontal road rows, vertical road cols,
    #              arrival probability, max steps)
    "easy": (7, (3,), (3,), 0.3, 20),
    "medium": (14, (7,), (4, 9), 0.2, 40),
    "hard": (18, (5, 12), (5, 12), 0.2, 60),
}


@dataclass
class EnvConfig:
    kind: str = "traffic_junction"
    difficulty: str = "easy"
    n_agents: int = 5
    max_steps: int = 0          # 0 -> per-kind default
    height: int = 0             # 0 -> per-kind default
    width: int = 0
    arrival_prob: float = -1.0  # <0 -> per-difficulty default
    vision: int = 1
    r_collision: float = -10.0
    r_delay: float = -0.01
    r_pp_step: float = -0.05
    r_pp_bonus: float = 0.05

    def __post_init__(self):
        # 0 (dims/steps) and -1.0 (arrival) mean "use the per-kind default";
        # anything else out of range is a config error, not a default
        if self.kind == "traffic_junction":
            if self.difficulty not in _TJ_DEFAULTS:
                raise ConfigurationError(f"unknown difficulty {self.difficulty!r}")
            side, _, _, arrival, steps = _TJ_DEFAULTS[self.difficulty]
            defaults = (side, side, steps, arrival)
        elif self.kind == "predator_prey":
            defaults = (20, 20, 80, 0.0)
        elif self.kind == "signal":
            self.n_agents = 2
            defaults = (1, 1, 1, 0.0)
        else:
            raise ConfigurationError(f"unknown env kind {self.kind!r}")
        if self.height == 0:
            self.height = defaults[0]
        if self.width == 0:
            self.width = defaults[1]
        if self.max_steps == 0:
            self.max_steps = defaults[2]
        if self.arrival_prob == -1.0:
            self.arrival_prob = defaults[3]
        self.validate()

    def validate(self):
        if self.n_agents < 2:
            raise ConfigurationError("n_agents must be >= 2")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("grid dims must be positive")
        if not 0.0 <= self.arrival_prob <= 1.0:
            raise ConfigurationError("arrival_prob must be in [0, 1]")


class CountingRNG:
    """numpy Generator wrapper that counts draws (logged for exact replay)."""

    def __init__(self, seed):
        self._gen = np.random.default_rng(seed)
        self.calls = 0

    def uniform(self) -> float:
        self.calls += 1
        return float(self._gen.uniform())

    def integers(self, low, high=None) -> int:
        self.calls += 1
        return int(self._gen.integers(low, high))

    def distinct_cells(self, n_cells: int, k: int):
        self.calls += 1
        return [int(c) for c in self._gen.choice(n_cells, size=k, replace=False)]


def _json_scalar(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


@dataclass
class StepRecord:
    """One environment step; JSONL field order is the declaration order.

    `spawned` lists agent slots (re)occupied at the end of the step and
    `rng_calls` is the environment RNG draw count, which together make the
    episode exactly replayable.
    """

    t: int
    active: list
    obs: list
    actions: list
    tokens: list
    messages: list
    gates: list
    rewards: list
    rng_calls: int
    spawned: list = field(default_factory=list)


@dataclass
class EpisodeLog:
    env_kind: str
    env_seed: list
    n_agents: int
    records: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def team_reward(self) -> float:
        return float(sum(sum(r.rewards) for r in self.records))

    def dump_jsonl(self, fh) -> None:
        header = {"env_kind": self.env_kind, "env_seed": self.env_seed,
                  "n_agents": self.n_agents, "info": self.info}
        fh.write(json.dumps(header, default=_json_scalar) + "\n")
        for rec in self.records:
            fh.write(json.dumps(asdict(rec), default=_json_scalar) + "\n")

    @classmethod
    def parse_jsonl(cls, fh) -> "EpisodeLog":
        header = json.loads(fh.readline())
        log = cls(env_kind=header["env_kind"], env_seed=header["env_seed"],
                  n_agents=header["n_agents"], info=header["info"])
        for line in fh:
            line = line.strip()
            if line:
                log.records.append(StepRecord(**json.loads(line)))
        return log


@dataclass
class StepResult:
    obs: list
    rewards: np.ndarray
    done: bool
    info: dict


def episode_success(log: EpisodeLog) -> bool:
    """Task success: TJ collision-free, PP all predators at the prey,
    signalling every listener guess correct. Empty TJ episodes succeed."""
    if log.env_kind == "traffic_junction":
        return log.info.get("collisions", 0) == 0
    if log.env_kind == "predator_prey":
        return bool(log.info.get("all_reached", False))
    if log.env_kind == "signal":
        return bool(log.info.get("success", False))
    raise ConfigurationError(f"unknown env kind {log.env_kind!r}")


# ---------------------------------------------------------------------------
# traffic junction


def _tj_roads(cfg: EnvConfig):
    _, h_rows, v_cols, _, _ = _TJ_DEFAULTS[cfg.difficulty]
    roads = []
    for r in h_rows:
        roads.append([(r, c) for c in range(cfg.width)])     # eastbound
    for c in v_cols:
        roads.append([(r, c) for r in range(cfg.height)])    # southbound
    return roads


def _tj_routes(roads):
    """All entry->exit cell paths; cars may turn onto the crossing road at
    any junction. Roads are one-way so the walk is acyclic."""
    junctions = {}
    for ri, cells in enumerate(roads):
        for idx, cell in enumerate(cells):
            junctions.setdefault(cell, []).append((ri, idx))

    def walk(road_id, start):
        cells = roads[road_id]
        out = []
        prefix = []
        for j in range(start, len(cells)):
            cell = cells[j]
            prefix.append(cell)
            for other_id, k in junctions[cell]:
                if other_id != road_id and k + 1 < len(roads[other_id]):
                    for tail in walk(other_id, k + 1):
                        out.append(prefix + tail)
        out.append(list(prefix))
        return out

    routes = []
    entry_routes = {}
    for ri in range(len(roads)):
        for path in walk(ri, 0):
            entry_routes.setdefault(ri, []).append(len(routes))
            routes.append(path)
    return routes, entry_routes


class TrafficJunction:
    """Blind intersection driving: agents are cars on fixed routes that see
    only their own cell, choose gas/brake, and are penalized for sharing a
    cell (collision) and for dawdling (delay grows with time since spawn)."""

    GAS, BRAKE = 0, 1

    def __init__(self, cfg: EnvConfig):
        cfg.validate()
        self.cfg = cfg
        self.roads = _tj_roads(cfg)
        self.routes, self.entry_routes = _tj_routes(self.roads)
        self.n_agents = cfg.n_agents
        self.n_actions = 2
        self.obs_dim = 5 + len(self.routes)
        self.max_steps = cfg.max_steps

    def reward_bounds(self):
        return (self.cfg.r_collision + self.cfg.r_delay * self.cfg.max_steps, 0.0)

    def reset(self, seed):
        self.rng = CountingRNG(seed)
        self.t = 0
        self.route_id = np.full(self.n_agents, -1, dtype=int)
        self.route_idx = np.zeros(self.n_agents, dtype=int)
        self.tau = np.zeros(self.n_agents, dtype=int)
        self.total_collisions = 0
        self.warned_actions = 0
        self._spawn()
        return self._observe()

    def active(self):
        return [bool(r >= 0) for r in self.route_id]

    def _positions(self):
        pos = {}
        for i in range(self.n_agents):
            if self.route_id[i] >= 0:
                pos[i] = self.routes[self.route_id[i]][self.route_idx[i]]
        return pos

    def _spawn(self):
        spawned = []
        occupied = set(self._positions().values())
        for entry_road, route_ids in sorted(self.entry_routes.items()):
            if self.rng.uniform() >= self.cfg.arrival_prob:
                continue
            free = [i for i in range(self.n_agents) if self.route_id[i] < 0]
            entry_cell = self.roads[entry_road][0]
            if not free or entry_cell in occupied:
                continue
            slot = free[0]
            route = route_ids[self.rng.integers(len(route_ids))]
            self.route_id[slot] = route
            self.route_idx[slot] = 0
            self.tau[slot] = 0
            occupied.add(entry_cell)
            spawned.append(slot)
        return spawned

    def _observe(self):
        pos = self._positions()
        cell_count = {}
        for c in pos.values():
            cell_count[c] = cell_count.get(c, 0) + 1
        obs = []
        for i in range(self.n_agents):
            vec = np.zeros(self.obs_dim)
            if i in pos:
                r, c = pos[i]
                vec[0] = 1.0
                vec[1] = r / max(1, self.cfg.height - 1)
                vec[2] = c / max(1, self.cfg.width - 1)
                vec[3] = 1.0 if cell_count[(r, c)] > 1 else 0.0
                vec[4] = self.tau[i] / self.max_steps
                vec[5 + self.route_id[i]] = 1.0
            obs.append(vec)
        return obs

    def step(self, actions) -> StepResult:
        if self.t >= self.max_steps:
            raise ConfigurationError("step() after episode end")
        exited = []
        for i in range(self.n_agents):
            if self.route_id[i] < 0:
                if actions[i] is not None:
                    self.warned_actions += 1
                continue
            if actions[i] == self.GAS:
                path = self.routes[self.route_id[i]]
                if self.route_idx[i] + 1 >= len(path):
                    self.route_id[i] = -1  # exits the grid
                    exited.append(i)
                else:
                    self.route_idx[i] += 1

        pos = self._positions()
        cell_count = {}
        for c in pos.values():
            cell_count[c] = cell_count.get(c, 0) + 1
        collided = [i for i, c in pos.items() if cell_count[c] > 1]
        self.total_collisions += len(collided)

        rewards = np.zeros(self.n_agents)
        for i in pos:
            rewards[i] = self.cfg.r_delay * self.tau[i]
        for i in collided:
            rewards[i] += self.cfg.r_collision
        for i in pos:
            self.tau[i] += 1

        spawned = self._spawn()
        self.t += 1
        done = self.t >= self.max_steps
        info = {
            "collisions": len(collided),
            "spawned": spawned,
            "exited": exited,
            "total_collisions": self.total_collisions,
            "warned_actions": self.warned_actions,
        }
        return StepResult(self._observe(), rewards, done, info)

    def episode_info(self) -> dict:
        return {"collisions": self.total_collisions,
                "warned_actions": self.warned_actions}


# ---------------------------------------------------------------------------
# predator-prey


class PredatorPrey:
    """Predators search a bounded grid for a static prey; a predator that
    steps onto the prey locks there. Everyone sees a 3x3 occupancy window
    plus its own position. Cooperative reward grows with the number of
    predators that have reached the prey."""

    def __init__(self, cfg: EnvConfig):
        cfg.validate()
        self.cfg = cfg
        self.n_agents = cfg.n_agents
        self.n_actions = 5
        self.obs_dim = 18 + 2
        self.max_steps = cfg.max_steps

    def reward_bounds(self):
        return (self.cfg.r_pp_step, self.cfg.r_pp_bonus * self.cfg.n_agents)

    def reset(self, seed):
        self.rng = CountingRNG(seed)
        self.t = 0
        cells = self.rng.distinct_cells(self.cfg.height * self.cfg.width,
                                        self.n_agents + 1)
        self.prey = divmod(cells[0], self.cfg.width)
        self.pos = [divmod(c, self.cfg.width) for c in cells[1:]]
        self.reached = [False] * self.n_agents
        self.warned_actions = 0
        return self._observe()

    def active(self):
        return [True] * self.n_agents

    def _observe(self):
        h, w = self.cfg.height, self.cfg.width
        obs = []
        for i, (r, c) in enumerate(self.pos):
            vec = np.zeros(self.obs_dim)
            for k, (dr, dc) in enumerate(
                (dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)
            ):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w):
                    continue
                if any(j != i and self.pos[j] == (rr, cc) for j in range(self.n_agents)):
                    vec[k] = 1.0
                if self.prey == (rr, cc):
                    vec[9 + k] = 1.0
            vec[18] = r / max(1, h - 1)
            vec[19] = c / max(1, w - 1)
            obs.append(vec)
        return obs

    def step(self, actions) -> StepResult:
        if self.t >= self.max_steps:
            raise ConfigurationError("step() after episode end")
        h, w = self.cfg.height, self.cfg.width
        for i in range(self.n_agents):
            if self.reached[i]:
                continue  # locked at the prey
            dr, dc = _PP_MOVES.get(int(actions[i]), (0, 0))
            r = min(max(self.pos[i][0] + dr, 0), h - 1)
            c = min(max(self.pos[i][1] + dc, 0), w - 1)
            self.pos[i] = (r, c)
            if self.pos[i] == self.prey:
                self.reached[i] = True

        n_reached = sum(self.reached)
        rewards = np.zeros(self.n_agents)
        for i in range(self.n_agents):
            rewards[i] = (0.0 if self.reached[i] else self.cfg.r_pp_step)
            rewards[i] += self.cfg.r_pp_bonus * n_reached

        self.t += 1
        done = all(self.reached) or self.t >= self.max_steps
        info = {"reached": n_reached, "spawned": [], "exited": [],
                "collisions": 0, "warned_actions": self.warned_actions}
        return StepResult(self._observe(), rewards, done, info)

    def episode_info(self) -> dict:
        return {"all_reached": all(self.reached), "reached": sum(self.reached),
                "warned_actions": self.warned_actions}


# ---------------------------------------------------------------------------
# signalling toy


class SignalGame:
    """Two agents, two contexts. Agent 0 observes the context; agent 1 must
    act to match it. Without communication the best possible success rate
    is 0.5, which makes the reward value of each message auditable by
    enumerating the two contexts."""

    def __init__(self, cfg: EnvConfig):
        cfg.validate()
        if cfg.n_agents != 2:
            raise ConfigurationError("signal game is a 2-agent task")
        self.cfg = cfg
        self.n_agents = 2
        self.n_actions = 2
        self.obs_dim = 4
        self.max_steps = cfg.max_steps

    def reward_bounds(self):
        return (0.0, 1.0)

    def reset(self, seed):
        self.rng = CountingRNG(seed)
        self.t = 0
        self.context = self.rng.integers(2)
        self.all_correct = True
        return self._observe()

    def active(self):
        return [True, True]

    def _observe(self):
        speaker = np.zeros(4)
        speaker[0] = 1.0
        speaker[2 + self.context] = 1.0
        listener = np.zeros(4)
        listener[1] = 1.0
        return [speaker, listener]

    def step(self, actions) -> StepResult:
        if self.t >= self.max_steps:
            raise ConfigurationError("step() after episode end")
        correct = int(actions[1]) == self.context
        if not correct:
            self.all_correct = False
        rewards = np.full(2, 1.0 if correct else 0.0)
        self.t += 1
        done = self.t >= self.max_steps
        info = {"correct": correct, "spawned": [], "exited": [],
                "collisions": 0, "warned_actions": 0}
        return StepResult(self._observe(), rewards, done, info)

    def episode_info(self) -> dict:
        return {"success": self.all_correct, "context": int(self.context)}


def make_env(cfg: EnvConfig):
    if cfg.kind == "traffic_junction":
        return TrafficJunction(cfg)
    if cfg.kind == "predator_prey":
        return PredatorPrey(cfg)
    if cfg.kind == "signal":
        return SignalGame(cfg)
    raise ConfigurationError(f"unknown env kind {cfg.kind!r}")
