"""Point-mass swarm, the Reynolds flocking expert, the noisy leader and
dataset generation.

Agents track a commanded target velocity with a first-order lag; there is
no rigid-body model. Datasets are JSON-lines: one header line, then one
line per frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graphcomm import CommGraph, comm_adjacency
from .numkit import ContractError
from .seeding import rng_for

DATASET_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class SingularityError(ArithmeticError):
    pass


@dataclass
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    leader_index: int = 0
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ContractError("positions and velocities must both be n x 3")
        if not 0 <= self.leader_index < n:
            raise ContractError(f"leader index {self.leader_index} out of range for {n} agents")

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    def observations(self) -> np.ndarray:
        return np.concatenate([self.positions, self.velocities], axis=1)


@dataclass
class FlockingGains:
    c_c: float = 0.05
    c_s: float = 1.0
    c_a: float = 0.1

    def __post_init__(self):
        vals = (self.c_c, self.c_s, self.c_a)
        if min(vals) < 0:
            raise ConfigError("flocking gains must be nonnegative")
        if max(vals) == 0:
            raise ConfigError("at least one flocking gain must be positive")


@dataclass
class EnvConfig:
    n_agents: int = 8
    r_com: float = 3.5
    dt: float = 0.05
    episode_len: int = 200
    spawn_box: tuple[float, float, float] = (4.0, 4.0, 4.0)
    min_separation: float = 1.0
    leader_noise: float = 0.02
    max_speed: float = 2.0
    tracking_gain: float = 5.0
    action_noise: float = 0.5
    seed: int = 0
    spawn_attempts: int = 10000

    def __post_init__(self):
        self.spawn_box = tuple(float(x) for x in self.spawn_box)
        if self.n_agents < 1:
            raise ConfigError("n_agents must be at least 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.min_separation <= 0:
            raise ConfigError("min_separation must be positive")
        if self.max_speed <= 0:
            raise ConfigError("max_speed must be positive")
        if self.r_com <= 0:
            raise ConfigError("r_com must be positive")
        if self.action_noise < 0:
            raise ConfigError("action_noise must be nonnegative")
        if len(self.spawn_box) != 3 or min(self.spawn_box) < 0:
            raise ConfigError("spawn_box needs three nonnegative extents")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spawn_box"] = list(self.spawn_box)
        return d


@dataclass
class EpisodeRecord:
    """One episode as stacked arrays over time."""

    positions: np.ndarray  # (T, n, 3)
    velocities: np.ndarray  # (T, n, 3)
    leader_index: np.ndarray  # (T,)
    adjacency: np.ndarray  # (T, n, n) bool, r_com graph
    expert_actions: np.ndarray  # (T, n, 3)
    times: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def state(self, t: int) -> SwarmState:
        time = 0.0 if self.times is None else float(self.times[t])
        return SwarmState(self.positions[t], self.velocities[t], int(self.leader_index[t]), time)

    def graph(self, t: int) -> CommGraph:
        return CommGraph(self.adjacency[t])


# -- expert and dynamics -----------------------------------------------------


def reynolds_expert(state: SwarmState, graph, gains: FlockingGains) -> np.ndarray:
    """Cohesion, separation and alignment target velocities, summed over neighbors."""
    adj = graph.adjacency if isinstance(graph, CommGraph) else np.asarray(graph, dtype=bool)
    p, v = state.positions, state.velocities
    dp = p[None, :, :] - p[:, None, :]  # [i, j] = p_j - p_i
    dv = v[None, :, :] - v[:, None, :]
    dist = np.sqrt((dp * dp).sum(axis=-1))
    if np.any(adj & (dist == 0.0)):
        raise SingularityError("two neighboring agents share a position")
    w = adj.astype(np.float64)
    safe = np.where(adj, dist, 1.0)
    cohesion = (w[..., None] * dp * dist[..., None]).sum(axis=1)
    separation = (w[..., None] * -dp / safe[..., None] ** 3).sum(axis=1)
    speed = np.sqrt((dv * dv).sum(axis=-1))
    alignment = (w[..., None] * dv * speed[..., None]).sum(axis=1)
    return gains.c_c * cohesion + gains.c_s * separation + gains.c_a * alignment


def clamp_speed(u: np.ndarray, max_speed: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    norm = np.sqrt((u * u).sum(axis=-1, keepdims=True))
    scale = np.minimum(1.0, max_speed / np.maximum(norm, 1e-300))
    return u * scale


def expert_command(state: SwarmState, gains: FlockingGains, max_speed: float) -> np.ndarray:
    """Full-graph Reynolds action saturated at the vehicle's speed limit.

    This is what the expert actually commands, so it is the training label and
    the reference for rollout error.
    """
    full = ~np.eye(state.n_agents, dtype=bool)
    return clamp_speed(reynolds_expert(state, full, gains), max_speed)


def step_dynamics(state: SwarmState, actions: np.ndarray, cfg: EnvConfig) -> SwarmState:
    actions = np.asarray(actions, dtype=np.float64)
    if not np.all(np.isfinite(actions)):
        raise ContractError("actions must be finite")
    target = clamp_speed(actions, cfg.max_speed)
    v = state.velocities + cfg.tracking_gain * (target - state.velocities) * cfg.dt
    p = state.positions + v * cfg.dt
    return SwarmState(p, v, state.leader_index, state.time + cfg.dt)


def leader_action(prev_target: np.ndarray, rng: np.random.Generator, sigma: float, max_speed: float) -> np.ndarray:
    """Random-walk target velocity: add Gaussian noise, then clamp the speed."""
    target = np.array(prev_target, dtype=np.float64)
    if sigma > 0:
        target = target + rng.normal(0.0, sigma, 3)
    return clamp_speed(target, max_speed)


def spawn_swarm(cfg: EnvConfig, rng: np.random.Generator, n_agents: int | None = None) -> SwarmState:
    """Uniform positions in the spawn box with a minimum pairwise separation."""
    n = cfg.n_agents if n_agents is None else n_agents
    box = np.asarray(cfg.spawn_box)
    positions = np.empty((n, 3))
    placed = 0
    attempts = 0
    while placed < n:
        if attempts >= cfg.spawn_attempts:
            raise ConfigError(
                f"could not place {n} agents {cfg.min_separation} m apart in box {cfg.spawn_box}"
            )
        attempts += 1
        candidate = (rng.random(3) - 0.5) * box
        if placed:
            d = np.sqrt(((positions[:placed] - candidate) ** 2).sum(axis=1))
            if d.min() < cfg.min_separation:
                continue
        positions[placed] = candidate
        placed += 1
    return SwarmState(positions, np.zeros((n, 3)), leader_index=0, time=0.0)


def run_episode(cfg: EnvConfig, gains: FlockingGains, episode: int) -> EpisodeRecord:
    """One expert episode. With ``action_noise`` > 0 the followers execute a
    perturbed copy of the expert command while the clean command is recorded,
    so the data covers states slightly off the expert's own trajectory."""
    rng = rng_for(cfg.seed, "episode", episode)
    noise_rng = rng_for(cfg.seed, "action_noise", episode)
    state = spawn_swarm(cfg, rng)
    n, T = cfg.n_agents, cfg.episode_len
    leader_target = np.zeros(3)
    pos = np.empty((T, n, 3))
    vel = np.empty((T, n, 3))
    acts = np.empty((T, n, 3))
    adj = np.empty((T, n, n), dtype=bool)
    for t in range(T):
        actions = expert_command(state, gains, cfg.max_speed)
        leader_target = leader_action(leader_target, rng, cfg.leader_noise, cfg.max_speed)
        actions[state.leader_index] = leader_target
        pos[t], vel[t], acts[t] = state.positions, state.velocities, actions
        adj[t] = comm_adjacency(state.positions, cfg.r_com)
        if cfg.action_noise > 0:
            actions = actions + noise_rng.normal(0.0, cfg.action_noise, actions.shape)
            actions[state.leader_index] = leader_target
        state = step_dynamics(state, actions, cfg)
    leader = np.zeros(T, dtype=np.int64)
    return EpisodeRecord(pos, vel, leader, adj, acts, np.arange(T) * cfg.dt)


def generate_dataset(cfg: EnvConfig, gains: FlockingGains, n_episodes: int) -> list[EpisodeRecord]:
    return [run_episode(cfg, gains, e) for e in range(n_episodes)]


# -- serialization -----------------------------------------------------------


def _bitmask_rows(adj: np.ndarray) -> list[int]:
    return [sum(1 << int(j) for j in np.flatnonzero(row)) for row in adj]


def _rows_from_bitmask(rows: list[int], n: int) -> np.ndarray:
    return np.array([[(r >> j) & 1 for j in range(n)] for r in rows], dtype=bool)


def dataset_header(cfg: EnvConfig, gains: FlockingGains, n_episodes: int, extra: dict | None = None) -> dict:
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "env": cfg.to_dict(),
        "gains": asdict(gains),
        "n_episodes": n_episodes,
    }
    if extra:
        header.update(extra)
    return header


def write_dataset(path, episodes: list[EpisodeRecord], cfg: EnvConfig, gains: FlockingGains, extra: dict | None = None) -> int:
    """Write the JSON-lines dataset and return its size in bytes."""
    lines = [json.dumps(dataset_header(cfg, gains, len(episodes), extra), sort_keys=True)]
    for e, ep in enumerate(episodes):
        for t in range(len(ep)):
            frame = {
                "episode": e,
                "t": t,
                "positions": ep.positions[t].tolist(),
                "velocities": ep.velocities[t].tolist(),
                "leader_index": int(ep.leader_index[t]),
                "adjacency": _bitmask_rows(ep.adjacency[t]),
                "expert_actions": ep.expert_actions[t].tolist(),
            }
            lines.append(json.dumps(frame, sort_keys=True))
    data = ("\n".join(lines) + "\n").encode()
    Path(path).write_bytes(data)
    return len(data)


def _parse_header(line: str) -> dict:
    header = json.loads(line)
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise ContractError(f"unsupported dataset format {header.get('format_version')!r}")
    return header


def read_dataset_header(path) -> dict:
    with open(path) as fh:
        return _parse_header(fh.readline())


def read_dataset(path) -> tuple[dict, list[EpisodeRecord]]:
    with open(path) as fh:
        header = _parse_header(fh.readline())
        frames: dict[int, list[dict]] = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                frames.setdefault(rec["episode"], []).append(rec)
    dt = header["env"]["dt"]
    episodes = []
    for e in sorted(frames):
        recs = sorted(frames[e], key=lambda r: r["t"])
        n = len(recs[0]["positions"])
        episodes.append(
            EpisodeRecord(
                positions=np.array([r["positions"] for r in recs], dtype=np.float64),
                velocities=np.array([r["velocities"] for r in recs], dtype=np.float64),
                leader_index=np.array([r["leader_index"] for r in recs], dtype=np.int64),
                adjacency=np.array([_rows_from_bitmask(r["adjacency"], n) for r in recs]),
                expert_actions=np.array([r["expert_actions"] for r in recs], dtype=np.float64),
                times=np.array([r["t"] * dt for r in recs]),
            )
        )
    return header, episodes
