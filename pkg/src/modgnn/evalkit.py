"""Closed-loop rollouts, flocking metrics and the generalization matrix."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, fields

import numpy as np

from .flocksim import (
    EnvConfig,
    FlockingGains,
    SwarmState,
    expert_command,
    leader_action,
    spawn_swarm,
    step_dynamics,
)
from .graphcomm import comm_adjacency
from .numkit import ContractError, no_grad
from .seeding import rng_for

CSV_HEADER = (
    "variant,K,N,error,leader_dist_mean,leader_dist_std,"
    "cohesion_mean,cohesion_std,separation_mean,separation_std"
).split(",")


class MissingCheckpointError(LookupError):
    pass


# -- geometry -------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def contains(self, p, slack: float = 1e-9) -> bool:
        return float(np.linalg.norm(np.asarray(p) - self.center)) <= self.radius + slack


def _ball_through(points: list[np.ndarray]) -> Sphere:
    """Smallest sphere with every given point on its surface (center in their affine hull)."""
    p0 = points[0]
    if len(points) == 1:
        return Sphere(p0.copy(), 0.0)
    Q = np.array([p - p0 for p in points[1:]])
    gram = Q @ Q.T
    rhs = 0.5 * np.diag(gram)
    lam = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    center = p0 + Q.T @ lam
    radius = max(float(np.linalg.norm(p - center)) for p in points)
    return Sphere(center, radius)


def min_enclosing_sphere(points, seed: int = 0) -> Sphere:
    """Exact minimum enclosing ball by randomized incremental construction.

    Each nesting level fixes one more support point, up to four in 3-D.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractError("need at least one point")
    pts = pts[np.random.default_rng(seed).permutation(len(pts))]
    scale = 1.0 + float(np.abs(pts).max())
    eps = 1e-12 * scale

    def outside(ball: Sphere, p) -> bool:
        return float(np.linalg.norm(p - ball.center)) > ball.radius + eps

    ball = Sphere(pts[0].copy(), 0.0)
    for i in range(1, len(pts)):
        p = pts[i]
        if not outside(ball, p):
            continue
        ball = Sphere(p.copy(), 0.0)
        for j in range(i):
            q = pts[j]
            if not outside(ball, q):
                continue
            ball = _ball_through([p, q])
            for k in range(j):
                r = pts[k]
                if not outside(ball, r):
                    continue
                ball = _ball_through([p, q, r])
                for m in range(k):
                    s = pts[m]
                    if outside(ball, s):
                        ball = _ball_through([p, q, r, s])
    return ball


# -- per-state metrics -----------------------------------------------------


def leader_distance(state: SwarmState) -> float:
    """Distance from the leader to the centroid of everyone else."""
    n = state.n_agents
    if n < 2:
        raise ContractError("leader distance needs at least two agents")
    others = np.delete(state.positions, state.leader_index, axis=0)
    return float(np.linalg.norm(state.positions[state.leader_index] - others.mean(axis=0)))


def cohesion(state: SwarmState) -> float:
    return 2.0 * min_enclosing_sphere(state.positions).radius


def pair_distances(positions: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(positions.shape[0], k=1)
    diff = positions[iu[0]] - positions[iu[1]]
    return np.sqrt((diff * diff).sum(axis=1))


def separation_stats(state: SwarmState) -> tuple[float, float]:
    """Mean and population standard deviation of all pairwise distances."""
    if state.n_agents < 2:
        raise ContractError("separation needs at least two agents")
    d = pair_distances(state.positions)
    return float(d.mean()), float(d.std())


# -- policies ---------------------------------------------------------------


class ModelPolicy:
    def __init__(self, model, mode: str = "centralized"):
        self.model = model
        self.mode = mode
        self.variant = model.cfg.variant
        self.K = model.cfg.K
        self.val_loss = None  # open-loop reference, when the checkpoint records one
        self._caches = None

    @property
    def fixed_n(self) -> int | None:
        return self.model.cfg.n_agents if self.variant == "central" else None

    def reset(self, n_agents: int) -> None:
        if self.fixed_n is not None and self.fixed_n != n_agents:
            raise ContractError(f"central model needs {self.fixed_n} agents, got {n_agents}")
        self._caches = self.model.reset_caches(n_agents)

    def act(self, state: SwarmState, adjacency: np.ndarray) -> np.ndarray:
        with no_grad():
            obs = state.observations()
            if self.mode == "delayed":
                out, self._caches = self.model.step_delayed(obs, adjacency, self._caches)
            else:
                out = self.model.forward(obs, adjacency)
        return out.data


class ExpertPolicy:
    """Reynolds flocking on the full graph, posing as a model."""

    variant = "expert"

    def __init__(self, gains: FlockingGains, K: int = 0, max_speed: float = EnvConfig.max_speed):
        self.gains = gains
        self.K = K
        self.max_speed = max_speed
        self.fixed_n = None

    def reset(self, n_agents: int) -> None:
        pass

    def act(self, state: SwarmState, adjacency: np.ndarray) -> np.ndarray:
        return expert_command(state, self.gains, self.max_speed)


class ZeroPolicy:
    variant = "zero"

    def __init__(self, K: int = 0):
        self.K = K
        self.fixed_n = None

    def reset(self, n_agents: int) -> None:
        pass

    def act(self, state: SwarmState, adjacency: np.ndarray) -> np.ndarray:
        return np.zeros((state.n_agents, 3))


# -- rollouts ---------------------------------------------------------------


@dataclass
class MetricsRow:
    variant: str
    K: int
    N: int
    error: float
    leader_dist_mean: float
    leader_dist_std: float
    cohesion_mean: float
    cohesion_std: float
    separation_mean: float
    separation_std: float

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f.name)) for f in fields(self)[3:])


@dataclass
class RolloutTrace:
    """Per-step values behind a :class:`MetricsRow`."""

    sq_error: list[float]
    leader_dist: list[float]
    cohesion: list[float]
    separations: list[tuple[float, float]]
    expert_sq_norm: list[float]


def rollout_trace(policy, cfg: EnvConfig, gains: FlockingGains, episodes: int, seed: int) -> RolloutTrace:
    """Run ``episodes`` closed-loop episodes from the seed suite ``seed``.

    Followers act on the policy output; the leader follows its random walk.
    The expert is evaluated on the full graph at every visited state, only to
    score the policy.
    """
    n = cfg.n_agents
    trace = RolloutTrace([], [], [], [], [])
    for e in range(episodes):
        rng = rng_for(seed, "rollout", e)
        state = spawn_swarm(cfg, rng)
        policy.reset(n)
        leader_target = np.zeros(3)
        followers = np.arange(n) != state.leader_index
        for _ in range(cfg.episode_len):
            adj = comm_adjacency(state.positions, cfg.r_com)
            expert = expert_command(state, gains, cfg.max_speed)
            actions = np.array(policy.act(state, adj), dtype=np.float64)
            if not np.all(np.isfinite(actions)):
                raise FloatingPointError(f"{policy.variant} produced non-finite actions")
            leader_target = leader_action(leader_target, rng, cfg.leader_noise, cfg.max_speed)
            diff = actions[followers] - expert[followers]
            trace.sq_error.append(float((diff * diff).mean()))
            trace.expert_sq_norm.append(float((expert[followers] ** 2).mean()))
            if n >= 2:
                trace.leader_dist.append(leader_distance(state))
                trace.separations.append(separation_stats(state))
            trace.cohesion.append(cohesion(state))
            actions[state.leader_index] = leader_target
            state = step_dynamics(state, actions, cfg)
    return trace


def summarize(trace: RolloutTrace, variant: str, K: int, N: int) -> MetricsRow:
    # per-step (mean, std) pairs, each averaged over steps and episodes
    seps = np.asarray(trace.separations) if trace.separations else np.full((1, 2), np.nan)
    ld = np.asarray(trace.leader_dist) if trace.leader_dist else np.array([np.nan])
    coh = np.asarray(trace.cohesion)
    return MetricsRow(
        variant=variant,
        K=K,
        N=N,
        error=float(np.mean(trace.sq_error)),
        leader_dist_mean=float(ld.mean()),
        leader_dist_std=float(ld.std()),
        cohesion_mean=float(coh.mean()),
        cohesion_std=float(coh.std()),
        separation_mean=float(seps[:, 0].mean()),
        separation_std=float(seps[:, 1].mean()),
    )


def rollout(policy, cfg: EnvConfig, gains: FlockingGains, episodes: int, seed: int) -> MetricsRow:
    trace = rollout_trace(policy, cfg, gains, episodes, seed)
    return summarize(trace, policy.variant, policy.K, cfg.n_agents)


def _matrix_job(args):
    policy, cfg, gains, episodes, seed = args
    return rollout(policy, cfg, gains, episodes, seed)


def with_agents(cfg: EnvConfig, n: int) -> EnvConfig:
    d = cfg.to_dict()
    d["n_agents"] = n
    return EnvConfig(**d)


def matrix_cells(policies: dict, variants, K_values, N_values) -> list[tuple[str, int, int]]:
    """The (variant, K, N) cells to evaluate; fixed-size models only run at their own N."""
    missing = [f"{v} K={k}" for v in variants for k in K_values if (v, k) not in policies]
    if missing:
        raise MissingCheckpointError("missing checkpoints: " + ", ".join(missing))
    cells = []
    for v in variants:
        for k in K_values:
            fixed = getattr(policies[(v, k)], "fixed_n", None)
            for n in N_values:
                if fixed is not None and n != fixed:
                    continue
                cells.append((v, k, n))
    return cells


def experiment_matrix(
    policies: dict,
    variants,
    K_values,
    N_values,
    cfg: EnvConfig,
    gains: FlockingGains,
    episodes: int,
    seed: int,
    jobs: int = 1,
) -> list[MetricsRow]:
    """Rollouts over the full variant x K x N cross, in a fixed row order."""
    cells = matrix_cells(policies, variants, K_values, N_values)
    work = [(policies[(v, k)], with_agents(cfg, n), gains, episodes, seed) for v, k, n in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_matrix_job, work))
    return [_matrix_job(w) for w in work]


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in astuple(row)])


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            rows.append(
                MetricsRow(
                    variant=rec["variant"],
                    K=int(rec["K"]),
                    N=int(rec["N"]),
                    **{k: float(rec[k]) for k in CSV_HEADER[3:]},
                )
            )
    return rows
