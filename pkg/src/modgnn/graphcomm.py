"""Communication graphs, graph shift operators and k-hop message aggregation.

Feature arrays carry agents on axis -2 and features on axis -1, with any
number of leading batch axes; adjacency carries ``(..., n, n)``. Element
``[i, j]`` of a per-neighbor array is the message agent ``i`` received from
agent ``j``.

``f_com`` callables take ``(sender, receiver)``: the sender's aggregated
(k-1)-hop vector (the one vector it transmits for that hop) and the
receiver's own (k-1)-hop aggregate. For an f_com that ignores the receiver
and is additive, applying it to the transmitted sum is the same as summing
it over the sender's set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import ContractError, ShapeError, Tensor, as_tensor


@dataclass(frozen=True)
class CommGraph:
    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ShapeError(f"adjacency must be square, got {adj.shape}")
        if adj.diagonal().any():
            raise ContractError("adjacency must have a zero diagonal")
        if not np.array_equal(adj, adj.T):
            raise ContractError("adjacency must be symmetric")
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_agents(self) -> int:
        return self.adjacency.shape[0]

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def permuted(self, perm) -> CommGraph:
        perm = np.asarray(perm)
        return CommGraph(self.adjacency[np.ix_(perm, perm)])


def _adjacency(graph) -> np.ndarray:
    if isinstance(graph, CommGraph):
        return graph.adjacency
    return np.asarray(graph, dtype=bool)


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[..., :, None, :] - positions[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def comm_adjacency(positions: np.ndarray, r_com: float) -> np.ndarray:
    """Batched version of :func:`build_comm_graph` returning raw boolean arrays."""
    if r_com <= 0:
        raise ContractError("r_com must be positive")
    positions = np.asarray(positions, dtype=np.float64)
    adj = pairwise_distances(positions) < r_com
    n = positions.shape[-2]
    adj[..., np.arange(n), np.arange(n)] = False
    return adj


def build_comm_graph(positions, r_com: float) -> CommGraph:
    return CommGraph(comm_adjacency(positions, r_com))


def full_graph(n: int) -> CommGraph:
    return CommGraph(~np.eye(n, dtype=bool))


@dataclass(frozen=True)
class Gso:
    matrix: np.ndarray
    kind: str


def adjacency_gso(graph) -> Gso:
    return Gso(_adjacency(graph).astype(np.float64), "adjacency")


def laplacian_gso(graph) -> Gso:
    adj = _adjacency(graph).astype(np.float64)
    return Gso(np.diag(adj.sum(axis=1)) - adj, "laplacian")


# -- f_com implementations ------------------------------------------------


class AdjacencyCom:
    """Pass the sender's vector through unchanged (adjacency GSO)."""

    gso_kind = "adjacency"

    def __call__(self, sender: Tensor, receiver: Tensor) -> Tensor:
        return sender + 0.0 * receiver


class LaplacianCom:
    """Subtract the incoming vector from the receiver's local one (Laplacian GSO)."""

    gso_kind = "laplacian"

    def __call__(self, sender: Tensor, receiver: Tensor) -> Tensor:
        return receiver - sender


# -- neighborhood data ----------------------------------------------------


@dataclass
class NeighborhoodData:
    """Per-hop sets of received vectors for every agent.

    ``sets[k]`` has shape ``(..., n, m_k, d)`` and ``masks[k]`` shape
    ``(..., n, m_k)``; only rows where the mask is true belong to the set.
    Hop 0 is the singleton holding the agent's own compressed observation.
    Single-agent data drops the agent axis: ``(m_k, d)`` with ``(m_k,)`` masks.
    """

    sets: list[Tensor]
    masks: list[np.ndarray]

    @property
    def K(self) -> int:
        return len(self.sets) - 1

    @classmethod
    def from_sets(cls, hop_sets) -> NeighborhoodData:
        """Single-agent data from plain lists of vectors, one list per hop."""
        width = None
        for vectors in hop_sets:
            for v in vectors:
                width = len(v)
                break
            if width is not None:
                break
        if width is None:
            raise ShapeError("cannot infer vector width from empty sets")
        sets, masks = [], []
        for vectors in hop_sets:
            arr = np.asarray(vectors, dtype=np.float64).reshape(-1, width)
            if arr.shape[0] == 0:
                arr = np.zeros((1, width))
                mask = np.zeros(1, dtype=bool)
            else:
                mask = np.ones(arr.shape[0], dtype=bool)
            sets.append(Tensor(arr))
            masks.append(mask)
        if masks[0].sum() != 1:
            raise ContractError("hop 0 must hold exactly one vector")
        return cls(sets, masks)

    def agent_sets(self, i: int, batch: tuple = ()) -> list[np.ndarray]:
        """The actual set members for agent ``i`` (optionally inside a batch index)."""
        out = []
        for s, m in zip(self.sets, self.masks):
            vals = s.data[batch + (i,)]
            mask = m[batch + (i,)]
            out.append(vals[mask])
        return out

    def sums(self) -> list[np.ndarray]:
        """Per-hop neighborhood sums; empty sets sum to zero vectors."""
        return [(s.data * m[..., None]).sum(axis=-2) for s, m in zip(self.sets, self.masks)]


def _masked(y: Tensor, adj: np.ndarray) -> Tensor:
    return y * adj[..., None].astype(np.float64)


def aggregate_khop_centralized(c, graph, K: int, f_com) -> NeighborhoodData:
    """All K hops in one synchronous pass (no communication delay)."""
    if K < 0:
        raise ContractError(f"K must be nonnegative, got {K}")
    c = as_tensor(c)
    adj = _adjacency(graph)
    n = c.shape[-2]
    if adj.shape[-1] != n:
        raise ShapeError(f"graph has {adj.shape[-1]} agents, features have {n}")
    one = np.ones(c.shape[:-1] + (1,), dtype=bool)
    sets = [c.reshape(c.shape[:-1] + (1, c.shape[-1]))]
    masks = [one]
    agg = c
    for _ in range(K):
        y = _masked(f_com(_as_sender(agg), _as_receiver(agg)), adj)
        sets.append(y)
        masks.append(np.broadcast_to(adj, y.shape[:-1]))
        agg = y.sum(axis=-2)
    return NeighborhoodData(sets, masks)


def _as_sender(agg: Tensor) -> Tensor:
    # (..., n, d) -> (..., 1, n, d): row i of the result sees every sender j
    return agg.reshape(agg.shape[:-2] + (1,) + agg.shape[-2:])


def _as_receiver(agg: Tensor) -> Tensor:
    return agg.reshape(agg.shape[:-1] + (1, agg.shape[-1]))


@dataclass
class DelayCache:
    """Aggregates for hops 0..K-1 from the previous timestep, per agent.

    These K vectors are exactly what each agent transmits to each neighbor
    per timestep, whatever the swarm size.
    """

    K: int
    n_agents: int
    aggregates: list[np.ndarray | None] = field(default_factory=list)
    exchanges: int = 0

    def valid_hops(self) -> int:
        return sum(a is not None for a in self.aggregates)


def reset_cache(n_agents: int, K: int) -> DelayCache:
    if K < 0:
        raise ContractError(f"K must be nonnegative, got {K}")
    return DelayCache(K=K, n_agents=n_agents, aggregates=[None] * K)


def message_step_delayed(cache: DelayCache, c_t, graph_t, f_com) -> tuple[NeighborhoodData, DelayCache]:
    """One timestep of the cached scheme: a single exchange round.

    Hop k at time t is built from neighbors' (k-1)-hop aggregates cached at
    t-1, over the edges present at t. Hops with nothing cached yet are empty.
    Returns the neighborhood data and a new cache; the input cache is not
    modified.
    """
    c_t = as_tensor(c_t)
    adj = _adjacency(graph_t)
    n = c_t.shape[-2]
    if cache.n_agents != n or adj.shape[-1] != n:
        raise ContractError(
            f"cache holds {cache.n_agents} agents, features {n}, graph {adj.shape[-1]}"
        )
    K = cache.K
    sets = [c_t.reshape(c_t.shape[:-1] + (1, c_t.shape[-1]))]
    masks = [np.ones(c_t.shape[:-1] + (1,), dtype=bool)]
    new_aggs: list[np.ndarray | None] = [c_t.data.copy()] if K > 0 else []
    for k in range(1, K + 1):
        prev = cache.aggregates[k - 1]
        if prev is None:
            shape = c_t.shape[:-1] + (n, c_t.shape[-1])
            y = Tensor(np.zeros(shape))
            mask = np.zeros(shape[:-1], dtype=bool)
        else:
            prev_t = Tensor(prev)
            y = _masked(f_com(_as_sender(prev_t), _as_receiver(prev_t)), adj)
            mask = np.broadcast_to(adj, y.shape[:-1])
        sets.append(y)
        masks.append(mask)
        if k < K:
            new_aggs.append(None if prev is None else y.data.sum(axis=-2))
    new_cache = DelayCache(K=K, n_agents=n, aggregates=new_aggs, exchanges=cache.exchanges + 1)
    return NeighborhoodData(sets, masks), new_cache

