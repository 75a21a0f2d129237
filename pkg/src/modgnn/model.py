"""Node update, layer composition and the model zoo.

A layer is a :class:`SubmoduleSet`: ``f_input`` compresses all previous
layer outputs, ``f_com`` shapes messages in transit, and the node update
computes ``f_final(sum_k f_mid[k](sum_{z in Y_k} f_pre[k](z)))``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import graphcomm
from .graphcomm import DelayCache, NeighborhoodData
from .numkit import (
    ContractError,
    MlpSpec,
    ShapeError,
    Tensor,
    activate,
    as_tensor,
    concat,
    init_mlp,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)

VARIANTS = (
    "modgnn_mlp",
    "modgnn_mlp_no_fpre",
    "modgnn_mlp_no_fmid",
    "gcn",
    "gcn_ffinal",
    "central",
)
DECENTRALIZED = VARIANTS[:-1]


# -- submodules -----------------------------------------------------------


class Identity:
    def __call__(self, x: Tensor) -> Tensor:
        return x

    def named_parameters(self, prefix=""):
        return []


class Mlp:
    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.params = init_mlp(spec)

    @property
    def out_width(self) -> int:
        return self.spec.layer_widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.spec, self.params, x)

    def named_parameters(self, prefix=""):
        names = []
        for layer in range(self.spec.n_layers):
            names += [f"{prefix}W{layer}", f"{prefix}b{layer}"]
        return list(zip(names, self.params))


class Linear:
    """Bias-free ``x @ A``; the per-hop filter tap of a graph convolution."""

    def __init__(self, in_width: int, out_width: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        bound = np.sqrt(1.0 / in_width)
        self.weight = Tensor(rng.uniform(-bound, bound, (in_width, out_width)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight

    def named_parameters(self, prefix=""):
        return [(f"{prefix}A", self.weight)]


class Pointwise:
    def __init__(self, activation: str = "tanh"):
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return activate(x, self.activation)

    def named_parameters(self, prefix=""):
        return []


class ConcatInput:
    """Identity ``f_input``: the concatenation of every previous layer output."""

    def __call__(self, previous: Sequence[Tensor]) -> Tensor:
        return concat(list(previous), axis=-1)

    def named_parameters(self, prefix=""):
        return []


def _named(module, prefix):
    fn = getattr(module, "named_parameters", None)
    return fn(prefix) if fn is not None else []


@dataclass
class SubmoduleSet:
    """One layer's five plug-in functions. ``f_pre``/``f_mid`` hold one
    callable per hop; repeating the same object shares its parameters."""

    f_input: Callable
    f_com: Callable
    f_pre: list
    f_mid: list
    f_final: Callable

    def __post_init__(self):
        if len(self.f_pre) != len(self.f_mid):
            raise ContractError("f_pre and f_mid need one entry per hop")

    @classmethod
    def shared(cls, f_input, f_com, f_pre, f_mid, f_final, K: int) -> SubmoduleSet:
        return cls(f_input, f_com, [f_pre] * (K + 1), [f_mid] * (K + 1), f_final)

    @property
    def K(self) -> int:
        return len(self.f_pre) - 1

    def named_parameters(self, prefix=""):
        out = list(_named(self.f_input, f"{prefix}f_input."))
        seen: set[int] = set()
        for label, mods in (("f_pre", self.f_pre), ("f_mid", self.f_mid)):
            for k, mod in enumerate(mods):
                if id(mod) in seen:
                    continue
                seen.add(id(mod))
                out += _named(mod, f"{prefix}{label}.k{k}.")
        out += _named(self.f_final, f"{prefix}f_final.")
        return out


# -- the node update and a single layer -----------------------------------


def node_update(z: NeighborhoodData, s: SubmoduleSet) -> Tensor:
    """Two sums and three submodules; works for one agent or a whole batch."""
    if z.K != s.K:
        raise ShapeError(f"neighborhood data has K={z.K}, submodules K={s.K}")
    total = None
    for k in range(z.K + 1):
        h = s.f_pre[k](z.sets[k])
        h = (h * z.masks[k][..., None].astype(np.float64)).sum(axis=-2)
        m = s.f_mid[k](h)
        if total is not None and m.shape != total.shape:
            raise ShapeError(f"f_mid output widths differ across hops: {total.shape} vs {m.shape}")
        total = m if total is None else total + m
    return s.f_final(total)


def apply_f_input(s: SubmoduleSet, previous: Sequence) -> Tensor:
    return s.f_input([as_tensor(p) for p in previous])


def forward_layer(
    s: SubmoduleSet,
    previous: Sequence,
    graph,
    mode: str = "centralized",
    cache: DelayCache | None = None,
):
    """Evaluate one layer for every agent.

    Centralized mode returns the outputs; delayed mode also needs the layer's
    cache and returns ``(outputs, new_cache)``.
    """
    c = apply_f_input(s, previous)
    if mode == "centralized":
        z = graphcomm.aggregate_khop_centralized(c, graph, s.K, s.f_com)
        return node_update(z, s)
    if mode == "delayed":
        if cache is None:
            raise ContractError("delayed mode needs a cache")
        z, cache = graphcomm.message_step_delayed(cache, c, graph, s.f_com)
        return node_update(z, s), cache
    raise ValueError(f"unknown aggregation mode {mode!r}")


def gcn_forward(X, gso, taps: Sequence, activation: str = "tanh") -> Tensor:
    """Dense graph convolution ``sigma(sum_k S^k X A_k)``."""
    X = as_tensor(X)
    S = np.asarray(getattr(gso, "matrix", gso), dtype=np.float64)
    taps = [as_tensor(a) for a in taps]
    width = taps[0].shape[-1]
    if any(a.shape[-1] != width for a in taps):
        raise ShapeError("filter taps must share an output width")
    total = None
    shifted = X
    for k, A in enumerate(taps):
        if k > 0:
            shifted = as_tensor(S) @ shifted
        term = shifted @ A
        total = term if total is None else total + term
    return activate(total, activation)


# -- model zoo --------------------------------------------------------------


@dataclass
class ModelConfig:
    variant: str = "modgnn_mlp"
    K: int = 2
    L: int = 1
    obs_dim: int = 6
    action_dim: int = 3
    hidden: int = 32
    msg_width: int = 10
    layer_width: int = 10
    activation: str = "tanh"
    gcn_activation: str = "tanh"
    share_hops: bool = False
    n_agents: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown model variant {self.variant!r}")
        if self.K < 0:
            raise ContractError("K must be nonnegative")
        if self.L < 1:
            raise ContractError("L must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _mlp(widths, cfg: ModelConfig, seed) -> Mlp:
    return Mlp(MlpSpec(tuple(widths), cfg.activation, seed))


def _seed_stream(cfg: ModelConfig):
    seq = np.random.SeedSequence([cfg.seed, 0x6D6F64])
    while True:
        yield int(seq.spawn(1)[0].generate_state(1)[0])


def _per_hop(make, K: int, share: bool) -> list:
    if share:
        return [make()] * (K + 1)
    return [make() for _ in range(K + 1)]


def _layer(cfg: ModelConfig, in_width: int, out_width: int, seeds) -> SubmoduleSet:
    h, msg, K = cfg.hidden, cfg.msg_width, cfg.K
    v = cfg.variant
    deep = [h, h]
    if v in ("gcn", "gcn_ffinal"):
        tap_out = out_width if v == "gcn" else msg
        f_pre = [Identity()] * (K + 1)
        f_mid = [Linear(in_width, tap_out, next(seeds)) for _ in range(K + 1)]
        if v == "gcn":
            f_final = Pointwise(cfg.gcn_activation)
        else:
            f_final = _mlp([msg, *deep, out_width], cfg, next(seeds))
    else:
        if v == "modgnn_mlp_no_fpre":
            f_pre = [Identity()] * (K + 1)
            pre_out = in_width
        else:
            f_pre = _per_hop(lambda: _mlp([in_width, *deep, msg], cfg, next(seeds)), K, cfg.share_hops)
            pre_out = msg
        if v == "modgnn_mlp_no_fmid":
            f_mid = [Identity()] * (K + 1)
            mid_out = pre_out
        else:
            f_mid = _per_hop(lambda: _mlp([pre_out, *deep, msg], cfg, next(seeds)), K, cfg.share_hops)
            mid_out = msg
        f_final = _mlp([mid_out, *deep, out_width], cfg, next(seeds))
    return SubmoduleSet(ConcatInput(), graphcomm.LaplacianCom(), f_pre, f_mid, f_final)


class ModGnn:
    """Stack of layers; each layer sees the outputs of all earlier layers."""

    def __init__(self, cfg: ModelConfig, layers: list[SubmoduleSet]):
        self.cfg = cfg
        self.layers = layers

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def named_parameters(self):
        out = []
        for l, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layer{l}.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def forward_all(self, obs, graph) -> list[Tensor]:
        outputs = [as_tensor(obs)]
        for layer in self.layers:
            outputs.append(forward_layer(layer, outputs, graph))
        return outputs

    def forward(self, obs, graph) -> Tensor:
        obs = as_tensor(obs)
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ShapeError(f"observation width {obs.shape[-1]} != {self.cfg.obs_dim}")
        return self.forward_all(obs, graph)[-1]

    __call__ = forward

    def reset_caches(self, n_agents: int) -> list[DelayCache]:
        return [graphcomm.reset_cache(n_agents, layer.K) for layer in self.layers]

    def step_delayed(self, obs, graph, caches: list[DelayCache]) -> tuple[Tensor, list[DelayCache]]:
        outputs = [as_tensor(obs)]
        new = []
        for layer, cache in zip(self.layers, caches):
            x, c = forward_layer(layer, outputs, graph, "delayed", cache)
            outputs.append(x)
            new.append(c)
        return outputs[-1], new


class CentralMlp:
    """Fixed-size swarm model: all observations in, all actions out."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        n = cfg.n_agents
        h = cfg.hidden
        seed = next(_seed_stream(cfg))
        self.mlp = _mlp([n * cfg.obs_dim, h, h, h, n * cfg.action_dim], cfg, seed)

    @property
    def variant(self) -> str:
        return "central"

    def named_parameters(self):
        return self.mlp.named_parameters("central.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def forward(self, obs, graph=None) -> Tensor:
        obs = as_tensor(obs)
        n = self.cfg.n_agents
        if obs.shape[-2] != n:
            raise ContractError(f"central model was built for {n} agents, got {obs.shape[-2]}")
        if obs.shape[-1] != self.cfg.obs_dim:
            raise ShapeError(f"observation width {obs.shape[-1]} != {self.cfg.obs_dim}")
        lead = obs.shape[:-2]
        flat = obs.reshape(lead + (n * self.cfg.obs_dim,))
        return self.mlp(flat).reshape(lead + (n, self.cfg.action_dim))

    __call__ = forward

    def reset_caches(self, n_agents: int) -> list:
        return []

    def step_delayed(self, obs, graph, caches):
        return self.forward(obs), caches


def build_model(cfg: ModelConfig):
    if cfg.variant == "central":
        return CentralMlp(cfg)
    seeds = _seed_stream(cfg)
    layers = []
    widths = [cfg.obs_dim]
    for l in range(cfg.L):
        out = cfg.action_dim if l == cfg.L - 1 else cfg.layer_width
        layers.append(_layer(cfg, sum(widths), out, seeds))
        widths.append(out)
    return ModGnn(cfg, layers)


def model_forward(model, obs, graph) -> Tensor:
    return model.forward(obs, graph)


def load_params(model, arrays: dict[str, np.ndarray]) -> None:
    named = model.named_parameters()
    missing = [name for name, _ in named if name not in arrays]
    if missing or len(arrays) != len(named):
        raise ContractError(f"checkpoint does not match model parameters (missing {missing})")
    for name, p in named:
        if arrays[name].shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
        p.data = np.array(arrays[name], dtype=np.float64)


def save_model(path, model, extra: dict | None = None) -> None:
    cfg = model.cfg
    header = {
        "model_variant": cfg.variant,
        "K": cfg.K,
        "L": cfg.L,
        "seed": cfg.seed,
        "model_config": cfg.to_dict(),
    }
    if extra:
        header.update(extra)
    save_checkpoint(path, model.named_parameters(), header)


def load_model(path):
    header, arrays = load_checkpoint(path)
    model = build_model(ModelConfig(**header["model_config"]))
    load_params(model, arrays)
    return model, header
