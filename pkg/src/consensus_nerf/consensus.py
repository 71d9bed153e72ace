"""Consensus ADMM over a communication graph of simulated agents.

Every agent keeps its own weights, a dual vector and a cache of the latest
weights received from each neighbour. One outer iteration is: exchange
(possibly skipped when communication is throttled), dual ascent on the cached
disagreement, then ``B`` optimizer steps on the augmented local objective with
the iteration's anchors frozen.
"""

from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .field import EncodingConfig
from .metrics import layer_grad_norms
from .netcore import (OPTIMIZERS, AdamState, ContractError, MlpArchitecture, deserialize_weights, mlp_init,
                      serialize_weights)
from .render import render_loss_and_grad, stratified_t


class GraphError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    """Raised when a local loss turns non-finite; carries the trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class CommGraph:
    n_agents: int
    edges: frozenset

    def neighbors(self, i: int) -> tuple:
        return tuple(sorted({b if a == i else a for a, b in self.edges if i in (a, b)}))

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))


def _is_connected(n: int, edges) -> bool:
    adj = defaultdict(set)
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, stack = {0}, [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


def make_graph(n_agents: int, edges) -> CommGraph:
    if n_agents < 1:
        raise GraphError("a graph needs at least one agent")
    norm = set()
    for a, b in edges:
        a, b = int(a), int(b)
        if a == b:
            raise GraphError(f"self-loop on node {a}")
        if not (0 <= a < n_agents and 0 <= b < n_agents):
            raise GraphError(f"edge ({a}, {b}) references a node outside 0..{n_agents - 1}")
        norm.add((min(a, b), max(a, b)))
    if not _is_connected(n_agents, norm):
        touched = {v for e in norm for v in e}
        isolated = [v for v in range(n_agents) if v not in touched]
        detail = f"node {isolated[0]} isolated" if isolated else "graph has several components"
        raise GraphError(f"communication graph is disconnected: {detail}")
    return CommGraph(n_agents, frozenset(norm))


def build_graph(spec, n_agents: int | None = None) -> CommGraph:
    """Build a topology from ``"ring:N"``, ``"full:N"``, ``"chain:N"``,
    ``"edges:N:0-1,1-2"`` or an explicit edge list plus ``n_agents``."""
    if not isinstance(spec, str):
        if n_agents is None:
            raise GraphError("explicit edge lists need n_agents")
        return make_graph(n_agents, spec)
    kind, _, rest = spec.partition(":")
    try:
        if kind == "edges":
            count, _, pairs = rest.partition(":")
            n = int(count)
            edges = [tuple(int(v) for v in p.split("-")) for p in pairs.split(",") if p.strip()]
        else:
            n = int(rest)
    except ValueError:
        raise GraphError(f"cannot parse graph spec {spec!r}") from None
    if kind == "edges":
        return make_graph(n, edges)
    if kind == "ring":
        edges = [(i, (i + 1) % n) for i in range(n)] if n > 2 else [(i, i + 1) for i in range(n - 1)]
    elif kind == "chain":
        edges = [(i, i + 1) for i in range(n - 1)]
    elif kind == "full":
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        raise GraphError(f"unknown topology {kind!r} in {spec!r}")
    return make_graph(n, edges)


@dataclass(frozen=True)
class ConsensusConfig:
    rho: float = 0.5
    B: int = 5
    K: int = 100
    rays_per_batch: int = 512
    samples_per_ray: int = 64
    comm_frequency: float = 1.0
    seed: int = 0
    lr: float = 5e-4
    lr_decay: float = 1.0
    optimizer: str = "adam"
    rng_streams: str = "per_agent"

    def __post_init__(self):
        if not self.rho > 0:
            raise ContractError("rho must be positive")
        if self.B < 1 or self.K < 0:
            raise ContractError("need B >= 1 and K >= 0")
        if not 0 < self.comm_frequency <= 1:
            raise ContractError("comm_frequency must lie in (0, 1]")
        if self.rays_per_batch < 1 or self.samples_per_ray < 1:
            raise ContractError("rays_per_batch and samples_per_ray must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.rng_streams not in ("per_agent", "shared"):
            raise ContractError("rng_streams must be 'per_agent' or 'shared'")
        if not self.lr > 0 or not self.lr_decay > 0:
            raise ContractError("lr and lr_decay must be positive")

    @property
    def comm_period(self) -> int:
        return max(1, round(1 / self.comm_frequency))


@dataclass(frozen=True)
class CachedWeights:
    theta: np.ndarray
    iteration: int


@dataclass
class AgentState:
    id: int
    theta: np.ndarray
    dual: np.ndarray
    optimizer: AdamState
    objective: object
    neighbor_cache: dict = field(default_factory=dict)

    @property
    def shard(self):
        return getattr(self.objective, "shard", None)


@dataclass(frozen=True)
class ExchangeRecord:
    iteration: int
    agent: int
    neighbor: int
    bytes: int


@dataclass
class ExchangeLog:
    n_agents: int
    records: list = field(default_factory=list)

    def add(self, iteration, agent, neighbor, nbytes):
        self.records.append(ExchangeRecord(iteration, agent, neighbor, nbytes))

    def bytes_received_total(self, agent: int) -> int:
        return sum(r.bytes for r in self.records if r.agent == agent)

    def comm_iterations(self, agent: int) -> list[int]:
        return sorted({r.iteration for r in self.records if r.agent == agent})

    def comm_iterations_count(self, agent: int) -> int:
        return len(self.comm_iterations(agent))

    def bytes_per_iteration(self, agent: int) -> dict[int, int]:
        per = defaultdict(int)
        for r in self.records:
            if r.agent == agent:
                per[r.iteration] += r.bytes
        return dict(per)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    agent: int
    loss: float
    disagreement: float
    layer_grad_norms: tuple = ()


class QuadraticObjective:
    """``||A theta - b||^2``: a convex stand-in for the image loss."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def loss_and_grad(self, theta, rng=None):
        r = self.A @ theta - self.b
        return float(r @ r), 2 * self.A.T @ r


class NerfObjective:
    """Photometric loss over random ray batches drawn from one agent's images."""

    def __init__(self, shard, arch: MlpArchitecture, enc: EncodingConfig, rays_per_batch: int,
                 samples_per_ray: int):
        if len(shard) == 0:
            raise ContractError("empty shard: every agent needs at least one image")
        self.shard = shard
        self.arch, self.enc = arch, enc
        self.rays_per_batch, self.samples_per_ray = rays_per_batch, samples_per_ray
        self.settings = shard.settings
        self.origins, self.dirs, self.colors = shard.ray_table()

    def loss_and_grad(self, theta, rng):
        idx = rng.integers(0, len(self.colors), self.rays_per_batch)
        t = stratified_t(self.rays_per_batch, self.samples_per_ray, self.settings.t_near,
                         self.settings.t_far, rng)
        loss, grad, _ = render_loss_and_grad(theta, self.arch, self.enc, self.origins[idx], self.dirs[idx],
                                             t, self.colors[idx], self.settings)
        return loss, grad


def step_rng(seed: int, agent: int, k: int, b: int, mode: str = "per_agent") -> np.random.Generator:
    """Counter-keyed stream: the same (agent, iteration, step) always yields the same draws."""
    key = agent if mode == "per_agent" else 0
    return np.random.default_rng([seed, key, k, b])


def dual_update(state: AgentState, graph: CommGraph, rho: float) -> np.ndarray:
    """``p + rho * sum_j (theta_i - theta_j)`` against the cached neighbour weights."""
    dual = state.dual.copy()
    for j in graph.neighbors(state.id):
        if j not in state.neighbor_cache:
            raise ContractError(f"agent {state.id} has no cached weights from neighbour {j}")
        dual += rho * (state.theta - state.neighbor_cache[j].theta)
    return dual


def augmented_primal_grad(theta, img_grad, dual, own_anchor, neighbor_anchors, rho):
    """Gradient of ``L(theta) + theta.p + rho * sum_j ||theta - (a_i + a_j)/2||^2``."""
    g = img_grad + dual
    for a_j in neighbor_anchors:
        g = g + 2 * rho * (theta - (own_anchor + a_j) / 2)
    return g


def augmented_objective(theta, img_loss, dual, own_anchor, neighbor_anchors, rho) -> float:
    val = img_loss + float(theta @ dual)
    for a_j in neighbor_anchors:
        d = theta - (own_anchor + a_j) / 2
        val += rho * float(d @ d)
    return val


def exchange_round(agents, graph: CommGraph, k: int, comm_frequency: float, log: ExchangeLog,
                   arch: MlpArchitecture | None = None) -> bool:
    """Deliver every agent's current weights to its neighbours when ``k`` is a
    communication iteration; otherwise leave the caches stale.

    Payloads are NWV1 snapshots taken before any agent receives anything.
    """
    period = max(1, round(1 / comm_frequency))
    if k % period != 0:
        return False
    payloads = {a.id: serialize_weights(a.theta, arch) for a in agents}
    for agent in agents:
        for j in graph.neighbors(agent.id):
            theta_j, _ = deserialize_weights(payloads[j])
            agent.neighbor_cache[j] = CachedWeights(theta_j, k)
            log.add(k, agent.id, j, len(payloads[j]))
    return True


def _lr_at(cfg: ConsensusConfig, step: int) -> float:
    total = max(1, cfg.K * cfg.B)
    return cfg.lr * cfg.lr_decay ** (step / total)


def _primal_steps(agent: AgentState, graph: CommGraph, k: int, cfg: ConsensusConfig):
    """Dual ascent then ``B`` optimizer steps for one agent at iteration ``k``."""
    nbrs = graph.neighbors(agent.id)
    agent.dual = dual_update(agent, graph, cfg.rho)
    own_anchor = agent.theta
    anchors = [agent.neighbor_cache[j].theta for j in nbrs]
    step_fn = OPTIMIZERS[cfg.optimizer]
    theta, opt = agent.theta, agent.optimizer
    losses, g = [], None
    for b in range(cfg.B):
        rng = step_rng(cfg.seed, agent.id, k, b, cfg.rng_streams)
        loss, img_grad = agent.objective.loss_and_grad(theta, rng)
        if not math.isfinite(loss):
            raise FloatingPointError(f"agent {agent.id}: non-finite loss at iteration {k}, step {b}")
        g = augmented_primal_grad(theta, img_grad, agent.dual, own_anchor, anchors, cfg.rho) if nbrs else img_grad
        if cfg.lr_decay != 1.0:
            opt = replace(opt, lr=_lr_at(cfg, k * cfg.B + b))
        theta, opt = step_fn(theta, g, opt)
        losses.append(loss)
    agent.theta, agent.optimizer = theta, opt
    return float(np.mean(losses)), g


@dataclass
class TrainResult:
    weights: list
    duals: list
    log: ExchangeLog
    trace: list
    agents: list


def run_cadmm(graph: CommGraph, objectives, theta_init: np.ndarray, cfg: ConsensusConfig,
              arch: MlpArchitecture | None = None, parallel: bool = False, callback=None) -> TrainResult:
    """Consensus ADMM for any per-agent objective exposing ``loss_and_grad(theta, rng)``.

    ``callback(k, agents)`` runs after each outer iteration. With
    ``parallel=True`` each agent's update runs on its own worker thread with a
    barrier per iteration; results are bit-identical to the sequential run.
    """
    if len(objectives) != graph.n_agents:
        raise ContractError(f"{len(objectives)} objectives for {graph.n_agents} agents")
    theta_init = np.asarray(theta_init)
    agents = [
        AgentState(i, theta_init.copy(), np.zeros_like(theta_init),
                   AdamState.fresh(theta_init.size, theta_init.dtype, lr=cfg.lr), obj)
        for i, obj in enumerate(objectives)
    ]
    log = ExchangeLog(graph.n_agents)
    trace: list[TraceRow] = []
    pool = ThreadPoolExecutor(max_workers=graph.n_agents) if parallel else None

    def work(agent):
        return _primal_steps(agent, graph, k, cfg)

    try:
        for k in range(cfg.K):
            exchange_round(agents, graph, k, cfg.comm_frequency, log, arch)
            try:
                results = list(pool.map(work, agents)) if pool else [work(a) for a in agents]
            except FloatingPointError as exc:
                raise TrainingDivergedError(str(exc), trace) from exc
            for agent, (loss, g) in zip(agents, results):
                dis = max((float(np.linalg.norm(agent.theta.astype(np.float64) - agents[j].theta))
                           for j in graph.neighbors(agent.id)), default=0.0)
                norms = tuple(layer_grad_norms(g, arch)) if arch is not None else ()
                trace.append(TraceRow(k, agent.id, loss, dis, norms))
            if callback is not None:
                callback(k, agents)
    finally:
        if pool:
            pool.shutdown()
    return TrainResult([a.theta for a in agents], [a.dual for a in agents], log, trace, agents)


def initial_weights(arch: MlpArchitecture, cfg: ConsensusConfig, dtype=np.float32) -> np.ndarray:
    return mlp_init(arch, cfg.seed, dtype)


def cadmm_train(graph: CommGraph, shards, arch: MlpArchitecture, enc: EncodingConfig, cfg: ConsensusConfig,
                parallel: bool = False, theta_init=None, callback=None) -> TrainResult:
    """Multi-agent radiance-field training: one shard per graph node, shared initial weights."""
    if len(shards) != graph.n_agents:
        raise ContractError(f"{len(shards)} shards for {graph.n_agents} agents")
    objectives = [NerfObjective(s, arch, enc, cfg.rays_per_batch, cfg.samples_per_ray) for s in shards]
    if theta_init is None:
        theta_init = initial_weights(arch, cfg)
    return run_cadmm(graph, objectives, theta_init, cfg, arch, parallel, callback)


def centralized_train(dataset, arch: MlpArchitecture, enc: EncodingConfig, cfg: ConsensusConfig,
                      theta_init=None):
    """Single-agent baseline: plain mini-batch training on all images.

    Uses the same ``K * B`` step schedule and random streams as agent 0 of
    :func:`cadmm_train`, so it matches a one-node consensus run exactly.
    Returns ``(weights, trace)``.
    """
    objective = NerfObjective(dataset, arch, enc, cfg.rays_per_batch, cfg.samples_per_ray)
    theta = initial_weights(arch, cfg) if theta_init is None else np.asarray(theta_init).copy()
    opt = AdamState.fresh(theta.size, theta.dtype, lr=cfg.lr)
    step_fn = OPTIMIZERS[cfg.optimizer]
    trace = []
    for k in range(cfg.K):
        losses = []
        for b in range(cfg.B):
            rng = step_rng(cfg.seed, 0, k, b, cfg.rng_streams)
            loss, grad = objective.loss_and_grad(theta, rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at iteration {k}, step {b}", trace)
            if cfg.lr_decay != 1.0:
                opt = replace(opt, lr=_lr_at(cfg, k * cfg.B + b))
            theta, opt = step_fn(theta, grad, opt)
            losses.append(loss)
        trace.append(TraceRow(k, 0, float(np.mean(losses)), 0.0, tuple(layer_grad_norms(grad, arch))))
    return theta, trace


def comm_report(log: ExchangeLog, cfg: ConsensusConfig | None = None, baseline_bytes: int = 0) -> list[dict]:
    """Per-agent communication totals next to the centralized (raw data) cost."""
    rows = []
    for agent in range(log.n_agents):
        per_iter = log.bytes_per_iteration(agent)
        count = len(per_iter)
        sizes = set(per_iter.values())
        if len(sizes) > 1:
            raise ContractError(f"agent {agent} received differing byte counts across comm iterations")
        per = sizes.pop() if sizes else 0
        total = log.bytes_received_total(agent)
        if total != per * count:
            raise ContractError(f"agent {agent}: total {total} != {per} x {count}")
        rows.append({
            "agent": agent,
            "comm_frequency": cfg.comm_frequency if cfg is not None else "",
            "bytes_per_comm_iteration": per,
            "comm_iterations": count,
            "total_bytes": total,
            "centralized_bytes": int(baseline_bytes),
        })
    return rows
