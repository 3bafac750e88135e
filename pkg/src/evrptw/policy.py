"""Heterogeneous graph-attention policy with FiLM-conditioned pointer decoding.

Encoder: per-type input embedders, then ``L`` layers in which the query
projection depends on the querying node's type (depot / customer / station).
Every layer mixes a k-nearest-neighbour attention branch (with a learned
distance bias) and a full-graph branch through a per-node sigmoid gate.

Decoder: the dynamic vehicle context produces a per-dimension scale and shift
(FiLM) applied to all node embeddings; a context query scores every node,
scores are clipped with ``C * tanh`` and masked entries get probability 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import env as E
from .model import ConstraintSet, Instance, Solution

CHECKPOINT_FORMAT = "evrptw-policy/1"
CTX_DIM = 7
CUSTOMER_FEATURES = 6
DTYPE = torch.float64


@dataclass(frozen=True)
class PolicyDims:
    hidden: int = 128
    heads: int = 8
    layers: int = 3
    knn: int = 8
    logit_clip: float = 10.0
    # the critic reads the shared encoder; by default its loss does not train it
    critic_detach: bool = True

    def __post_init__(self):
        if self.hidden <= 0 or self.heads <= 0 or self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} must be a positive multiple of heads={self.heads}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")


@dataclass
class NodeEmbeddings:
    nodes: torch.Tensor  # (n_nodes, H)
    summary: torch.Tensor  # (H,)
    instance: Instance


def phase_onehot(constraints: ConstraintSet) -> tuple[float, float, float]:
    if constraints.time_windows:
        return (0.0, 0.0, 1.0)
    if constraints.battery:
        return (0.0, 1.0, 0.0)
    return (1.0, 0.0, 0.0)


def dynamic_context(state: E.EnvState) -> np.ndarray:
    """Normalised clock, battery, remaining load, served fraction, phase one-hot."""
    inst = state.instance
    return np.array([
        min(max(state.clock / inst.horizon, 0.0), 1.0),
        min(max(state.battery / inst.battery_capacity, 0.0), 1.0),
        (inst.capacity - state.load_used) / inst.capacity,
        state.n_visited / inst.n_customers,
        *phase_onehot(state.constraints),
    ])


def node_features(instance: Instance) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    T = instance.horizon
    xy = torch.tensor(instance.coords, dtype=DTYPE)
    # windows reaching past the horizon are equivalent to closing at it
    cust = [
        [n.x, n.y, n.demand / instance.capacity, min(n.tw_open, T) / T, min(n.tw_close, T) / T,
         n.service_time / T]
        for n in instance.nodes[1:instance.n_customers + 1]
    ]
    cust_t = torch.tensor(cust, dtype=DTYPE).reshape(-1, CUSTOMER_FEATURES)
    return xy[:1], cust_t, xy[instance.n_customers + 1:]


def knn_mask(instance: Instance, k: int) -> torch.Tensor:
    """True where node i may attend to node j in the local branch (self always allowed)."""
    n = instance.n_nodes
    k = min(k, instance.n_customers + instance.n_stations)
    order = np.argsort(instance.dist, axis=1, kind="stable")
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        neigh = [j for j in order[i] if j != i][:k]
        mask[i, neigh] = True
        mask[i, i] = True
    return torch.from_numpy(mask)


class HeteroAttentionLayer(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_depot = nn.Linear(hidden, hidden, bias=False)
        self.q_customer = nn.Linear(hidden, hidden, bias=False)
        self.q_station = nn.Linear(hidden, hidden, bias=False)
        self.k_proj = nn.Linear(hidden, hidden, bias=False)
        self.v_proj = nn.Linear(hidden, hidden, bias=False)
        self.dist_scale = nn.Parameter(torch.ones(heads))
        self.gate = nn.Linear(2 * hidden, 1)
        self.out_proj = nn.Linear(hidden, hidden)
        self.norm1 = nn.LayerNorm(hidden)
        self.ff = nn.Sequential(nn.Linear(hidden, 2 * hidden), nn.GELU(), nn.Linear(2 * hidden, hidden))
        self.norm2 = nn.LayerNorm(hidden)

    def queries(self, h: torch.Tensor, n_customers: int) -> torch.Tensor:
        return torch.cat([
            self.q_depot(h[:1]),
            self.q_customer(h[1:n_customers + 1]),
            self.q_station(h[n_customers + 1:]),
        ])

    def _attend(self, q, k, v, bias):
        n, hidden = q.shape
        dk = hidden // self.heads
        Q = q.view(n, self.heads, dk).transpose(0, 1)
        K = k.view(n, self.heads, dk).transpose(0, 1)
        V = v.view(n, self.heads, dk).transpose(0, 1)
        scores = Q @ K.transpose(1, 2) / math.sqrt(dk)
        if bias is not None:
            scores = scores + bias
        return (torch.softmax(scores, dim=-1) @ V).transpose(0, 1).reshape(n, hidden)

    def attend_global(self, q, k, v, dist, local):
        return self._attend(q, k, v, None)

    def attend_local(self, q, k, v, dist, local):
        bias = -self.dist_scale[:, None, None] * dist[None]
        bias = bias.masked_fill(~local[None], float("-inf"))
        return self._attend(q, k, v, bias)

    def mix(self, h, n_customers, dist, local):
        q = self.queries(h, n_customers)
        k, v = self.k_proj(h), self.v_proj(h)
        loc = self.attend_local(q, k, v, dist, local)
        glob = self.attend_global(q, k, v, dist, local)
        g = torch.sigmoid(self.gate(torch.cat([loc, glob], dim=-1)))
        return (1 - g) * loc + g * glob

    def forward(self, h, n_customers, dist, local):
        h = self.norm1(h + self.out_proj(self.mix(h, n_customers, dist, local)))
        return self.norm2(h + self.ff(h))


class HeteroAttentionPolicy(nn.Module):
    """All learnable tensors of the encoder, FiLM conditioner, pointer decoder and critic."""

    def __init__(self, dims: PolicyDims = PolicyDims()):
        super().__init__()
        H = dims.hidden
        self.dims = dims
        self.embed_depot = nn.Linear(2, H)
        self.embed_customer = nn.Linear(CUSTOMER_FEATURES, H)
        self.embed_station = nn.Linear(2, H)
        self.layers = nn.ModuleList(HeteroAttentionLayer(H, dims.heads) for _ in range(dims.layers))
        self.film = nn.Linear(CTX_DIM, 2 * H)
        self.query_proj = nn.Linear(2 * H, H)
        self.value_head = nn.Sequential(nn.Linear(H + CTX_DIM, H), nn.Tanh(), nn.Linear(H, 1))
        self.to(DTYPE)

    # -- encoder ---------------------------------------------------------------

    def encode(self, instance: Instance) -> NodeEmbeddings:
        depot, cust, stat = node_features(instance)
        h = torch.cat([self.embed_depot(depot), self.embed_customer(cust), self.embed_station(stat)])
        dist = torch.tensor(instance.dist, dtype=DTYPE)
        local = knn_mask(instance, self.dims.knn)
        for layer in self.layers:
            h = layer(h, instance.n_customers, dist, local)
        return NodeEmbeddings(nodes=h, summary=h.mean(dim=0), instance=instance)

    # -- decoder ---------------------------------------------------------------

    def modulate(self, emb: NodeEmbeddings, ctx: torch.Tensor) -> torch.Tensor:
        """FiLM: (T, n, H) embeddings scaled and shifted per context row."""
        H = self.dims.hidden
        gb = self.film(ctx)
        gamma, beta = 1.0 + gb[:, :H], gb[:, H:]
        return gamma[:, None, :] * emb.nodes[None] + beta[:, None, :]

    def logits(self, emb: NodeEmbeddings, current: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        mod = self.modulate(emb, ctx)
        cur = mod[torch.arange(len(current)), current]
        q = self.query_proj(torch.cat([cur, emb.summary.expand_as(cur)], dim=-1))
        scores = torch.einsum("th,tnh->tn", q, mod) / math.sqrt(self.dims.hidden)
        return self.dims.logit_clip * torch.tanh(scores)

    def log_probs(self, emb, current, ctx, mask: torch.Tensor) -> torch.Tensor:
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("every decode step needs at least one legal action")
        return torch.log_softmax(self.logits(emb, current, ctx).masked_fill(~mask, float("-inf")), dim=-1)

    def value(self, emb: NodeEmbeddings, ctx: torch.Tensor) -> torch.Tensor:
        summary = emb.summary.detach() if self.dims.critic_detach else emb.summary
        x = torch.cat([summary.expand(len(ctx), -1), ctx], dim=-1)
        return self.value_head(x).squeeze(-1)


def init_params(seed: int, dims: PolicyDims = PolicyDims()) -> HeteroAttentionPolicy:
    """Deterministic init: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    LayerNorm keeps unit scale / zero shift and the distance bias scale starts at 1.
    """
    policy = HeteroAttentionPolicy(dims)
    gen = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    with torch.no_grad():
        for module in policy.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                if module.bias is not None:
                    module.bias.copy_(torch.rand(module.bias.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
    return policy


def encode(instance: Instance, params: HeteroAttentionPolicy) -> NodeEmbeddings:
    return params.encode(instance)


def decode_step(embeddings: NodeEmbeddings, state: E.EnvState, context, mask, params) -> np.ndarray:
    """Probability distribution over nodes for one decision."""
    mask_t = torch.as_tensor(np.asarray(mask, dtype=bool))[None]
    ctx = torch.as_tensor(np.asarray(context, dtype=np.float64))[None]
    with torch.no_grad():
        lp = params.log_probs(embeddings, torch.tensor([state.position]), ctx, mask_t)
    return lp.exp()[0].numpy()


def masked_entropy(logp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    safe = torch.where(mask, logp, torch.zeros_like(logp))
    return -(safe.exp() * safe).masked_fill(~mask, 0.0).sum(-1)


# -- rollouts ------------------------------------------------------------------------


@dataclass
class Trajectory:
    instance: Instance
    constraints: ConstraintSet
    start_customer: int | None
    positions: list[int] = field(default_factory=list)
    contexts: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    feasible: bool = False
    cost: float = math.inf
    routes: tuple = ()

    def __len__(self):
        return len(self.actions)


@dataclass
class RolloutResult:
    best: Solution
    trajectories: list[Trajectory]
    start_costs: list[float]


def _choose(logp: torch.Tensor, mode: str, generator: torch.Generator | None) -> torch.Tensor:
    if mode == "greedy":
        return logp.argmax(dim=-1)
    if mode == "sample":
        return torch.multinomial(logp.exp(), 1, generator=generator).squeeze(-1)
    raise ValueError(f"unknown decoding mode {mode!r}")


def rollout(
    instance: Instance,
    params: HeteroAttentionPolicy,
    constraints: ConstraintSet,
    mode: str = "greedy",
    multistart: int | None = None,
    generator: torch.Generator | None = None,
) -> RolloutResult:
    """Decode ``multistart`` episodes, episode i forced to open at customer i+1.

    Returns the cheapest feasible solution (ties go to the lower start index),
    or the least-bad infeasible one flagged ``feasible=False``.
    """
    n = instance.n_customers
    starts = n if multistart is None else multistart
    if not 1 <= starts <= n:
        raise ValueError(f"multistart must be in [1, {n}], got {starts}")
    with torch.no_grad():
        emb = params.encode(instance)
        states = [E.reset(instance, constraints, start_customer=i + 1) for i in range(starts)]
        trajs = [Trajectory(instance, constraints, i + 1) for i in range(starts)]
        while True:
            live, masks = [], []
            for i, s in enumerate(states):
                if s.terminal:
                    continue
                m = E.feasible_actions(s)
                if not m.any():
                    states[i], out = E.mark_infeasible(s)
                    if trajs[i].rewards:
                        trajs[i].rewards[-1] += out.reward
                    continue
                live.append(i)
                masks.append(m)
            if not live:
                break
            ctx = np.stack([dynamic_context(states[i]) for i in live])
            cur = torch.tensor([states[i].position for i in live])
            ctx_t = torch.from_numpy(ctx)
            mask_t = torch.from_numpy(np.stack(masks))
            logp = params.log_probs(emb, cur, ctx_t, mask_t)
            vals = params.value(emb, ctx_t)
            acts = _choose(logp, mode, generator)
            if not torch.isfinite(logp.gather(1, acts[:, None])).all():
                raise FloatingPointError("policy produced a non-finite log-probability")
            for row, i in enumerate(live):
                a = int(acts[row])
                t = trajs[i]
                t.positions.append(states[i].position)
                t.contexts.append(ctx[row])
                t.masks.append(masks[row])
                t.actions.append(a)
                t.log_probs.append(float(logp[row, a]))
                t.values.append(float(vals[row]))
                states[i], out = E.step(states[i], a)
                t.rewards.append(out.reward)

    solutions = []
    for s, t in zip(states, trajs):
        sol = E.state_solution(s)
        t.feasible = sol.feasible and not s.infeasible
        t.cost = sol.cost
        t.routes = sol.routes
        solutions.append(sol)

    feasible = [k for k in range(starts) if trajs[k].feasible]
    if feasible:
        best = min(feasible, key=lambda k: (solutions[k].cost, k))
    else:
        # least-bad infeasible: most customers served
        best = max(range(starts), key=lambda k: (states[k].n_visited, -k))
    return RolloutResult(best=solutions[best], trajectories=trajs,
                         start_costs=[t.cost if t.feasible else math.inf for t in trajs])


# -- PPO inputs ---------------------------------------------------------------------


@dataclass
class Evaluation:
    log_probs: torch.Tensor
    entropies: torch.Tensor
    values: torch.Tensor


def log_prob_and_entropy(trajectories: Sequence[Trajectory], params: HeteroAttentionPolicy) -> Evaluation:
    """Recompute per-step log-probs, entropies and values under ``params`` (with grad).

    Steps are returned in trajectory order, concatenated.
    """
    by_instance: dict[int, list[int]] = {}
    for k, t in enumerate(trajectories):
        for m in t.masks:
            if m.shape != (t.instance.n_nodes,):
                raise ValueError("trajectory masks do not match its instance (stale trajectory)")
        for a, m in zip(t.actions, t.masks):
            if not m[a]:
                raise ValueError("trajectory contains a masked-out action")
        by_instance.setdefault(id(t.instance), []).append(k)

    pieces: dict[int, tuple] = {}
    for ks in by_instance.values():
        ks = [k for k in ks if len(trajectories[k])]
        if not ks:
            continue
        emb = params.encode(trajectories[ks[0]].instance)
        cur = torch.tensor([p for k in ks for p in trajectories[k].positions])
        ctx = torch.from_numpy(np.stack([c for k in ks for c in trajectories[k].contexts]))
        mask = torch.from_numpy(np.stack([m for k in ks for m in trajectories[k].masks]))
        act = torch.tensor([a for k in ks for a in trajectories[k].actions])
        logp_all = params.log_probs(emb, cur, ctx, mask)
        lp = logp_all.gather(1, act[:, None]).squeeze(1)
        ent = masked_entropy(logp_all, mask)
        val = params.value(emb, ctx)
        off = 0
        for k in ks:
            L = len(trajectories[k])
            pieces[k] = (lp[off:off + L], ent[off:off + L], val[off:off + L])
            off += L

    order = [k for k in range(len(trajectories)) if k in pieces]
    if not order:
        empty = torch.zeros(0, dtype=DTYPE)
        return Evaluation(empty, empty, empty)
    return Evaluation(
        log_probs=torch.cat([pieces[k][0] for k in order]),
        entropies=torch.cat([pieces[k][1] for k in order]),
        values=torch.cat([pieces[k][2] for k in order]),
    )


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(params: HeteroAttentionPolicy, path: str | Path, **extra) -> None:
    payload = {"format": CHECKPOINT_FORMAT, "dims": asdict(params.dims),
               "state_dict": params.state_dict(), **extra}
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expect_dims: PolicyDims | None = None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    dims = PolicyDims(**payload["dims"])
    if expect_dims is not None and dims != expect_dims:
        raise ValueError(f"checkpoint dims {dims} do not match expected {expect_dims}")
    policy = HeteroAttentionPolicy(dims)
    policy.load_state_dict(payload["state_dict"])
    return policy, {k: v for k, v in payload.items() if k not in ("format", "dims", "state_dict")}


def greedy_solution(instance: Instance, params, constraints: ConstraintSet, multistart: int | None = 1) -> Solution:
    return rollout(instance, params, constraints, "greedy", multistart).best
