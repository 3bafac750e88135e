"""PPO with value and advantage clipping, trained under the constraint curriculum.

Pinning the schedule to phase C (``curriculum.NO_CURRICULUM``) gives the flat
"standard PPO" baseline with otherwise identical settings.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import curriculum as cur
from .instancegen import CLASS_CODES, ClassSpec, GenConfig, generate
from .policy import (
    DTYPE,
    HeteroAttentionPolicy,
    PolicyDims,
    Trajectory,
    init_params,
    load_checkpoint,
    log_prob_and_entropy,
    rollout,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    value_clip: float = 0.2
    adv_clip: float = 5.0
    gamma: float = 1.0
    gae_lambda: float = 0.95
    entropy_coef: float | None = None  # None: take the phase default
    value_coef: float = 0.5
    lr_peak: float = 1e-4
    lr_floor: float = 1e-5
    instances_per_epoch: int = 10_000
    batch_instances: int = 32
    minibatch_instances: int = 8
    update_epochs: int = 4
    multistart: int | None = None  # None: one start per customer
    max_grad_norm: float = 1.0
    reward_scale: float = 0.01
    adv_eps: float = 1e-8

    def __post_init__(self):
        if self.clip_eps < 0 or self.adv_clip <= 0:
            raise ValueError("clip_eps must be >= 0 and adv_clip > 0")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.instances_per_epoch < 1 or self.batch_instances < 1 or self.minibatch_instances < 1:
            raise ValueError("batch sizes must be positive")

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.instances_per_epoch / self.batch_instances)

    @classmethod
    def from_dict(cls, data: dict) -> "PPOConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown PPO config keys: {sorted(unknown)}")
        return cls(**data)


# -- advantages ---------------------------------------------------------------------


def gae(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float) -> np.ndarray:
    """Generalised advantage estimates for one terminated episode (bootstrap value 0)."""
    adv = np.zeros(len(rewards))
    running = 0.0
    next_value = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv


def compute_advantages(trajectories: Sequence[Trajectory], config: PPOConfig, normalize: bool = True):
    """Flat (advantages, returns) over all steps, trajectory order.

    Rewards are multiplied by ``reward_scale`` first; the critic works in those
    units. With ``normalize`` the advantages are standardised over the batch and
    clamped to ``+-adv_clip``.
    """
    steps = [t for t in trajectories if len(t)]
    if not steps:
        raise ValueError("empty trajectory batch")
    advs, rets = [], []
    for t in steps:
        r = np.asarray(t.rewards) * config.reward_scale
        v = np.asarray(t.values)
        a = gae(r, v, config.gamma, config.gae_lambda)
        advs.append(a)
        rets.append(a + v)
    adv = torch.tensor(np.concatenate(advs), dtype=DTYPE)
    ret = torch.tensor(np.concatenate(rets), dtype=DTYPE)
    if normalize:
        std = adv.std(unbiased=False) if adv.numel() > 1 else torch.zeros((), dtype=DTYPE)
        adv = (adv - adv.mean()) / (std + config.adv_eps)
        adv = adv.clamp(-config.adv_clip, config.adv_clip)
    return adv, ret


# -- losses / update ----------------------------------------------------------------


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip_eps: float) -> torch.Tensor:
    return torch.min(ratio * adv, ratio.clamp(1 - clip_eps, 1 + clip_eps) * adv)


def clipped_value_loss(values, old_values, returns, value_clip: float) -> torch.Tensor:
    v_clip = old_values + (values - old_values).clamp(-value_clip, value_clip)
    return torch.max((values - returns) ** 2, (v_clip - returns) ** 2)


@dataclass
class LossStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    updates: int = 0


def ppo_loss(policy, trajectories, adv, ret, config: PPOConfig, entropy_coef: float):
    ev = log_prob_and_entropy(trajectories, policy)
    old_logp = torch.tensor([x for t in trajectories for x in t.log_probs], dtype=DTYPE)
    old_v = torch.tensor([x for t in trajectories for x in t.values], dtype=DTYPE)
    ratio = torch.exp(ev.log_probs - old_logp)
    policy_loss = -clipped_surrogate(ratio, adv, config.clip_eps).mean()
    value_loss = clipped_value_loss(ev.values, old_v, ret, config.value_clip).mean()
    entropy = ev.entropies.mean()
    loss = policy_loss + config.value_coef * value_loss - entropy_coef * entropy
    clip_frac = ((ratio - 1).abs() > config.clip_eps).double().mean()
    return loss, policy_loss, value_loss, entropy, clip_frac


def ppo_update(
    policy: HeteroAttentionPolicy,
    optimizer: torch.optim.Optimizer,
    trajectories: Sequence[Trajectory],
    config: PPOConfig,
    generator: torch.Generator | None = None,
) -> LossStats:
    """Several epochs of minibatch PPO over one batch, grouped by instance."""
    trajs = [t for t in trajectories if len(t)]
    stats = LossStats()
    if not trajs:
        return stats
    entropy_coef = config.entropy_coef if config.entropy_coef is not None else 0.0
    adv_all, ret_all = compute_advantages(trajs, config)
    offsets = np.cumsum([0] + [len(t) for t in trajs])

    groups: dict[int, list[int]] = {}
    for k, t in enumerate(trajs):
        groups.setdefault(id(t.instance), []).append(k)
    group_list = list(groups.values())

    for _ in range(config.update_epochs):
        perm = torch.randperm(len(group_list), generator=generator).tolist()
        for s in range(0, len(perm), config.minibatch_instances):
            ks = [k for g in perm[s:s + config.minibatch_instances] for k in group_list[g]]
            idx = torch.from_numpy(np.concatenate([np.arange(offsets[k], offsets[k + 1]) for k in ks]))
            loss, pl, vl, ent, cf = ppo_loss(
                policy, [trajs[k] for k in ks], adv_all[idx], ret_all[idx], config, entropy_coef)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite PPO loss: policy={pl.item()} value={vl.item()} entropy={ent.item()}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm)
            optimizer.step()
            stats.policy_loss += pl.item()
            stats.value_loss += vl.item()
            stats.entropy += ent.item()
            stats.clip_fraction += cf.item()
            stats.updates += 1
    n = max(stats.updates, 1)
    stats.policy_loss /= n
    stats.value_loss /= n
    stats.entropy /= n
    stats.clip_fraction /= n
    return stats


# -- learning-rate schedule ---------------------------------------------------------


def lr_schedule(
    global_step: int,
    phase: cur.PhaseId,
    config: PPOConfig,
    schedule: cur.Schedule,
    total_epochs: int,
    steps_per_epoch: int = 1,
) -> float:
    """Cosine decay ``lr_peak -> lr_floor`` inside each phase, restarting at boundaries."""
    first, last = schedule.phase_span(phase, total_epochs)
    start = first * steps_per_epoch
    length = (last - first) * steps_per_epoch
    t = global_step - start
    if length <= 1 or t <= 0:
        return config.lr_peak
    t = min(t, length - 1)
    return config.lr_floor + 0.5 * (config.lr_peak - config.lr_floor) * (1 + math.cos(math.pi * t / (length - 1)))


# -- journal ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    mean_cost: float
    feasibility_rate: float
    policy_loss: float
    value_loss: float
    entropy: float
    lr: float
    wall_time: float


@dataclass
class TrainingJournal:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("journal is append-only, one record per epoch")
        self.records.append(rec)

    def rows(self, include_timing: bool = True) -> list[dict]:
        out = []
        for r in self.records:
            d = asdict(r)
            if not include_timing:
                d.pop("wall_time")
            out.append(d)
        return out

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.rows(include_timing), indent=1)

    def to_csv(self, include_timing: bool = True) -> str:
        rows = self.rows(include_timing)
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        (out / "journal.json").write_text(self.to_json())
        (out / "journal.csv").write_text(self.to_csv())

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "TrainingJournal":
        return cls([EpochRecord(**r) for r in rows])

    def phases(self) -> list[str]:
        return [r.phase for r in self.records]


# -- training loop ------------------------------------------------------------------


def training_instance(base: GenConfig, seed: int, k: int):
    """The k-th training instance of a run; classes cycle, seeds derive from (seed, k)."""
    s = int(np.random.SeedSequence(seed, spawn_key=(k,)).generate_state(1, dtype=np.uint64)[0])
    code = CLASS_CODES[k % len(CLASS_CODES)]
    return generate(replace(base, class_spec=ClassSpec.from_code(code), seed=s))


def _save_state(path, policy, optimizer, generator, journal, epoch, seed, extra):
    save_checkpoint(policy, path, epoch=epoch, seed=seed, optimizer=optimizer.state_dict(),
                    rng=generator.get_state(), journal=journal.rows(), **extra)


def train(
    gen_config: GenConfig = GenConfig(),
    schedule: cur.Schedule = cur.Schedule(),
    config: PPOConfig = PPOConfig(),
    epochs: int = 30,
    seed: int = 0,
    dims: PolicyDims = PolicyDims(),
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> tuple[HeteroAttentionPolicy, TrainingJournal]:
    """Curriculum PPO. Reproducible from ``seed``; checkpoints at phase boundaries and the end."""
    policy = init_params(seed, dims)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.lr_peak)
    generator = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    journal = TrainingJournal()
    start_epoch = 0
    if resume is not None:
        policy, meta = load_checkpoint(resume, expect_dims=dims)
        optimizer = torch.optim.Adam(policy.parameters(), lr=config.lr_peak)
        optimizer.load_state_dict(meta["optimizer"])
        generator.set_state(meta["rng"])
        journal = TrainingJournal.from_rows(meta["journal"])
        start_epoch = meta["epoch"]
        seed = meta["seed"]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    spe = config.batches_per_epoch
    prev_phase = cur.phase_for_epoch(start_epoch - 1, schedule) if start_epoch > 0 else None

    for epoch in range(start_epoch, epochs):
        t0 = time.perf_counter()
        phase = cur.phase_for_epoch(epoch, schedule)
        if phase != prev_phase:
            log.info("epoch %d: entering phase %s", epoch, phase.name)
            if out is not None and prev_phase is not None:
                _save_state(out / f"phase_{prev_phase.name}.pt", policy, optimizer, generator, journal,
                            epoch, seed, {"phase": prev_phase.name})
        prev_phase = phase
        constraints = cur.constraint_set(phase)
        cfg = cur.hyperparams_for_phase(phase, config)

        costs, n_episodes, n_feasible = [], 0, 0
        agg = LossStats()
        lr = cfg.lr_peak
        for b in range(spe):
            lr = lr_schedule(epoch * spe + b, phase, cfg, schedule, epochs, spe)
            for g in optimizer.param_groups:
                g["lr"] = lr
            first = epoch * config.instances_per_epoch + b * config.batch_instances
            count = min(config.batch_instances, config.instances_per_epoch - b * config.batch_instances)
            trajs = []
            for k in range(first, first + count):
                inst = training_instance(gen_config, seed, k)
                ms = min(cfg.multistart or inst.n_customers, inst.n_customers)
                res = rollout(inst, policy, constraints, "sample", ms, generator)
                trajs.extend(res.trajectories)
                for t in res.trajectories:
                    n_episodes += 1
                    if t.feasible:
                        n_feasible += 1
                        costs.append(t.cost)
            st = ppo_update(policy, optimizer, trajs, cfg, generator)
            agg.policy_loss += st.policy_loss
            agg.value_loss += st.value_loss
            agg.entropy += st.entropy
            agg.updates += 1

        rec = EpochRecord(
            epoch=epoch,
            phase=phase.name,
            mean_cost=float(np.mean(costs)) if costs else math.nan,
            feasibility_rate=n_feasible / max(n_episodes, 1),
            policy_loss=agg.policy_loss / agg.updates,
            value_loss=agg.value_loss / agg.updates,
            entropy=agg.entropy / agg.updates,
            lr=lr,
            wall_time=time.perf_counter() - t0,
        )
        journal.append(rec)
        log.info("epoch %d [%s] cost=%.2f feas=%.3f lr=%.2e", epoch, phase.name, rec.mean_cost,
                 rec.feasibility_rate, lr)
        if out is not None:
            journal.write(out)

    if out is not None:
        _save_state(out / "final.pt", policy, optimizer, generator, journal, epochs, seed,
                    {"phase": prev_phase.name if prev_phase is not None else None})
        journal.write(out)
    return policy, journal


def load_train_config(path: str | Path) -> dict:
    """YAML/JSON training config with optional sections ``ppo``, ``schedule``, ``gen``, ``policy``."""
    import yaml

    data = yaml.safe_load(Path(path).read_text()) or {}
    unknown = set(data) - {"ppo", "schedule", "gen", "policy", "epochs", "seed"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    gen = dict(data.get("gen", {}))
    if "class" in gen:
        gen["class_spec"] = gen.pop("class")
    return {
        "config": PPOConfig.from_dict(data.get("ppo", {})),
        "schedule": cur.Schedule(**data.get("schedule", {})),
        "gen_config": GenConfig(**gen),
        "dims": PolicyDims(**data.get("policy", {})),
        "epochs": data.get("epochs", 30),
        "seed": data.get("seed", 0),
    }
