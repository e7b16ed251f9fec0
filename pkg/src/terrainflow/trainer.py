"""Flow-matching training of control-point samplers.

Trajectories are rolled out with probabilities proportional to the modeled
edge flows (plus ``epsilon + R`` for termination), collected in a replay
pool together with random seed trajectories, and the log-flow model is
fitted by minimizing the squared log mismatch between every visited state's
inflow (exact, over all parents) and outflow (termination reward plus a
subsampled estimate of the non-terminal edges).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .flow_model import FlowParams, init_params, save_checkpoint
from .heightmap import Heightmap
from .mdp import (
    GRID,
    MAX_POINTS,
    TERMINATE,
    Action,
    AddPoint,
    State,
    Trajectory,
    action_id,
    count_feasible,
    feasible_add_ids,
    parents,
    point_from_id,
)
from .scoring import RewardSpec, ScoreWeights, reward_from_beta, score
from .terrain_gen import TerrainGenerator, state_seed

log = logging.getLogger(__name__)

_TERMINATE_ID = -1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, digest: str, value: float):
        super().__init__(f"non-finite flow-matching term {value!r} at state {digest}")
        self.digest = digest


@dataclass(frozen=True)
class SamplerConfig:
    grid: int = GRID
    max_points: int = MAX_POINTS
    explore_prob: float = 0.05
    outflow_samples: int = 2000
    clamp_log_min: float = -20.0
    clamp_log_max: float = 20.0
    output_bias: float = 0.0
    epsilon: float = 1e-6
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_samples: int = 1000
    seed: int = 0
    generator_seed: int = 0
    pool_capacity: int = 512
    seed_trajectories: bool = True
    checkpoint_every: int = 100
    compute_dtype: str = "float64"
    # 0 evaluates every feasible action when sampling; n > 0 proposes n random ones.
    policy_proposals: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.explore_prob <= 1:
            raise ValueError("explore_prob must lie in [0, 1]")
        if self.outflow_samples < 1:
            raise ValueError("outflow_samples must be >= 1")
        if not self.clamp_log_min < self.clamp_log_max:
            raise ValueError("clamp bounds must be ordered")
        if self.batch_size < 1 or self.max_samples < 0:
            raise ValueError("batch_size must be >= 1 and max_samples >= 0")

    @property
    def clamp(self) -> tuple[float, float]:
        return (self.clamp_log_min, self.clamp_log_max)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Evaluation:
    beta: float
    reward: float
    seed: int


class TerrainReward:
    """``R_G(s)``: reward of the terrain generated once from ``s``, cached by state.

    The generator seed of a state is derived from ``base_seed`` and the
    canonical state digest, so a cached value can always be recomputed.
    """

    def __init__(
        self,
        generator: TerrainGenerator,
        spec: RewardSpec,
        weights: ScoreWeights = ScoreWeights(),
        base_seed: int = 0,
    ):
        self.generator = generator
        self.spec = spec
        self.weights = weights
        self.base_seed = base_seed
        self.cache: dict[State, Evaluation] = {}
        self.generator_calls = 0

    def heightmap(self, state: State) -> Heightmap:
        return self.generator(state, state_seed(self.base_seed, state))

    def compute(self, state: State) -> Evaluation:
        seed = state_seed(self.base_seed, state)
        self.generator_calls += 1
        beta = score(self.generator(state, seed), self.weights)
        return Evaluation(beta, reward_from_beta(beta, self.spec), seed)

    def evaluate(self, state: State) -> Evaluation:
        hit = self.cache.get(state)
        if hit is None:
            hit = self.cache[state] = self.compute(state)
        return hit

    def __call__(self, state: State) -> float:
        return self.evaluate(state).reward


class SyntheticReward:
    """Wraps a plain ``state -> reward`` function; beta is reported as NaN."""

    def __init__(self, fn: Callable[[State], float]):
        self.fn = fn
        self.cache: dict[State, Evaluation] = {}
        self.generator_calls = 0

    def evaluate(self, state: State) -> Evaluation:
        hit = self.cache.get(state)
        if hit is None:
            self.generator_calls += 1
            hit = self.cache[state] = Evaluation(math.nan, float(self.fn(state)), 0)
        return hit

    def __call__(self, state: State) -> float:
        return self.evaluate(state).reward


# ---------------------------------------------------------------------------
# sampling


def _policy_logits(model, s: State, term_reward: float, eps: float, clamp, proposals: int, rng) -> tuple[np.ndarray, np.ndarray]:
    ids = feasible_add_ids(s)
    if proposals and len(ids) > proposals:
        chosen = np.sort(rng.choice(len(ids), size=proposals, replace=False))
        scale = math.log(len(ids) / proposals)
        ids = ids[chosen]
        logits = np.clip(model.log_flows(s, ids), *clamp) + scale
    else:
        logits = np.clip(model.policy_log_flows(s)[ids], *clamp)
    return ids, np.concatenate([[math.log(eps + term_reward)], logits])


def _sample_action_id(model, s: State, rng, explore_prob: float, term_reward: float, eps: float, clamp, proposals: int = 0) -> int:
    if s.is_full:
        return _TERMINATE_ID
    if explore_prob > 0 and rng.random() < explore_prob:
        k = int(rng.integers(count_feasible(s)))
        return _TERMINATE_ID if k == 0 else int(feasible_add_ids(s)[k - 1])
    ids, logits = _policy_logits(model, s, term_reward, eps, clamp, proposals, rng)
    probs = np.exp(logits - logits.max())
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, len(cdf) - 1)
    return _TERMINATE_ID if k == 0 else int(ids[k - 1])


def sample_action(
    model,
    s: State,
    rng: np.random.Generator,
    explore_prob: float,
    term_reward: float,
    epsilon: float = 1e-6,
    clamp: tuple[float, float] = (-20.0, 20.0),
) -> Action:
    """Draw an action with probability proportional to its flow.

    Non-terminal edges carry ``exp(clamp(F_log))``, termination carries
    ``epsilon + term_reward``. With probability ``explore_prob`` the action is
    uniform over all feasible ones instead.
    """
    aid = _sample_action_id(model, s, rng, explore_prob, term_reward, epsilon, clamp)
    return TERMINATE if aid == _TERMINATE_ID else AddPoint(point_from_id(aid, s.grid))


def sample_trajectory(model, reward, rng: np.random.Generator, cfg: SamplerConfig, explore_prob: float | None = None) -> Trajectory:
    explore = cfg.explore_prob if explore_prob is None else explore_prob
    s = State((), cfg.grid, cfg.max_points)
    ev = reward.evaluate(s)
    states, actions, rewards, betas = [s], [], [ev.reward], [ev.beta]
    while True:
        aid = _sample_action_id(model, s, rng, explore, ev.reward, cfg.epsilon, cfg.clamp, cfg.policy_proposals)
        if aid == _TERMINATE_ID:
            actions.append(TERMINATE)
            break
        p = point_from_id(aid, s.grid)
        actions.append(AddPoint(p))
        s = s.with_point(p)
        ev = reward.evaluate(s)
        states.append(s)
        rewards.append(ev.reward)
        betas.append(ev.beta)
    return Trajectory(states, actions, rewards, betas)


def random_trajectory(rng: np.random.Generator, length: int, reward, cfg: SamplerConfig) -> Trajectory:
    """Uniformly random feasible AddPoint actions until ``length`` points, then terminate."""
    s = State((), cfg.grid, cfg.max_points)
    ev = reward.evaluate(s)
    states, actions, rewards, betas = [s], [], [ev.reward], [ev.beta]
    for _ in range(length):
        ids = feasible_add_ids(s)
        p = point_from_id(int(ids[rng.integers(len(ids))]), s.grid)
        actions.append(AddPoint(p))
        s = s.with_point(p)
        ev = reward.evaluate(s)
        states.append(s)
        rewards.append(ev.reward)
        betas.append(ev.beta)
    actions.append(TERMINATE)
    return Trajectory(states, actions, rewards, betas)


def seed_trajectories(rng: np.random.Generator, cfg: SamplerConfig, reward) -> list[Trajectory]:
    """One uniformly random trajectory of every length 1..max_points."""
    return [random_trajectory(rng, n, reward, cfg) for n in range(1, cfg.max_points + 1)]


# ---------------------------------------------------------------------------
# flow matching


def _outflow_ids(s: State, n: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    ids = feasible_add_ids(s)
    if len(ids) <= n:
        return ids, 1.0
    return np.sort(rng.choice(ids, size=n, replace=False)), len(ids) / n


def estimate_outflow(
    model,
    s: State,
    n: int = 2000,
    rng: np.random.Generator | None = None,
    clamp: tuple[float, float] = (-20.0, 20.0),
) -> float:
    """Sum of non-terminal outgoing flows of ``s``.

    Exact when there are at most ``n`` feasible AddPoint actions, otherwise the
    mean flow of ``n`` actions drawn without replacement times the action count.
    """
    ids, scale = _outflow_ids(s, n, np.random.default_rng(rng))
    if len(ids) == 0:
        return 0.0
    return scale * float(np.exp(np.clip(model.log_flows(s, ids), *clamp)).sum())


def _state_rng(seed, s: State) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, s.digest_int])


def _loss_blocks(batch: Sequence[Trajectory], cfg: SamplerConfig, seed):
    visited = [(s, r) for t in batch for s, r in zip(t.states[1:], t.rewards[1:])]
    return _state_blocks(visited, cfg, seed, 1.0 / max(len(batch), 1))


def _state_blocks(visited: Sequence[tuple[State, float]], cfg: SamplerConfig, seed, weight: float):
    """One block per non-root state: its parent edges, then its sampled outflow edges."""
    blocks: list[list[tuple[State, np.ndarray]]] = []
    terms = []
    for s, r in visited:
        block = [(parent, np.array([action_id(a.point, s.grid)])) for parent, a in parents(s)]
        scale = 1.0
        if not s.is_full:
            ids, scale = _outflow_ids(s, cfg.outflow_samples, _state_rng(seed, s))
            if len(ids):
                block.append((s, ids))
        blocks.append(block)
        terms.append((s, float(r), scale, len(block) > s.card))
    lo, hi = cfg.clamp
    eps = cfg.epsilon

    def closure(b: int, outputs: list[np.ndarray]):
        s, r, scale, has_out = terms[b]
        f_in = np.array([o[0] for o in outputs[: s.card]])
        e_in = np.exp(np.clip(f_in, lo, hi))
        total_in = eps + e_in.sum()
        total_out = eps + r
        if has_out:
            f_out = outputs[-1]
            e_out = np.exp(np.clip(f_out, lo, hi))
            total_out += scale * e_out.sum()
        diff = math.log(total_in) - math.log(total_out)
        value = diff * diff
        if not math.isfinite(value):
            raise NonFiniteLossError(s.digest, value)
        g = 2.0 * diff * weight
        grads = [np.array([x]) for x in g * e_in / total_in * ((f_in > lo) & (f_in < hi))]
        if has_out:
            grads.append(-g * scale * e_out / total_out * ((f_out > lo) & (f_out < hi)))
        return value, grads

    return blocks, closure


def flow_matching_loss_and_grad(model, batch: Sequence[Trajectory], cfg: SamplerConfig, seed: int = 0):
    """Batch-averaged flow-matching loss and its gradient w.r.t. ``model.arrays``.

    Outflow subsamples are drawn from a generator keyed by ``(seed, state)``,
    so the loss does not depend on the order of trajectories in the batch.
    """
    blocks, closure = _loss_blocks(batch, cfg, seed)
    if not blocks:
        return 0.0, model.zeros_like()
    values, grads = model.blockwise_value_and_grad(blocks, closure, dtype=np.dtype(cfg.compute_dtype))
    return math.fsum(values) / len(batch), grads


def flow_matching_loss(model, batch: Sequence[Trajectory], cfg: SamplerConfig, seed: int = 0) -> float:
    blocks, closure = _loss_blocks(batch, cfg, seed)
    values = [closure(b, [model.log_flows(s, ids) for s, ids in block])[0] for b, block in enumerate(blocks)]
    return math.fsum(values) / max(len(batch), 1)


def fit_exhaustive(model, reward, cfg: SamplerConfig, max_iter: int = 10_000) -> float:
    """Fit a tabular model on every non-root state of an enumerable configuration.

    Minimizes the flow-matching terms of all states at once with L-BFGS and
    returns the final summed loss. Only sensible for tiny grids.
    """
    from scipy.optimize import minimize

    from .mdp import enumerate_states

    visited = [(s, reward(s)) for s in enumerate_states(cfg.grid, cfg.max_points) if s.card]
    blocks, closure = _state_blocks(visited, cfg, 0, 1.0)
    table = model.arrays["table"]

    def objective(x: np.ndarray):
        table[:] = x
        values, grads = model.blockwise_value_and_grad(blocks, closure)
        return math.fsum(values), grads["table"]

    res = minimize(objective, table.copy(), jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": 1e-13, "ftol": 1e-300})
    table[:] = res.x
    model.bump()
    return objective(res.x)[0]


# ---------------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, arrays: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.arrays = arrays
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    checkpoints: list[tuple[int, str]] = field(default_factory=list)

    def betas(self) -> np.ndarray:
        return np.array([r["beta"] for r in self.records])

    def lengths(self) -> np.ndarray:
        return np.array([r["length"] for r in self.records])

    def last(self, n: int) -> list[dict]:
        return self.records[-n:]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def read(cls, path: str | Path) -> TrainLog:
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(x) for x in lines if x.strip()])


def task_metric(betas: Sequence[float], spec: RewardSpec) -> float:
    """Higher is better: median beta for hard, minus median deviation for medium."""
    b = np.asarray(betas, dtype=np.float64)
    if spec.kind.value == "hard":
        return float(np.median(b))
    return -float(np.median(np.abs(b - spec.target_beta)))


def best_checkpoint(log: TrainLog, spec: RewardSpec, window: int = 50) -> tuple[int, str] | None:
    """Checkpoint whose preceding ``window`` samples score best on the task metric."""
    best = None
    for sample, path in log.checkpoints:
        recent = [r["beta"] for r in log.records if sample - window < r["sample"] <= sample]
        if not recent:
            continue
        m = task_metric(recent, spec)
        if best is None or m > best[0]:
            best = (m, sample, path)
    return None if best is None else (best[1], best[2])


def train(
    cfg: SamplerConfig,
    reward,
    model=None,
    out_dir: str | Path | None = None,
    checkpoint_meta: dict | None = None,
    progress: Callable[[dict], None] | None = None,
):
    """Run the off-policy training loop until ``cfg.max_samples`` trajectories were sampled.

    Every iteration samples ``batch_size`` trajectories with the current model
    (exploration on), adds them to a FIFO replay pool that starts with the
    random seed trajectories, and takes one optimizer step on a batch drawn
    uniformly from the pool. Returns ``(model, TrainLog)``.
    """
    if model is None:
        model = init_params(cfg.seed, cfg.output_bias)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "train_log.jsonl").open("w")
        timing_file = (out / "timing.jsonl").open("w")
    pool: deque[Trajectory] = deque(maxlen=cfg.pool_capacity)
    if cfg.seed_trajectories:
        pool.extend(seed_trajectories(np.random.default_rng([cfg.seed, 4]), cfg, reward))
    pick_rng = np.random.default_rng([cfg.seed, 3])
    opt = Adam(model.arrays, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    tlog = TrainLog()
    start = time.perf_counter()
    n_sampled = 0
    step = 0
    next_ckpt = cfg.checkpoint_every
    try:
        while n_sampled < cfg.max_samples:
            k = min(cfg.batch_size, cfg.max_samples - n_sampled)
            fresh = [
                sample_trajectory(model, reward, np.random.default_rng([cfg.seed, 1, n_sampled + j]), cfg)
                for j in range(k)
            ]
            pool.extend(fresh)
            idx = pick_rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
            batch = [pool[i] for i in sorted(idx)]
            loss, grads = flow_matching_loss_and_grad(model, batch, cfg, seed=cfg.seed * 1_000_003 + step)
            opt.step(grads)
            model.bump()
            step += 1
            for t in fresh:
                n_sampled += 1
                rec = {
                    "sample": n_sampled,
                    "length": t.length,
                    "beta": t.betas[-1],
                    "reward": t.rewards[-1],
                    "loss": loss,
                }
                tlog.records.append(rec)
                if out is not None:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                    timing_file.write(json.dumps({"sample": n_sampled, "wall_s": round(time.perf_counter() - start, 3)}) + "\n")
            if out is not None:
                log_file.flush()
                timing_file.flush()
            if progress is not None:
                progress({"step": step, "samples": n_sampled, "loss": loss, "recent": tlog.records[-k:]})
            if cfg.checkpoint_every and (n_sampled >= next_ckpt or n_sampled >= cfg.max_samples):
                name = f"ckpt_{n_sampled:06d}.tfck"
                if out is not None and isinstance(model, FlowParams):
                    save_checkpoint(model, out / name, {"sample": n_sampled, **(checkpoint_meta or {})})
                tlog.checkpoints.append((n_sampled, name))
                while next_ckpt <= n_sampled:
                    next_ckpt += cfg.checkpoint_every
    finally:
        if out is not None:
            log_file.close()
            timing_file.close()
    if out is not None and isinstance(model, FlowParams):
        save_checkpoint(model, out / "final.tfck", {"sample": n_sampled, **(checkpoint_meta or {})})
    return model, tlog
