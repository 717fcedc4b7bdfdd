"""Plane-search environment and the Double-DQN agent.

The observation is a stack of the slices at the three most recent planes. Frames are
stored as float16 and shared by reference between consecutive transitions, which keeps
a 15000-transition replay memory at roughly 130 MB.
"""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    N_ACTIONS,
    AgentAction,
    DegenerateNormal,
    Plane,
    StepSizes,
    apply_action,
    dihedral_angle,
    offset_difference,
    plane_from_angles,
    reward,
)
from .nn import AdamState, Network, SpecMismatch, adam_step, copy_params, q_network_spec
from .volume import SLICE_RES, SLICE_SIZE, Annotation, Volume, extract_slice

log = logging.getLogger(__name__)


class EpisodeFinished(RuntimeError):
    pass


class BufferTooSmall(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.9
    lr: float = 5e-5
    sync_period: int = 2000
    max_steps: int = 100
    train_episode_steps: int = 30
    init_angle_range: float = 25.0
    init_dist_range: float = 10.0
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_fraction: float = 0.25
    batch_size: int = 32
    buffer_capacity: int = 15000
    warmup: int = 1000
    angle_step: float = 1.0
    dist_step: float = 0.5
    slice_size: int = SLICE_SIZE
    slice_res: float = SLICE_RES

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        for name in ("sync_period", "max_steps", "train_episode_steps", "batch_size", "buffer_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def steps(self) -> StepSizes:
        return StepSizes(self.angle_step, self.dist_step)

    def epsilon(self, step: int, total_steps: int) -> float:
        horizon = max(1.0, self.eps_fraction * total_steps)
        frac = min(1.0, step / horizon)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


# ---------------------------------------------------------------------------
# environment


@dataclass(frozen=True, eq=False)
class EnvState:
    volume: Volume
    plane: Plane
    history: tuple  # three planes, oldest first
    frames: tuple  # three float16 slices matching ``history``
    step: int
    start: Plane
    max_steps: int
    slice_size: int = SLICE_SIZE
    slice_res: float = SLICE_RES

    @property
    def obs(self) -> np.ndarray:
        return np.stack(self.frames).astype(np.float32)

    @property
    def terminal(self) -> bool:
        return self.step >= self.max_steps


def _frame(v: Volume, p: Plane, size: int, res: float) -> np.ndarray:
    f = extract_slice(v, p, size, res).pixels.astype(np.float16)
    f.setflags(write=False)
    return f


def random_start(gt: Plane, rng: np.random.Generator, angle_range: float, dist_range: float) -> tuple:
    """Uniform offsets on the three direction angles and on d around ``gt``.

    Returns ``(plane, offsets)`` with offsets ``(da, db, dp, dd)``.
    """
    while True:
        off = np.concatenate([rng.uniform(-angle_range, angle_range, 3), rng.uniform(-dist_range, dist_range, 1)])
        a, b, p = gt.angles + off[:3]
        try:
            return plane_from_angles(a, b, p, gt.d + off[3]), off
        except DegenerateNormal:
            continue


def env_reset(
    v: Volume,
    ann: Annotation,
    plane_type: str,
    mode="train_random",
    seed=0,
    cfg: AgentConfig = AgentConfig(),
    angle_range: float | None = None,
    dist_range: float | None = None,
) -> EnvState:
    """Start an episode.

    ``mode`` is ``"train_random"`` (uniform offsets around the ground truth) or a
    :class:`Plane` used directly as the warm start. ``seed`` may be an int or a Generator.
    """
    gt = ann.plane(plane_type)
    if isinstance(mode, Plane):
        start = mode
    elif mode == "train_random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        ar = cfg.init_angle_range if angle_range is None else angle_range
        dr = cfg.init_dist_range if dist_range is None else dist_range
        start, _ = random_start(gt, rng, ar, dr)
    else:
        raise ValueError(f"unknown reset mode {mode!r}")
    f = _frame(v, start, cfg.slice_size, cfg.slice_res)
    return EnvState(v, start, (start,) * 3, (f,) * 3, 0, start, cfg.max_steps, cfg.slice_size, cfg.slice_res)


def env_step(state: EnvState, action, gt: Plane, steps: StepSizes = StepSizes()) -> tuple:
    """Apply an action; returns ``(next_state, reward)``."""
    if state.terminal:
        raise EpisodeFinished(f"episode already ran {state.step} steps")
    new = apply_action(state.plane, AgentAction(int(action)), steps)
    f = _frame(state.volume, new, state.slice_size, state.slice_res)
    nxt = replace(
        state,
        plane=new,
        history=state.history[1:] + (new,),
        frames=state.frames[1:] + (f,),
        step=state.step + 1,
    )
    return nxt, reward(state.plane, new, gt)


# ---------------------------------------------------------------------------
# replay memory


@dataclass(frozen=True, eq=False)
class Transition:
    obs: tuple
    action: int
    reward: int
    next_obs: tuple
    terminal: bool = False

    def __post_init__(self):
        if not 0 <= self.action < N_ACTIONS:
            raise ValueError(f"action index out of range: {self.action}")
        if self.reward not in (-1, 0, 1):
            raise ValueError(f"reward must be -1, 0 or +1, got {self.reward}")


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity: int = 15000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, t: Transition) -> None:
        self._items.append(t)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if len(self) < batch_size:
            raise BufferTooSmall(f"buffer holds {len(self)} < {batch_size} transitions")
        idx = rng.integers(0, len(self), batch_size)
        batch = [self._items[i] for i in idx]
        return {
            "obs": np.stack([np.stack(t.obs) for t in batch]).astype(np.float32),
            "action": np.array([t.action for t in batch]),
            "reward": np.array([t.reward for t in batch], dtype=np.float32),
            "next_obs": np.stack([np.stack(t.next_obs) for t in batch]).astype(np.float32),
            "terminal": np.array([t.terminal for t in batch]),
        }


# ---------------------------------------------------------------------------
# Double DQN


def make_q_network(cfg: AgentConfig = AgentConfig(), seed: int = 0) -> Network:
    return Network(q_network_spec(3, cfg.slice_size, N_ACTIONS), seed=seed, dtype=np.float32)


def ddqn_target(batch: dict, current: Network, target: Network, gamma: float) -> np.ndarray:
    """r + gamma * Q_target(s', argmax_a Q_current(s', a)); just r on terminal transitions."""
    if current.spec != target.spec:
        raise SpecMismatch("current and target networks differ in spec")
    nxt = batch["next_obs"]
    best = np.argmax(current.forward(nxt), axis=1)
    q_eval = target.forward(nxt)[np.arange(len(best)), best]
    r = np.asarray(batch["reward"], dtype=np.float64)
    done = np.asarray(batch["terminal"], dtype=bool)
    return np.where(done, r, r + gamma * q_eval)


class DDQNTrainer:
    """Owns the current/target networks, the optimiser state and the replay memory."""

    def __init__(self, cfg: AgentConfig = AgentConfig(), seed: int = 0, net: Network | None = None):
        self.cfg = cfg
        self.current = net if net is not None else make_q_network(cfg, seed)
        self.target = self.current.clone()
        self.opt = AdamState(lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.rng = np.random.default_rng(seed + 1)
        self.n_updates = 0

    def train_step(self, batch: dict | None = None) -> float:
        """One Adam step on the mean squared TD error of the taken actions."""
        if batch is None:
            batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        y = ddqn_target(batch, self.current, self.target, self.cfg.gamma)
        q = self.current.forward(batch["obs"])
        rows = np.arange(len(y))
        err = q[rows, batch["action"]] - y
        loss = float(np.mean(err**2))
        dq = np.zeros_like(q)
        dq[rows, batch["action"]] = 2.0 * err / len(y)
        self.current.zero_grad()
        self.current.backward(dq, need_input_grad=False)
        adam_step(self.current.params(), self.current.grads(), self.opt)
        self.n_updates += 1
        if self.n_updates % self.cfg.sync_period == 0:
            copy_params(self.current, self.target)
        return loss


def greedy_action(net: Network, state: EnvState) -> tuple:
    q = net.forward(state.obs[None])[0].astype(np.float64)
    return int(np.argmax(q)), q


def train_agent(
    volumes,
    plane_type: str,
    cfg: AgentConfig = AgentConfig(),
    total_steps: int = 20000,
    seed: int = 0,
    log_every: int = 500,
    on_log=None,
    checkpoint_every: int = 0,
    on_checkpoint=None,
) -> tuple:
    """Epsilon-greedy DDQN training on ``volumes`` (a list of (Volume, Annotation)).

    Every environment step adds one transition; once ``cfg.warmup`` transitions are stored,
    every step also performs one ``train_step``. Returns ``(trainer, log_rows)``.
    """
    trainer = DDQNTrainer(cfg, seed)
    rng = np.random.default_rng(seed + 2)
    steps = cfg.steps
    rows, losses, rewards = [], [], []
    state, gt = None, None
    episodes = 0
    for step in range(total_steps):
        if state is None or state.step >= cfg.train_episode_steps:
            v, ann = volumes[rng.integers(len(volumes))]
            gt = ann.plane(plane_type)
            state = env_reset(v, ann, plane_type, "train_random", rng, cfg)
            episodes += 1
        eps = cfg.epsilon(step, total_steps)
        if rng.random() < eps:
            action = int(rng.integers(N_ACTIONS))
        else:
            action, _ = greedy_action(trainer.current, state)
        nxt, r = env_step(state, action, gt, steps)
        # truncation is a time limit, not a terminal state
        trainer.buffer.push(Transition(state.frames, action, r, nxt.frames, False))
        rewards.append(r)
        state = nxt
        if len(trainer.buffer) >= max(cfg.warmup, cfg.batch_size):
            losses.append(trainer.train_step())
        if (step + 1) % log_every == 0 or step + 1 == total_steps:
            row = {
                "step": step + 1,
                "updates": trainer.n_updates,
                "episodes": episodes,
                "epsilon": round(eps, 6),
                "loss": float(np.mean(losses)) if losses else float("nan"),
                "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
            }
            rows.append(row)
            if on_log:
                on_log(row)
            log.info("step %(step)d loss %(loss).4f reward %(mean_reward).3f eps %(epsilon).3f", row)
            losses, rewards = [], []
        if on_checkpoint and checkpoint_every and (step + 1) % checkpoint_every == 0:
            on_checkpoint(step + 1, trainer)
    return trainer, rows


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class EpisodeRecord:
    planes: list = field(default_factory=list)
    q_values: list = field(default_factory=list)
    ang: list = field(default_factory=list)
    dis: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def __len__(self):
        return len(self.planes)

    @property
    def q_array(self) -> np.ndarray:
        return np.array(self.q_values, dtype=float).reshape(-1, N_ACTIONS)

    def write_csv(self, path) -> None:
        header = ["step"] + [f"q{k}" for k in range(N_ACTIONS)] + ["nx", "ny", "nz", "d", "ang_deg", "dis_mm"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, (p, q, a, d) in enumerate(zip(self.planes, self.q_values, self.ang, self.dis)):
                w.writerow([t, *(f"{x:.6f}" for x in q), *(f"{x:.9f}" for x in p.normal), f"{p.d:.9f}", f"{a:.6f}", f"{d:.6f}"])


def run_episode(v: Volume, ann: Annotation, plane_type: str, q_fn, start: Plane, max_steps: int = 100, cfg: AgentConfig = AgentConfig()) -> EpisodeRecord:
    """Greedy rollout from ``start``.

    ``q_fn(state) -> 8 Q-values`` (a :class:`Network` is accepted too). Records the plane,
    Q-values, Ang and Dis at every visited state, so the record has ``max_steps + 1`` rows.
    """
    if isinstance(q_fn, Network):
        net = q_fn

        def q_fn(state):
            return greedy_action(net, state)[1]

    gt = ann.plane(plane_type)
    if max_steps < 0:
        raise ValueError("max_steps must be >= 0")
    # zero steps is a valid rollout (start state only) but not a valid training config
    state = replace(env_reset(v, ann, plane_type, start, cfg=cfg), max_steps=max_steps)
    rec = EpisodeRecord()
    while True:
        q = np.asarray(q_fn(state), dtype=float)
        rec.planes.append(state.plane)
        rec.q_values.append(q)
        rec.ang.append(dihedral_angle(state.plane, gt))
        rec.dis.append(offset_difference(state.plane, gt))
        if state.terminal:
            break
        state, r = env_step(state, int(np.argmax(q)), gt, cfg.steps)
        rec.rewards.append(r)
    return rec


def write_rows_csv(path, rows, header=None) -> None:
    rows = list(rows)
    header = header or (list(rows[0]) if rows else [])
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow(r)
