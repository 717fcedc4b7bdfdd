"""Learned stopping for the plane agent.

A rollout produces a sequence of 8-vectors of Q-values. The best step to stop at is the
one with the largest angle-and-distance improvement (ADI) over the start. A small model
reads the Q-value prefix seen so far and regresses that step; at run time the agent stops
at the first step whose prediction does not lie in the future.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import N_ACTIONS
from .nn import AdamState, Network, NetworkSpec, adam_step, l1_loss, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

VARIANTS = ("fc", "rnn", "lstm")
SEQ_LEN = 100
N_FEATURES = N_ACTIONS + 2  # normalised Q-values, valid flag, relative time


class EmptyDataset(ValueError):
    pass


@dataclass
class QTrajectory:
    q: np.ndarray  # (T, 8)
    ang: np.ndarray  # (T,)
    dis: np.ndarray  # (T,)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1, N_ACTIONS)
        self.ang = np.asarray(self.ang, dtype=float).reshape(-1)
        self.dis = np.asarray(self.dis, dtype=float).reshape(-1)
        if not (len(self.q) == len(self.ang) == len(self.dis)):
            raise ValueError("Q rows and metric arrays must have equal length")
        if len(self.q) == 0:
            raise ValueError("trajectory must contain at least the start state")

    def __len__(self):
        return len(self.q)

    @property
    def start(self) -> tuple:
        return float(self.ang[0]), float(self.dis[0])

    @classmethod
    def from_episode(cls, rec) -> "QTrajectory":
        return cls(rec.q_array, rec.ang, rec.dis)


def compute_adi(traj: QTrajectory) -> np.ndarray:
    """ADI_t = (Ang_0 - Ang_t) + (Dis_0 - Dis_t), degrees and millimetres weighted equally."""
    return (traj.ang[0] - traj.ang) + (traj.dis[0] - traj.dis)


def optimal_stop(traj: QTrajectory) -> int:
    """Step of maximal ADI, found as the lowest Ang + Dis (same argmax, no rounding slack)."""
    return int(np.argmin(traj.ang + traj.dis))  # keeps the earliest of tied optima


def baseline_stop(traj: QTrajectory, policy: str) -> int:
    if policy == "max_step":
        return len(traj) - 1
    if policy == "min_q":
        return int(np.argmin(traj.q.max(axis=1)))
    raise ValueError(f"unknown baseline policy {policy!r}")


# ---------------------------------------------------------------------------
# dataset


@dataclass
class ATDataset:
    q: np.ndarray  # (N, L, 8), zero padded
    mask: np.ndarray  # (N, L) bool
    labels: np.ndarray  # (N,) int
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def max_len(self) -> int:
        return self.q.shape[1]

    def subset(self, idx) -> "ATDataset":
        idx = np.asarray(idx)
        return ATDataset(self.q[idx], self.mask[idx], self.labels[idx], [self.ids[i] for i in idx])

    def write_csv(self, path, labels_path, trajectories=None) -> None:
        """One row per valid step; Ang/Dis columns are filled when trajectories are given."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory", "step"] + [f"q{k}" for k in range(N_ACTIONS)] + ["ang_deg", "dis_mm"])
            for i, tid in enumerate(self.ids):
                tr = trajectories[i] if trajectories is not None else None
                for t in range(int(self.mask[i].sum())):
                    metrics = [f"{tr.ang[t]:.6f}", f"{tr.dis[t]:.6f}"] if tr is not None else ["", ""]
                    w.writerow([tid, t, *(f"{x:.6f}" for x in self.q[i, t])] + metrics)
        Path(labels_path).write_text(json.dumps({str(t): int(l) for t, l in zip(self.ids, self.labels)}, indent=1))


def pad_sequences(seqs, max_len: int = SEQ_LEN) -> tuple:
    q = np.zeros((len(seqs), max_len, N_ACTIONS))
    mask = np.zeros((len(seqs), max_len), dtype=bool)
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=float)[:max_len]
        q[i, : len(s)] = s
        mask[i, : len(s)] = True
    return q, mask


def build_at_dataset(trajectories, ids=None, max_len: int = SEQ_LEN) -> ATDataset:
    """Pads each Q-sequence to ``max_len``; the label is the trajectory's optimal stop."""
    trajectories = list(trajectories)
    q, mask = pad_sequences([t.q for t in trajectories], max_len)
    labels = np.array([min(optimal_stop(t), max_len - 1) for t in trajectories], dtype=int)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(trajectories))]
    return ATDataset(q, mask, labels, ids)


def threshold_rule_dataset(n: int, seed: int, max_len: int = SEQ_LEN, threshold: float = 0.0) -> ATDataset:
    """Synthetic sequences whose label is the first step where max-Q falls below ``threshold``.

    The max-Q path drifts downwards with autocorrelated noise, so it can dip and recover;
    only the first crossing counts. Sequences that never cross are labelled with the last step.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(max_len)
    q = np.empty((n, max_len, N_ACTIONS))
    for i in range(n):
        start = rng.uniform(0.4, 1.2)
        slope = rng.uniform(0.012, 0.08)
        noise = np.zeros(max_len)
        for k in range(1, max_len):
            noise[k] = 0.7 * noise[k - 1] + rng.normal(0.0, 0.06)
        level = start - slope * t + noise
        spread = rng.uniform(0.05, 0.4, N_ACTIONS)
        q[i] = level[:, None] - spread[None, :] * rng.uniform(0.0, 1.0, (max_len, N_ACTIONS))
        q[i, :, rng.integers(N_ACTIONS)] = level  # one action attains the level exactly
    below = q.max(axis=2) < threshold
    labels = np.where(below.any(axis=1), below.argmax(axis=1), max_len - 1)
    return ATDataset(q, np.ones((n, max_len), dtype=bool), labels.astype(int), [str(i) for i in range(n)])


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class TerminationConfig:
    variant: str = "lstm"
    hidden: int = 64
    epochs: int = 200
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.hidden <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("hidden, batch_size must be positive and epochs non-negative")


def termination_spec(variant: str, hidden: int = 64, max_len: int = SEQ_LEN) -> NetworkSpec:
    if variant == "fc":
        return NetworkSpec(
            (max_len * N_FEATURES,),
            (
                {"kind": "dense", "n_in": max_len * N_FEATURES, "n_out": hidden},
                {"kind": "relu"},
                {"kind": "dense", "n_in": hidden, "n_out": 1},
            ),
        )
    cell = {"rnn": "vanilla", "lstm": "lstm"}[variant]
    return NetworkSpec(
        (0, N_FEATURES),
        (
            {"kind": "recurrent", "n_in": N_FEATURES, "hidden": hidden, "cell": cell},
            {"kind": "dense", "n_in": hidden, "n_out": 1},
        ),
    )


class TerminationModel:
    """Stop-step regressor over Q-value prefixes; outputs are step / (max_len - 1)."""

    def __init__(self, variant: str = "lstm", hidden: int = 64, max_len: int = SEQ_LEN, seed: int = 0,
                 q_mean: float = 0.0, q_std: float = 1.0):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not (np.isfinite(q_mean) and np.isfinite(q_std) and q_std > 0):
            raise ValueError("normalisation constants must be finite with positive scale")
        self.variant = variant
        self.hidden = hidden
        self.max_len = max_len
        self.q_mean = float(q_mean)
        self.q_std = float(q_std)
        self.net = Network(termination_spec(variant, hidden, max_len), seed=seed)

    @property
    def scale(self) -> float:
        return float(self.max_len - 1)

    def features(self, q: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """(N, L, 8) Q-values and (N, L) mask to (N, L, 10) network inputs."""
        m = mask[..., None].astype(float)
        t = np.broadcast_to(np.arange(q.shape[1]) / self.scale, mask.shape)[..., None]
        return np.concatenate([(q - self.q_mean) / self.q_std * m, m, t * m], axis=-1)

    def _fc_forward(self, feats: np.ndarray) -> np.ndarray:
        """FC outputs for every prefix at once.

        Masking the steps after t and applying the first dense layer equals a cumulative
        sum of per-step contributions, so all L prefixes cost one pass.
        """
        dense1, relu, dense2 = self.net.layers
        N, L, F = feats.shape
        W1 = dense1.params["W"].reshape(L, F, -1)
        z = np.cumsum(np.einsum("nlf,lfh->nlh", feats, W1), axis=1) + dense1.params["b"]
        h = np.maximum(z, 0.0)
        self._fc_cache = (feats, z, h)
        return (h @ dense2.params["W"] + dense2.params["b"])[..., 0]

    def _fc_backward(self, dout: np.ndarray) -> None:
        dense1, relu, dense2 = self.net.layers
        feats, z, h = self._fc_cache
        N, L, F = feats.shape
        dense2.grads["W"] += np.einsum("nlh,nl->h", h, dout)[:, None]
        dense2.grads["b"] += dout.sum()
        dz = dout[..., None] * dense2.params["W"][:, 0] * (z > 0)
        # step s contributes to every prefix t >= s
        dc = np.cumsum(dz[:, ::-1], axis=1)[:, ::-1]
        dense1.grads["W"] += np.einsum("nlf,nlh->lfh", feats, dc).reshape(L * F, -1)
        dense1.grads["b"] += dz.sum(axis=(0, 1))

    def prefix_outputs(self, q: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Normalised prediction after every prefix; shape (N, L) (padded steps are meaningless)."""
        feats = self.features(q, mask)
        if self.variant == "fc":
            return self._fc_forward(feats)
        return self.net.forward(feats)[..., 0]

    def predict_raw(self, q_seq) -> np.ndarray:
        """Predicted stop step (rounded, unclamped) after every prefix of one sequence."""
        q, mask = pad_sequences([np.asarray(q_seq, dtype=float)], self.max_len)
        n = int(mask.sum())
        return np.rint(self.prefix_outputs(q, mask)[0, :n] * self.scale).astype(int)

    # persistence

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"variant": self.variant, "hidden": self.hidden, "max_len": self.max_len,
                "q_mean": self.q_mean, "q_std": self.q_std}
        meta.update(extra or {})
        save_checkpoint(path, self.net, 0, meta)

    @classmethod
    def load(cls, path) -> "TerminationModel":
        net, header = load_checkpoint(path)
        e = header["extra"]
        model = cls(e["variant"], e["hidden"], e["max_len"], net.seed, e["q_mean"], e["q_std"])
        if model.net.spec != net.spec:
            raise ValueError("checkpoint does not match its declared variant")
        model.net = net
        return model


def predict_stop(model: TerminationModel, q_seq) -> int:
    """Prediction after the last step of ``q_seq``, clamped to [0, len - 1]."""
    n = len(np.asarray(q_seq).reshape(-1, N_ACTIONS))
    return int(np.clip(model.predict_raw(q_seq)[-1], 0, n - 1))


def online_stop(model: TerminationModel, q_seq) -> int:
    """Feed the growing sequence; stop at the first step t whose prediction is <= t.

    The returned index is the (clamped) prediction at that moment, so a prediction that
    points back into the recorded history selects that earlier plane. Without a trigger the
    last step is used.
    """
    raw = model.predict_raw(q_seq)
    for t, r in enumerate(raw):
        if r <= t:
            return int(max(r, 0))
    return len(raw) - 1


def _prefix_loss_grad(model: TerminationModel, feats, mask, labels):
    """L1 loss over every valid prefix with the sequence's label as target."""
    N, L = mask.shape
    y = labels / model.scale
    model.net.zero_grad()
    if model.variant == "fc":
        out = model._fc_forward(feats)
        loss, g = l1_loss(out, np.broadcast_to(y[:, None], (N, L)), mask)
        model._fc_backward(g)
        return loss
    out = model.net.forward(feats)[..., 0]
    loss, g = l1_loss(out, np.broadcast_to(y[:, None], (N, L)), mask)
    model.net.backward(g[..., None], need_input_grad=False)
    return loss


def train_terminator(dataset: ATDataset, cfg: TerminationConfig = TerminationConfig()) -> tuple:
    """Adam on the L1 stop-step loss. Returns ``(model, per-epoch mean losses)``."""
    if len(dataset) == 0:
        raise EmptyDataset("no trajectories to learn from")
    valid_q = dataset.q[dataset.mask]
    mean, std = float(valid_q.mean()), float(valid_q.std())
    model = TerminationModel(cfg.variant, cfg.hidden, dataset.max_len, cfg.seed, mean, std if std > 1e-12 else 1.0)
    feats = model.features(dataset.q, dataset.mask)
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            b = order[s : s + cfg.batch_size]
            losses.append(_prefix_loss_grad(model, feats[b], dataset.mask[b], dataset.labels[b]))
            adam_step(model.net.params(), model.net.grads(), opt)
        history.append(float(np.mean(losses)))
        if (epoch + 1) % 50 == 0:
            log.info("%s epoch %d loss %.5f", cfg.variant, epoch + 1, history[-1])
    return model, history


def stop_mae(model: TerminationModel, dataset: ATDataset) -> float:
    """Mean |online stop - label| in steps."""
    errs = [abs(online_stop(model, dataset.q[i, : int(dataset.mask[i].sum())]) - dataset.labels[i]) for i in range(len(dataset))]
    return float(np.mean(errs))
