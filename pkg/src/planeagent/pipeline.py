"""Experiment stages behind the command line: data, agent, termination, evaluation."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import AgentConfig, EpisodeRecord, random_start, run_episode, train_agent, write_rows_csv
from .alignment import AtlasRecord, select_atlas, warm_start
from .config import ExperimentConfig
from .evaluation import evaluate_method, write_results_csv, write_summary_csv
from .geometry import N_ACTIONS, Plane
from .landmarks import LandmarkSet, detect_landmarks, perturbed_oracle
from .nn import load_checkpoint, save_checkpoint
from .termination import (
    QTrajectory,
    TerminationModel,
    baseline_stop,
    build_at_dataset,
    compute_adi,
    online_stop,
    optimal_stop,
    train_terminator,
)
from .volume import (
    Annotation,
    Volume,
    extract_slice,
    generate_phantom,
    load_annotation,
    load_volume,
    random_pose,
    save_annotation,
    save_volume,
    write_pgm,
)

log = logging.getLogger(__name__)

# stream tags for derived random generators
_POSE, _NOISE, _SPLIT, _FAR, _LANDMARK = 1, 2, 3, 4, 5


class IoError(OSError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


# ---------------------------------------------------------------------------
# dataset


def case_id(i: int) -> str:
    return f"case_{i:03d}"


def gen_data(cfg: ExperimentConfig) -> Path:
    """Write phantoms, annotations and a train/test manifest under ``cfg.paths.data``."""
    ds = cfg.dataset
    root = Path(cfg.paths.data)
    try:
        root.mkdir(parents=True, exist_ok=True)
        ids = []
        for i in range(ds.count):
            cid = case_id(i)
            pose = random_pose(_rng(ds.seed, _POSE, i), ds.max_rotation, ds.max_translation, tuple(ds.scale_range))
            noise_seed = int(_rng(ds.seed, _NOISE, i).integers(2**31))
            v, ann = generate_phantom(noise_seed, pose, ds.dims, ds.spacing, ds.speckle)
            save_volume(root / f"{cid}.raw", v, {"case_id": cid, "pose": pose.to_record(), "seed": noise_seed})
            save_annotation(root / f"{cid}_ann.json", ann)
            ids.append(cid)
        order = _rng(ds.seed, _SPLIT).permutation(ds.count)
        n_train = int(round(ds.count * ds.train_fraction))
        n_train = min(max(n_train, 1), ds.count - 1)
        manifest = {
            "ids": ids,
            "train": sorted(ids[k] for k in order[:n_train]),
            "test": sorted(ids[k] for k in order[n_train:]),
            "dataset": cfg.to_dict()["dataset"],
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise IoError(f"cannot write dataset under {root}: {exc}") from exc
    log.info("wrote %d phantoms to %s (%d train / %d test)", ds.count, root, len(manifest["train"]), len(manifest["test"]))
    return root


@dataclass
class Dataset:
    root: Path
    manifest: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise IoError(f"no readable dataset manifest under {root}: {exc}") from exc
        return cls(root, manifest)

    @property
    def train_ids(self) -> list:
        return list(self.manifest["train"])

    @property
    def test_ids(self) -> list:
        return list(self.manifest["test"])

    def load(self, cid: str) -> tuple:
        if cid not in self._cache:
            try:
                v, _ = load_volume(self.root / f"{cid}.raw")
                ann = load_annotation(self.root / f"{cid}_ann.json")
            except (OSError, ValueError, KeyError) as exc:
                raise IoError(f"cannot read case {cid}: {exc}") from exc
            self._cache[cid] = (v, ann)
        return self._cache[cid]

    def annotation(self, cid: str) -> Annotation:
        if cid in self._cache:
            return self._cache[cid][1]
        try:
            return load_annotation(self.root / f"{cid}_ann.json")
        except (OSError, ValueError, KeyError) as exc:
            raise IoError(f"cannot read annotation of {cid}: {exc}") from exc

    def cases(self, ids) -> list:
        return [(cid, *self.load(cid)) for cid in ids]


# ---------------------------------------------------------------------------
# run directory layout


def runs_dir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.paths.runs)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create run directory {p}: {exc}") from exc
    return p


def agent_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.paths.runs) / f"agent_{cfg.plane_type}.ckpt"


def atlas_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.paths.runs) / f"atlas_{cfg.plane_type}.json"


def at_path(cfg: ExperimentConfig, variant: str) -> Path:
    return Path(cfg.paths.runs) / f"at_{variant}_{cfg.plane_type}.ckpt"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingCheckpoint(f"{what} not found at {path}; run the earlier stage first")
    return path


def load_agent(cfg: ExperimentConfig):
    net, _ = load_checkpoint(_require(agent_path(cfg), "agent checkpoint"))
    return net


# ---------------------------------------------------------------------------
# warm start


def choose_atlas(cfg: ExperimentConfig, data: Dataset) -> AtlasRecord:
    records = [AtlasRecord.from_annotation(cid, data.annotation(cid)) for cid in data.train_ids]
    choice = select_atlas(records, cfg.plane_type)
    runs_dir(cfg)
    choice.save(atlas_path(cfg))
    return next(r for r in records if r.volume_id == choice.volume_id)


def case_landmarks(cfg: ExperimentConfig, cid: str, v: Volume, ann: Annotation) -> LandmarkSet:
    ev = cfg.evaluation
    if ev.landmark_source == "oracle":
        index = int(cid.rsplit("_", 1)[-1]) if cid.rsplit("_", 1)[-1].isdigit() else 0
        return perturbed_oracle(ann, ev.landmark_noise, int(_rng(ev.seed, _LANDMARK, index).integers(2**31)))
    return detect_landmarks(v)


def warm_start_plane(cfg: ExperimentConfig, atlas: AtlasRecord, cid: str, v: Volume, ann: Annotation) -> Plane:
    return warm_start(case_landmarks(cfg, cid, v, ann), atlas, cfg.plane_type)


# ---------------------------------------------------------------------------
# stages


def cmd_train_agent(cfg: ExperimentConfig) -> Path:
    data = Dataset.open(cfg.paths.data)
    out = runs_dir(cfg)
    a = cfg.agent
    acfg = a.agent_config()
    volumes = [data.load(cid) for cid in data.train_ids]
    choose_atlas(cfg, data)

    def checkpoint(step, trainer):
        save_checkpoint(out / f"agent_{cfg.plane_type}_step{step:06d}.ckpt", trainer.current, step)

    trainer, rows = train_agent(
        volumes, cfg.plane_type, acfg, a.total_steps, a.seed, a.log_every, None, a.checkpoint_every, checkpoint
    )
    save_checkpoint(agent_path(cfg), trainer.current, a.total_steps, {"plane_type": cfg.plane_type})
    write_rows_csv(out / f"agent_{cfg.plane_type}_loss.csv", rows,
                   ["step", "updates", "episodes", "epsilon", "loss", "mean_reward"])
    return agent_path(cfg)


def _rollout(cfg: ExperimentConfig, net, v, ann, start: Plane) -> EpisodeRecord:
    acfg = cfg.agent.agent_config()
    return run_episode(v, ann, cfg.plane_type, net, start, cfg.evaluation.max_steps, acfg)


def cmd_train_at(cfg: ExperimentConfig) -> list:
    data = Dataset.open(cfg.paths.data)
    out = runs_dir(cfg)
    net = load_agent(cfg)
    atlas = choose_atlas(cfg, data)
    trajs = []
    for cid in data.train_ids:
        v, ann = data.load(cid)
        rec = _rollout(cfg, net, v, ann, warm_start_plane(cfg, atlas, cid, v, ann))
        trajs.append(QTrajectory.from_episode(rec))
    ds = build_at_dataset(trajs, data.train_ids, max(cfg.evaluation.max_steps + 1, 1))
    ds.write_csv(out / f"at_dataset_{cfg.plane_type}.csv", out / f"at_labels_{cfg.plane_type}.json", trajs)
    paths = []
    for variant in cfg.termination.variants:
        model, history = train_terminator(ds, cfg.termination.model_config(variant))
        model.save(at_path(cfg, variant))
        write_rows_csv(out / f"at_{variant}_{cfg.plane_type}_loss.csv",
                       [{"epoch": k + 1, "loss": l} for k, l in enumerate(history)], ["epoch", "loss"])
        paths.append(at_path(cfg, variant))
    return paths


@dataclass
class CaseRun:
    warm: Plane
    record: EpisodeRecord
    traj: QTrajectory
    stops: dict


def _policy_stops(traj: QTrajectory, models: dict) -> dict:
    stops = {"max_step": baseline_stop(traj, "max_step"), "min_q": baseline_stop(traj, "min_q")}
    for variant, model in models.items():
        stops[f"at_{variant}"] = online_stop(model, traj.q)
    stops["optimal"] = optimal_stop(traj)
    return stops


def write_trace_csv(path, run: CaseRun) -> None:
    traj, adi = run.traj, compute_adi(run.traj)
    policies = list(run.stops)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"q{k}" for k in range(N_ACTIONS)] + ["q_mean", "ang_deg", "dis_mm", "adi"]
                   + [f"stop_{p}" for p in policies])
        for t in range(len(traj)):
            w.writerow([t, *(f"{x:.6f}" for x in traj.q[t]), f"{traj.q[t].mean():.6f}", f"{traj.ang[t]:.6f}",
                        f"{traj.dis[t]:.6f}", f"{adi[t]:.6f}"] + [run.stops[p] for p in policies])


def cmd_evaluate(cfg: ExperimentConfig) -> dict:
    """Runs every configured method on the test split; returns ``{method: MethodResult}``."""
    data = Dataset.open(cfg.paths.data)
    out = runs_dir(cfg)
    methods = list(cfg.evaluation.methods)
    needs_agent = any(m.startswith("ddqn") for m in methods)
    net = load_agent(cfg) if needs_agent else None
    variants = sorted({m[len("ddqn_at_"):] for m in methods if m.startswith("ddqn_at_")})
    models = {v: TerminationModel.load(_require(at_path(cfg, v), f"{v} termination model")) for v in variants}
    atlas = choose_atlas(cfg, data)
    cases = data.cases(data.test_ids)
    index = {cid: k for k, cid in enumerate(data.test_ids)}
    trace_dir = out / f"traces_{cfg.plane_type}"
    trace_dir.mkdir(exist_ok=True)

    memo = {}

    def case_run(cid, v, ann) -> CaseRun:
        if cid not in memo:
            warm = warm_start_plane(cfg, atlas, cid, v, ann)
            rec = traj = stops = None
            if net is not None:
                rec = _rollout(cfg, net, v, ann, warm)
                traj = QTrajectory.from_episode(rec)
                stops = _policy_stops(traj, models)
                write_trace_csv(trace_dir / f"{cid}.csv", CaseRun(warm, rec, traj, stops))
            memo[cid] = CaseRun(warm, rec, traj, stops)
        return memo[cid]

    def far_start(cid, v, ann) -> Plane:
        rng = _rng(cfg.evaluation.seed, _FAR, index[cid])
        start, _ = random_start(ann.plane(cfg.plane_type), rng, cfg.evaluation.far_angle_range, cfg.evaluation.far_dist_range)
        return _rollout(cfg, net, v, ann, start).planes[-1]

    def at_stop(policy):
        def localize(cid, v, ann):
            run = case_run(cid, v, ann)
            return run.record.planes[run.stops[policy]]
        return localize

    localizers = {
        "gt_oracle": lambda cid, v, ann: ann.plane(cfg.plane_type),
        "warm_start": lambda cid, v, ann: case_run(cid, v, ann).warm,
        "ddqn_na": far_start,
        "ddqn_maxs": at_stop("max_step"),
        "ddqn_minq": at_stop("min_q"),
    }
    for v in variants:
        localizers[f"ddqn_at_{v}"] = at_stop(f"at_{v}")

    results = {}
    for m in methods:
        results[m] = evaluate_method(cases, localizers[m], cfg.plane_type, m)
    write_results_csv(out / f"results_{cfg.plane_type}.csv", results.values())
    write_summary_csv(out / f"summary_{cfg.plane_type}.csv", results.values())
    stops = [{"case_id": cid, **memo[cid].stops} for cid in data.test_ids if cid in memo and memo[cid].stops]
    if stops:
        write_rows_csv(out / f"stops_{cfg.plane_type}.csv", stops)
    return results


def cmd_localize(cfg: ExperimentConfig, volume_path, out_path, pgm_path=None, variant: str | None = None) -> dict:
    """Single volume: detect landmarks, warm start, run the agent and stop by the chosen policy."""
    try:
        v, meta = load_volume(volume_path)
    except (OSError, ValueError, KeyError) as exc:
        raise IoError(f"cannot read volume {volume_path}: {exc}") from exc
    data = Dataset.open(cfg.paths.data)
    atlas = choose_atlas(cfg, data)
    net = load_agent(cfg)
    variant = variant or ("lstm" if "lstm" in cfg.termination.variants else cfg.termination.variants[0])
    model = TerminationModel.load(_require(at_path(cfg, variant), f"{variant} termination model"))
    lms = detect_landmarks(v)
    start = warm_start(lms, atlas, cfg.plane_type)
    acfg: AgentConfig = cfg.agent.agent_config()
    gt_free = Annotation(dict(lms.points), {cfg.plane_type: start})  # metrics are relative to the start
    rec = run_episode(v, gt_free, cfg.plane_type, net, start, cfg.evaluation.max_steps, acfg)
    stop = online_stop(model, rec.q_array)
    plane = rec.planes[stop]
    record = {
        "plane_type": cfg.plane_type,
        "plane": plane.to_record(),
        "stop_step": stop,
        "policy": f"at_{variant}",
        "warm_start": start.to_record(),
        "landmarks": lms.to_record(),
        "volume": str(volume_path),
    }
    try:
        Path(out_path).write_text(json.dumps(record, indent=2))
        if pgm_path:
            write_pgm(pgm_path, extract_slice(v, plane))
    except OSError as exc:
        raise IoError(f"cannot write output: {exc}") from exc
    return record
