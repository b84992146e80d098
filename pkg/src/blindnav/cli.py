"""Experiment runner: dataset generation, training, evaluation, probing, reports.

Every command reads a JSON config validated against an explicit schema, applies
flag overrides, and ends by writing a manifest holding the resolved config, the
seeds, and sha256 checksums of every input and output, so any run can be redone
bit-exactly from its manifest. Environment stepping is already vectorized
in-process (the collector lanes); the worker pool here parallelizes map
generation and evaluation, with per-item seed streams so outputs do not depend
on the pool size.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .agents import AgentError, load_agent, save_agent
from .autodiff import AutodiffError
from .episodes import (
    EpisodeConstraints,
    MiningConfig,
    load_episodes,
    sample_long_episode,
    save_episodes,
)
from .evalkit import (
    aggregate,
    check_disjoint_splits,
    collect_probe_dataset,
    evaluate_policy,
    iou,
    probe_predict,
    probe_sym_spl,
    train_probe,
    write_results_csv,
)
from .mapgen import MapGenParams, generate_map
from .training import PRESETS, TrainConfig, TrainingError, run_experiment
from .world import NoiseConfig, OccupancyGrid, SensorConfig, WorldError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4

CONTINUITY_FLAGS = {"c1": "zero", "c2": "restore", "c3": "continue"}
COMM_FLAGS = {"e1": "as_observation", "e2": "copy_init", "e3": "copy_extend"}
_CONT_SHORT = {v: k for k, v in CONTINUITY_FLAGS.items()}
_COMM_SHORT = {v: k for k, v in COMM_FLAGS.items()}


class ConfigError(Exception):
    """Schema violation or invalid configuration value."""


class ArtifactError(Exception):
    """Missing run artifact or checksum mismatch."""


# ---------------------------------------------------------------------------
# Config schema

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "maps": {"count": 8, "size": 64, "seed": 0},
    "episodes": {
        "seed": 0,
        "per_map": 20,
        "eval_per_map": 10,
        "splits": {"train": 6, "val": 1, "test": 1},
        "mining": {
            "waypoint_spacing": 3.0,
            "subgoals_per_waypoint": 20,
            "band": [3.0, 5.0],
            "ratio_threshold": 1.5,
            "oversample": 10,
        },
        "constraints": {
            "geodesic_band": [2.0, 15.0],
            "min_detour_ratio": 1.1,
            "max_tries": 200,
        },
    },
    "train": {
        "preset": "e",
        "continuity": "continue",
        "communication": "as_observation",
        "n_envs": 12,
        "rollout_len": 128,
        "phase1_steps": 2_000_000,
        "phase2_steps": 2_000_000,
        "lr": 2.5e-4,
        "entropy_coef": 0.01,
        "noisy": False,
        "max_episode_steps": 500,
        "eval_every": 100_000,
        "eval_episodes": 32,
    },
    "eval": {
        "checkpoint": "",
        "split": "test",
        "noisy": False,
        "intensity_scale": 1.0,
        "max_steps": 500,
        "episodes": 0,
        "seed": None,
    },
    "probe": {
        "checkpoint": "",
        "ego_size": 33,
        "samples_per_episode": 20,
        "random_baseline": False,
        "lr": 1e-3,
        "weight_decay": 1e-5,
        "batch_size": 64,
        "max_epochs": 30,
        "patience": 3,
        "seed": None,
    },
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    unknown = set(user) - set(defaults)
    if unknown:
        where = path.rstrip(".") or "top level"
        raise ConfigError(f"unknown config keys at {where}: {sorted(unknown)}")
    out = {}
    for key, base in defaults.items():
        if isinstance(base, dict):
            sub = user.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {path}{key} must be an object")
            out[key] = _merge(base, sub, f"{path}{key}.")
        else:
            out[key] = user.get(key, copy.deepcopy(base))
    return out


def load_config(path: str | None) -> dict:
    """Merge a user config over the defaults; every key ends up explicit."""
    user = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    resolved = _merge(DEFAULTS, user)
    if resolved["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {resolved['schema_version']!r}; "
            f"this build reads version {SCHEMA_VERSION}"
        )
    _validate(resolved)
    return resolved


def _validate(cfg: dict) -> None:
    if cfg["maps"]["count"] < 1 or cfg["maps"]["size"] < 16:
        raise ConfigError("maps.count must be >= 1 and maps.size >= 16 cells")
    sp = cfg["episodes"]["splits"]
    for k, v in sp.items():
        if not isinstance(v, int) or v < 0:
            raise ConfigError(f"episodes.splits.{k} must be a non-negative integer")
    if sp["train"] < 1:
        raise ConfigError("episodes.splits.train must be >= 1")
    if sum(sp.values()) > cfg["maps"]["count"]:
        raise ConfigError("episode splits ask for more maps than maps.count")
    t = cfg["train"]
    if t["preset"] not in PRESETS:
        raise ConfigError(f"train.preset must be one of {sorted(PRESETS)}")
    if t["continuity"] not in CONTINUITY_FLAGS.values():
        raise ConfigError(
            f"train.continuity must be one of {sorted(CONTINUITY_FLAGS.values())}"
        )
    if t["communication"] not in COMM_FLAGS.values():
        raise ConfigError(
            f"train.communication must be one of {sorted(COMM_FLAGS.values())}"
        )
    if cfg["eval"]["split"] not in ("train", "val", "test"):
        raise ConfigError("eval.split must be train, val, or test")
    if cfg["eval"]["intensity_scale"] < 0:
        raise ConfigError("eval.intensity_scale must be non-negative")
    if cfg["probe"]["ego_size"] % 2 == 0:
        raise ConfigError("probe.ego_size must be odd")


# ---------------------------------------------------------------------------
# Artifacts and manifests


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checksums(root: Path, paths: list[Path]) -> dict:
    return {str(p.relative_to(root)): _sha256(p) for p in sorted(paths)}


def write_manifest(root: Path, run_dir: Path, command: str, config: dict,
                   seeds: dict, inputs: dict, outputs: list[Path],
                   metrics: dict, info: dict | None = None) -> Path:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seeds": seeds,
        "config": config,
        "inputs": inputs,
        "outputs": _checksums(root, outputs),
        "metrics": metrics,
        "info": info or {},
    }
    path = run_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(root: Path, sub: str) -> dict:
    path = root / sub / "manifest.json"
    if not path.exists():
        raise ArtifactError(f"missing manifest {path}; generate that artifact first")
    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: schema_version {manifest.get('schema_version')!r} "
            f"does not match this build ({SCHEMA_VERSION})"
        )
    return manifest


def verify_outputs(root: Path, manifest: dict) -> dict:
    """Check every declared output exists with its recorded checksum."""
    for rel, want in manifest["outputs"].items():
        p = root / rel
        if not p.exists():
            raise ArtifactError(f"missing artifact {p}")
        got = _sha256(p)
        if got != want:
            raise ArtifactError(f"checksum mismatch for {p}: {got} != {want}")
    return manifest["outputs"]


# ---------------------------------------------------------------------------
# Worker pool


def _pmap(fn, items: list, workers: int) -> list:
    """Order-preserving map, optionally over a process pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(min(workers, len(items))) as pool:
        return pool.map(fn, items)


# ---------------------------------------------------------------------------
# Maps


def _map_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence((base, index)).generate_state(1)[0])


def _gen_map_worker(args) -> np.ndarray:
    seed, size = args
    grid = generate_map(seed, MapGenParams(height=size, width=size))
    return grid.cells


def cmd_gen_maps(cfg: dict, seed: int, out: Path, workers: int) -> int:
    mc = cfg["maps"]
    map_dir = out / "maps"
    map_dir.mkdir(parents=True, exist_ok=True)
    ids = [f"map_{i:03d}" for i in range(mc["count"])]
    seeds = [_map_seed(mc["seed"], i) for i in range(mc["count"])]
    cells_list = _pmap(_gen_map_worker, [(s, mc["size"]) for s in seeds], workers)
    params = MapGenParams(height=mc["size"], width=mc["size"]).as_dict()
    outputs = []
    for map_id, map_seed, cells in zip(ids, seeds, cells_list):
        path = map_dir / f"{map_id}.npz"
        with open(path, "wb") as f:
            np.savez_compressed(f, cells=cells, resolution=params["resolution"],
                                seed=map_seed)
        outputs.append(path)
    index = {"schema_version": SCHEMA_VERSION, "ids": ids, "map_seeds": seeds,
             "params": params}
    index_path = map_dir / "index.json"
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    outputs.append(index_path)
    write_manifest(out, map_dir, "gen-maps", cfg, {"maps": mc["seed"]}, {},
                   outputs, {"maps": len(ids)})
    log.info("wrote %d maps to %s", len(ids), map_dir)
    return EXIT_OK


def load_maps(out: Path) -> tuple[dict[str, OccupancyGrid], list[str]]:
    manifest = read_manifest(out, "maps")
    verify_outputs(out, manifest)
    index = json.loads((out / "maps" / "index.json").read_text())
    grids = {}
    for map_id, map_seed in zip(index["ids"], index["map_seeds"]):
        data = np.load(out / "maps" / f"{map_id}.npz")
        grids[map_id] = OccupancyGrid(
            cells=data["cells"].astype(bool),
            resolution=float(data["resolution"]),
            seed=int(data["seed"]),
            params=index["params"],
        )
    return grids, index["ids"]


# ---------------------------------------------------------------------------
# Episodes


def _constraints(cfg: dict) -> EpisodeConstraints:
    c = cfg["episodes"]["constraints"]
    return EpisodeConstraints(geodesic_band=tuple(c["geodesic_band"]),
                              min_detour_ratio=c["min_detour_ratio"],
                              max_tries=c["max_tries"])


def _mining(cfg: dict) -> MiningConfig:
    m = cfg["episodes"]["mining"]
    return MiningConfig(waypoint_spacing=m["waypoint_spacing"],
                        subgoals_per_waypoint=m["subgoals_per_waypoint"],
                        band=tuple(m["band"]),
                        ratio_threshold=m["ratio_threshold"],
                        oversample=m["oversample"])


def _episode_seed(base: int, split_idx: int, map_idx: int, j: int) -> int:
    return int(np.random.SeedSequence((base, split_idx, map_idx, j))
               .generate_state(1)[0])


def _split_ids(ids: list[str], splits: dict) -> dict[str, list[str]]:
    n_train, n_val, n_test = splits["train"], splits["val"], splits["test"]
    out = {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val : n_train + n_val + n_test],
    }
    check_disjoint_splits(set(out["train"]), set(out["val"]), set(out["test"]))
    return out


def _sample_episode_worker(args):
    grid, ep_seed, mid, with_waypoints, constraints, mining = args
    return sample_long_episode(grid, ep_seed, constraints, mining, map_id=mid,
                               with_waypoints=with_waypoints)


def cmd_gen_episodes(cfg: dict, seed: int, out: Path, workers: int) -> int:
    grids, ids = load_maps(out)
    ec = cfg["episodes"]
    split_ids = _split_ids(ids, ec["splits"])
    constraints = _constraints(cfg)
    mining = _mining(cfg)
    ep_dir = out / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)

    def sample_split(split_idx, map_list, count, with_waypoints):
        jobs = [(grids[mid], _episode_seed(ec["seed"], split_idx, mi, j), mid,
                 with_waypoints, constraints, mining)
                for mi, mid in enumerate(map_list) for j in range(count)]
        return _pmap(_sample_episode_worker, jobs, workers)

    train_eps = sample_split(0, split_ids["train"], ec["per_map"], True)
    val_eps = sample_split(1, split_ids["val"], ec["eval_per_map"], False)
    test_eps = sample_split(2, split_ids["test"], ec["eval_per_map"], False)

    outputs = []
    for name, eps in (("train", train_eps), ("val", val_eps), ("test", test_eps)):
        path = ep_dir / f"{name}.jsonl"
        save_episodes(path, eps)
        outputs.append(path)
    splits_path = ep_dir / "splits.json"
    splits_path.write_text(json.dumps(split_ids, indent=2, sort_keys=True) + "\n")
    outputs.append(splits_path)

    maps_manifest = read_manifest(out, "maps")
    n_subgoals = sum(len(w.subgoals) for ep in train_eps for w in ep.waypoints)
    write_manifest(out, ep_dir, "gen-episodes", cfg, {"episodes": ec["seed"]},
                   {"maps": maps_manifest["outputs"]}, outputs,
                   {"train_episodes": len(train_eps), "val_episodes": len(val_eps),
                    "test_episodes": len(test_eps), "mined_subgoals": n_subgoals})
    log.info("wrote %d/%d/%d train/val/test episodes to %s",
             len(train_eps), len(val_eps), len(test_eps), ep_dir)
    return EXIT_OK


def _load_split(out: Path, split: str):
    manifest = read_manifest(out, "episodes")
    verify_outputs(out, manifest)
    eps = load_episodes(out / "episodes" / f"{split}.jsonl")
    split_ids = json.loads((out / "episodes" / "splits.json").read_text())
    return eps, split_ids, manifest


# ---------------------------------------------------------------------------
# Train


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            preset=t["preset"],
            seed=seed,
            n_envs=t["n_envs"],
            rollout_len=t["rollout_len"],
            phase1_steps=t["phase1_steps"],
            phase2_steps=t["phase2_steps"],
            continuity=t["continuity"],
            communication=t["communication"],
            lr=t["lr"],
            entropy_coef=t["entropy_coef"],
            max_episode_steps=t["max_episode_steps"],
            noise=NoiseConfig.noisy() if t["noisy"] else NoiseConfig(),
            constraints=_constraints(cfg),
            mining=_mining(cfg),
            eval_every=t["eval_every"],
            eval_episodes=t["eval_episodes"],
        )
    except TrainingError as e:
        raise ConfigError(str(e)) from e


def run_name(cfg: dict, seed: int) -> str:
    t = cfg["train"]
    return (f"{t['preset']}_{_CONT_SHORT[t['continuity']]}"
            f"_{_COMM_SHORT[t['communication']]}_s{seed}")


def cmd_train(cfg: dict, seed: int, out: Path, workers: int) -> int:
    grids, _ = load_maps(out)
    val_eps, split_ids, ep_manifest = _load_split(out, "val")
    train_ids = split_ids["train"]
    tc = _train_config(cfg, seed)
    run_dir = out / "train" / run_name(cfg, seed)
    run_dir.mkdir(parents=True, exist_ok=True)

    val_grids = {mid: grids[mid] for mid in split_ids["val"]} or None
    result = run_experiment(tc, [grids[m] for m in train_ids], train_ids,
                            val_grids, val_eps or None)

    history_path = run_dir / "history.jsonl"
    with open(history_path, "w") as f:
        for phase, res in ((1, result.phase1), (2, result.phase2)):
            for rec in res.history:
                f.write(json.dumps({"phase": phase, **rec}, sort_keys=True) + "\n")
    ckpt_path = run_dir / "checkpoint.ckpt"
    save_agent(ckpt_path, result.main, result.mole,
               extra_meta={"preset": tc.preset, "seed": seed,
                           "continuity": tc.continuity,
                           "communication": tc.communication})

    maps_manifest = read_manifest(out, "maps")
    metrics = {
        "phase1_env_steps": result.phase1.env_steps,
        "phase2_env_steps": result.phase2.env_steps,
        "best_val_success": result.phase2.best_val_success,
    }
    write_manifest(out, run_dir, "train", cfg, {"run": seed},
                   {"maps": maps_manifest["outputs"],
                    "episodes": ep_manifest["outputs"]},
                   [ckpt_path, history_path], metrics,
                   {"name": run_name(cfg, seed), "preset": tc.preset})
    log.info("trained %s; best val success %s", run_name(cfg, seed),
             metrics["best_val_success"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Eval


def _eval_noise(cfg: dict) -> NoiseConfig:
    e = cfg["eval"]
    if not e["noisy"]:
        return NoiseConfig()
    s = e["intensity_scale"]
    base = NoiseConfig.noisy()
    return NoiseConfig(obs_sigma=base.obs_sigma * s,
                       range_trunc=base.range_trunc * s,
                       act_noise_intensity=base.act_noise_intensity * s)


def _eval_chunk(args):
    (ckpt, grids, eps, n_rays, noise, seed, start, max_steps) = args
    main, _, _, _ = load_agent(ckpt)
    return evaluate_policy(main, grids, eps, SensorConfig(n_rays=n_rays),
                           noise, seed, max_steps=max_steps, start_index=start)


def cmd_eval(cfg: dict, seed: int, out: Path, workers: int) -> int:
    e = cfg["eval"]
    if not e["checkpoint"]:
        raise ConfigError("eval.checkpoint is required")
    ckpt = out / e["checkpoint"]
    if not ckpt.exists():
        raise ArtifactError(f"missing checkpoint {ckpt}")
    main, _, _, meta = load_agent(ckpt)
    grids, _ = load_maps(out)
    eps, _, ep_manifest = _load_split(out, e["split"])
    if e["episodes"]:
        eps = eps[: e["episodes"]]
    if not eps:
        raise ArtifactError(f"split {e['split']!r} has no episodes")

    noise = _eval_noise(cfg)
    eval_seed = seed if e["seed"] is None else e["seed"]
    used = {ep.map_id for ep in eps}
    grids_used = {k: v for k, v in grids.items() if k in used}
    if workers <= 1:
        results = evaluate_policy(main, grids_used, eps,
                                  SensorConfig(n_rays=main.config.n_rays),
                                  noise, eval_seed, max_steps=e["max_steps"])
    else:
        bounds = np.linspace(0, len(eps), min(workers, len(eps)) + 1).astype(int)
        jobs = [(ckpt, grids_used, eps[a:b], main.config.n_rays, noise,
                 eval_seed, int(a), e["max_steps"])
                for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        results = [r for part in _pmap(_eval_chunk, jobs, workers) for r in part]

    condition = "noisy" if e["noisy"] else "clean"
    name = f"{ckpt.parent.name}_{e['split']}_{condition}"
    run_dir = out / "eval" / name
    run_dir.mkdir(parents=True, exist_ok=True)
    csv_path = run_dir / "results.csv"
    agg = write_results_csv(csv_path, eps, results)
    write_manifest(out, run_dir, "eval", cfg,
                   {"run": seed, "eval": eval_seed},
                   {"episodes": ep_manifest["outputs"],
                    "checkpoint": {str(ckpt.relative_to(out)): _sha256(ckpt)}},
                   [csv_path], agg,
                   {"name": name, "preset": meta.get("preset", "?"),
                    "split": e["split"], "condition": condition})
    log.info("eval %s: success %.3f spl %.3f", name, agg["success"], agg["spl"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Probe


def cmd_probe(cfg: dict, seed: int, out: Path, workers: int) -> int:
    p = cfg["probe"]
    if not p["checkpoint"]:
        raise ConfigError("probe.checkpoint is required")
    ckpt = out / p["checkpoint"]
    if not ckpt.exists():
        raise ArtifactError(f"missing checkpoint {ckpt}")
    main, _, _, meta = load_agent(ckpt)
    if p["random_baseline"]:
        # Same architecture, fresh random weights: the no-training control.
        from .agents import MainAgent

        main = MainAgent(main.config, seed=seed)
    grids, _ = load_maps(out)
    train_eps, split_ids, ep_manifest = _load_split(out, "train")
    val_eps, _, _ = _load_split(out, "val")
    if not val_eps:
        raise ArtifactError("probe needs a nonempty val split")
    check_disjoint_splits(set(e.map_id for e in train_eps),
                          set(e.map_id for e in val_eps))
    probe_seed = seed if p["seed"] is None else p["seed"]
    sensor = SensorConfig(n_rays=main.config.n_rays)
    kw = dict(sensor=sensor, samples_per_episode=p["samples_per_episode"],
              ego_size=p["ego_size"])
    train_ds = collect_probe_dataset(main, grids, train_eps, seed=probe_seed, **kw)
    val_ds = collect_probe_dataset(main, grids, val_eps, seed=probe_seed + 1, **kw)
    probe, info = train_probe(train_ds, val_ds, rep_dim=main.config.hidden,
                              ego_size=p["ego_size"], seed=probe_seed,
                              lr=p["lr"], weight_decay=p["weight_decay"],
                              batch_size=p["batch_size"],
                              max_epochs=p["max_epochs"], patience=p["patience"])
    preds = probe_predict(probe, val_ds.reps)
    cell = next(iter(grids.values())).resolution
    metrics = {
        "iou": float(np.mean([iou(a, b) for a, b in zip(preds, val_ds.maps)])),
        "sym_spl": probe_sym_spl(probe, val_ds, cell, seed=probe_seed),
        "best_val_loss": info["best_val_loss"],
        "best_epoch": info["best_epoch"],
        "train_samples": len(train_ds),
        "val_samples": len(val_ds),
        "random_baseline": p["random_baseline"],
    }
    tag = "random" if p["random_baseline"] else ckpt.parent.name
    run_dir = out / "probe" / f"{tag}_w{p['ego_size']}"
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_manifest(out, run_dir, "probe", cfg,
                   {"run": seed, "probe": probe_seed},
                   {"episodes": ep_manifest["outputs"],
                    "checkpoint": {str(ckpt.relative_to(out)): _sha256(ckpt)}},
                   [metrics_path], metrics,
                   {"preset": meta.get("preset", "?")})
    log.info("probe %s: iou %.3f sym_spl %.3f", tag, metrics["iou"],
             metrics["sym_spl"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Report


def cmd_report(cfg: dict, seed: int, out: Path, workers: int) -> int:
    eval_root = out / "eval"
    manifest_paths = sorted(eval_root.glob("*/manifest.json"))
    if not manifest_paths:
        raise ArtifactError(f"no eval manifests under {eval_root}")
    rows = []
    versions = set()
    for mp in manifest_paths:
        m = json.loads(mp.read_text())
        versions.add(m.get("schema_version"))
        rows.append({
            "name": m["info"]["name"],
            "preset": m["info"]["preset"],
            "split": m["info"]["split"],
            "condition": m["info"]["condition"],
            "episodes": m["metrics"]["episodes"],
            "success": m["metrics"]["success"],
            "spl": m["metrics"]["spl"],
            "soft_spl": m["metrics"]["soft_spl"],
        })
    if len(versions) > 1:
        raise ConfigError(f"report refuses mixed schema versions: {sorted(versions)}")
    rows.sort(key=lambda r: (r["preset"], r["condition"], r["name"]))

    detail_path = out / "report.csv"
    with open(detail_path, "w", newline="") as f:
        w = csv.writer(f)
        cols = ["name", "preset", "split", "condition", "episodes",
                "success", "spl", "soft_spl"]
        w.writerow(cols)
        for r in rows:
            w.writerow([r["name"], r["preset"], r["split"], r["condition"],
                        r["episodes"], repr(r["success"]), repr(r["spl"]),
                        repr(r["soft_spl"])])

    # Per-preset pivot over seeds, one row per preset, clean and noisy columns.
    pivot: dict[tuple[str, str], list] = {}
    for r in rows:
        pivot.setdefault((r["preset"], r["condition"]), []).append(r)
    presets = sorted({p for p, _ in pivot})
    summary_path = out / "report_summary.csv"
    lines = [f"{'preset':<8}{'clean Succ':>11}{'clean SPL':>11}"
             f"{'noisy Succ':>12}{'noisy SPL':>11}"]
    with open(summary_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["preset", "clean_success", "clean_spl",
                    "noisy_success", "noisy_spl", "runs"])
        for preset in presets:
            cells, shown = [], []
            n_runs = 0
            for cond in ("clean", "noisy"):
                group = pivot.get((preset, cond), [])
                n_runs = max(n_runs, len(group))
                for key in ("success", "spl"):
                    if group:
                        mean = sum(g[key] for g in group) / len(group)
                        cells.append(repr(mean))
                        shown.append(f"{mean:.3f}")
                    else:
                        cells.append("")
                        shown.append("-")
            w.writerow([preset, *cells, n_runs])
            lines.append(f"{preset:<8}{shown[0]:>11}{shown[1]:>11}"
                         f"{shown[2]:>12}{shown[3]:>11}")
    print("\n".join(lines))
    write_manifest(out, out, "report", cfg, {"run": seed},
                   {str(p.relative_to(out)): _sha256(p) for p in manifest_paths},
                   [detail_path, summary_path], {"rows": len(rows)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point

COMMANDS = {
    "gen-maps": cmd_gen_maps,
    "gen-episodes": cmd_gen_episodes,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blindnav",
        description="Dataset generation, training, evaluation, probing, reports.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None,
                        help="run seed (overrides config)")
    parser.add_argument("--out", required=True, help="workspace directory")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None)
    parser.add_argument("--continuity", choices=sorted(CONTINUITY_FLAGS),
                        default=None)
    parser.add_argument("--comm", choices=sorted(COMM_FLAGS), default=None)
    parser.add_argument("--noisy", action="store_true",
                        help="noisy sim for train/eval")
    parser.add_argument("--workers", type=int, default=1)
    return parser


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> None:
    if args.preset is not None:
        cfg["train"]["preset"] = args.preset
    if args.continuity is not None:
        cfg["train"]["continuity"] = CONTINUITY_FLAGS[args.continuity]
    if args.comm is not None:
        cfg["train"]["communication"] = COMM_FLAGS[args.comm]
    if args.noisy:
        cfg["train"]["noisy"] = True
        cfg["eval"]["noisy"] = True


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("BLINDNAV_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config)
        seed = cfg.pop("seed")
        if args.seed is not None:
            seed = args.seed
        _apply_overrides(cfg, args)
        _validate(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, seed, out, args.workers)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (ArtifactError, FileNotFoundError) as e:
        log.error("artifact error: %s", e)
        return EXIT_ARTIFACT
    except (TrainingError, AutodiffError, AgentError, WorldError) as e:
        log.error("runtime error: %s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
