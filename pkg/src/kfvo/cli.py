"""Command-line driver: generate | train | run | eval | ablate.

All commands take a JSON config via --config plus --seed/--out overrides and
are deterministic under fixed seeds and synthetic backends. Exit codes:
0 success, 2 config error, 3 runtime error. The KFVO_BACKEND_ENDPOINT
environment variable overrides the remote backend endpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import rl as rl_mod
from .agent import ObservationToggles
from .backend import BadConfig, RemoteBackend, WorldConfig, generate_world
from .geometry import DegenerateInput, associate, ate_rmse, umeyama_align
from .run import (FrameInput, KeepAllStrategy, PolicyStrategy, ThresholdStrategy,
                  frames_from_world, run_sequence)
from .trajectory_io import load_manifest, read_trajectory, write_trajectory


class ConfigError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        raise ConfigError("--config is required for this command")
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _world_config(doc: dict, seed_override: int | None) -> WorldConfig:
    try:
        cfg = WorldConfig.from_json(doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad world config: {e}") from None
    if seed_override is not None:
        cfg = WorldConfig.from_json({**cfg.to_json(), "seed": seed_override})
    return cfg


def _world_list(doc, seed_override: int | None = None) -> list[WorldConfig]:
    """Either an explicit list of world configs or a template with a count."""
    if isinstance(doc, dict) and "template" in doc:
        count = int(doc.get("count", 1))
        base = int(doc.get("base_seed", 0))
        template = doc["template"]
        return [_world_config({**template, "seed": base + i}, None) for i in range(count)]
    if isinstance(doc, list):
        return [_world_config(d, None) for d in doc]
    raise ConfigError("worlds must be a list or a {template, count} object")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> None:
    doc = _load_config(args.config)
    cfg = _world_config(doc, args.seed)
    out = _out_dir(args)
    world = generate_world(cfg)
    with open(out / "world.json", "w", encoding="utf-8") as f:
        json.dump({"version": 1, "world": cfg.to_json()}, f, indent=2)
        f.write("\n")
    write_trajectory(out / "ground_truth.tum", world.trajectory, "tum")
    print(f"wrote {out / 'world.json'} and {out / 'ground_truth.tum'} "
          f"({len(world.trajectory)} frames, profile={cfg.profile})")


def _trainer_config(doc: dict, seed_override: int | None) -> rl_mod.TrainerConfig:
    try:
        worlds = _world_list(doc["worlds"])
        ppo = rl_mod.PpoConfig(**doc.get("ppo", {}))
        reward = rl_mod.RewardParams(**doc.get("reward", {}))
        toggles = ObservationToggles(**doc.get("toggles", {}))
        seed = int(doc.get("seed", 0))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad training config: {e}") from None
    if seed_override is not None:
        seed = seed_override
    return rl_mod.TrainerConfig(worlds, ppo, reward, toggles, seed)


def cmd_train(args) -> None:
    config = _trainer_config(_load_config(args.config), args.seed)
    out = _out_dir(args)
    ckpt = out / "checkpoint.npz"
    metrics = out / "metrics.csv"
    rl_mod.train(config, checkpoint_path=ckpt, metrics_path=metrics,
                 resume_from=args.resume)
    print(f"wrote {ckpt} and {metrics}")


def _load_world_for_world_json(path: str) -> WorldConfig:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return _world_config(doc.get("world", doc), None)


def _build_strategy(doc: dict):
    kind = doc.get("kind")
    if kind == "sw":
        return KeepAllStrategy()
    if kind == "threshold":
        try:
            return ThresholdStrategy(float(doc.get("tau", 0.05)))
        except ValueError as e:
            raise ConfigError(str(e)) from None
    if kind == "policy":
        path = doc.get("checkpoint")
        if not path or not Path(path).exists():
            raise ConfigError(f"policy strategy requires an existing checkpoint, got {path!r}")
        params, norm, meta = agent_mod.load_checkpoint(path)
        toggles = ObservationToggles(**meta.get("toggles", {}))
        return PolicyStrategy(params, norm, toggles)
    raise ConfigError(f"unknown strategy kind {kind!r} (expected sw|threshold|policy)")


def _build_backend_and_frames(doc: dict, seed_override: int | None):
    kind = doc.get("kind")
    if kind == "synthetic":
        if "world_file" in doc:
            cfg = _load_world_for_world_json(doc["world_file"])
            if seed_override is not None:
                cfg = WorldConfig.from_json({**cfg.to_json(), "seed": seed_override})
        else:
            cfg = _world_config(doc.get("world", {}), seed_override)
        world = generate_world(cfg)
        return world, frames_from_world(world)
    if kind == "remote":
        endpoint = os.environ.get("KFVO_BACKEND_ENDPOINT") or doc.get("endpoint")
        if not endpoint:
            raise ConfigError("remote backend needs an endpoint "
                              "(config or KFVO_BACKEND_ENDPOINT)")
        manifest_path = doc.get("manifest")
        if not manifest_path:
            raise ConfigError("remote backend needs a sequence manifest")
        manifest = load_manifest(manifest_path)
        gt = manifest.load_ground_truth(Path(manifest_path).parent)
        frames = []
        for i, ref in enumerate(manifest.frame_refs):
            gt_pose = gt.entries[i][1] if gt is not None and i < len(gt) else None
            ts = gt.entries[i][0] if gt is not None and i < len(gt) else float(i)
            frames.append(FrameInput(i, ref, ts, gt_pose))
        backend = RemoteBackend(endpoint, timeout=float(doc.get("timeout", 120.0)))
        return backend, frames
    raise ConfigError(f"unknown backend kind {kind!r} (expected synthetic|remote)")


def cmd_run(args) -> None:
    doc = _load_config(args.config)
    strategy = _build_strategy(doc.get("strategy", {}))
    backend, frames = _build_backend_and_frames(doc.get("backend", {}), args.seed)
    window = int(doc.get("window", 8))
    if window < 2:
        raise ConfigError(f"window must be >= 2, got {window}")
    out = _out_dir(args)

    try:
        result = run_sequence(backend, frames, strategy, window_capacity=window,
                              k_align=int(doc.get("k_align", 4)))
    finally:
        if hasattr(backend, "close"):
            backend.close()

    write_trajectory(out / "estimate.tum", result.trajectory, "tum")
    with open(out / "decisions.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_id", "action", "e_tran", "latency_ns"])
        for d in result.decisions:
            writer.writerow([d.frame_id, d.action,
                             "" if d.e_tran is None else f"{d.e_tran:.9f}", d.latency_ns])
    print(f"wrote {out / 'estimate.tum'} ({len(result.trajectory)} poses, "
          f"keyframe rate {result.keyframe_rate:.3f})")


def _eval_pairs(doc: dict, args) -> list[dict]:
    if args.estimate and args.ground_truth:
        return [{"name": Path(args.estimate).stem, "estimate": args.estimate,
                 "ground_truth": args.ground_truth}]
    pairs = doc.get("pairs")
    if not pairs:
        raise ConfigError("eval needs --estimate/--ground-truth or a config with pairs")
    return pairs


def cmd_eval(args) -> None:
    doc = _load_config(args.config) if args.config else {}
    pairs = _eval_pairs(doc, args)
    alignment = doc.get("alignment", args.alignment)
    max_dt = float(doc.get("max_dt", 0.02))
    out = _out_dir(args)

    rows = []
    for pair in pairs:
        est = read_trajectory(pair["estimate"], pair.get("estimate_format", "tum"))
        gt = read_trajectory(pair["ground_truth"], pair.get("ground_truth_format", "tum"))
        matched = associate(est, gt, max_dt)
        ate = ate_rmse(est, gt, alignment=alignment, max_dt=max_dt)
        name = pair.get("name", Path(pair["estimate"]).stem)
        rows.append({"name": name, "pairs": len(matched), "ate_rmse": ate})
        _write_plot_points(out / f"{name}_points.csv", est, gt, matched, alignment)

    with open(out / "ate.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "pairs", "ate_rmse"])
        for r in rows:
            writer.writerow([r["name"], r["pairs"], f"{r['ate_rmse']:.6f}"])
            print(f"{r['name']}: ATE {r['ate_rmse']:.6f} m over {r['pairs']} pairs")
        avg = float(np.mean([r["ate_rmse"] for r in rows]))
        writer.writerow(["average", "", f"{avg:.6f}"])
        print(f"average: {avg:.6f} m")


def _write_plot_points(path, est, gt, matched, alignment) -> None:
    """Aligned estimate vs ground-truth positions for external plotting."""
    if not matched:
        return
    est_pts = np.stack([est.entries[i][1].t for i, _ in matched])
    gt_pts = np.stack([gt.entries[j][1].t for _, j in matched])
    if alignment != "none" and len(matched) >= 3:
        try:
            g = umeyama_align(est_pts, gt_pts, with_scale=(alignment == "sim3"))
            est_pts = g.apply(est_pts)
        except DegenerateInput:
            pass  # plot raw points when alignment is unavailable
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z"])
        for (i, _), e, g_ in zip(matched, est_pts, gt_pts):
            writer.writerow([f"{est.entries[i][0]:.6f}"] +
                            [f"{v:.9f}" for v in (*e, *g_)])


ABLATION_VARIANTS = {
    "full": {},
    "no_pose": {"use_pose": False},
    "no_cls_token": {"use_tokens": False},
    "no_alpha_keyframe": {"lambda2": 0.0},
}


def cmd_ablate(args) -> None:
    doc = _load_config(args.config)
    base = _trainer_config(doc.get("train", {}), args.seed)
    eval_doc = doc.get("eval", {})
    eval_worlds = _world_list(eval_doc.get("worlds", []))
    if not eval_worlds:
        raise ConfigError("ablate needs eval.worlds")
    alignment = eval_doc.get("alignment", "sim3")
    out = _out_dir(args)

    rows = []
    for variant, overrides in ABLATION_VARIANTS.items():
        toggles = ObservationToggles(
            use_tokens=overrides.get("use_tokens", base.toggles.use_tokens),
            use_pose=overrides.get("use_pose", base.toggles.use_pose))
        reward = rl_mod.RewardParams(**{**asdict(base.reward),
                                        **({"lambda2": 0.0} if "lambda2" in overrides else {})})
        config = rl_mod.TrainerConfig(base.world_configs, base.ppo, reward,
                                      toggles, base.seed)
        vdir = out / variant
        vdir.mkdir(exist_ok=True)
        print(f"[{variant}] training...")
        params, norm, _ = rl_mod.train(config, checkpoint_path=vdir / "checkpoint.npz",
                                       metrics_path=vdir / "metrics.csv", log=None)
        strategy = PolicyStrategy(params, norm, toggles)
        ates, kf_rates = [], []
        for wc in eval_worlds:
            world = generate_world(wc)
            result = run_sequence(world, frames_from_world(world), strategy)
            ates.append(ate_rmse(result.trajectory, world.trajectory, alignment=alignment))
            kf_rates.append(result.keyframe_rate)
        rows.append({"variant": variant, "avg_ate": float(np.mean(ates)),
                     "keyframe_rate": float(np.mean(kf_rates))})
        print(f"[{variant}] avg ATE {rows[-1]['avg_ate']:.6f} m, "
              f"keyframe rate {rows[-1]['keyframe_rate']:.3f}")

    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "avg_ate", "keyframe_rate"])
        for r in rows:
            writer.writerow([r["variant"], f"{r['avg_ate']:.6f}", f"{r['keyframe_rate']:.3f}"])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kfvo",
                                     description="Keyframe-policy feed-forward visual odometry")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, extra in [
        ("generate", cmd_generate, []),
        ("train", cmd_train, ["resume"]),
        ("run", cmd_run, []),
        ("eval", cmd_eval, ["eval"]),
        ("ablate", cmd_ablate, []),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", default=None, help="output directory")
        if "resume" in extra:
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
        if "eval" in extra:
            p.add_argument("--estimate", default=None)
            p.add_argument("--ground-truth", dest="ground_truth", default=None)
            p.add_argument("--alignment", default="sim3", choices=["none", "se3", "sim3"])
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, BadConfig) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
