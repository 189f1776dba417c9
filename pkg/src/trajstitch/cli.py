"""Command-line front end: one subcommand per pipeline stage.

Hyperparameters are flat ``key=value`` pairs, read from ``--config FILE`` and
then overridden by positional ``key=value`` arguments. Every artifact written
is recorded with its content hash in ``manifest.json`` under ``--workspace``.

Exit codes: 0 ok, 2 bad configuration, 3 I/O failure, 4 stale input artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import augment, embedding, maze, pipeline, planner, segments, svg
from .diffusion import DiffusionModel, load_diffusion, save_diffusion
from .nn import ParamFileError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STALE = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "log_every": 100,
    # datasets
    "n_episodes": 500,
    "max_span": 4,
    "ep_len": 200,
    "explore_ep_len": 500,
    "resample_interval": 10,
    "noise_prob": 0.3,
    # embedding
    "gamma": 0.99,
    "expectile": 0.95,
    "embed_batch": 256,
    "embed_steps": 4000,
    "embed_lr": 3e-4,
    "tau_polyak": 0.005,
    "p_hindsight": 0.8,
    "geometric_p": 0.1,
    "latent_dim": 32,
    "embed_hidden": "128,128,128",
    # diffusion models
    "h_stitcher": 26,
    "stitcher_steps": 20000,
    "planner_steps": 20000,
    "diffusion_batch": 128,
    "diffusion_lr": 1e-3,
    "diffusion_M": 1000,
    "diffusion_hidden": "256,256,256",
    "schedule": "cosine",
    "ddim_steps": 20,
    # inverse dynamics
    "inverse_steps": 3000,
    "inverse_batch": 256,
    "inverse_lr": 1e-3,
    "inverse_hidden": "128,128,128",
    # segments and index
    "h_seg": 26,
    "seg_stride": 13,
    "n_list": 0,
    "n_probe": 8,
    # augmentation
    "k": 10,
    "k_density": 30,
    "beta": 2.0,
    "n_stitch": 10,
    "n_traj": 100,
    # planning and evaluation
    "plan_horizon": 101,
    "jump": 25,
    "replanning_interval": "50",
    "subgoal_horizon": 10,
    "max_episode_steps": 300,
    "delta_g": 0.5,
    "n_tasks": 20,
    "min_distance": 0,
    "eval_seeds": 5,
}


class CLIError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise CLIError(EXIT_CONFIG, f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(items, source: str) -> dict:
    out = {}
    for item in items:
        item = item.strip()
        if not item or item.startswith("#"):
            continue
        if "=" not in item:
            raise CLIError(EXIT_CONFIG, f"{source}: expected key=value, got {item!r}")
        k, v = (p.strip() for p in item.split("=", 1))
        if k not in DEFAULTS:
            raise CLIError(EXIT_CONFIG, f"{source}: unknown config key {k!r}")
        out[k] = _coerce(k, v)
    return out


def load_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise CLIError(EXIT_IO, f"cannot read config: {exc}") from None
        cfg.update(parse_pairs(text.splitlines(), args.config))
    cfg.update(parse_pairs(args.overrides, "command line"))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        cfg[STEP_KEYS[args.cmd]] = args.steps
    cfg["replanning_interval"] = _replan_value(cfg["replanning_interval"])
    for key in ("embed_hidden", "diffusion_hidden", "inverse_hidden"):
        _widths(cfg, key)
    return cfg


def _widths(cfg, key: str) -> tuple:
    try:
        w = tuple(int(v) for v in str(cfg[key]).split(","))
    except ValueError:
        raise CLIError(EXIT_CONFIG, f"{key} must be comma-separated integers") from None
    if not w or min(w) < 1:
        raise CLIError(EXIT_CONFIG, f"{key} must list positive widths")
    return w


def _replan_value(v):
    if isinstance(v, int) or v is None:
        return v
    if str(v).lower() in ("off", "none", "inf", "never"):
        return None
    try:
        n = int(v)
    except ValueError:
        raise CLIError(EXIT_CONFIG, f"bad replanning_interval {v!r}") from None
    if n < 1:
        raise CLIError(EXIT_CONFIG, "replanning_interval must be positive or 'off'")
    return n


STEP_KEYS = {
    "train-embedding": "embed_steps",
    "train-stitcher": "stitcher_steps",
    "train-inverse": "inverse_steps",
    "train-planner": "planner_steps",
}


# -- manifest ---------------------------------------------------------------------


def file_hash(path) -> str:
    h = hashlib.sha256()
    for p in (Path(path), Path(f"{path}.json")):
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class Manifest:
    def __init__(self, workspace):
        self.path = Path(workspace) / "manifest.json"
        self.data = {"artifacts": {}}
        if self.path.exists():
            try:
                self.data = json.loads(self.path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise CLIError(EXIT_IO, f"unreadable manifest: {exc}") from None

    @staticmethod
    def key(path) -> str:
        return str(Path(path).resolve())

    def check(self, path) -> None:
        """Raise a stale-artifact error when ``path`` no longer matches its recorded hash."""
        if not Path(path).exists():
            raise CLIError(EXIT_IO, f"missing input: {path}")
        rec = self.data["artifacts"].get(self.key(path))
        if rec is not None and rec["sha256"] != file_hash(path):
            raise CLIError(EXIT_STALE, f"stale artifact: {path} changed since it was recorded")

    def record(self, path, command: str, cfg: dict, inputs=()) -> None:
        self.data["artifacts"][self.key(path)] = {
            "sha256": file_hash(path),
            "command": command,
            "config_hash": config_hash(cfg),
            "inputs": {self.key(p): file_hash(p) for p in inputs},
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, sort_keys=True, indent=1) + "\n")


# -- helpers ------------------------------------------------------------------------


def _mapper(threads: int):
    if threads <= 1:
        return map, None
    pool = ThreadPoolExecutor(threads)
    return pool.map, pool


def _write_losses(path, losses, log_every: int) -> int:
    """Loss CSV with one row per logged step (every ``log_every`` steps plus the final one)."""
    n = len(losses)
    steps = [s for s in range(1, n + 1) if s % log_every == 0 or s == n]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for s in steps:
            w.writerow([s, format(losses[s - 1], ".17g")])
    return len(steps)


def _save_state(path, state: dict, losses) -> None:
    np.savez(path, losses=np.asarray(losses, dtype=np.float64), **state)


def _load_state(path) -> tuple[dict, list]:
    try:
        with np.load(path) as z:
            state = {k: z[k] for k in z.files if k != "losses"}
            losses = z["losses"].tolist()
    except (OSError, ValueError) as exc:
        raise CLIError(EXIT_IO, f"cannot read training state {path}: {exc}") from None
    state["rng"] = str(state["rng"])
    return state, losses


def _run_trainer(trainer, total_steps: int, args, cfg):
    if args.resume:
        state, losses = _load_state(args.resume)
        trainer.load_state_dict(state)
        trainer.losses = list(losses)
    remaining = total_steps - trainer.step
    if remaining < 0:
        raise CLIError(EXIT_CONFIG, f"training state is already at step {trainer.step} > {total_steps}")
    trainer.run(remaining)
    state_path = args.state or f"{args.out}.state.npz"
    _save_state(state_path, trainer.state_dict(), trainer.losses)
    _write_losses(f"{args.out}.loss.csv", trainer.losses, cfg["log_every"])
    return trainer


def _load_dataset(path, man: Manifest) -> maze.Dataset:
    man.check(path)
    try:
        return maze.load_dataset(path)
    except maze.DatasetFormatError as exc:
        raise CLIError(EXIT_IO, f"{path}: {exc}") from None


def _load_phi(path, man: Manifest):
    man.check(path)
    return embedding.load_embedding(path)


def _load_diff(path, man: Manifest) -> DiffusionModel:
    man.check(path)
    return load_diffusion(path)


def _load_inverse(path, man: Manifest) -> augment.InverseDynamicsModel:
    man.check(path)
    return augment.load_inverse_dynamics(path)


def _diff_config(cfg, steps_key: str) -> pipeline.DiffusionTrainConfig:
    return pipeline.DiffusionTrainConfig(
        steps=cfg[steps_key],
        batch_size=cfg["diffusion_batch"],
        lr=cfg["diffusion_lr"],
        hidden=_widths(cfg, "diffusion_hidden"),
        M=cfg["diffusion_M"],
        schedule=cfg["schedule"],
        seed=cfg["seed"],
    )


def _planner_config(cfg) -> planner.PlannerConfig:
    return planner.PlannerConfig(
        plan_horizon=cfg["plan_horizon"],
        jump=cfg["jump"],
        replanning_interval=cfg["replanning_interval"],
        subgoal_horizon=cfg["subgoal_horizon"],
        max_episode_steps=cfg["max_episode_steps"],
        delta_g=cfg["delta_g"],
        ddim_steps=cfg["ddim_steps"],
    )


# -- subcommands ----------------------------------------------------------------------


def cmd_gen_data(args, cfg, man):
    try:
        spec = maze.load_maze(args.spec)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot read maze: {exc}") from None
    if args.kind == "stitch":
        ds = maze.generate_stitch_dataset(spec, cfg["n_episodes"], cfg["max_span"], cfg["ep_len"], cfg["seed"])
    else:
        ds = maze.generate_explore_dataset(
            spec, cfg["n_episodes"], cfg["explore_ep_len"], cfg["resample_interval"], cfg["noise_prob"], cfg["seed"]
        )
    ds.meta["config"] = cfg
    maze.save_dataset(ds, args.out)
    return [args.out], [args.spec] if Path(args.spec).exists() else []


def cmd_train_embedding(args, cfg, man):
    ds = _load_dataset(args.data, man)
    ecfg = embedding.EmbedTrainConfig(
        gamma=cfg["gamma"],
        expectile=cfg["expectile"],
        batch_size=cfg["embed_batch"],
        train_steps=cfg["embed_steps"],
        lr=cfg["embed_lr"],
        tau_polyak=cfg["tau_polyak"],
        p_hindsight=cfg["p_hindsight"],
        p_random=1.0 - cfg["p_hindsight"],
        geometric_p=cfg["geometric_p"],
        latent_dim=cfg["latent_dim"],
        hidden=_widths(cfg, "embed_hidden"),
        seed=cfg["seed"],
    )
    tr = _run_trainer(embedding.EmbeddingTrainer(ds, ecfg), ecfg.train_steps, args, cfg)
    embedding.save_embedding(tr.model, args.out, ecfg)
    return [args.out], [args.data]


def cmd_train_stitcher(args, cfg, man):
    ds = _load_dataset(args.data, man)
    dcfg = _diff_config(cfg, "stitcher_steps")
    tr = pipeline.diffusion_trainer(ds.trajectories, maze.Normalizer.fit(ds.all_states()), cfg["h_stitcher"], 1, dcfg)
    tr = _run_trainer(tr, dcfg.steps, args, cfg)
    save_diffusion(tr.sampling_model(), args.out, {"role": "stitcher", "config": cfg})
    return [args.out], [args.data]


def cmd_train_planner(args, cfg, man):
    data = [_load_dataset(p, man) for p in args.data]
    trajs = [t for ds in data for t in ds.trajectories]
    norm = maze.Normalizer.fit(np.concatenate([ds.all_states() for ds in data]))
    pcfg = _planner_config(cfg)
    dcfg = _diff_config(cfg, "planner_steps")
    tr = pipeline.diffusion_trainer(trajs, norm, pcfg.n_waypoints, pcfg.jump, dcfg)
    tr = _run_trainer(tr, dcfg.steps, args, cfg)
    save_diffusion(tr.sampling_model(), args.out, {"role": "planner", "jump": pcfg.jump, "config": cfg})
    return [args.out], list(args.data)


def cmd_train_inverse(args, cfg, man):
    ds = _load_dataset(args.data, man)
    icfg = augment.InverseDynamicsConfig(
        hidden=_widths(cfg, "inverse_hidden"),
        steps=cfg["inverse_steps"],
        batch_size=cfg["inverse_batch"],
        lr=cfg["inverse_lr"],
        seed=cfg["seed"],
    )
    tr = _run_trainer(augment.InverseDynamicsTrainer(ds, icfg), icfg.steps, args, cfg)
    augment.save_inverse_dynamics(tr.model, args.out, {"config": cfg})
    return [args.out], [args.data]


def _segments(ds, phi, cfg):
    return segments.extract_segments(ds, phi, cfg["h_seg"], cfg["seg_stride"])


def cmd_build_index(args, cfg, man):
    ds = _load_dataset(args.data, man)
    phi = _load_phi(args.phi, man)
    table = _segments(ds, phi, cfg)
    if len(table) == 0:
        raise CLIError(EXIT_CONFIG, "no trajectory is long enough for a segment")
    n_list = cfg["n_list"] or pipeline.default_n_list(len(table))
    try:
        index = segments.build_ivf(table.phi_start, n_list, cfg["seed"], cfg["n_probe"])
    except ValueError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None
    segments.save_index(index, args.out)
    with open(f"{args.out}.json", "w") as fh:
        json.dump({"config": cfg, "segments": len(table), "skipped": table.skipped}, fh, sort_keys=True, indent=1)
    return [args.out], [args.data, args.phi]


def cmd_augment(args, cfg, man):
    ds = _load_dataset(args.data, man)
    phi = _load_phi(args.phi, man)
    stitcher = _load_diff(args.stitcher, man)
    f_psi = _load_inverse(args.inverse, man)
    man.check(args.index)
    table = _segments(ds, phi, cfg)
    try:
        index = segments.load_index(args.index, table.phi_start)
    except ValueError as exc:
        raise CLIError(EXIT_STALE, f"{args.index}: {exc}") from None
    if stitcher.horizon != cfg["h_stitcher"]:
        raise CLIError(EXIT_CONFIG, f"stitcher horizon {stitcher.horizon} != h_stitcher {cfg['h_stitcher']}")
    scfg = augment.StitchConfig(
        k=cfg["k"],
        k_density=cfg["k_density"],
        beta=cfg["beta"],
        n_stitch=cfg["n_stitch"],
        n_traj=cfg["n_traj"],
        h_stitcher=cfg["h_stitcher"],
        n_probe=cfg["n_probe"],
        ddim_steps=cfg["ddim_steps"],
        seed=cfg["seed"],
    )
    models = augment.StitchModels(phi, stitcher, f_psi, table, index)
    map_fn, pool = _mapper(args.threads)
    try:
        out = augment.augment_dataset(ds, models, scfg, map_fn)
    finally:
        if pool:
            pool.shutdown()
    inputs = [args.data, args.phi, args.stitcher, args.inverse, args.index]
    out.meta["config"] = cfg
    out.meta["input_hashes"] = {Path(p).name: file_hash(p) for p in inputs}
    maze.save_dataset(out, args.out)
    return [args.out], inputs


def cmd_eval(args, cfg, man):
    try:
        spec = maze.load_maze(args.spec)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot read maze: {exc}") from None
    if args.replanning is not None:
        cfg["replanning_interval"] = _replan_value(args.replanning)
    phi = _load_phi(args.phi, man)
    high = _load_diff(args.planner, man)
    stitcher = _load_diff(args.stitcher, man)
    pcfg = _planner_config(cfg)
    if high.horizon != pcfg.n_waypoints or stitcher.horizon != pcfg.jump + 1:
        raise CLIError(EXIT_CONFIG, "planner/stitcher horizons do not match plan_horizon and jump")
    if args.tasks:
        man.check(args.tasks)
        tasks = [tuple(map(tuple, t)) for t in json.loads(Path(args.tasks).read_text())]
    else:
        min_d = cfg["min_distance"] or 2 * cfg["max_span"]
        tasks = planner.make_tasks(spec, cfg["n_tasks"], min_d, cfg["seed"])
    seeds = [cfg["seed"] + i for i in range(cfg["eval_seeds"])]
    models = planner.PlannerModels(spec, high, stitcher, phi)
    map_fn, pool = _mapper(args.threads)
    try:
        report = planner.evaluate(spec, models, tasks, pcfg, seeds, map_fn)
    finally:
        if pool:
            pool.shutdown()
    body = report.to_json()
    body["run_config"] = cfg
    Path(args.out).write_text(json.dumps(body, sort_keys=True, indent=1) + "\n")
    inputs = [args.phi, args.planner, args.stitcher] + ([args.tasks] if args.tasks else [])
    return [args.out], inputs


def cmd_plot(args, cfg, man):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(args.data, man)
    spec = maze.load_maze(args.spec) if args.spec else ds.spec
    written = []
    for sub in args.subsets:
        try:
            lo, hi = (int(v) for v in sub.split(":"))
        except ValueError:
            raise CLIError(EXIT_CONFIG, f"subset must look like START:STOP, got {sub!r}") from None
        trajs = ds.trajectories[lo:hi]
        text = svg.maze_svg(spec, [t.states for t in trajs], title=f"{Path(args.data).name} [{lo}:{hi}]")
        path = out_dir / f"{Path(args.data).stem}_{lo}_{hi}.svg"
        svg.write_svg(path, text)
        written.append(str(path))
    return written, [args.data]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-embedding": cmd_train_embedding,
    "train-stitcher": cmd_train_stitcher,
    "train-inverse": cmd_train_inverse,
    "train-planner": cmd_train_planner,
    "build-index": cmd_build_index,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajstitch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("overrides", nargs="*", metavar="key=value")
        sp.add_argument("--config", help="file of key=value lines")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workspace", default=".", help="directory holding manifest.json")
        sp.add_argument("--threads", type=int, default=1)
        return sp

    sp = common(sub.add_parser("gen-data"))
    sp.add_argument("--spec", required=True, help="maze file or builtin name (maze8, medium, openN)")
    sp.add_argument("--kind", choices=("stitch", "explore"), default="stitch")
    sp.add_argument("--out", required=True)

    for name in ("train-embedding", "train-stitcher", "train-inverse", "train-planner"):
        sp = common(sub.add_parser(name))
        sp.add_argument("--data", required=True, action="append" if name == "train-planner" else "store")
        sp.add_argument("--out", required=True)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--resume", help="training state to continue from")
        sp.add_argument("--state", help="where to write the training state (default OUT.state.npz)")

    sp = common(sub.add_parser("build-index"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--phi", required=True)
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("augment"))
    for flag in ("--data", "--phi", "--stitcher", "--inverse", "--index", "--out"):
        sp.add_argument(flag, required=True)

    sp = common(sub.add_parser("eval"))
    for flag in ("--spec", "--phi", "--planner", "--stitcher", "--out"):
        sp.add_argument(flag, required=True)
    sp.add_argument("--tasks", help="JSON list of [[x, y], [x, y]] cell pairs")
    sp.add_argument("--replanning", help="interval in steps, or 'off'")

    sp = common(sub.add_parser("plot"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--spec")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--subsets", nargs="+", default=["0:10"], help="START:STOP trajectory ranges, one SVG each")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args)
        man = Manifest(args.workspace)
        outputs, inputs = COMMANDS[args.cmd](args, cfg, man)
        for path in outputs:
            man.record(path, args.cmd, cfg, inputs)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ParamFileError, maze.DatasetFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
