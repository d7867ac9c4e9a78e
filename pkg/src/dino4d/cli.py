"""Command line entry point: gen, train, eval, refine, export, report.

Diagnostics go to stderr; everything machine readable goes to files under
``--out``. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import DiffusionSchedule, refine
from .errors import ConfigInvalid, Dino4DError
from .geometry import Pointmap, invert_pose, write_ply
from .report import read_log, render_report, plot_losses, validate_report
from .scene import SceneConfig, generate, load_scene, save_scene, stage_seed
from .training import DEFAULT_THRESHOLDS, TrainConfig, evaluate, infer_sequence, load_checkpoint, train

log = logging.getLogger("dino4d")

DEFAULT_NUM_SCENES = 8


class UsageError(Exception):
    """Bad flags or an unreadable config; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    artifacts: list = field(default_factory=list)
    tool_version: str = __version__
    started: str = ""
    finished: str = ""

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        missing = [a for a in self.artifacts if not Path(a).exists()]
        if missing:
            raise RuntimeError(f"artifacts missing at run end: {missing}")
        path = out_dir / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return cfg


def _pick(flag, cfg: dict, key: str, default):
    """flag > config > default"""
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _parse_thresholds(text: str | None, cfg: dict) -> tuple[float, ...]:
    if text is None:
        return tuple(cfg.get("thresholds", DEFAULT_THRESHOLDS))
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise UsageError(f"--thresholds must be comma separated numbers, got {text!r}") from exc
    if not vals:
        raise UsageError("--thresholds is empty")
    return vals


def _scene_dirs(paths: list[str]) -> list[Path]:
    """Expand each path: a bundle directory, or a directory holding bundles."""
    out = []
    for p in map(Path, paths):
        if (p / "manifest.json").exists():
            out.append(p)
        elif p.is_dir():
            out.extend(sorted(d for d in p.iterdir() if (d / "manifest.json").exists()))
        else:
            raise UsageError(f"{p} is not a scene bundle or a directory of bundles")
    if not out:
        raise UsageError("no scene bundles found")
    return out


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_gen(args, cfg: dict) -> int:
    out = Path(args.out)
    seed = _pick(args.seed, cfg, "seed", 0)
    n = int(_pick(args.num_scenes, cfg, "num_scenes", DEFAULT_NUM_SCENES))
    scene_keys = dict(cfg.get("scene", {}))
    man = RunManifest("gen", {"num_scenes": n, "scene": scene_keys, "seed": seed}, {}, started=_now())
    out.mkdir(parents=True, exist_ok=True)
    for k in range(n):
        s = seed + k
        try:
            sc = SceneConfig.from_dict({**scene_keys, "seed": s})
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc
        scene = generate(sc, query_stride=int(cfg.get("query_stride", 4)))
        d = save_scene(scene, out / scene.scene_id, export_pgm=bool(cfg.get("export_pgm", False)))
        man.seeds[scene.scene_id] = s
        man.artifacts.append(str(d / "manifest.json"))
        log.info("wrote %s", d)
    man.write(out)
    return 0


def cmd_train(args, cfg: dict) -> int:
    out = Path(args.out)
    scene_paths = args.scenes or cfg.get("scenes")
    if not scene_paths:
        raise UsageError("train needs --scenes or a 'scenes' list in the config")
    train_keys = {k: v for k, v in cfg.items() if k not in ("scenes",)}
    if args.steps is not None:
        train_keys["steps"] = args.steps
    if args.seed is not None:
        train_keys["seed"] = args.seed
    tcfg = TrainConfig.from_dict(train_keys)
    scenes = [load_scene(d) for d in _scene_dirs(scene_paths)]
    man = RunManifest("train", tcfg.to_dict(), {"train": tcfg.seed, "init": stage_seed(tcfg.seed, "init")},
                      started=_now())
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    res = train(scenes, tcfg, out_dir=out, log_path=log_path)
    fig = plot_losses(res.log, out / "losses.png")
    man.artifacts += [str(res.checkpoint), str(log_path), str(fig)]
    man.write(out)
    first, last = res.log[0]["L_total"], res.log[-1]["L_total"]
    log.info("L_total %.4f -> %.4f over %d steps", first, last, len(res.log))
    return 0


def cmd_eval(args, cfg: dict) -> int:
    out = Path(args.out)
    ckpt = args.checkpoint or cfg.get("checkpoint")
    if ckpt is None:
        raise UsageError("eval needs --checkpoint")
    scene_paths = args.scenes or cfg.get("scenes")
    if not scene_paths:
        raise UsageError("eval needs --scenes")
    thresholds = _parse_thresholds(args.thresholds, cfg)
    do_refine = bool(args.refine or cfg.get("refine", False))
    seed = _pick(args.seed, cfg, "seed", 0)
    model, header = load_checkpoint(ckpt)
    hyper = header.get("hyperparameters", {})
    schedule = DiffusionSchedule.linear(hyper.get("diffusion_steps", 5), hyper.get("beta_start", 1e-4),
                                        hyper.get("beta_end", 0.2))
    scenes = [load_scene(d) for d in _scene_dirs(scene_paths)]
    man = RunManifest("eval", {"checkpoint": str(ckpt), "thresholds": list(thresholds), "refine": do_refine},
                      {"refine": seed}, started=_now())
    rep = evaluate(model, scenes, thresholds, do_refine, schedule, seed)
    validate_report(rep)
    out.mkdir(parents=True, exist_ok=True)
    rpath = out / "report.json"
    rpath.write_text(json.dumps(rep, indent=2) + "\n")
    man.artifacts.append(str(rpath))
    man.artifacts += [str(p) for p in render_report(rep, out)]
    man.write(out)
    return 0


def cmd_refine(args, cfg: dict) -> int:
    """Coarse and refined reconstruction of one frame, written as PLY in world coordinates."""
    out = Path(args.out)
    if args.checkpoint is None or not args.scenes:
        raise UsageError("refine needs --checkpoint and --scenes")
    model, header = load_checkpoint(args.checkpoint)
    hyper = header.get("hyperparameters", {})
    schedule = DiffusionSchedule.linear(hyper.get("diffusion_steps", 5), hyper.get("beta_start", 1e-4),
                                        hyper.get("beta_end", 0.2))
    scene = load_scene(_scene_dirs(args.scenes)[0])
    j = args.frame if args.frame is not None else scene.T - 1
    if not 1 <= j < scene.T:
        raise UsageError(f"--frame must be in [1, {scene.T - 1}]")
    seed = _pick(args.seed, cfg, "seed", 0)
    preds, states, _ = infer_sequence(scene, model)
    coarse = preds[j].reconstruction
    ref = refine(coarse, states[j].fused, model.denoiser, schedule,
                 stage_seed(seed, f"refine:{scene.scene_id}:{j}"), model.residual_scale)
    to_world = invert_pose(scene.cameras[0].pose)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, pm in (("coarse", coarse), ("refined", ref)):
        p = out / f"{scene.scene_id}_f{j:03d}_{name}.ply"
        write_ply(pm.transformed(to_world), p)
        paths.append(str(p))
    man = RunManifest("refine", {"checkpoint": args.checkpoint, "frame": j}, {"refine": seed}, paths, started=_now())
    man.write(out)
    return 0


def cmd_export(args, cfg: dict) -> int:
    """Write a pointmap to PLY. Sources: a .npz with ``points`` (and optional
    ``valid``), or a scene bundle (ground truth of ``--frame``)."""
    if args.ply is None or args.source is None:
        raise UsageError("export needs a pointmap source and --ply")
    src = Path(args.source)
    if src.suffix == ".npz":
        with np.load(src) as z:
            pts = z["points"]
            valid = z["valid"] if "valid" in z else np.all(np.isfinite(pts), axis=-1)
        pm = Pointmap(np.where(valid[..., None], pts, 0.0), valid, 0, 0)
    else:
        scene = load_scene(src)
        pm = scene.gt_pointmap(args.frame or 0)
    n = write_ply(pm, args.ply)
    log.info("wrote %d vertices to %s", n, args.ply)
    return 0


def cmd_report(args, cfg: dict) -> int:
    if args.report is None:
        raise UsageError("report needs --report")
    rep = json.loads(Path(args.report).read_text())
    validate_report(rep)
    records = read_log(args.log) if args.log else None
    render_report(rep, Path(args.out), records)
    return 0


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dino4d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config; flags override its fields")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int)
        return sp

    g = common(sub.add_parser("gen", help="generate synthetic scene bundles"))
    g.add_argument("--num-scenes", type=int)

    t = common(sub.add_parser("train", help="train on scene bundles"))
    t.add_argument("--scenes", nargs="+")
    t.add_argument("--steps", type=int)

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes"))
    e.add_argument("--checkpoint")
    e.add_argument("--scenes", nargs="+")
    e.add_argument("--refine", action="store_true")
    e.add_argument("--thresholds", help="comma separated APD thresholds in metres")

    r = common(sub.add_parser("refine", help="write coarse and refined reconstructions of one frame"))
    r.add_argument("--checkpoint")
    r.add_argument("--scenes", nargs="+")
    r.add_argument("--frame", type=int)

    x = common(sub.add_parser("export", help="export a pointmap as ASCII PLY"), out_required=False)
    x.add_argument("source", nargs="?", help=".npz pointmap or scene bundle directory")
    x.add_argument("--ply")
    x.add_argument("--frame", type=int)

    rp = common(sub.add_parser("report", help="re-render tables and figures from a report"))
    rp.add_argument("--report")
    rp.add_argument("--log", help="training log to plot")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "refine": cmd_refine,
            "export": cmd_export, "report": cmd_report}


def _setup_logging() -> None:
    level = os.environ.get("DINO4D_LOG", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG", "WARNING"):
        level = "INFO"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigInvalid) as exc:
        print(f"dino4d {args.command}: {exc}", file=sys.stderr)
        return 2
    except (Dino4DError, OSError, ValueError, RuntimeError) as exc:
        print(f"dino4d {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
