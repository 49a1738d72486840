"""Command-line entry point.

Every command writes ``manifest-<command>.txt`` into its output directory;
``distill3d rerun <manifest>`` replays it. Failures print one line of the
form ``distill3d: error kind=<kind> code=<n>: <message>`` to stderr.
Exit codes: 2 usage, 3 malformed config or file format, 4 missing file,
1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as pl
from .bench.finetune import EvalReport, evaluate
from .bench.metrics import ConfusionMatrix, accumulate, accuracy, miou, report_csv, report_summary
from .bench.protocols import LabelBudget
from .bench.synth import CLASS_NAMES, generate_synthetic_world
from .bench.world import list_scenes, write_world
from .config import ExperimentConfig, load_config, parse_range, save_manifest
from .distill import histogram_csv, parse_teacher, pseudo_label_histogram
from .errors import ConfigError, Distill3DError, FormatError, MissingFileError
from .geom import lift
from .io import write_ply, write_slab
from .net.checkpoint import load_checkpoint, save_checkpoint
from .net.gradcheck import check_gradients
from .net.model import NetConfig, SparseUNet
from . import plotting

log = logging.getLogger("distill3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag name -> config key for options shared with the config file
CONFIG_FLAGS = {
    "world": "world_dir", "init": "init", "scenes": "scenes", "classes": "classes",
    "points": "points_per_scene", "levels": "levels", "channels": "base_channels",
    "teacher_classes": "teacher_classes", "task_classes": "task_classes", "resolution": "resolution",
    "optimizer": "optimizer", "lr": "lr", "momentum": "momentum", "epochs": "epochs",
    "batch_size": "batch_size", "pretrain_scenes": "pretrain_scenes", "train_scenes": "train_scenes",
    "eval_scenes": "eval_scenes", "budget": "budget", "pseudo_fraction": "pseudo_fraction",
    "teacher": "teacher", "entropy_weight": "entropy_weight",
    "consistency_weight": "consistency_weight", "ema_alpha": "ema_alpha",
    "rampup_epochs": "rampup_epochs", "task": "task",
}


def _budget(text: str) -> str:
    try:
        LabelBudget.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _teacher(text: str) -> str:
    try:
        parse_teacher(text, 2)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    world = _Parser(add_help=False)
    world.add_argument("--world", help="synthetic world directory")

    net = _Parser(add_help=False)
    net.add_argument("--levels", type=int)
    net.add_argument("--channels", type=int, help="base channel count")
    net.add_argument("--teacher-classes", type=int)
    net.add_argument("--task-classes", type=int)
    net.add_argument("--resolution", type=int)

    train = _Parser(add_help=False)
    train.add_argument("--init", help="checkpoint to start from")
    train.add_argument("--optimizer", choices=("sgd", "adam"))
    train.add_argument("--lr", type=float)
    train.add_argument("--momentum", type=float)
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--no-augment", action="store_true")

    split = _Parser(add_help=False)
    split.add_argument("--train-scenes", help="scene range start:stop")
    split.add_argument("--eval-scenes", help="scene range start:stop")
    split.add_argument("--budget", type=_budget, help="la:<points>, lr:<fraction> or full")

    semi = _Parser(add_help=False)
    semi.add_argument("--entropy-weight", type=float)
    semi.add_argument("--consistency-weight", type=float)
    semi.add_argument("--ema-alpha", type=float)
    semi.add_argument("--rampup-epochs", type=int)
    semi.add_argument("--task", choices=("seg", "cls"))

    teacher = _Parser(add_help=False)
    teacher.add_argument("--teacher", type=_teacher, help="oracle:<noise>,<temperature>[,<blur>] or file:<dir>")
    teacher.add_argument("--pretrain-scenes", help="scene range start:stop")

    p = _Parser(prog="distill3d", description="2D-to-3D knowledge transfer at desk scale")
    p.add_argument("--version", action="version", version=f"distill3d {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic world")
    s.add_argument("--scenes", type=int)
    s.add_argument("--classes", type=int)
    s.add_argument("--points", type=int, help="points per scene")
    sub.add_parser("lift", parents=[common, world], help="lift frames to PLY clouds")
    sub.add_parser("pseudo-label", parents=[common, world, teacher], help="write teacher SLAB maps")
    sub.add_parser("histogram", parents=[common, world, teacher], help="summed pseudo-label probability")
    sub.add_parser("pretrain", parents=[common, world, net, train, teacher], help="pre-train on lifted frames")
    sub.add_parser("finetune", parents=[common, world, net, train, split, semi],
                   help="supervised fine-tuning under a label budget")
    st = sub.add_parser("semi", parents=[common, world, net, train, split, semi],
                        help="fine-tuning with entropy and mean-teacher losses")
    st.add_argument("--self-train", action="store_true",
                    help="add confident pseudo-labels of unlabeled scenes (lr budgets)")
    ev = sub.add_parser("eval", parents=[common, world, net, split], help="evaluate a checkpoint or predictions")
    ev.add_argument("--init", help="checkpoint to evaluate")
    ev.add_argument("--pred", help="directory of <scene_id>.txt label predictions")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a toy network")
    r = sub.add_parser("rerun", help="replay a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="override the output directory")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {"command": args.command}
    for flag, key in CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "no_augment", False):
        changes["augment"] = False
    if getattr(args, "self_train", False):
        changes["self_train"] = True
    if getattr(args, "pred", None):
        changes["pred_dir"] = args.pred
    try:
        cfg = cfg.replace(**changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return absolute_paths(cfg)


def absolute_paths(cfg: ExperimentConfig) -> ExperimentConfig:
    changes = {"out_dir": str(Path(cfg.out_dir).resolve()), "world_dir": str(Path(cfg.world_dir).resolve())}
    for key in ("init", "pred_dir"):
        if getattr(cfg, key):
            changes[key] = str(Path(getattr(cfg, key)).resolve())
    return cfg.replace(**changes)


# -- helpers --------------------------------------------------------------
def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_dirs(cfg: ExperimentConfig, spec: str):
    scenes = list_scenes(cfg.world_dir)
    if not scenes:
        raise MissingFileError(f"no scenes under {cfg.world_dir}")
    return [scenes[i] for i in parse_range(spec, len(scenes))]


def _clouds(dirs):
    return [(d.scene_id, d.cloud()) for d in dirs]


def _teacher_for(cfg: ExperimentConfig):
    try:
        return parse_teacher(cfg.teacher, cfg.teacher_classes, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _init_state(cfg: ExperimentConfig):
    return load_checkpoint(cfg.init) if cfg.init else None


def _names(cfg: ExperimentConfig):
    return CLASS_NAMES[:cfg.task_classes] if cfg.task_classes <= len(CLASS_NAMES) else None


def _write_losses(out: Path, history, name: str = "losses") -> None:
    if history and isinstance(history[0], dict):
        keys = list(history[0])
        lines = ["epoch," + ",".join(keys)]
        lines += [f"{e}," + ",".join(f"{h[k]:.8f}" for k in keys) for e, h in enumerate(history)]
    else:
        lines = ["epoch,loss"] + [f"{e},{v:.8f}" for e, v in enumerate(history)]
    (out / f"{name}.csv").write_text("\n".join(lines) + "\n")
    if history:
        plotting.plot_losses(history, out / f"{name}.png")


def _write_report(out: Path, report: EvalReport, names) -> str:
    (out / "report.csv").write_text(report_csv(report.iou, report.miou, report.accuracy, names))
    summary = report_summary(report.iou, report.miou, report.accuracy, names)
    (out / "summary.txt").write_text(summary)
    plotting.plot_iou(report.iou, out / "iou.png", names, report.miou)
    return summary


# -- commands -------------------------------------------------------------
def cmd_synth(cfg: ExperimentConfig) -> None:
    world = generate_synthetic_world(cfg.seed, cfg.scenes, cfg.classes, cfg.points_per_scene)
    dirs = write_world(world, _out(cfg))
    print(f"wrote {len(dirs)} scenes to {cfg.out_dir}")


def cmd_lift(cfg: ExperimentConfig) -> None:
    out = _out(cfg)
    n = 0
    for d in _scene_dirs(cfg, ""):
        (out / d.scene_id).mkdir(exist_ok=True)
        for k in d.frame_ids:
            write_ply(out / d.scene_id / f"frame_{k}.ply", lift(d.frame(k)))
            n += 1
    print(f"lifted {n} frames into {out}")


def _frames(cfg: ExperimentConfig):
    return [f for d in _scene_dirs(cfg, cfg.pretrain_scenes) for f in d.frames()]


def cmd_pseudo_label(cfg: ExperimentConfig) -> None:
    from .distill import generate_pseudo_labels

    out = _out(cfg)
    teacher = _teacher_for(cfg)
    frames = _frames(cfg)
    for f in frames:
        probs = generate_pseudo_labels(teacher, f)
        path = out / f"{f.name}.slab"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_slab(path, probs.reshape(-1, probs.shape[-1]))
    print(f"wrote {len(frames)} SLAB maps to {out}")


def cmd_histogram(cfg: ExperimentConfig) -> None:
    from .distill import generate_pseudo_labels

    out = _out(cfg)
    teacher = _teacher_for(cfg)
    sums = pseudo_label_histogram([generate_pseudo_labels(teacher, f) for f in _frames(cfg)])
    (out / "histogram.csv").write_text(histogram_csv(sums))
    names = CLASS_NAMES[:len(sums)] if len(sums) <= len(CLASS_NAMES) else None
    plotting.plot_histogram(sums, out / "histogram.png", names)
    print(histogram_csv(sums), end="")


def cmd_pretrain(cfg: ExperimentConfig) -> None:
    out = _out(cfg)
    samples = pl.pretrain_samples(_frames(cfg), _teacher_for(cfg), cfg.resolution)
    result = pl.run_pretrain(cfg, samples)
    save_checkpoint(out / "pretrain.ckpt", result.state)
    _write_losses(out, result.losses)
    last = f"{result.losses[-1]:.5f}" if result.losses else "n/a"
    print(f"pre-trained on {len(samples)} frames, final loss {last}")


def _finetune(cfg: ExperimentConfig, semi: bool, self_train: bool = False) -> None:
    out = _out(cfg)
    model = pl.task_model(cfg, _init_state(cfg))
    train = _clouds(_scene_dirs(cfg, cfg.train_scenes))
    ev = _clouds(_scene_dirs(cfg, cfg.eval_scenes)) if cfg.eval_scenes else []
    if cfg.task == "cls":
        result = pl.run_classify(cfg, model, train, ev, semi=semi)
    else:
        result = pl.run_finetune(cfg, model, train, ev, semi=semi, self_train=self_train)
    save_checkpoint(out / "model.ckpt", result.state)
    if result.teacher_state is not None:
        save_checkpoint(out / "teacher.ckpt", result.teacher_state)
    _write_losses(out, result.losses)
    print(_write_report(out, result.report, _names(cfg)), end="")


def cmd_finetune(cfg: ExperimentConfig) -> None:
    _finetune(cfg, semi=False)


def cmd_semi(cfg: ExperimentConfig) -> None:
    _finetune(cfg, semi=True, self_train=cfg.self_train)


def _read_predictions(path: Path, n: int) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"no predictions for scene: {path}")
    try:
        pred = np.array([int(t) for t in path.read_text().split()], dtype=np.int64)
    except ValueError:
        raise FormatError(f"{path}: predictions must be integers") from None
    if len(pred) != n:
        raise FormatError(f"{path}: {len(pred)} predictions for {n} points")
    return pred


def cmd_eval(cfg: ExperimentConfig, pred_dir: str | None) -> None:
    out = _out(cfg)
    scenes = _clouds(_scene_dirs(cfg, cfg.eval_scenes))
    if pred_dir:
        cm = ConfusionMatrix(cfg.task_classes)
        gts, preds = [], []
        for sid, cloud in scenes:
            pred = _read_predictions(Path(pred_dir) / f"{sid}.txt", len(cloud))
            accumulate(cm, cloud.hard_labels, pred)
            gts.append(cloud.hard_labels)
            preds.append(pred)
        iou, mean = miou(cm)
        report = EvalReport(iou, mean, accuracy(np.concatenate(gts), np.concatenate(preds)), cm.counts)
    else:
        if not cfg.init:
            raise ConfigError("eval needs --init or --pred")
        model = pl.task_model(cfg, _init_state(cfg))
        report = evaluate(model, pl.full_samples(scenes), cfg.resolution)
    print(_write_report(out, report, _names(cfg)), end="")


def cmd_gradcheck(cfg: ExperimentConfig) -> None:
    from .cloud import PointCloud, voxelize
    from .distill import soft_cross_entropy

    out = _out(cfg)
    rng = np.random.default_rng(cfg.seed)
    cloud = PointCloud(rng.uniform(0, 1, (10, 3)), rng.uniform(0, 1, (10, 3)))
    grid = voxelize(cloud, 4)
    model = SparseUNet(NetConfig(levels=2, base_channels=2, task_classes=3), seed=cfg.seed)
    target = rng.dirichlet(np.ones(3), grid.num_voxels)

    def loss_fn(g):
        return soft_cross_entropy(model.forward_segment(g, train=True)[1], target)

    err = check_gradients(model.params, grid, loss_fn)
    (out / "gradcheck.csv").write_text(f"voxels,parameters,max_rel_error\n{grid.num_voxels},"
                                       f"{model.num_parameters()},{err:.3e}\n")
    print(f"max relative error {err:.3e} over {model.num_parameters()} parameters")


def run(cfg: ExperimentConfig) -> None:
    commands = {"synth": cmd_synth, "lift": cmd_lift, "pseudo-label": cmd_pseudo_label,
                "histogram": cmd_histogram, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
                "semi": cmd_semi, "gradcheck": cmd_gradcheck}
    if cfg.command == "eval":
        cmd_eval(cfg, cfg.pred_dir or None)
    elif cfg.command in commands:
        commands[cfg.command](cfg)
    else:
        raise ConfigError(f"unknown command {cfg.command!r}")
    save_manifest(cfg, cfg.out_dir)


def _fail(kind: str, code: int, message: str) -> int:
    message = " ".join(str(message).split())
    print(f"distill3d: error kind={kind} code={code}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", 2, exc)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.command == "rerun":
            cfg = load_config(args.manifest)
            if args.out:
                cfg = cfg.replace(out_dir=str(Path(args.out).resolve()))
        else:
            cfg = resolve_config(args)
        run(cfg)
    except Distill3DError as exc:
        return _fail(exc.kind, exc.exit_code, exc)
    except FileNotFoundError as exc:
        return _fail("missing-file", 4, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
