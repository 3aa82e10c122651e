"""Command-line entry point: ``gta <command> [flags]``.

Commands: ``gen-data``, ``train``, ``infer``, ``eval``.  Every command echoes
its effective configuration to ``<out>/config.txt`` before doing any work;
timestamps go only to ``<out>/run.log``.  Exit codes: 0 ok, 1 usage, 2 runtime.
A failure prints one line ``error=<Class> message=<text>`` on stderr.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .diffusion import TrainConfig
from .errors import BadParams, GtaError, IoError, LengthMismatch
from .estimator import STAGE_DATA, GTAGenerator, JointGenerator, train_stage
from .evaluation import ablation_table, combine_reports, evaluate_run
from .latent import normalize_depth
from .pipeline import SceneOutput, build_models, training_pairs
from .scene import DatasetConfig, generate_samples
from .store import (
    _read_bytes,
    atomic_write_bytes,
    format_kv,
    load_checkpoint,
    load_dataset,
    parse_kv,
    read_tensor,
    save_checkpoint,
    write_dataset,
    write_tensor,
)

log = logging.getLogger("gta")

DEFAULTS = {
    "gen-data": {
        "scenes": 4,
        "views": 9,
        "resolution": 64,
        "kinds": "orbit,dolly,lateral",
        "complexity": 6,
        "fov": 60.0,
        "start": 0,
    },
    "train": {
        "data": "",
        "patch": 4,
        "hidden": 32,
        "steps": 64,
        "schedule": "cosine",
        "lr": 1e-3,
        "batch_size": 4,
        "iterations": 2000,
        "shuffle_p": 0.5,
        "clip_norm": 1.0,
        "lr_decay": "constant",
        "view_embedding": 0,
        "init_checkpoint": "",
    },
    "infer": {
        "data": "",
        "checkpoint": "",
        "limit": 0,
        "sampling": "deterministic",
        "predict_batch": 32,
        "Q": 5,
        "max_iters": -1,
        "tts": 0,
    },
    "eval": {"data": "", "outputs": "", "sampling": "deterministic"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _coerce(default, text):
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def resolve_config(command, config_path=None, seed=None, overrides=None):
    """Defaults for ``command`` updated by the config file, then flags."""
    cfg = dict(DEFAULTS[command], seed=0)
    if config_path:
        given = parse_kv(_read_bytes(config_path).decode())
        for k, v in given.items():
            if k not in cfg:
                raise UsageError(f"unknown config key {k!r} for {command}")
            cfg[k] = _coerce(cfg[k], v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def echo_config(out, command, cfg):
    atomic_write_bytes(
        Path(out) / "config.txt",
        format_kv([("command", command)] + sorted(cfg.items())).encode(),
    )


def to_uint8(img):
    """round(x * 255) after clipping to [0, 1]."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def save_png(path, img):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_gen_data(cfg, out):
    dcfg = DatasetConfig(
        scenes=cfg["scenes"],
        views=cfg["views"],
        resolution=cfg["resolution"],
        kinds=tuple(k.strip() for k in cfg["kinds"].split(",") if k.strip()),
        seed=cfg["seed"],
        complexity=cfg["complexity"],
        fov=cfg["fov"],
    )
    samples = generate_samples(dcfg, start=cfg["start"])
    write_dataset(out, samples, dcfg)
    log.info("wrote %d scenes to %s", len(samples), out)
    return 0


def _need(cfg, key):
    if not cfg[key]:
        raise UsageError(f"config key {key!r} is required")
    return cfg[key]


def cmd_train(cfg, out, stage):
    samples = load_dataset(_need(cfg, "data"))
    components = ("joint",) if stage == "joint" else ("geometry", "appearance")
    models = build_models(
        cfg["patch"], cfg["hidden"], cfg["steps"], cfg["schedule"], cfg["view_embedding"],
        components=components, seed=cfg["seed"],
    )
    if cfg["init_checkpoint"]:
        prior = load_checkpoint(cfg["init_checkpoint"])
        if prior.schedule.kind != models.schedule.kind or prior.schedule.steps != models.schedule.steps:
            raise BadParams("init_checkpoint uses a different noise schedule")
        for name, net in prior.components():
            if name != stage and name in components:
                setattr(models, name, net)
    # Same seed layout as the estimator, so CLI and API training agree.
    offset = 1 if stage == "appearance" else 0
    tcfg = TrainConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        iterations=cfg["iterations"],
        shuffle_p=cfg["shuffle_p"],
        seed=cfg["seed"] * 100 + offset,
        clip_norm=cfg["clip_norm"],
        lr_decay=cfg["lr_decay"],
    )
    tcfg.validate()
    pairs = training_pairs(samples, cfg["patch"])
    losses = train_stage(
        models, pairs, stage, tcfg,
        callback=lambda i, loss: log.info("iteration %d loss %.6f", i, loss) if i % 100 == 0 else None,
    )
    csv = "iteration,loss\n" + "".join(f"{i},{float(loss)!r}\n" for i, loss in enumerate(losses))
    atomic_write_bytes(Path(out) / f"loss_{stage}.csv", csv.encode())
    save_checkpoint(Path(out) / "checkpoint", models, {"trained": stage, "seed": cfg["seed"]})
    return 0


def _estimator_for(models, cfg):
    cls = JointGenerator if models.geometry is None else GTAGenerator
    max_iters = cfg.get("max_iters", -1)
    return cls.from_models(
        models,
        Q=cfg.get("Q", 5),
        max_iters=None if max_iters is None or max_iters < 0 else max_iters,
        tts=bool(cfg.get("tts", 0)),
        sampling=cfg["sampling"],
        predict_batch=cfg.get("predict_batch", 32),
        random_state=cfg["seed"],
    )


def write_outputs(out, samples, outputs):
    out = Path(out)
    ids = []
    for s, o in zip(samples, outputs):
        sid = f"{s.scene_id:04d}"
        ids.append(sid)
        d = out / f"scene_{sid}"
        write_tensor(d / "appearance.gten", np.stack(o.appearance))
        write_tensor(d / "geometry.gten", np.stack(o.geometry))
        for k, (rgb, depth) in enumerate(zip(o.appearance, o.geometry), 1):
            save_png(d / f"rgb_{k}.png", rgb)
            save_png(d / f"depth_{k}.png", normalize_depth(depth))
        prov = []
        for key, val in sorted(o.provenance.items()):
            if key == "reliable_history":
                for i, r in enumerate(val):
                    prov.append((f"reliable_history.{i}", ",".join(map(str, r))))
            elif isinstance(val, (list, tuple)):
                prov.append((key, ",".join(map(repr, val))))
            else:
                prov.append((key, val))
        atomic_write_bytes(d / "provenance.txt", format_kv(prov).encode())
    atomic_write_bytes(out / "outputs.txt", format_kv([("scenes", ",".join(ids))]).encode())


def read_outputs(root, samples):
    """SceneOutputs stored by ``infer``, matched to dataset samples by scene id."""
    root = Path(root)
    ids = parse_kv(_read_bytes(root / "outputs.txt").decode())["scenes"].split(",")
    by_id = {f"{s.scene_id:04d}": s for s in samples}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise LengthMismatch(f"no ground truth for scenes {','.join(missing)}")
    outs, matched = [], []
    for sid in ids:
        d = root / f"scene_{sid}"
        s = by_id[sid]
        app = read_tensor(d / "appearance.gten")
        geo = read_tensor(d / "geometry.gten")
        outs.append(SceneOutput(list(geo), list(app), s.trajectory, {}))
        matched.append(s)
    return outs, matched


def _select(samples, limit):
    return samples[:limit] if limit and limit > 0 else samples


def cmd_infer(cfg, out):
    samples = _select(load_dataset(_need(cfg, "data")), cfg["limit"])
    models = load_checkpoint(_need(cfg, "checkpoint"))
    est = _estimator_for(models, cfg)
    outputs = est.predict(samples)
    write_outputs(out, samples, outputs)
    log.info("inferred %d scenes", len(outputs))
    return 0


def _score(outputs, samples, config):
    return combine_reports([evaluate_run(o, s.targets) for o, s in zip(outputs, samples)], config)


def cmd_eval(cfg, out, ablation=None):
    out = Path(out)
    samples = load_dataset(_need(cfg, "data"))
    if ablation:
        reports = []
        for path in ablation:
            est = _estimator_for(load_checkpoint(path), dict(cfg, max_iters=-1, tts=0))
            reports.append(_score(est.predict(samples), samples, {"checkpoint": path}))
        for tag, rep in zip("ab", reports):
            atomic_write_bytes(out / f"report_{tag}.txt", rep.to_text().encode())
            atomic_write_bytes(out / f"report_{tag}.csv", rep.to_csv().encode())
        table = ablation_table(reports[0], reports[1], ("A", "B"))
        atomic_write_bytes(out / "ablation.csv", table.encode())
        return 0
    outputs, matched = read_outputs(_need(cfg, "outputs"), samples)
    rep = _score(outputs, matched, {"outputs": cfg["outputs"]})
    atomic_write_bytes(out / "report.txt", rep.to_text().encode())
    atomic_write_bytes(out / "report.csv", rep.to_csv().encode())
    return 0


# ----------------------------------------------------------------------------
# argument handling
# ----------------------------------------------------------------------------


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory", required=True)

    parser = _Parser(prog="gta", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="render a procedural dataset")
    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", choices=sorted(STAGE_DATA), required=True)
    p = sub.add_parser("infer", parents=[common], help="generate novel views")
    p.add_argument("--tts", action="store_true", help="enable test-time scaling")
    p.add_argument("--Q", type=int, help="reliable window size")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p = sub.add_parser("eval", parents=[common], help="score outputs or compare checkpoints")
    p.add_argument("--ablation", nargs=2, metavar=("CKPT_A", "CKPT_B"))
    return parser


def _setup_logging(out):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    Path(out).mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(Path(out) / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    return handler


def main(argv=None):
    handler = None
    try:
        args = build_parser().parse_args(argv)
        overrides = {}
        if args.command == "infer":
            overrides = {"Q": args.Q, "max_iters": args.max_iters, "tts": 1 if args.tts else None}
        cfg = resolve_config(args.command, args.config, args.seed, overrides)
        if args.command == "eval" and not args.ablation and not cfg["outputs"]:
            raise UsageError("eval needs either outputs=<dir> in the config or --ablation")
        try:
            handler = _setup_logging(args.out)
            echo_config(args.out, args.command, cfg)
        except OSError as e:
            raise IoError(f"cannot use output directory {args.out}: {e}") from e
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.stage)
        if args.command == "infer":
            return cmd_infer(cfg, args.out)
        return cmd_eval(cfg, args.out, args.ablation)
    except UsageError as e:
        _fail(e)
        return 1
    except (GtaError, OSError, ValueError) as e:
        _fail(e)
        return 2
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def _fail(exc):
    msg = " ".join(str(exc).split())
    print(f"error={type(exc).__name__} message={msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
