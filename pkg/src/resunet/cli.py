"""Command-line entry point: ``resunet {train,predict,evaluate,verify}``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines (keys are flag names, with or without dashes), then
command-line flags. Exit codes: 0 ok, 1 verification failure, 2 bad input,
3 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_BAD_INPUT, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("resunet")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _float_list(text: str) -> list[float]:
    return [float(t) for t in str(text).replace(" ", "").split(",") if t]


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str
    commands: tuple[str, ...]


OPTIONS = [
    Option("manifest", str, None, "dataset manifest (image<TAB>mask per line)", ("train", "evaluate")),
    Option("synthetic", int, None, "train on N generated road scenes instead of a manifest", ("train",)),
    Option("checkpoint", str, None, "checkpoint file to load", ("predict",)),
    Option("out", str, "resunet_out", "output directory", ("train", "predict", "evaluate")),
    Option("seed", int, 0, "random seed", ("train", "verify")),
    Option("threads", int, 1, "BLAS thread cap (1 keeps runs bit-reproducible)", ("train", "predict", "evaluate", "verify")),
    Option("width_scale", float, 1.0, "channel width multiplier", ("train",)),
    Option("epochs", int, 50, "training epochs", ("train",)),
    Option("batch_size", int, 8, "mini-batch size", ("train",)),
    Option("lr", float, 0.001, "initial learning rate", ("train",)),
    Option("lr_decay_factor", float, 0.1, "learning-rate decay factor", ("train",)),
    Option("lr_decay_every", int, 20, "decay the learning rate every this many epochs", ("train",)),
    Option("samples_per_epoch", int, 600, "random tiles per epoch", ("train",)),
    Option("overlap", int, 14, "tile overlap in pixels", ("predict",)),
    Option("threshold", float, 0.5, "binarization threshold for predicted masks", ("predict",)),
    Option("rho", int, 3, "relaxed-metric slack in pixels", ("evaluate",)),
    Option("thresholds", _float_list, None, "comma-separated PR thresholds (default 0.01..0.99)", ("evaluate",)),
    Option("distance", str, "chebyshev", "slack distance: chebyshev or euclidean", ("evaluate",)),
    Option("seeds", int, 20, "random seeds per primitive gradient check", ("verify",)),
]
OPTION_BY_NAME = {o.name: o for o in OPTIONS}


def read_config_file(path: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path!r}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("config", f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.lstrip("-").replace("-", "_")
            opt = OPTION_BY_NAME.get(key)
            if opt is None:
                raise ConfigError(key, f"unknown setting in {path}:{lineno}")
            try:
                values[key] = opt.type(value)
            except ValueError as exc:
                raise ConfigError(key, f"bad value {value!r} in {path}:{lineno}") from exc
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resunet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in ("train", "predict", "evaluate", "verify"):
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=argparse.SUPPRESS, help="key = value settings file")
        for opt in OPTIONS:
            if cmd in opt.commands:
                p.add_argument(
                    "--" + opt.name.replace("_", "-"), dest=opt.name, type=opt.type,
                    default=argparse.SUPPRESS, help=f"{opt.help} (default: {opt.default})",
                )
        if cmd == "predict":
            p.add_argument("images", nargs="*", help="RGB PNG images to segment")
    return parser


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, overridden by the config file, overridden by flags."""
    given = vars(args)
    cfg = {o.name: o.default for o in OPTIONS if args.command in o.commands}
    if "config" in given:
        for key, value in read_config_file(given["config"]).items():
            if key in cfg:
                cfg[key] = value
    for key, value in given.items():
        if key in cfg:
            cfg[key] = value
    cfg["command"] = args.command
    cfg["images"] = given.get("images", [])
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict[str, Any]) -> None:
    def positive(name):
        if name in cfg and cfg[name] is not None and not cfg[name] > 0:
            raise ConfigError(name, f"must be positive, got {cfg[name]}")

    for name in ("threads", "width_scale", "batch_size", "lr", "lr_decay_every", "samples_per_epoch", "seeds", "synthetic"):
        positive(name)
    if cfg.get("epochs", 0) < 0:
        raise ConfigError("epochs", f"must be >= 0, got {cfg['epochs']}")
    if "lr_decay_factor" in cfg and not 0 < cfg["lr_decay_factor"] <= 1:
        raise ConfigError("lr_decay_factor", f"must be in (0, 1], got {cfg['lr_decay_factor']}")
    if "overlap" in cfg and not 0 <= cfg["overlap"] < 224:
        raise ConfigError("overlap", f"must satisfy 0 <= overlap < 224, got {cfg['overlap']}")
    if "threshold" in cfg and not 0 <= cfg["threshold"] <= 1:
        raise ConfigError("threshold", f"must be in [0, 1], got {cfg['threshold']}")
    if cfg.get("rho", 0) < 0:
        raise ConfigError("rho", f"must be >= 0, got {cfg['rho']}")
    if cfg.get("distance", "chebyshev") not in ("chebyshev", "euclidean"):
        raise ConfigError("distance", f"must be chebyshev or euclidean, got {cfg['distance']!r}")
    ts = cfg.get("thresholds")
    if ts is not None and (not ts or any(not 0 < t < 1 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:]))):
        raise ConfigError("thresholds", "must be strictly increasing values inside (0, 1)")
    cmd = cfg["command"]
    if cmd == "train":
        if cfg["synthetic"] is None and not cfg["manifest"]:
            raise ConfigError("manifest", "train needs --manifest or --synthetic N")
        if cfg["synthetic"] is None and not os.path.isfile(cfg["manifest"]):
            raise ConfigError("manifest", f"no such file {cfg['manifest']!r}")
        if cfg["samples_per_epoch"] < cfg["batch_size"]:
            raise ConfigError("samples_per_epoch", "must be at least batch_size")
    if cmd == "predict":
        if not cfg["checkpoint"] or not os.path.isfile(cfg["checkpoint"]):
            raise ConfigError("checkpoint", f"no such file {cfg['checkpoint']!r}")
        if not cfg["images"]:
            raise ConfigError("images", "predict needs at least one input image")
        for path in cfg["images"]:
            if not os.path.isfile(path):
                raise ConfigError("images", f"no such file {path!r}")
    if cmd == "evaluate" and (not cfg["manifest"] or not os.path.isfile(cfg["manifest"])):
        raise ConfigError("manifest", f"no such file {cfg['manifest']!r}")


# ------------------------------------------------------------------ commands


def cmd_train(cfg: dict[str, Any]) -> int:
    from .data import DataError, load_dataset, synthetic_dataset
    from .train import TrainConfig, TrainingDiverged, epoch_means, train

    try:
        if cfg["synthetic"] is not None:
            dataset = synthetic_dataset(cfg["synthetic"], seed=cfg["seed"])
        else:
            dataset = load_dataset(cfg["manifest"])
    except (DataError, OSError) as exc:
        print(f"error: dataset: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    tc = TrainConfig(
        batch_size=cfg["batch_size"], initial_lr=cfg["lr"], lr_decay_factor=cfg["lr_decay_factor"],
        lr_decay_every_epochs=cfg["lr_decay_every"], epochs=cfg["epochs"],
        samples_per_epoch=cfg["samples_per_epoch"], seed=cfg["seed"], width_scale=cfg["width_scale"],
    )
    try:
        _, records = train(dataset, tc, out_dir=cfg["out"])
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    for epoch, mean in enumerate(epoch_means(records)):
        print(f"epoch {epoch}: mean mse {mean:.6f}")
    print(f"checkpoints written to {cfg['out']}")
    return EXIT_OK


def cmd_predict(cfg: dict[str, Any]) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .data import DataError, load_image, save_png
    from .tiling import plan_tiles, predict_image

    try:
        store = load_checkpoint(cfg["checkpoint"])
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    try:
        images = [(p, load_image(p)) for p in cfg["images"]]
        for path, img in images:
            plan_tiles(img.shape[2], img.shape[3], overlap=cfg["overlap"])
    except (DataError, ValueError) as exc:
        print(f"error: images: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    os.makedirs(cfg["out"], exist_ok=True)
    for path, img in images:
        grid = plan_tiles(img.shape[2], img.shape[3], overlap=cfg["overlap"])
        seg = predict_image(img, store, overlap=cfg["overlap"], threshold=cfg["threshold"])
        stem = os.path.splitext(os.path.basename(path))[0]
        save_png(seg.probs[0, 0], os.path.join(cfg["out"], f"{stem}_prob.png"))
        save_png(seg.binary[0, 0], os.path.join(cfg["out"], f"{stem}_mask.png"))
        print(
            f"{path}: {img.shape[3]}x{img.shape[2]} tiles={len(grid)} "
            f"grid={len(grid.ys)}x{len(grid.xs)} overlap={cfg['overlap']}"
        )
    return EXIT_OK


def cmd_evaluate(cfg: dict[str, Any]) -> int:
    from .data import DataError, load_probability_map, read_manifest
    from .metrics import pr_curve

    try:
        pairs = read_manifest(cfg["manifest"])
        loaded = [(p, g, *load_probability_map(p, g)) for p, g in pairs]
    except (DataError, OSError) as exc:
        print(f"error: evaluate: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if not loaded:
        print("error: evaluate: manifest lists no pairs", file=sys.stderr)
        return EXIT_BAD_INPUT
    bad = [f"{p} {probs.shape} vs {g} {gt.shape}" for p, g, probs, gt in loaded if probs.shape != gt.shape]
    if bad:
        print("error: shape mismatch:\n  " + "\n  ".join(bad), file=sys.stderr)
        return EXIT_BAD_INPUT
    curve = pr_curve(
        [probs for _, _, probs, _ in loaded], [gt for _, _, _, gt in loaded],
        rho=cfg["rho"], thresholds=cfg["thresholds"], distance=cfg["distance"],
    )
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "pr_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write(curve.to_csv())
    summary = curve.summary() + f", images={len(loaded)}, aggregation=micro"
    with open(os.path.join(cfg["out"], "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_verify(cfg: dict[str, Any]) -> int:
    from . import verify

    results = verify.run_all(seed=cfg["seed"], seeds=cfg["seeds"])
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VERIFY_FAILED
    print("all checks passed")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: invalid setting {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=cfg["threads"]):
        return COMMANDS[cfg["command"]](cfg)


if __name__ == "__main__":
    sys.exit(main())
