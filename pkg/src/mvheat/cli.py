"""``mvheat`` command line: train, eval, diffuse, gradcheck, synth.

Errors are reported on stderr as one JSON object per line, and every
subcommand exits nonzero on failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import ArchitectureMismatch
from .config import ConfigFieldError, RunConfig, load_config, tomllib
from .events import load_events, save_annotations, save_events, stack_events
from .heat import EXPERTS, hco_apply
from .oracle import OracleGrid, pde_oracle_solve
from .synth import SyntheticSceneConfig, synth_generate
from .tensor import ConfigError, Tensor, precision
from .train import NonFiniteLoss, build_dataset, evaluate, load_model, train

__all__ = ["main", "read_pgm", "write_pgm", "build_parser"]

EXIT_FAILURE = 1
EXIT_ERROR = 2


class CLIError(Exception):
    def __init__(self, message: str, kind: str = "error", **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report("usage", message)
        sys.exit(EXIT_ERROR)


def _report(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


# ---------------------------------------------------------------------------
# portable graymap

def read_pgm(path) -> tuple:
    """Read a P5 (binary) or P2 (ASCII) graymap; returns ``(array, maxval)``."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CLIError(f"{path}: truncated graymap header", "input")
        tokens.append(blob[start:pos])
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise CLIError(f"{path}: malformed graymap header", "input") from None
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos + 1)
    elif magic == b"P2":
        data = np.array(blob[pos:].split(), dtype=np.int64)[: w * h]
    else:
        raise CLIError(f"{path}: not a P5/P2 graymap (magic {magic!r})", "input")
    if data.size != w * h:
        raise CLIError(f"{path}: expected {w * h} pixels, found {data.size}", "input")
    return data.reshape(h, w).astype(np.float64), maxval


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    img = np.clip(np.rint(image), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + img.astype(dtype).tobytes())


def _read_field(path: Path) -> tuple:
    """Returns ``(field, to_pixels)`` where ``to_pixels`` maps values into graymap levels."""
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".pnm"):
        img, maxval = read_pgm(path)
        return img, maxval, (lambda u: u)
    if suffix == ".npy":
        field = np.load(path)
    elif suffix in (".csv", ".evs", ".bin", ".dat"):
        stream = load_events(path)
        t0 = int(stream.t[0]) if len(stream) else 0
        t1 = int(stream.t[-1]) + 1 if len(stream) else 1
        field = stack_events(stream, t0, t1, 1, stream.height, stream.width).counts.sum(axis=0)
    else:
        raise CLIError(f"{path}: unsupported input type {suffix!r} (use .pgm, .npy or an event file)", "input")
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise CLIError(f"{path}: expected a 2D field, got shape {field.shape}", "input")
    lo, hi = float(field.min()), float(field.max())
    span = hi - lo if hi > lo else 1.0
    return field, 255, (lambda u: (u - lo) * 255.0 / span)


# ---------------------------------------------------------------------------
# subcommands

def _run_config(args) -> RunConfig:
    if not args.config:
        raise CLIError("--config is required", "usage")
    cfg = load_config(args.config)
    top = {}
    if args.precision is not None:
        top["precision"] = args.precision
    if args.seed is not None:
        top["seed"] = args.seed
    return dataclasses.replace(cfg, **top) if top else cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out or "runs/train")
    result = train(cfg, out)
    summary = {"out": str(out), "steps": cfg.train.steps, "final_loss": result.final_loss,
               "metrics": result.metrics}
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if not args.checkpoint:
        raise CLIError("--checkpoint is required", "usage")
    model = load_model(cfg, args.checkpoint)
    with precision(cfg.precision):
        metrics = evaluate(model, build_dataset(cfg, "eval"), cfg)
    text = json.dumps(metrics)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text)
    print(text)
    return 0


def cmd_diffuse(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise CLIError(f"{path}: cannot read input", "input")
    u0, maxval, to_pixels = _read_field(path)
    if args.steps < 1 or not args.t > 0 or args.k < 0:
        raise CLIError("need steps >= 1, t > 0 and k >= 0", "usage")
    boundary = {"dct": "neumann", "dft": "periodic"}.get(args.expert)
    if args.oracle and boundary is None:
        raise CLIError(f"the finite-difference oracle covers dct and dft, not {args.expert}", "usage")
    out = Path(args.out or "runs/diffuse")
    out.mkdir(parents=True, exist_ok=True)
    times = [j * args.t / args.steps for j in range(args.steps + 1)]
    spectral, oracle = [], []
    with precision(64):
        kshape = u0.shape
        if args.expert == "haar":
            kshape = tuple(1 << max(n - 1, 0).bit_length() for n in u0.shape)
        k = np.full(kshape, args.k)
        for j, tj in enumerate(times):
            u = u0 if tj == 0 else hco_apply(Tensor(u0), args.expert, Tensor(k), tj, pad_haar=True).numpy()
            spectral.append(u)
            write_pgm(out / f"frame_{j:03d}.pgm", to_pixels(u), maxval)
            if args.oracle:
                grid = OracleGrid(u0, boundary, dx=1.0 / args.refine)
                v = u0 if tj == 0 else pde_oracle_solve(grid, args.k, tj)
                oracle.append(v)
                write_pgm(out / f"oracle_{j:03d}.pgm", to_pixels(v), maxval)
    arrays = {"times": np.array(times), "spectral": np.stack(spectral)}
    report = {"out": str(out), "frames": len(times), "expert": args.expert, "k": args.k, "t": args.t}
    if args.oracle:
        arrays["oracle"] = np.stack(oracle)
        scale = max(float(np.abs(u0).max()), 1e-300)
        dev = float(np.abs(arrays["spectral"] - arrays["oracle"]).max()) / scale
        report["oracle_max_rel_deviation"] = dev
    np.savez(out / "fields.npz", **arrays)
    print(json.dumps(report))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    reports = run_suite(seed=args.seed or 0, corrupt=args.corrupt)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    if failed:
        _report("gradcheck", f"{len(failed)} gradient checks failed", failed=failed)
        return EXIT_FAILURE
    return 0


def _scene_config(path) -> SyntheticSceneConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "data" in raw or "model" in raw:
        return load_config(path).scene_config()
    raw = raw.get("scene", raw)
    known = {f.name: f for f in dataclasses.fields(SyntheticSceneConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigFieldError(f"scene.{key}", f"unknown field (known: {', '.join(sorted(known))})")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    return SyntheticSceneConfig(**kwargs)


def cmd_synth(args) -> int:
    if not args.config:
        raise CLIError("--config is required", "usage")
    scene = _scene_config(args.config)
    if args.seed is not None:
        scene = scene.with_seed(args.seed)
    out = Path(args.out or "runs/synth")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CLIError(f"{out}: output directory is not writable ({exc.strerror})", "output") from None
    written = []
    for i in range(args.count):
        cfg = scene.with_seed(scene.seed + i)
        stream, labels = synth_generate(cfg)
        stem = out / f"scene_{cfg.seed:06d}"
        save_events(stream, stem.with_suffix(".evs"))
        save_annotations(labels, stem.with_suffix(".json"))
        written.append({"events": str(stem.with_suffix(".evs")), "annotations": str(stem.with_suffix(".json")),
                        "num_events": len(stream), "num_objects": len(labels[0][1]) if labels else 0})
    print(json.dumps({"out": str(out), "scenes": written}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (TOML)")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", type=int, choices=(32, 64), help="floating-point precision")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="mvheat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a detector")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p = sub.add_parser("diffuse", parents=[common], help="diffuse an image and write graymap frames")
    p.add_argument("input", help=".pgm image, .npy field or event file")
    p.add_argument("--expert", choices=EXPERTS, default="dct")
    p.add_argument("--k", type=float, default=0.5, help="constant diffusivity")
    p.add_argument("--t", type=float, default=1.0, help="final diffusion time")
    p.add_argument("--steps", type=int, default=4, help="number of frames after the input")
    p.add_argument("--oracle", action="store_true", help="also run the finite-difference oracle")
    p.add_argument("--refine", type=int, default=8, help="oracle grid refinement factor")
    p = sub.add_parser("gradcheck", parents=[common], help="run the gradient-check suite")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p = sub.add_parser("synth", parents=[common], help="write synthetic event scenes")
    p.add_argument("--count", type=int, default=1, help="number of scenes (consecutive seeds)")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diffuse": cmd_diffuse, "gradcheck": cmd_gradcheck,
            "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except CLIError as exc:
        _report(exc.kind, str(exc), **exc.extra)
    except ConfigFieldError as exc:
        _report("config", str(exc), field=exc.field)
    except ArchitectureMismatch as exc:
        _report("architecture", "checkpoint does not match the model architecture", diff=exc.diff)
    except NonFiniteLoss as exc:
        _report("nonfinite", str(exc), step=exc.step, batch_seed=exc.batch_seed, scene_seeds=exc.scene_seeds,
                dump=exc.dump)
    except (ConfigError, ValueError) as exc:
        _report(type(exc).__name__, str(exc))
    except OSError as exc:
        _report("io", f"{exc.filename or ''}: {exc.strerror or exc}")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
