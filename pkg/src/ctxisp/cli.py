"""Command-line entry point: ``ctxisp <command> [flags]``.

Every command accepts ``--config FILE`` with ``key=value`` lines whose keys
mirror the long flags (``batch-size`` or ``batch_size``). Explicit flags win
over the file, the file wins over built-in defaults, and unknown keys are
rejected. The resolved configuration is echoed to stderr as ``# key=value``.

Exit status: 0 on success, 2 for usage errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck as G
from . import network as N
from . import train as TR
from .losses import LossWeights
from .raw import BayerImage


class UsageError(Exception):
    pass


# --- argument types -------------------------------------------------------

def _pair(text: str) -> tuple[int, int]:
    try:
        parts = [int(v) for v in str(text).replace("x", ",").split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected two positive integers H,W, got {text!r}")
    return parts[0], parts[1]


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not np.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"expected a finite non-negative number, got {text!r}")
    return value


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_GUIDES = {"full": "full_image", "full_image": "full_image", "patch": "patch"}


def _guide(text: str) -> str:
    try:
        return _GUIDES[text]
    except KeyError:
        raise argparse.ArgumentTypeError(f"guide must be 'full' or 'patch', got {text!r}") from None


# --- parser ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _add(p, flag, default=None, **kw):
    """Flags default to None so the config-file overlay can tell what was given."""
    p.add_argument(flag, default=None, **kw)
    p.set_defaults(**{"_default_" + flag.lstrip("-").replace("-", "_"): default})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxisp", description="Learned RAW-to-RGB ISP with full-image colour guidance.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("prep-synth", help="generate a synthetic dataset and its manifest")
    _add(p, "--scenes", type=_positive_int, help="number of scenes (at least 2)")
    _add(p, "--size", (512, 512), type=_pair, help="scene size H,W (even, >= 256)")
    _add(p, "--seed", 0, type=int)
    _add(p, "--out", type=Path, help="output directory")
    _add(p, "--noise", 0.003, type=_non_negative_float, help="read-noise sigma; 0 disables all noise")
    _add(p, "--shot-gain", 1e-4, type=_non_negative_float)
    _add(p, "--patch-size", 448, type=_positive_int)
    _add(p, "--stride", type=_positive_int, help="patch stride (defaults to the patch size)")
    _add(p, "--split-ratio", 0.9, type=float)
    _add(p, "--ncc-threshold", 0.5, type=float)
    _add(p, "--no-ccm", False, type=_bool, help="skip the colour correction matrix in the target pipeline")
    _add(p, "--no-gamma", False, type=_bool)

    p = sub.add_parser("train", help="train a model on a manifest")
    _add(p, "--data", type=Path, help="manifest.json")
    _add(p, "--out", type=Path, help="directory for checkpoints and logs")
    _add(p, "--epochs", 30, type=int)
    _add(p, "--steps", type=int, help="stop after this many optimiser steps")
    _add(p, "--guide", "full_image", type=_guide, help="full or patch")
    _add(p, "--guide-size", (128, 128), type=_pair)
    _add(p, "--seed", 0, type=int)
    _add(p, "--lr", 1e-4, type=float)
    _add(p, "--batch-size", 4, type=_positive_int)
    _add(p, "--decay-factor", 0.5, type=float)
    _add(p, "--decay-every", 40, type=_positive_int, help="epochs between learning-rate halvings")
    _add(p, "--grad-clip", type=float)
    for name, value in LossWeights().to_dict().items():
        _add(p, "--" + name.replace("_", "-"), value, type=_non_negative_float)
    _add(p, "--resume", type=Path, help="checkpoint to continue from")
    _add(p, "--save-every", 1, type=int, help="epochs between numbered checkpoints (0: only last.ckpt)")
    _add(p, "--log-every", 1, type=_positive_int)
    _add(p, "--split", "test", help="split evaluated after training")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    _add(p, "--ckpt", type=Path)
    _add(p, "--data", type=Path)
    _add(p, "--split", "test")
    _add(p, "--guide", "full_image", type=_guide)
    _add(p, "--batch-size", 4, type=_positive_int)
    _add(p, "--out", type=Path, help="metric table path (default: next to the checkpoint)")

    p = sub.add_parser("infer", help="full-resolution RAW to RGB")
    _add(p, "--ckpt", type=Path)
    _add(p, "--raw", type=Path, help="16-bit PGM mosaic")
    _add(p, "--meta", help="JSON file, or black=..,white=.. (default: sibling .json if present)")
    _add(p, "--out", type=Path, help="8-bit PNG")
    _add(p, "--tile", type=_positive_int)
    _add(p, "--overlap", 32, type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _add(p, "--bits", 64, type=int, choices=(32, 64))
    _add(p, "--tol", type=float, help="per-op tolerance (default 1e-6 at 64 bits, 1e-3 at 32)")
    _add(p, "--composed-tol", type=float, help="tolerance of composed cases (default 1e-4 at 64 bits)")
    _add(p, "--seeds", 20, type=_positive_int)
    _add(p, "--only", help="comma-separated case names")

    p = sub.add_parser("stats", help="parameter and MAC counts")
    for name, value in N.ModelConfig().to_dict().items():
        _add(p, "--" + name.replace("_", "-"), tuple(value) if isinstance(value, list) else value,
             type=_pair if isinstance(value, list) else _positive_int)
    _add(p, "--size", type=_pair, help="extra input size H,W")
    _add(p, "--conv", help="count a single conv instead: cin,cout,kernel[,stride,padding,groups]")

    for p in sub.choices.values():
        p.add_argument("--config", type=Path, help="key=value file overlaid under the flags")
    return parser


def _options(parser: argparse.ArgumentParser, command: str) -> dict[str, argparse.Action]:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return {a.dest: a for a in sub.choices[command]._actions if a.dest not in ("help", "config")}


def read_config_file(path: Path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def resolve(parser: argparse.ArgumentParser, args: argparse.Namespace) -> dict:
    """Merge flags > config file > defaults for the chosen command."""
    options = _options(parser, args.command)
    file_values = read_config_file(args.config) if args.config else {}
    unknown = sorted(set(file_values) - set(options))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    for dest, action in options.items():
        value = getattr(args, dest)
        if value is None and dest in file_values:
            raw_value = file_values[dest]
            try:
                value = action.type(raw_value) if action.type else raw_value
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {dest}: {exc}") from exc
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config key {dest}: {value!r} is not one of {list(action.choices)}")
        if value is None:
            value = getattr(args, "_default_" + dest, None)
        resolved[dest] = value
    return resolved


def _echo(cfg: dict, stream=None) -> None:
    stream = stream or sys.stderr
    for key in sorted(cfg):
        print(f"# {key}={_fmt(cfg[key])}", file=stream)


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return "" if value is None else str(value)


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# --- commands -------------------------------------------------------------

def cmd_prep_synth(cfg: dict) -> int:
    _require(cfg, "scenes", "out")
    if cfg["scenes"] < 2:
        raise UsageError("--scenes must be at least 2 (one train and one test scene)")
    h, w = cfg["size"]
    if h % 2 or w % 2 or min(h, w) < 256:
        raise UsageError(f"--size must be even and at least 256, got {h},{w}")
    if cfg["patch_size"] % 2 or (cfg["stride"] or 2) % 2:
        raise UsageError("--patch-size and --stride must be even")
    if not 0 < cfg["split_ratio"] < 1:
        raise UsageError("--split-ratio must lie in (0, 1)")
    noisy = cfg["noise"] > 0
    params = D.SceneParams(ccm=None if cfg["no_ccm"] else D.DEFAULT_CCM, gamma=not cfg["no_gamma"],
                           noise=noisy, sigma_read=cfg["noise"], shot_gain=cfg["shot_gain"] if noisy else 0.0)
    scenes = D.generate_scenes(cfg["scenes"], h, w, cfg["seed"], params)
    manifest = D.build_dataset(scenes, cfg["out"], split_ratio=cfg["split_ratio"],
                               ncc_threshold=cfg["ncc_threshold"], patch_size=cfg["patch_size"],
                               stride=cfg["stride"], seed=cfg["seed"],
                               info={"generator": D.scene_params_to_dict(params), "size": [h, w]})
    n_train, n_test = len(manifest.scene_split("train")), len(manifest.scene_split("test"))
    print(f"scenes\t{len(manifest.scenes)}\ttrain\t{n_train}\ttest\t{n_test}")
    print(f"patches\t{len(manifest.patches)}\ttrain\t{len(manifest.patch_split('train'))}"
          f"\ttest\t{len(manifest.patch_split('test'))}")
    print(f"manifest\t{Path(cfg['out']) / 'manifest.json'}")
    return 0


def _train_config(cfg: dict) -> TR.TrainConfig:
    weights = LossWeights(**{k: cfg[k] for k in LossWeights().to_dict()})
    return TR.TrainConfig(lr=cfg["lr"], decay_factor=cfg["decay_factor"], decay_every_epochs=cfg["decay_every"],
                          epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"], weights=weights,
                          guide_mode=cfg["guide"], max_steps=cfg["steps"], grad_clip=cfg["grad_clip"])


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    manifest = D.Manifest.load(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["resume"] is not None:
        state = TR.load_checkpoint(cfg["resume"])
        # only the run length may change on resume; everything else comes from the checkpoint
        state.config.epochs = cfg["epochs"]
        state.config.max_steps = cfg["steps"]
    else:
        try:
            tcfg = _train_config(cfg)
            mcfg = N.ModelConfig(guide_size=cfg["guide_size"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        state = TR.TrainState.create(tcfg, mcfg)
    guide_size = state.model_config.guide_size
    train_set = D.PatchDataset.from_manifest(manifest, "train", guide_size)
    (out / "config.txt").write_text("".join(f"{k}={_fmt(v)}\n" for k, v in sorted(cfg.items())))
    log = TR.TrainingLog(out / "train.log", cfg["log_every"])
    every = cfg["save_every"]

    def on_epoch(st, stats):
        if every and st.epoch % every == 0:
            TR.save_checkpoint(out / f"epoch_{st.epoch:04d}.ckpt", st)
        TR.save_checkpoint(out / "last.ckpt", st)
        print(f"epoch\t{st.epoch}\tstep\t{st.step}\tloss\t{stats.get('total', float('nan')):.6g}"
              f"\tseconds\t{stats['seconds']:.1f}", file=sys.stderr)

    t0 = time.perf_counter()
    steps = state.config.max_steps
    TR.train(state, train_set, steps=steps, epochs=None if steps is not None else state.config.epochs,
             log=log, on_epoch=on_epoch)
    TR.save_checkpoint(out / "last.ckpt", state)
    print(f"# trained {state.step} steps in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    if manifest.patch_split(cfg["split"]):
        test_set = D.PatchDataset.from_manifest(manifest, cfg["split"], guide_size)
        rows, means = TR.evaluate(state.params, test_set, "full_image")
        table = TR.format_metrics_table(rows, means)
        (out / f"metrics_{cfg['split']}.tsv").write_text(table)
        sys.stdout.write(table)
    return 0


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "ckpt", "data")
    params, mcfg = TR.load_params(cfg["ckpt"])
    manifest = D.Manifest.load(cfg["data"])
    if not manifest.patch_split(cfg["split"]):
        raise UsageError(f"manifest has no {cfg['split']!r} patches")
    dataset = D.PatchDataset.from_manifest(manifest, cfg["split"], mcfg.guide_size)
    rows, means = TR.evaluate(params, dataset, cfg["guide"], cfg["batch_size"])
    table = TR.format_metrics_table(rows, means)
    out = cfg["out"] or Path(cfg["ckpt"]).with_name(f"eval_{cfg['split']}.tsv")
    Path(out).write_text(table)
    sys.stdout.write(table)
    return 0


def parse_meta(text: str | None, raw_path: Path) -> tuple[tuple[int, ...], int]:
    """Black and white levels from a JSON file, ``key=value`` pairs, or the mosaic's sibling JSON."""
    meta: dict = {}
    if text is None:
        sibling = raw_path.with_suffix(".json")
        if sibling.exists():
            meta = json.loads(sibling.read_text())
    elif Path(text).is_file():
        meta = json.loads(Path(text).read_text())
    else:
        for item in text.split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise UsageError(f"--meta: expected key=value pairs or a JSON file, got {text!r}")
            key, value = (s.strip() for s in item.split("=", 1))
            meta[key] = [int(v) for v in value.split("/")] if "/" in value else int(value)
    aliases = {"black": "black_level", "white": "white_level"}
    meta = {aliases.get(k, k): v for k, v in meta.items()}
    black = meta.get("black_level", 0)
    black = tuple(black) if isinstance(black, list) else (int(black),) * 4
    return black, int(meta.get("white_level", 65535))


def cmd_infer(cfg: dict) -> int:
    _require(cfg, "ckpt", "raw", "out")
    if cfg["tile"] is not None and not 0 <= cfg["overlap"] < cfg["tile"]:
        raise UsageError("--overlap must be non-negative and smaller than --tile")
    params, mcfg = TR.load_params(cfg["ckpt"])
    plane = D.read_pgm(cfg["raw"])
    black, white = parse_meta(cfg["meta"], Path(cfg["raw"]))
    bayer = BayerImage(plane, black, white)
    t0 = time.perf_counter()
    img = N.isp_forward_fullres(bayer, params, mcfg.guide_size, tile=cfg["tile"], overlap=cfg["overlap"])
    D.write_png8(cfg["out"], N.to_uint8(img))
    print(f"wrote\t{cfg['out']}\t{img.shape[1]}x{img.shape[0]}\t{time.perf_counter() - t0:.1f}s")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    only = [s.strip() for s in cfg["only"].split(",")] if cfg["only"] else None
    names = {c.name for c in G.cases()}
    if only and set(only) - names:
        raise UsageError(f"unknown case(s): {', '.join(sorted(set(only) - names))}")
    print("case\tmax_rel_error\ttolerance\tresult")

    def report(res, seconds):
        status = "pass" if res.passed else "FAIL"
        print(f"{res.name}\t{res.max_error:.3e}\t{res.tolerance:.1e}\t{status}", flush=True)

    t0 = time.perf_counter()
    results = G.run(seeds=cfg["seeds"], bits=cfg["bits"], tolerance=cfg["tol"],
                    composed_tolerance=cfg["composed_tol"], only=only, report=report)
    failed = [r.name for r in results if not r.passed]
    print(f"# {len(results) - len(failed)}/{len(results)} passed over {cfg['seeds']} seeds "
          f"in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 1 if failed else 0


def _parse_conv(text: str) -> N.ConvSpec:
    try:
        values = [int(v) for v in text.split(",")]
        if not 3 <= len(values) <= 6:
            raise ValueError
        return N.ConvSpec(*values)
    except (ValueError, TypeError):
        raise UsageError(f"--conv expects cin,cout,kernel[,stride,padding,groups], got {text!r}") from None


def cmd_stats(cfg: dict) -> int:
    sizes = [(448, 448)] + ([tuple(cfg["size"])] if cfg["size"] else [])
    print("quantity\tvalue")
    if cfg["conv"]:
        spec = _parse_conv(cfg["conv"])
        if spec.cin % spec.groups or spec.cout % spec.groups:
            raise UsageError("--conv channels must be divisible by groups")
        print(f"params\t{spec.cout * (spec.cin // spec.groups) * spec.kernel ** 2 + spec.cout}")
        for h, w in sizes:
            print(f"macs@{h}x{w}\t{N.count_macs([spec], h, w)}")
        return 0
    try:
        mcfg = N.ModelConfig(**{k: cfg[k] for k in N.ModelConfig().to_dict()})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"params\t{N.count_params(N.init_params(mcfg))}")
    for h, w in sizes:
        print(f"macs@{h}x{w}\t{N.count_macs(mcfg, h, w)}")
    print(f"gmacs@448x448\t{N.count_macs(mcfg, 448, 448) / 1e9:.3f}")
    return 0


COMMANDS = {"prep-synth": cmd_prep_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck, "stats": cmd_stats}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(parser, args)
        _echo(dict(cfg, command=args.command))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, ValueError, FloatingPointError, KeyError, TR.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
