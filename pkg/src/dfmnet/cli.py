"""``dfmnet`` command line: train, infer, eval, bench, quality.

Exit codes: 0 success, 1 usage error, 2 data error.  ``--config`` names a
JSON object with flat keys mirroring the long flags; explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, metrics, quality
from .data import IMAGE_SUFFIXES, load_sample, read_image, save_saliency, scan_dataset
from .dqfm import GATING, VBA_VARIANTS
from .errors import (
    CorruptFile,
    DataError,
    DfmError,
    EmptyDataset,
    EmptySet,
    InvalidConfig,
    MissingFile,
    ModeMismatch,
    ShapeMismatch,
)
from .model import MODES, DFMNet, ModelConfig, config_from_state, from_state
from .ops import resize_bilinear
from .synthetic import scenes
from .tensor import no_grad
from .train import TrainConfig, train
from .weights import load_weights, save_weights

DATA_ERRORS = (DataError, CorruptFile, EmptyDataset, EmptySet, ModeMismatch, ShapeMismatch)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _batches(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid batch list {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("batch sizes must be positive integers")
    return values


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--mode", choices=sorted(MODES), default=None)
    g.add_argument("--no-dqw", action="store_true", help="disable the global depth weighting gate")
    g.add_argument("--no-dha", action="store_true", help="disable the spatial depth attention gate")
    g.add_argument("--vba-variant", choices=VBA_VARIANTS, default=None)
    g.add_argument("--recalib-count", type=int, choices=(0, 1, 2, 3), default=None)
    g.add_argument("--gating", choices=GATING, default=None)
    g.add_argument("--depth-backbone", choices=("tdb", "mobilenetv2"), default=None)


def _model_overrides(args) -> dict:
    out = {}
    if args.mode is not None:
        out["mode"] = args.mode
    if args.no_dqw:
        out["use_dqw"] = False
    if args.no_dha:
        out["use_dha"] = False
    for key in ("vba_variant", "recalib_count", "gating", "depth_backbone"):
        if getattr(args, key) is not None:
            out[key] = getattr(args, key)
    return out


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON file of flag defaults")
    common.add_argument("--seed", type=int, default=0)

    parser = _Parser(prog="dfmnet", description="Lightweight RGB-D salient object detection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train from a dataset directory or synthetic scenes")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="root with RGB/, depth/ (or flow/) and GT/")
    src.add_argument("--synthetic", type=int, metavar="N", help="train on N generated scenes")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--init", type=Path, default=None, metavar="WEIGHTS", help="start from these tensors (a subset is fine)")
    _model_flags(p)

    p = sub.add_parser("infer", parents=[common], help="predict one saliency map")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--rgb", type=Path, required=True)
    aux = p.add_mutually_exclusive_group(required=True)
    aux.add_argument("--depth", type=Path)
    aux.add_argument("--flow", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=sorted(MODES), default=None)

    p = sub.add_parser("eval", parents=[common], help="score saliency maps against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench", parents=[common], help="latency, throughput and size report")
    p.add_argument("--weights", type=Path, default=None)
    p.add_argument("--batch", type=_batches, default=[1, 8, 32])
    p.add_argument("--n", type=int, default=bench.N_DEFAULT)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    _model_flags(p)

    p = sub.add_parser("quality", parents=[common], help="edge-alignment audit of RGB/depth pairs")
    p.add_argument("--pairs", type=Path, required=True, help="root with RGB/ and depth/")
    p.add_argument("--shuffle", action="store_true")
    p.add_argument("--alpha-from", type=Path, default=None, metavar="WEIGHTS")
    p.add_argument("--out", type=Path, required=True)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_arg(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config: expected a file argument")
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _read_config(path: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"--config: no such file {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config: cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("--config: expected a JSON object")
    return cfg


def parse_args(argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults, so flags win."""
    parser = build_parser()
    command = next((a for a in argv if a in COMMANDS), None)
    known = set(parser._option_string_actions)
    if command is not None:
        known |= set(_subparser(parser, command)._option_string_actions)
    for tok in argv:
        if tok.startswith("--") and tok != "--" and tok.split("=", 1)[0] not in known:
            raise UsageError(f"dfmnet: error: unrecognized argument {tok.split('=', 1)[0]}")
    path = _config_arg(argv)
    if path is None or command is None:
        return parser.parse_args(argv)
    cfg = _read_config(path)
    sub = _subparser(parser, command)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            raise UsageError(f"--config: unknown key {key!r} for {command}")
        action = actions[dest]
        if isinstance(value, str) and action.type is not None:
            try:
                value = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"--config: bad value for {key!r}: {exc}") from exc
        elif isinstance(value, int) and dest == "batch":
            value = [value]
        defaults[dest] = value
        action.required = False
    for group in sub._mutually_exclusive_groups:
        if any(a.dest in defaults for a in group._group_actions):
            group.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- commands ---------------------------------------------------------------------


def _load_model(path: Path, **overrides) -> DFMNet:
    state = load_weights(path)
    return from_state(state, **overrides)


def cmd_train(args) -> int:
    mcfg = ModelConfig(**_model_overrides(args))
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise InvalidConfig("--synthetic needs N >= 1")
        dataset = scenes(args.synthetic, args.size, seed=args.seed, aux_channels=mcfg.aux_channels)
    else:
        manifest = scan_dataset(args.data)
        if manifest.aux_channels != mcfg.aux_channels:
            raise ModeMismatch(f"{args.data} holds {manifest.aux_kind} inputs but mode is {mcfg.mode!r}")
        dataset = [manifest.load(i, args.size) for i in range(len(manifest))]
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        augment=not args.no_augment,
        steps=args.steps,
        seed=args.seed,
    )
    model = DFMNet(mcfg, seed=args.seed)
    if args.init is None:
        print("init: random", file=sys.stderr)
    else:
        state = load_weights(args.init)
        known = dict(model.named_tensors())
        # partial files such as a pretrained RGB branch are allowed; unknown names are not
        unknown = sorted(set(state) - set(known))
        if unknown:
            raise ShapeMismatch(f"{args.init}: tensors not in this model: {unknown[:5]}")
        model.load_state_dict(state, strict=False)
        print(f"init: {len(state)}/{len(known)} tensors from {args.init}", file=sys.stderr)
    report = lambda t, l: print(f"step {t} loss {l:.5f}", file=sys.stderr) if t % 10 == 0 else None
    history = train(model, dataset, tcfg, callback=report)
    save_weights(model, args.out)
    print(f"trained {len(history.loss)} steps, final loss {history.loss[-1]:.5f} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    model = _load_model(args.weights).eval()
    aux_path = args.depth if args.depth is not None else args.flow
    mode = model.config.mode
    if args.mode is not None and args.mode != mode:
        raise ModeMismatch(f"weights were built for mode {mode!r}, not {args.mode!r}")
    if args.flow is not None and mode != "flow3":
        raise ModeMismatch("--flow needs weights built for mode 'flow3'")
    sample = load_sample(args.rgb, aux_path, aux_channels=model.config.aux_channels)
    with no_grad():
        out = model(sample.rgb[None], sample.aux[None])
    save_saliency(out.s_c.data[0, 0], args.out)
    return 0


def _images_by_stem(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise MissingFile(f"no such directory: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def cmd_eval(args) -> int:
    preds, gts = _images_by_stem(args.pred), _images_by_stem(args.gt)
    if not gts:
        raise EmptySet(f"no ground-truth images in {args.gt}")
    results, rows = [], []
    for stem, gpath in gts.items():
        if stem not in preds:
            raise MissingFile(f"no prediction for {gpath.name} in {args.pred}")
        g = read_image(gpath, 1)
        s = read_image(preds[stem], 1)
        if s.shape != g.shape:
            s = _resize_to(s, g.shape[1:])  # score at ground-truth resolution
        r = metrics.evaluate(s[0], (g[0] >= 0.5).astype(np.float64))
        results.append(r)
        rows.append([stem, r.s_alpha, r.f_beta_max, r.e_xi_max, r.mae])
    _write_rows(args.out, ["id", "s_alpha", "f_max", "e_max", "mae"], rows)
    agg = metrics.aggregate(results)
    print(f"n={len(results)} s_alpha={agg.s_alpha:.4f} f_max={agg.f_beta_max:.4f} e_max={agg.e_xi_max:.4f} mae={agg.mae:.4f}")
    return 0


def _resize_to(arr: np.ndarray, extents) -> np.ndarray:
    with no_grad():
        return np.clip(resize_bilinear(arr[None], tuple(extents)).data[0], 0, 1)


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def cmd_bench(args) -> int:
    overrides = _model_overrides(args)
    if args.weights is not None:
        model = _load_model(args.weights, **overrides)
    else:
        model = DFMNet(ModelConfig(**overrides), seed=args.seed)
    if args.n < 1:
        raise InvalidConfig("--n must be >= 1")
    result = bench.run_bench(model, args.batch, args.n, args.size, args.threads, args.seed)
    result.write_csv(args.out)
    print(result.sizes.format())
    print(f"t_cpu_ms={result.t_cpu_ms:.2f} threads={result.threads}")
    for b, fps in result.s_fps.items():
        print(f"batch {b}: {fps:.2f} images/s")
    return 0


def cmd_quality(args) -> int:
    manifest = scan_dataset(args.pairs, require_gt=False)
    samples = [manifest.load(i) for i in range(len(manifest))]
    pairs = [(s.rgb, s.aux) for s in samples]
    report = quality.audit_set(pairs, shuffle=args.shuffle, seed=args.seed, ids=[s.id for s in samples])
    if args.alpha_from is not None:
        state = load_weights(args.alpha_from)
        cfg = config_from_state(state)
        if not cfg.use_dqw:
            raise ModeMismatch("--alpha-from weights have no depth weighting gate")
        if cfg.aux_channels != manifest.aux_channels:
            raise ModeMismatch(f"weights expect mode {cfg.mode!r}, pairs hold {manifest.aux_kind}")
        model = from_state(state).eval()
        alpha = []
        with no_grad():
            for i, j in enumerate(report.pairing):
                out = model(samples[i].rgb[None], samples[j].aux[None])
                alpha.append(float(out.alpha_bar[0]))
        report.alpha_bar = np.asarray(alpha)
    report.write_csv(args.out)
    print(f"n={len(report.ids)} mean={report.mean:.4f} std={report.std:.4f} hist={report.hist.tolist()}")
    return 0


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench, "quality": cmd_quality}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except InvalidConfig as exc:
        print(f"dfmnet: error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"dfmnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except DfmError as exc:
        print(f"dfmnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
