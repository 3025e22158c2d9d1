"""Command-line entry point: ``vseg <command> [--flags]``.

Commands: gen-data, gradcheck, train, infer, eval, ablate, replay.
Exit codes: 0 success, 1 check or validation failure, 2 I/O failure.

Every command that writes files first writes a manifest (command, resolved
settings, seed, output location, tool version, argv).  The timestamp lives
only there, so the other artifacts of a ``--deterministic`` run are
byte-identical across re-runs; ``vseg replay --manifest FILE`` re-executes
the recorded argv.
"""
import os
import sys

if "--deterministic" in sys.argv:
    # pin BLAS to one thread before numpy loads, so reductions keep one order
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

import argparse
import datetime
import glob
import shlex
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from . import autodiff as ad
from .losses import combined_loss, metrics_table, score
from .network import (
    CheckpointError, NetConfig, ablation_configs, build_network, load_checkpoint,
    row_label,
)
from .phantom import (
    PhantomSpec, VolumeFormatError, VolumeSample, export_slice, generate_phantom, load_volume,
    save_volume,
)
from .tensor import ShapeError
from .train import TrainConfig, TrainingError, evaluate, predict_sample, train

OK, CHECK_FAILED, IO_FAILED = 0, 1, 2
GRADCHECK_TOL = 1e-4
GRADCHECK_SIZE = 8
_argv = []  # arguments of the command being run, recorded in manifests


class CliError(Exception):
    def __init__(self, message, code=CHECK_FAILED):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers


def _read_text(path):
    try:
        with open(path) as f:
            return f.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", IO_FAILED) from None


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path}: {exc.strerror}", IO_FAILED) from None


def _write(path, text):
    try:
        with open(path, "w") as f:
            f.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}", IO_FAILED) from None


def write_manifest(path, command, settings, seed, out):
    lines = [
        f"command={command}",
        f"version={__version__}",
        f"seed={seed}",
        f"out={out}",
        f"created={datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')}",
        f"argv={shlex.join(_argv)}",
    ]
    lines += [f"{k}={v}" for k, v in settings]
    _write(path, "\n".join(lines) + "\n")


def _config_items(cfg, prefix=""):
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, NetConfig):
            out += _config_items(v, prefix + f.name + ".")
        else:
            out.append((prefix + f.name, str(v).lower() if isinstance(v, bool) else str(v)))
    return out


def _triple(text, cast=float):
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _eps_list(text):
    try:
        vals = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad step list {text!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("steps must be positive")
    return vals


def spec_from_text(text):
    """PhantomSpec from ``key=value`` lines; tuple fields take comma lists."""
    base = PhantomSpec()
    changes = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or not hasattr(base, key):
            raise CliError(f"phantom spec: unknown or malformed line {raw!r}")
        current = getattr(base, key)
        try:
            if isinstance(current, tuple):
                cast = int if all(isinstance(c, int) for c in current) else float
                changes[key] = tuple(cast(p) for p in value.split(","))
            else:
                changes[key] = type(current)(value)
        except ValueError:
            raise CliError(f"phantom spec: bad value for {key}: {value!r}") from None
    return replace(base, **changes)


def load_dataset(directory):
    paths = sorted(glob.glob(os.path.join(directory, "*.vvol")))
    if not paths:
        raise CliError(f"no .vvol volumes in {directory}", IO_FAILED)
    data = []
    for p in paths:
        s = load_volume(p)
        s.case_id = os.path.splitext(os.path.basename(p))[0]
        data.append(s)
    return data


def net_config(args):
    cfg = NetConfig.from_text(_read_text(args.config)) if getattr(args, "config", None) else NetConfig()
    changes = {}
    for flag, key in (("base_channels", "base_channels"), ("attention", "encoder_attention"),
                      ("bottleneck", "bottleneck"), ("task", "task"), ("out_mode", "out_mode"),
                      ("fg_prior", "fg_prior")):
        v = getattr(args, flag, None)
        if v is not None:
            changes[key] = v
    if getattr(args, "eq7_literal", None) is not None:
        changes["eq7_literal"] = args.eq7_literal == "true"
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes)


def train_config(args, net):
    return TrainConfig(
        net=net, lr0=args.lr, decay=args.decay, fixed_lr=args.fixed_lr, batch_size=args.batch_size,
        steps=args.steps, seed=args.seed, patch=args.patch, checkpoint_every=args.checkpoint_every,
        window=args.window, precision=args.precision, deterministic=args.deterministic,
    ).validate()


# ----------------------------------------------------------------- commands


def cmd_gen_data(args):
    if args.count < 1:
        raise CliError(f"--count must be >= 1, got {args.count}")
    spec = spec_from_text(_read_text(args.spec)) if args.spec else PhantomSpec()
    spec.validate()
    _makedirs(args.out)
    write_manifest(os.path.join(args.out, "manifest.txt"), "gen-data",
                   [("count", args.count)] + [(f"spec.{k}", v) for k, v in asdict(spec).items()],
                   args.seed, args.out)
    for i in range(args.count):
        sample = generate_phantom(spec, seed=args.seed + i)
        save_volume(os.path.join(args.out, f"sample_{i:04d}.vvol"), sample)
    print(f"wrote {args.count} volumes to {args.out}")
    return OK


def gradcheck_report(cfg, eps, max_entries=4, seed=0):
    """Per-layer maximum relative error of a tiny network under the combined loss."""
    net = build_network(cfg)
    rng = np.random.default_rng(seed)
    for k in net.params:
        # nonzero biases so every layer's bias path is exercised
        if k.endswith(".b") or k.endswith(".beta"):
            net.params[k] = rng.standard_normal(net.params[k].shape) * 0.1
    n = GRADCHECK_SIZE
    x = rng.random((1, cfg.in_channels, n, n, n))
    y = (rng.random((1, 1, n, n, n)) > 0.7).astype(float)

    def loss(g):
        return combined_loss(net(g, g.input("x")), y)[0]

    per_param = ad.grad_check(loss, net.params, {"x": x}, net.buffers, eps=eps,
                              max_entries=max_entries, seed=seed, report=True)
    layers = {}
    for name, err in per_param.items():
        layer = name.rsplit(".", 1)[0]
        if layer.endswith(".bn"):
            layer = layer[:-3]
        layers[layer] = max(layers.get(layer, 0.0), err)
    return layers


def cmd_gradcheck(args):
    if args.config is None and args.base_channels is None:
        args.base_channels = 2
    cfg = net_config(args)
    if cfg.base_channels > 4:
        raise CliError(f"gradcheck needs a tiny network: base_channels {cfg.base_channels} > 4")
    cfgs = ablation_configs(cfg) if args.all else [cfg]
    offenders = []
    for c in cfgs:
        if args.corrupt:
            with ad.corrupted_gradient(args.corrupt):
                layers = gradcheck_report(c, args.eps, args.max_entries, args.seed)
        else:
            layers = gradcheck_report(c, args.eps, args.max_entries, args.seed)
        label = row_label(c)
        print(f"# {label}")
        for layer in sorted(layers):
            err = layers[layer]
            bad = err >= GRADCHECK_TOL
            print(f"{layer}\t{err:.3e}\t{'FAIL' if bad else 'ok'}")
            if bad:
                offenders.append(f"{label}:{layer}")
        print(f"max\t{max(layers.values()):.3e}")
    if offenders:
        print(f"gradient check failed (tolerance {GRADCHECK_TOL:g}): " + ", ".join(offenders))
        return CHECK_FAILED
    print(f"all {len(cfgs)} configuration(s) within {GRADCHECK_TOL:g}")
    return OK


def cmd_train(args):
    data = load_dataset(args.data)
    cfg = train_config(args, net_config(args))
    _makedirs(args.out)
    write_manifest(os.path.join(args.out, "manifest.txt"), "train", _config_items(cfg), args.seed, args.out)
    _write(os.path.join(args.out, "net.cfg"), cfg.net.to_text())
    every = max(1, cfg.steps // 10)

    def progress(row):
        step = int(row.split("\t", 1)[0])
        if not args.quiet and (step % every == 0 or step == cfg.steps):
            print(row, flush=True)

    res = train(cfg, data, out_dir=args.out, progress=progress)
    records, _ = evaluate(res.net, data, window=cfg.window)
    table = metrics_table(records)
    _write(os.path.join(args.out, "train_metrics.tsv"), table)
    if not args.quiet:
        print(table, end="")
    return OK


def cmd_infer(args):
    net = load_checkpoint(args.ckpt)
    if net.cfg.in_channels != 1:
        raise CliError(f"checkpoint expects {net.cfg.in_channels} input channels, volumes carry 1")
    sample = load_volume(args.input)
    prob, mask = predict_sample(net, sample, args.window, args.threshold)
    masks = {"lung": None, "lesion": None}
    masks[net.cfg.task] = mask.astype(np.uint8)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _makedirs(out_dir)
    write_manifest(args.out + ".manifest.txt", "infer",
                   [("ckpt", args.ckpt), ("in", args.input), ("threshold", args.threshold),
                    ("window", args.window)] + _config_items(net.cfg, "net."), net.cfg.seed, args.out)
    pred = VolumeSample(prob.astype(np.float32), masks["lung"], masks["lesion"], sample.spacing)
    save_volume(args.out, pred)
    # midplane preview: the input intensities with the predicted outline
    preview = VolumeSample(sample.image, masks["lung"], masks["lesion"], sample.spacing)
    pgm = os.path.splitext(args.out)[0] + ".pgm"
    export_slice(preview, 0, sample.shape[0] // 2, pgm, *args.window)
    print(f"{args.out}: {int(mask.sum())} {net.cfg.task} voxels; preview {pgm}")
    return OK


def cmd_eval(args):
    preds = sorted(glob.glob(os.path.join(args.pred, "*.vvol")))
    if not preds:
        raise CliError(f"no predictions in {args.pred}", IO_FAILED)
    records = []
    for p in preds:
        case = os.path.splitext(os.path.basename(p))[0]
        ref_path = os.path.join(args.ref, case + ".vvol")
        if not os.path.exists(ref_path):
            raise CliError(f"missing reference for case {case}: {ref_path}", IO_FAILED)
        pred, ref = load_volume(p), load_volume(ref_path)
        pm, rm = pred.mask(args.task), ref.mask(args.task)
        if pm is None:
            raise CliError(f"prediction {case} carries no {args.task} mask")
        if rm is None:
            raise CliError(f"reference {case} carries no {args.task} mask")
        if pm.shape != rm.shape:
            raise CliError(f"case {case}: prediction shape {pm.shape} != reference {rm.shape}")
        records.append(score(pm, rm, case, args.task))
    table = metrics_table(records)
    if args.out:
        write_manifest(args.out + ".manifest.txt", "eval",
                       [("pred", args.pred), ("ref", args.ref), ("task", args.task)], 0, args.out)
        _write(args.out, table)
    print(table, end="")
    return OK


ABLATE_COLUMNS = ("dice", "sensitivity", "precision")


def ablation_table(rows, tasks):
    head = ["config"] + [f"{t}_{c}" for t in tasks for c in ABLATE_COLUMNS]
    lines = ["\t".join(head)]
    for label, by_task in rows:
        vals = [f"{v:.6f}" for t in tasks for v in by_task[t]]
        lines.append("\t".join([label] + vals))
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    data = load_dataset(args.data)
    tasks = tuple(args.tasks.split(","))
    for t in tasks:
        if t not in ("lesion", "lung"):
            raise CliError(f"unknown task {t!r}")
    base = net_config(args)
    cfg0 = train_config(args, base)
    _makedirs(args.out)
    write_manifest(os.path.join(args.out, "manifest.txt"), "ablate",
                   [("tasks", ",".join(tasks))] + _config_items(cfg0), args.seed, args.out)
    rows = []
    for cfg in ablation_configs(base):
        label = row_label(cfg)
        by_task = {}
        for t in tasks:
            run = replace(cfg0, net=cfg.replace(task=t))
            res = train(run, data, out_dir=os.path.join(args.out, t, label))
            _, by_task[t] = evaluate(res.net, data, task=t, window=run.window)
        rows.append((label, by_task))
        if not args.quiet:
            print(label, *(f"{t}:{by_task[t][0]:.4f}" for t in tasks), flush=True)
    table = ablation_table(rows, tasks)
    _write(os.path.join(args.out, "ablation.tsv"), table)
    print(table, end="")
    return OK


def cmd_replay(args):
    text = _read_text(args.manifest)
    for line in text.splitlines():
        if line.startswith("argv="):
            argv = shlex.split(line[len("argv="):])
            if not argv or argv[0] == "replay":
                raise CliError(f"{args.manifest}: recorded argv is not a replayable command")
            return main(argv)
    raise CliError(f"{args.manifest}: no argv line")


# ------------------------------------------------------------------- parser


def _add_net_flags(p):
    p.add_argument("--config", help="NetConfig key=value file (as embedded in checkpoints)")
    p.add_argument("--base-channels", type=int)
    p.add_argument("--attention", choices=("none", "cab", "ceb", "psb", "fv"))
    p.add_argument("--bottleneck", choices=("none", "aspp", "res_aspp", "paspp"))
    p.add_argument("--task", choices=("lesion", "lung"))
    p.add_argument("--out-mode", choices=("sigmoid_1ch", "softmax_2ch"))
    p.add_argument("--eq7-literal", choices=("true", "false"),
                   help="pairwise pyramid sums as printed (true) or without the double count")
    p.add_argument("--fg-prior", type=float, help="foreground rate the head bias starts at")


def _add_run_flags(p):
    d = TrainConfig()
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr0)
    p.add_argument("--decay", type=float, default=d.decay)
    p.add_argument("--fixed-lr", action="store_true")
    p.add_argument("--patch", type=lambda s: _triple(s, int), default=d.patch, help="d,h,w")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--precision", choices=("float32", "float64"), default=d.precision)
    p.add_argument("--quiet", action="store_true")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS; artifacts byte-identical across runs")


def _add_window(p):
    p.add_argument("--window", type=lambda s: tuple(float(v) for v in s.split(",")),
                   default=TrainConfig.window, help="location,breadth in HU")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are a validation failure, not an I/O one
        self.print_usage(sys.stderr)
        self.exit(CHECK_FAILED, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="vseg", description="3D segmentation toolkit on synthetic chest phantoms")
    parser.add_argument("--version", action="version", version=f"vseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic phantoms as VVOL1 files")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--spec", help="PhantomSpec key=value file")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="central-difference check of a tiny network")
    _add_net_flags(p)
    p.add_argument("--all", action="store_true", help="every ablation configuration")
    p.add_argument("--eps", type=_eps_list, default=(1e-4, 1e-5, 1e-6, 1e-7),
                   help="relative step, or a comma list tried in order")
    p.add_argument("--max-entries", type=int, default=4, help="entries sampled per parameter")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: scale one op's gradient rule
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on a directory of volumes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_net_flags(p)
    _add_run_flags(p)
    _add_window(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one volume with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output VVOL1 path; a .pgm preview is written beside it")
    p.add_argument("--threshold", type=float, default=0.5)
    _add_window(p)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--task", choices=("lesion", "lung"), default="lesion")
    p.add_argument("--out", help="also write the table here")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score every ablation configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", default="lesion,lung")
    _add_net_flags(p)
    _add_run_flags(p)
    _add_window(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    global _argv
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.command != "replay":
        _argv = argv
    try:
        return args.func(args)
    except CliError as exc:
        print(f"vseg {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (VolumeFormatError, CheckpointError, OSError) as exc:
        print(f"vseg {args.command}: {exc}", file=sys.stderr)
        return IO_FAILED
    except (ValueError, ShapeError, TrainingError) as exc:
        print(f"vseg {args.command}: {exc}", file=sys.stderr)
        return CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
