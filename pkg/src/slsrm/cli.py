"""Command-line entry point: ``slsrm <command> [options]``.

Commands
--------
generate   synthetic preset -> dataset (.msrd), ground truth (.truth) and,
           for scene presets, a labeled recall dataset
fit        one model on a box ROI or the whole volume -> fit file (.msrf)
sweep      searchlight sweep -> result maps (.msrm) + CSV
evaluate   protocol on a fit, a sweep or a fresh whole-volume fit -> CSV
report     result maps -> thresholded CSV + plain-text summary

Every command writes ``<output>.manifest.json`` with all parameters, the
seed and SHA-256 checksums of inputs and outputs. A ``--config`` file of
``key = value`` lines supplies defaults; command-line flags win.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SLSRMError
from .evaluation import (
    EvalResult,
    EvalSpec,
    SceneTable,
    n_candidates,
    prepare_blocks,
    scene_recall_match,
    split_halves,
    time_segment_match,
    whole_volume_accuracy,
    write_report,
)
from .models import MODEL_IDS, FitConfig, fit_model, load_fit, normalize_model_id, save_fit
from .searchlight import (
    DEFAULT_K_GRID,
    SweepConfig,
    aggregate_accuracy,
    export_csv,
    load_result_maps,
    save_result_maps,
    sweep,
    threshold_map,
)
from .synth import PRESETS, generate, generate_recall, preset, save_truth
from .volume import SubjectDataset, VolumeGrid, build_searchlights, downsample_by_2, load_dataset, save_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ helpers


def _int_list(text: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _roi(text: str) -> tuple:
    box = _int_list(text)
    if len(box) != 6:
        raise argparse.ArgumentTypeError("ROI is x0,y0,z0,x1,y1,z1 (upper bounds exclusive)")
    return box


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("MSR_THREADS", "").strip()
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"MSR_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def _write_manifest(args, inputs, outputs, extra=None) -> Path:
    params = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    manifest = {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "params": params,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    if extra:
        manifest["result"] = extra
    path = Path(str(outputs[0]) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load(args, path) -> SubjectDataset:
    ds = load_dataset(path)
    if getattr(args, "downsample", False):
        ds = downsample_by_2(ds)
    return ds


def _select_roi(ds: SubjectDataset, box) -> SubjectDataset:
    if box is None:
        return ds
    lo, hi = np.array(box[:3]), np.array(box[3:])
    dims = np.array(ds.grid.dims)
    if np.any(lo < 0) or np.any(hi > dims) or np.any(lo >= hi):
        raise UsageError(f"ROI {box} does not fit grid {tuple(dims)}")
    mask = np.zeros(ds.grid.dims, dtype=bool)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    mask &= ds.grid.mask
    rows = ds.grid.row_of[np.flatnonzero(mask.ravel(order="F"))]
    return SubjectDataset(ds.data[:, rows, :], VolumeGrid(mask), ds.tr_seconds, ds.labels)


def _eval_spec(args) -> EvalSpec:
    return EvalSpec(args.protocol, args.segment_len, args.svm_c, args.zscore)


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    spec = preset(args.preset, seed=args.seed, m=args.m, t=args.t)
    ds, truth = generate(spec)
    out = Path(args.output)
    save_dataset(ds, out)
    truth_path = out.with_suffix(".truth")
    save_truth(truth, truth_path)
    outputs = [out, truth_path]
    if spec.scenes is not None:
        recall_path = out.with_suffix(".recall.msrd")
        save_dataset(generate_recall(spec, truth), recall_path)
        outputs.append(recall_path)
    _write_manifest(args, [], outputs)
    for p in outputs:
        print(p)
    return 0


def cmd_fit(args) -> int:
    ds = _select_roi(_load(args, args.data), args.roi)
    xs = prepare_blocks(ds.subjects, args.zscore)
    cfg = FitConfig(k=args.k, max_iter=args.max_iter, tol=args.tol, seed=args.seed, contrast=args.contrast)
    kwargs = {}
    if normalize_model_id(args.model) == "SR-GICA":
        kwargs = {"k1": args.k1}
    fit = fit_model(args.model, xs, cfg, **kwargs)
    out = Path(args.output)
    save_fit(fit, out)
    _write_manifest(args, [args.data], [out], {
        "model": fit.model_id, "k": fit.k, "objective": fit.objective,
        "n_iter": fit.n_iter, "converged": fit.converged,
    })
    print(f"{fit.model_id} k={fit.k} objective={fit.objective:.6g} iterations={fit.n_iter}")
    return 0


def _sweep_config(args) -> SweepConfig:
    return SweepConfig(model=args.model, k_grid=args.k_grid, eval=_eval_spec(args), seed=args.seed,
                       n_jobs=_threads(args), max_iter=args.max_iter, tol=args.tol,
                       contrast=args.contrast, k1=args.k1)


def cmd_sweep(args) -> int:
    ds = _load(args, args.data)
    recall = _load(args, args.recall) if args.recall else None
    cfg = _sweep_config(args)
    index = build_searchlights(ds.grid, radius=args.radius)
    if len(index) == 0:
        raise UsageError(f"no radius-{args.radius} searchlight fits inside grid {ds.grid.dims}")
    maps = sweep(ds, index, cfg, recall)
    out = Path(args.output)
    csv_path = out.with_suffix(".csv")
    save_result_maps(maps, out)
    n_rows = export_csv(maps, csv_path)
    best = int(np.nanargmax(maps.accuracy)) if maps.defined.any() else None
    summary = {"centers": len(index), "defined": n_rows}
    if best is not None:
        summary["best_center"] = [int(c) for c in maps.centers[best]]
        summary["best_accuracy"] = float(maps.accuracy[best])
    _write_manifest(args, [args.data, args.recall], [out, csv_path], summary)
    print(f"{len(index)} centers, {n_rows} defined -> {out}, {csv_path}")
    return 0


def _report_row(args, result: EvalResult, k, model=None) -> dict:
    model = model or normalize_model_id(args.model)
    return {"protocol": args.protocol, "model": model, "k": k,
            "accuracy": result.accuracy, "chance": result.chance, "n_trials": result.trials,
            "seed": args.seed}


def cmd_evaluate(args) -> int:
    spec = _eval_spec(args)
    ds = _load(args, args.data)
    recall = _load(args, args.recall) if args.recall else None
    inputs = [args.data, args.recall]
    model = None
    if args.fit:
        # score a stored fit directly on the given (ROI) data
        ds = _select_roi(ds, args.roi)
        fit = load_fit(args.fit)
        inputs.append(args.fit)
        if spec.protocol == "time-segment":
            result = time_segment_match(fit, prepare_blocks(ds.subjects, spec.zscore), spec)
        else:
            if recall is None:
                raise UsageError("--protocol scene-recall needs --recall")
            recall = _select_roi(recall, args.roi)
            result = scene_recall_match(fit, recall.subjects, SceneTable.from_dataset(recall), spec)
        k = fit.k
        model = fit.model_id
    elif args.maps:
        maps = load_result_maps(args.maps)
        inputs.append(args.maps)
        index = build_searchlights(ds.grid, radius=args.radius)
        if tuple(maps.dims) != tuple(ds.grid.dims):
            raise UsageError(f"maps grid {maps.dims} differs from data grid {ds.grid.dims}")
        best_k = np.zeros(len(index), dtype=np.int64)
        lookup = {tuple(c): i for i, c in enumerate(index.centers)}
        for c, kk in zip(maps.centers, maps.best_k):
            if tuple(c) in lookup:
                best_k[lookup[tuple(c)]] = kk
        result = aggregate_accuracy(ds, index, _sweep_config(args), best_k, recall)
        k = "best"
    else:
        ds = _select_roi(ds, args.roi)
        result = whole_volume_accuracy(ds, args.model, spec, k=args.k, k1=args.k1 or 500, k2=args.k,
                                       seed=args.seed, recall=recall, max_iter=args.max_iter, tol=args.tol)
        k = args.k
    out = Path(args.output)
    write_report([_report_row(args, result, k, model)], out)
    extra = {"accuracy": result.accuracy, "chance": result.chance, "trials": result.trials}
    if spec.protocol == "time-segment":
        extra["candidates"] = [n_candidates(len(h), spec.segment_len) for h in split_halves(ds.n_trs)]
    _write_manifest(args, inputs, [out], extra)
    print(f"accuracy={result.accuracy:.4f} chance={result.chance:.4g} trials={result.trials}")
    return 0


def cmd_report(args) -> int:
    maps = load_result_maps(args.maps)
    if args.threshold is not None:
        maps = threshold_map(maps, args.threshold)
    out = Path(args.output)
    csv_path = out.with_suffix(".csv")
    txt_path = out.with_suffix(".txt")
    n_rows = export_csv(maps, csv_path)
    d = np.flatnonzero(maps.defined)
    order = d[np.lexsort((d, -maps.accuracy[d]))][: args.top]
    lines = [
        f"grid {maps.dims[0]}x{maps.dims[1]}x{maps.dims[2]}",
        f"centers with accuracy {n_rows}",
    ]
    if args.threshold is not None:
        lines.append(f"threshold {args.threshold:g}")
    if d.size:
        acc = maps.accuracy[d]
        lines.append(f"accuracy mean {acc.mean():.4f} max {acc.max():.4f} min {acc.min():.4f}")
        lines.append(f"top {len(order)} centers (x, y, z, accuracy, k):")
        for i in order:
            x, y, z = (int(c) for c in maps.centers[i])
            lines.append(f"  {x:3d} {y:3d} {z:3d}  {maps.accuracy[i]:.4f}  {int(maps.best_k[i])}")
    txt_path.write_text("\n".join(lines) + "\n")
    _write_manifest(args, [args.maps], [csv_path, txt_path])
    print("\n".join(lines))
    return 0


# ------------------------------------------------------------------- parser


def _add_common(p):
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: $MSR_THREADS or 1)")


def _add_data(p, recall=True):
    p.add_argument("--data", required=True, help="dataset file (.msrd)")
    if recall:
        p.add_argument("--recall", help="labeled recall dataset for --protocol scene-recall")
    p.add_argument("--downsample", action=argparse.BooleanOptionalAction, default=True,
                   help="average 2x2x2 voxel blocks first (default on)")


def _add_model(p, k_default=None):
    p.add_argument("--model", default="srm", type=str.lower,
                   help=f"one of {', '.join(m.lower() for m in MODEL_IDS)}")
    if k_default is not None:
        p.add_argument("--k", type=int, default=k_default)
    p.add_argument("--k1", type=int, default=None, help="first-stage dimension for sr-gica")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--contrast", default="logcosh", choices=["logcosh", "cube"])


def _add_protocol(p):
    p.add_argument("--protocol", default="time-segment", choices=["time-segment", "scene-recall"])
    p.add_argument("--segment-len", type=int, default=9)
    p.add_argument("--svm-c", type=float, default=1.0)
    p.add_argument("--zscore", action=argparse.BooleanOptionalAction, default=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slsrm", description="Searchlight shared-response modelling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--m", type=int, default=None, help="override subject count")
    p.add_argument("--t", type=int, default=None, help="override TR count")
    p.add_argument("--output", "-o", default="dataset.msrd")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit one model and save it")
    _add_common(p)
    _add_data(p, recall=False)
    _add_model(p, k_default=10)
    p.add_argument("--roi", type=_roi, default=None, help="x0,y0,z0,x1,y1,z1 box (default: whole volume)")
    p.add_argument("--zscore", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--output", "-o", default="fit.msrf")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="searchlight sweep over the volume")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    _add_protocol(p)
    p.add_argument("--k-grid", type=_int_list, default=DEFAULT_K_GRID)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--output", "-o", default="maps.msrm")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="score a fit, a sweep or a whole-volume model")
    _add_common(p)
    _add_data(p)
    _add_model(p, k_default=100)
    _add_protocol(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--fit", help="stored fit to score on --data")
    src.add_argument("--maps", help="sweep maps; refit every center at its best k and pool")
    p.add_argument("--roi", type=_roi, default=None)
    p.add_argument("--k-grid", type=_int_list, default=DEFAULT_K_GRID)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--output", "-o", default="report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarize result maps")
    _add_common(p)
    p.add_argument("--maps", required=True)
    p.add_argument("--threshold", type=float, default=None, help="drop centers below this accuracy")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--output", "-o", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def read_config(path) -> list[tuple[str, str]]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key.replace("_", "-").lower(), value))
    return pairs


def _config_argv(subparser, pairs) -> list[str]:
    """Translate config entries into flags placed before the real ones."""
    options = {}
    for action in subparser._actions:
        for opt in action.option_strings:
            options[opt] = action
    argv = []
    for key, value in pairs:
        flag = "--" + key
        action = options.get(flag)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse.BooleanOptionalAction):
            truth = value.lower()
            if truth in ("1", "true", "yes", "on"):
                argv.append(flag)
            elif truth in ("0", "false", "no", "off"):
                argv.append("--no-" + key)
            else:
                raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")
        else:
            argv.extend([flag, value])
    return argv


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        try:
            pairs = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}")
        rest = list(argv)
        i = rest.index(args.command)
        args = parser.parse_args(rest[: i + 1] + _config_argv(subparser, pairs) + rest[i + 1:])
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"slsrm: usage error: {exc}", file=sys.stderr)
        return 2
    except (SLSRMError, ValueError, OSError, IndexError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
