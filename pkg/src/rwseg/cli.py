"""Command-line interface: ``rwseg <command> [flags]``.

Commands: synth, train, predict, eval, aci, export-slice. Every command
writes ``run_manifest.json`` next to its outputs and exits nonzero on error.
"""

import argparse
import csv
import io
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .aci import aci_infer, is_compatible
from .core import HardSeg, RWSegError, harden
from .data import (SEG_MAGIC, SOFT_MAGIC, VOLUME_MAGIC, SynthConfig, load_dataset, load_weights,
                   save_soft, save_weights, seg_from_bytes, soft_from_bytes, synth_generate,
                   volume_from_bytes)
from .learn import METHODS, TrainConfig, cccp_train, default_w0, evaluate, inference_params, \
    predict, training_solver

log = logging.getLogger("rwseg")

DEFAULT_LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_LAMBDA_PRIME_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
GRID_COLUMNS = ("lambda", "lambda_prime", "method", "train_loss", "test_loss", "cccp_iters",
                "wall_seconds")
# fixed label palette (background black); labels beyond it cycle
PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
], dtype=np.uint8)


class CliError(RWSegError):
    pass


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(out_dir, command, args, started):
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    record = {
        "command": command,
        "flags": flags,
        "seed": flags.get("seed"),
        "code_version": __version__,
        "started": started,
        "finished": _now(),
    }
    path = Path(out_dir) / "run_manifest.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# grid training (also used by the acceptance tests)
# ---------------------------------------------------------------------------

def _fmt(x):
    return "nan" if x != x else f"{x:.10g}"


def run_grid(train, test, method, lambdas, lambda_primes, base: TrainConfig,
             timing=True, on_cell=None):
    """Train every (lambda, lambda') cell; returns a list of row dicts.

    Each row also carries the trained weights and report under the keys
    ``"w"`` and ``"report"`` (they are not written to the CSV).
    """
    rows = []
    for lam in lambdas:
        for lp in lambda_primes:
            cfg = TrainConfig(lam=lam, lam_prime=lp, w0=base.w0, epsilon=base.epsilon,
                              cut_epsilon=base.cut_epsilon, max_cccp_iter=base.max_cccp_iter,
                              max_cuts=base.max_cuts, tau=base.tau, qp_tol=base.qp_tol)
            t0 = time.perf_counter()
            w, rep = cccp_train(train, cfg, method=method)
            row = {
                "lambda": lam, "lambda_prime": lp, "method": method,
                "train_loss": evaluate(train, w).mean,
                "test_loss": evaluate(test, w).mean if test else float("nan"),
                "cccp_iters": len(rep.iterations) - 1,
                "wall_seconds": time.perf_counter() - t0 if timing else None,
                "w": w, "report": rep,
            }
            rows.append(row)
            if on_cell is not None:
                on_cell(row)
    return rows


def grid_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(GRID_COLUMNS)
    for r in rows:
        wall = "NA" if r["wall_seconds"] is None else f"{r['wall_seconds']:.3f}"
        wr.writerow([_fmt(r["lambda"]), _fmt(r["lambda_prime"]), r["method"], _fmt(r["train_loss"]),
                     _fmt(r["test_loss"]), r["cccp_iters"], wall])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = SynthConfig(dims=(args.nx, args.ny, args.nz), K=args.labels, n_samples=args.samples,
                      noise_sigma=args.noise, prior_corruption=args.prior_corruption,
                      seed=args.seed)
    out = _out_dir(args.out)
    man = synth_generate(cfg, out)
    print(f"wrote {len(man.samples)} samples to {out / 'manifest.json'}")
    return out


def _floats(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _split(samples, split):
    return [samples[k] for k in split["train"]], [samples[k] for k in split["test"]]


def cmd_train(args):
    samples, split, _man = load_dataset(args.manifest)
    train, test = _split(samples, split)
    if not train:
        raise CliError("the manifest's train split is empty")
    m0 = train[0].model
    w0 = load_weights(args.w0) if args.w0 else default_w0(m0.n_alpha, m0.n_beta)
    m0.check_params(w0)
    base = TrainConfig(lam=args.lam, lam_prime=args.lam_prime, w0=w0, epsilon=args.eps,
                       max_cccp_iter=args.max_iter, tau=args.tau)
    out = _out_dir(args.out)
    grid = args.lambda_grid is not None or args.lambda_prime_grid is not None
    lams = args.lambda_grid if args.lambda_grid is not None else [args.lam]
    lps = args.lambda_prime_grid if args.lambda_prime_grid is not None else [args.lam_prime]
    if args.method != "none" and any(a + b <= 0 for a in lams for b in lps):
        raise CliError("every grid cell needs lambda + lambda' > 0")

    def on_cell(row):
        log.info("%s lambda=%g lambda'=%g: train %.4f test %.4f", row["method"], row["lambda"],
                 row["lambda_prime"], row["train_loss"], row["test_loss"])

    rows = run_grid(train, test, args.method, lams, lps, base, timing=not args.no_timing,
                    on_cell=on_cell)
    if grid:
        (out / "grid.csv").write_text(grid_csv(rows))
        cells = out / "cells"
        cells.mkdir(exist_ok=True)
        for i, r in enumerate(rows):
            save_weights(cells / f"cell{i:02d}_weights.json", r["w"])
            (cells / f"cell{i:02d}_report.json").write_text(
                json.dumps(r["report"].to_dict(timing=not args.no_timing), indent=2) + "\n")
        best = min(rows, key=lambda r: (r["test_loss"] if test else r["train_loss"]))
        save_weights(out / "weights.json", best["w"])
        print(grid_csv(rows), end="")
    else:
        r = rows[0]
        save_weights(out / "weights.json", r["w"])
        (out / "report.json").write_text(
            json.dumps(r["report"].to_dict(timing=not args.no_timing), indent=2) + "\n")
        (out / "report.csv").write_text(r["report"].to_csv())
        print(f"{args.method}: train loss {_fmt(r['train_loss'])}, test loss {_fmt(r['test_loss'])}")
    return out


def _selected(samples, k):
    if k is None:
        return list(enumerate(samples))
    if not 0 <= k < len(samples):
        raise CliError(f"sample index {k} out of range (manifest has {len(samples)})")
    return [(k, samples[k])]


def cmd_predict(args):
    samples, _, _ = load_dataset(args.manifest)
    w = load_weights(args.weights)
    out = _out_dir(args.out)
    for k, s in _selected(samples, args.sample):
        path = out / f"{s.name}_pred.rws"
        save_soft(path, predict(s.model, w))
        print(path)
    return out


def cmd_eval(args):
    samples, split, _ = load_dataset(args.manifest)
    if args.split != "all":
        samples = [samples[k] for k in split[args.split]]
    if args.sample is not None:
        samples = [s for _, s in _selected(samples, args.sample)]
    w = load_weights(args.weights)
    res = evaluate(samples, w)
    out = _out_dir(args.out)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["sample_id", "loss"])
    for name, v in zip(res.names, res.per_sample):
        wr.writerow([name, _fmt(v)])
    (out / "eval.csv").write_text(buf.getvalue())
    print(f"mean loss {_fmt(res.mean)} over {len(res.per_sample)} samples"
          + (f" ({res.excluded} excluded)" if res.excluded else ""))
    return out


def cmd_aci(args):
    samples, _, _ = load_dataset(args.manifest)
    w = load_weights(args.weights)
    out = _out_dir(args.out)
    for k, s in _selected(samples, args.sample):
        y = aci_infer(s.model, inference_params(s.model, w), s.z,
                      solver=training_solver(s.model))
        if not is_compatible(y, s.z):
            raise CliError(f"ACI output for sample {s.name} is not compatible with its annotation")
        path = out / f"{s.name}_aci.rws"
        save_soft(path, y)
        print(path)
    return out


def _read_labels(path):
    buf = Path(path).read_bytes()
    magic = buf[:4]
    if magic == SOFT_MAGIC:
        return harden(soft_from_bytes(buf)), "labels"
    if magic == SEG_MAGIC:
        return seg_from_bytes(buf), "labels"
    if magic == VOLUME_MAGIC:
        return volume_from_bytes(buf), "gray"
    raise CliError(f"{path}: unrecognised file magic {magic!r}")


def slice_image(obj, kind, z_index):
    """(rows, cols[, 3]) uint8 image of one z slice; rows run along y."""
    nx, ny, nz = obj.dims
    if not 0 <= z_index < nz:
        raise CliError(f"z index {z_index} out of range [0, {nz})")
    if kind == "labels":
        grid = obj.labels.reshape((nx, ny, nz), order="F")[:, :, z_index]
        return PALETTE[grid.T % len(PALETTE)]
    grid = obj.data.reshape((nx, ny, nz), order="F")[:, :, z_index]
    lo, hi = float(grid.min()), float(grid.max())
    scaled = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    return np.round(255 * scaled.T).astype(np.uint8)


def netpbm_bytes(img) -> bytes:
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    return header.encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def cmd_export_slice(args):
    obj, kind = _read_labels(args.input)
    img = slice_image(obj, kind, args.z_index)
    out = Path(args.out)
    _out_dir(out.parent if str(out.parent) else ".")
    out.write_bytes(netpbm_bytes(img))
    print(out)
    return out.parent


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rwseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--nx", type=_positive_int, default=16)
    s.add_argument("--ny", type=_positive_int, default=16)
    s.add_argument("--nz", type=_positive_int, default=2)
    s.add_argument("--labels", type=int, default=3)
    s.add_argument("--samples", type=_positive_int, default=15)
    s.add_argument("--noise", type=_nonneg_float, default=0.15)
    s.add_argument("--prior-corruption", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="estimate weights (optionally over a hyperparameter grid)")
    t.add_argument("--manifest", required=True)
    t.add_argument("--method", choices=METHODS, default="latent")
    t.add_argument("--lambda", dest="lam", type=_nonneg_float, default=1e-3)
    t.add_argument("--lambda-prime", dest="lam_prime", type=_nonneg_float, default=1.0)
    t.add_argument("--lambda-grid", type=_floats, nargs="?",
                   const=list(DEFAULT_LAMBDA_GRID), default=None,
                   help="comma-separated lambda values (bare flag: default 4-point grid)")
    t.add_argument("--lambda-prime-grid", type=_floats, nargs="?",
                   const=list(DEFAULT_LAMBDA_PRIME_GRID), default=None,
                   help="comma-separated lambda' values (bare flag: default 5-point grid)")
    t.add_argument("--tau", type=float, default=2.0, help="distance-transform softening scale")
    t.add_argument("--w0", default=None, help="weights JSON for w0 (default: uniform)")
    t.add_argument("--eps", type=float, default=1e-4, help="CCCP stall tolerance")
    t.add_argument("--max-iter", type=_positive_int, default=20, help="CCCP iteration cap")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0,
                   help="recorded in the run manifest; training itself is deterministic")
    t.add_argument("--no-timing", action="store_true",
                   help="write NA for wall-clock columns so outputs are reproducible")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("predict", cmd_predict, "unconstrained RW prediction"),
                                 ("aci", cmd_aci, "annotation-consistent inference"),
                                 ("eval", cmd_eval, "per-sample hard loss")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--manifest", required=True)
        c.add_argument("--weights", required=True)
        c.add_argument("--sample", type=int, default=None, help="sample index (default: all)")
        c.add_argument("--out", required=True)
        if name == "eval":
            c.add_argument("--split", choices=("train", "test", "all"), default="all")
        c.set_defaults(func=func)

    e = sub.add_parser("export-slice", help="render one z slice as PGM/PPM")
    e.add_argument("--input", required=True, help="soft/hard segmentation or volume file")
    e.add_argument("--z-index", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_slice)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        out = args.func(args)
        write_run_manifest(out, args.command, args, started)
    except (RWSegError, ValueError, OSError) as exc:
        print(f"rwseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
