"""Command-line entry point: train, extract, match, eval, selfcheck,
toy-ablation.

Exit codes: 0 success, 1 usage error or malformed config, 2 runtime
failure (missing or unreadable files, divergence), 3 selfcheck failure.
Every run logs its resolved configuration, defaults filled in, before
doing any work.  Subcommands never mutate their input files and all
outputs are written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .extract import (MIN_INPUT_SIZE, ExtractConfig, build_pyramid,
                      extract_keypoints, read_keypoints, write_keypoints)
from .fileio import (atomic_write, read_homography_file, read_image,
                     read_pair_list, write_matches_file, write_pgm)
from .metrics import build_eval_report, evaluate_pair, mutual_nn_match
from .network import load_model, save_model
from .selfcheck import format_report, run_selfcheck
from .synth import UnusablePair
from .training import TrainConfig, TrainingDiverged, run_toy_ablation, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_SELFCHECK = 3


@dataclass
class CliInvocation:
    """A parsed command line: which subcommand, with which flag values
    (defaults already filled in)."""
    subcommand: str
    flags: dict = field(default_factory=dict)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract reserves 2 for runtime
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _log(msg: str):
    print(msg, file=sys.stderr)


def _log_invocation(inv: CliInvocation):
    _log(f"[{inv.subcommand}] resolved config: "
         f"{json.dumps(inv.flags, sort_keys=True)}")


def _require_file(path, what: str):
    if not os.path.isfile(path):
        raise CliError(EXIT_RUNTIME, f"{what} not found: {path}")


def _load_train_config(path) -> TrainConfig:
    _require_file(path, "config file")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(EXIT_USAGE, f"malformed config {path}: {e}")
    try:
        return TrainConfig.from_dict(raw)
    except (ValueError, TypeError) as e:
        raise CliError(EXIT_USAGE, f"malformed config {path}: {e}")


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

def _cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    workdir = args.workdir or args.out + ".train"
    inv = CliInvocation("train", {"config": cfg.to_dict(), "out": args.out,
                                  "workdir": workdir, "resume": args.resume})
    _log_invocation(inv)
    if args.resume is not None:
        _require_file(args.resume, "checkpoint")
    result = train(cfg, out_dir=workdir, resume_from=args.resume, log_fn=_log)
    save_model(args.out, result.network)
    final = result.curve[-1][5] if result.curve else float("nan")
    _log(f"trained {result.iterations_done} iterations, final loss {final:.4f}")
    print(args.out)
    return EXIT_OK


def _dump_heatmaps(image, net, cfg: ExtractConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for level, (_, img) in enumerate(build_pyramid(image, cfg.pyramid_factor,
                                                   cfg.min_size)):
        if min(img.shape[:2]) < MIN_INPUT_SIZE:
            continue
        out = net.forward(img)
        for tag, hm in (("s", out.S.data), ("r", out.R.data)):
            path = os.path.join(out_dir, f"{tag}_{level:02d}.pgm")
            write_pgm(path, np.clip(hm, 0.0, 1.0))
            written.append(path)
    return written


def _cmd_extract(args) -> int:
    inv = CliInvocation("extract", {
        "model": args.model, "image": args.image, "top_k": args.top_k,
        "n_patch": args.n_patch, "out": args.out,
        "dump_heatmaps": args.dump_heatmaps,
    })
    _log_invocation(inv)
    if args.top_k < 1:
        raise CliError(EXIT_USAGE, "--top-k must be >= 1")
    # n_patch is a training-time property baked into the model; it is
    # accepted (and logged) here only to mirror the training recipe
    _require_file(args.model, "model file")
    _require_file(args.image, "image file")
    net = load_model(args.model)
    image = read_image(args.image)
    cfg = ExtractConfig()
    kset = extract_keypoints(image, net, args.top_k, cfg)
    write_keypoints(args.out, kset)
    if args.dump_heatmaps is not None:
        paths = _dump_heatmaps(image, net, cfg, args.dump_heatmaps)
        _log(f"wrote {len(paths)} heatmaps to {args.dump_heatmaps}")
    _log(f"extracted {len(kset)} keypoints")
    print(args.out)
    return EXIT_OK


def _cmd_match(args) -> int:
    inv = CliInvocation("match", {"a": args.a, "b": args.b, "out": args.out})
    _log_invocation(inv)
    _require_file(args.a, "keypoint file")
    _require_file(args.b, "keypoint file")
    A = read_keypoints(args.a)
    B = read_keypoints(args.b)
    m = mutual_nn_match(A, B)
    write_matches_file(args.out, zip(m.a_idx.tolist(), m.b_idx.tolist(),
                                     m.distance.tolist()))
    _log(f"{len(m)} mutual matches ({len(A)} x {len(B)} keypoints)")
    print(args.out)
    return EXIT_OK


def _sibling_keypoints(image_path) -> str:
    return os.path.splitext(image_path)[0] + ".r2kp"


def _cmd_eval(args) -> int:
    try:
        thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
        if not thresholds or any(t <= 0 for t in thresholds):
            raise ValueError
    except ValueError:
        raise CliError(EXIT_USAGE,
                       f"--thresholds must be positive numbers: {args.thresholds!r}")
    inv = CliInvocation("eval", {
        "pairs": args.pairs, "thresholds": thresholds, "out": args.out,
        "model": args.model, "top_k": args.top_k, "tol_px": args.tol_px,
    })
    _log_invocation(inv)
    _require_file(args.pairs, "pair list")
    try:
        pairs = read_pair_list(args.pairs)
    except ValueError as e:
        raise CliError(EXIT_RUNTIME, str(e))
    if not pairs:
        raise CliError(EXIT_RUNTIME, f"pair list is empty: {args.pairs}")

    net = None

    def keypoints_for(image_path):
        nonlocal net
        _require_file(image_path, "image file")
        sibling = _sibling_keypoints(image_path)
        if os.path.isfile(sibling):
            kset = read_keypoints(sibling)
            # the keypoint format carries no image size; bounds come
            # from the image named in the pair list
            kset.image_hw = read_image(image_path).shape[:2]
            return kset
        if args.model is None:
            raise CliError(EXIT_RUNTIME,
                           f"no keypoint file {sibling} and no --model to extract with")
        if net is None:
            _require_file(args.model, "model file")
            net = load_model(args.model)
        return extract_keypoints(read_image(image_path), net, args.top_k)

    names, results = [], []
    for path_a, path_b, path_h in pairs:
        _require_file(path_h, "homography file")
        H = read_homography_file(path_h)
        ka = keypoints_for(path_a)
        kb = keypoints_for(path_b)
        names.append(f"{os.path.basename(path_a)} {os.path.basename(path_b)}")
        results.append(evaluate_pair(ka, kb, H, thresholds, args.tol_px))

    report = build_eval_report(names, results, thresholds)
    with atomic_write(args.out, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    agg = report["aggregate"]
    _log(f"{len(pairs)} pairs: repeatability {agg['repeatability']:.3f}, "
         f"m_score {agg['m_score']}")
    print(args.out)
    return EXIT_OK


def _cmd_selfcheck(args) -> int:
    inv = CliInvocation("selfcheck", {"trials": args.trials,
                                      "ap_instances": args.ap_instances})
    _log_invocation(inv)
    results, elapsed = run_selfcheck(trials=args.trials,
                                     ap_instances=args.ap_instances)
    print(format_report(results, elapsed))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


def _cmd_toy_ablation(args) -> int:
    cfg = _load_train_config(args.config)
    inv = CliInvocation("toy-ablation", {
        "config": cfg.to_dict(), "out": args.out, "eval_pairs": args.eval_pairs,
        "eval_top_k": args.eval_top_k, "tol_px": args.tol_px,
    })
    _log_invocation(inv)
    report = run_toy_ablation(cfg, eval_pairs=args.eval_pairs,
                              eval_k=args.eval_top_k, tol_px=args.tol_px,
                              log_fn=_log)
    with atomic_write(args.out, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    key = f"mma@{args.tol_px:g}"
    for row in report["rows"]:
        _log(f"{row['variant']:>20}: {key} {row[key]:.3f} "
             f"repeatability {row['repeatability']:.3f}")
    print(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relfeat",
                description="joint keypoint detector/descriptor toolkit")
    sub = p.add_subparsers(dest="subcommand", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True, help="training config (JSON)")
    t.add_argument("--out", required=True, help="output model file")
    t.add_argument("--workdir", default=None,
                   help="checkpoint/loss-curve directory (default: OUT.train)")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("extract", help="detect keypoints in one image")
    e.add_argument("--model", required=True)
    e.add_argument("--image", required=True, help="PGM/PPM image")
    e.add_argument("--top-k", type=int, default=5000,
                   help="max keypoints to keep (default 5000)")
    e.add_argument("--n-patch", type=int, default=16,
                   help="training patch size of the recipe (logged only)")
    e.add_argument("--out", required=True, help="output keypoint file")
    e.add_argument("--dump-heatmaps", default=None, metavar="DIR",
                   help="also write per-scale S/R heatmaps as PGM")
    e.set_defaults(fn=_cmd_extract)

    m = sub.add_parser("match", help="mutual-NN match two keypoint files")
    m.add_argument("a", help="first keypoint file")
    m.add_argument("b", help="second keypoint file")
    m.add_argument("--out", required=True, help="output matches file")
    m.set_defaults(fn=_cmd_match)

    v = sub.add_parser("eval", help="score keypoints over a pair list")
    v.add_argument("--pairs", required=True,
                   help="text file: imageA imageB homographyFile per line")
    v.add_argument("--thresholds", default="1,2,3,4,5,6,7,8,9,10",
                   help="comma list of MMA pixel thresholds (default 1..10)")
    v.add_argument("--out", required=True, help="output report (JSON)")
    v.add_argument("--model", default=None,
                   help="model for extraction when no .r2kp file sits next to an image")
    v.add_argument("--top-k", type=int, default=5000)
    v.add_argument("--tol-px", type=float, default=3.0,
                   help="correctness tolerance for repeatability/M-score")
    v.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("selfcheck", help="run the gradient and oracle suites")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--ap-instances", type=int, default=1000)
    s.set_defaults(fn=_cmd_selfcheck)

    a = sub.add_parser("toy-ablation", help="train and score the loss ablations")
    a.add_argument("--config", required=True, help="training config (JSON)")
    a.add_argument("--out", required=True, help="output report (JSON)")
    a.add_argument("--eval-pairs", type=int, default=20)
    a.add_argument("--eval-top-k", type=int, default=200)
    a.add_argument("--tol-px", type=float, default=3.0)
    a.set_defaults(fn=_cmd_toy_ablation)
    return p


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except CliError as e:
        _log(f"error: {e}")
        return e.code
    except (TrainingDiverged, UnusablePair) as e:
        _log(f"error: {e}")
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        _log(f"error: {e}")
        return EXIT_RUNTIME


def main():
    sys.exit(run_cli(sys.argv[1:]))
