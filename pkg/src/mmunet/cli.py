"""Command line interface.

Subcommands: gradcheck, synth, train, eval, predict.  The global --ablate
flag disables the morph Mamba layers, the reverse guidance blocks, or both
for the run (training builds the ablated architecture; evaluation and
prediction always rebuild the architecture stored in the checkpoint).

MMUNET_THREADS (default 1) bounds kernel-internal parallelism; it must be
set before numpy is first imported to take effect.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_env():
    threads = os.environ.get("MMUNET_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


_apply_thread_env()

import numpy as np  # noqa: E402  (thread caps must precede the first import)

from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .data import load_dataset, read_raster, save_samples, synth_vessels, write_pgm, write_ppm  # noqa: E402
from .conv import resize_bilinear_array  # noqa: E402
from .errors import MmunetError  # noqa: E402
from .metrics import evaluate  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402
from .training import parse_config_file, train  # noqa: E402


def _build_parser():
    parser = argparse.ArgumentParser(prog="mmunet",
                                     description="segmentation kernels and desk-scale harness")
    parser.add_argument("--ablate", choices=("mmc", "rssg", "both"), default=None,
                        help="disable morph layers, guidance blocks, or both")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-network", action="store_true",
                   help="skip the end-to-end network check (fast mode)")

    p = sub.add_parser("synth", help="generate synthetic tubular samples")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", dest="ablate_sub", choices=("mmc", "rssg", "both"),
                   default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("predict", help="write probability map and overlay for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_gradcheck(args):
    from .verify import run_gradient_suite

    reports = run_gradient_suite(seed=args.seed, include_network=not args.skip_network)
    ok = True
    for rep in reports:
        print(rep)
        ok = ok and rep.passed
    print("all gradients verified" if ok else "gradient verification FAILED")
    return 0 if ok else 1


def _cmd_synth(args):
    samples = synth_vessels(args.seed, args.count, args.size)
    save_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _ablated(net_cfg, ablate):
    if ablate in ("mmc", "both"):
        net_cfg.use_mmc = False
    if ablate in ("rssg", "both"):
        net_cfg.use_rssg = False
    return net_cfg


def _cmd_train(args):
    train_cfg, net_cfg = parse_config_file(args.config)
    net_cfg = _ablated(net_cfg, args.ablate_sub or args.ablate)
    samples = load_dataset(args.data, target=net_cfg.input_hw)
    result = train(samples, train_cfg, net_cfg, out_dir=args.out,
                   progress=lambda row: print(
                       f"epoch {row[0]:4d} loss {row[1]:.6f} lr {row[2]:.3e} "
                       f"wd {row[3]:.4f} f1 {row[4]:.4f}"))
    print(f"best train F1 {result.best_f1:.4f}; checkpoints in {args.out}")
    return 0


def _cmd_eval(args):
    model, config = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, target=config.input_hw)
    m = evaluate(model, samples, threshold=args.threshold)
    print(f"{100 * m.acc:.2f} {100 * m.se:.2f} {100 * m.sp:.2f} {100 * m.f1:.2f}")
    return 0


def _cmd_predict(args):
    model, config = load_checkpoint(args.checkpoint)
    raw = read_raster(args.image)
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    chw = raw.transpose(2, 0, 1)
    th, tw = config.input_hw
    if chw.shape[1:] != (th, tw):
        chw = np.clip(resize_bilinear_array(chw.astype(np.float64), th, tw), 0.0, 1.0)
    with no_grad():
        prob = model(Tensor(chw[None].astype(np.float32))).prob.data[0, 0]
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    prob_path = os.path.join(args.out, f"{stem}_prob.pgm")
    overlay_path = os.path.join(args.out, f"{stem}_overlay.ppm")
    write_pgm(prob_path, prob)
    overlay = chw.transpose(1, 2, 0).copy()
    hit = prob >= 0.5
    overlay[hit] = [0.0, 1.0, 0.0]
    write_ppm(overlay_path, overlay)
    print(f"wrote {prob_path} and {overlay_path}")
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "predict":
            return _cmd_predict(args)
    except MmunetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
