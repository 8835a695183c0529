"""Command-line interface.

Subcommands: gen-data, extract-bases, train, predict, eval, trimap,
gradcheck, oracle-check. Usage errors exit 2, validation errors exit 1,
success exits 0.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import data, evaluation, model, training, verify
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_manifest, read_image_ppm, read_mask_pgm, write_image_ppm, \
    write_manifest, write_mask_pgm
from .reconstruction import build_bank, downsample_basis, fit_basis_pca
from .tensor import save_tensor


def _cmd_gen_data(args):
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    total = args.n_train + args.n_val
    samples = data.generate_shapes(total, args.size, args.classes, args.seed,
                                   p_empty=args.p_empty,
                                   color_jitter=args.color_jitter,
                                   clutter=args.clutter)
    entries = []
    for s in samples:
        img = f"images/{s.id}.ppm"
        msk = f"masks/{s.id}.pgm"
        write_image_ppm(os.path.join(args.out, img), s.image)
        write_mask_pgm(os.path.join(args.out, msk), s.truth)
        entries.append((s.id, img, msk))
    write_manifest(os.path.join(args.out, "train.txt"), entries[:args.n_train])
    write_manifest(os.path.join(args.out, "val.txt"), entries[args.n_train:])
    print(f"wrote {args.n_train} train + {args.n_val} val samples to {args.out}")
    return 0


def _cmd_extract_bases(args):
    samples = load_manifest(args.manifest)
    comps = []
    for c in range(args.classes):
        pset = data.extract_class_patches(samples, c, count=args.count,
                                          patch=args.patch,
                                          min_coverage=args.min_coverage,
                                          seed=args.seed)
        full, sv = fit_basis_pca(pset, args.k)
        comps.append(downsample_basis(full, args.target) if full.shape[0] else full)
        print(f"class {c}: {pset.patches.shape[0]} patches, "
              f"{full.shape[0]} components"
              + (f", sigma1={sv[0]:.3f}" if len(sv) else ""))
    bank = build_bank(args.target // 2, args.k, args.classes, comps)
    save_checkpoint(args.out, {"bank": bank.functions})
    print(f"wrote basis bank {bank.functions.shape} to {args.out}")
    return 0


def _cmd_train(args):
    cfg = training.parse_config(args.config)
    path = training.train(cfg, resume=args.resume)
    print(f"final checkpoint: {path}")
    return 0


def _load_model(checkpoint_path):
    blob = load_checkpoint(checkpoint_path)
    if "meta.arch" not in blob:
        raise ValueError("checkpoint lacks model metadata")
    mc = training.arch_from_tensor(blob["meta.arch"])
    params = {k: v for k, v in blob.items() if not k.startswith(("optim.", "meta."))}
    return params, mc


def _cmd_predict(args):
    params, mc = _load_model(args.checkpoint)
    image = read_image_ppm(args.image)
    scales = [float(s) for s in args.scales.split(",")] if args.scales else [1.0]
    if scales == [1.0]:
        levels, _ = model.forward(params, mc, image[None].astype(np.float32))
        pred = levels[-1].fused[0].argmax(axis=0).astype(np.uint8)
    else:
        def forward_fn(batch):
            return model.predict_scores(params, mc, batch.astype(np.float32))
        probs = evaluation.multiscale_predict(forward_fn, image, scales)
        pred = probs.argmax(axis=0).astype(np.uint8)
        levels = None
    write_mask_pgm(args.out, pred)
    if args.dump_dir:
        os.makedirs(args.dump_dir, exist_ok=True)
        if levels is None:
            levels, _ = model.forward(params, mc, image[None].astype(np.float32))
        for lv in levels:
            tag = f"level{lv.stride}x"
            save_tensor(os.path.join(args.dump_dir, f"{tag}_raw.lrrt"), lv.raw[0])
            save_tensor(os.path.join(args.dump_dir, f"{tag}_fused.lrrt"), lv.fused[0])
            if lv.mask is not None:
                save_tensor(os.path.join(args.dump_dir, f"{tag}_mask.lrrt"), lv.mask[0])
            write_mask_pgm(os.path.join(args.dump_dir, f"{tag}_argmax.pgm"),
                           lv.fused[0].argmax(axis=0).astype(np.uint8))
    print(f"wrote {args.out}")
    return 0


def _pred_truth_pairs(manifest, pred_dir):
    samples = load_manifest(manifest)
    pairs = []
    for s in samples:
        pred_path = os.path.join(pred_dir, f"{s.id}.pgm")
        if not os.path.exists(pred_path):
            raise ValueError(f"missing prediction {pred_path}")
        pairs.append((read_mask_pgm(pred_path), s.truth))
    return pairs


def _cmd_eval(args):
    cm = evaluation.ConfusionMatrix(args.classes)
    for pred, truth in _pred_truth_pairs(args.manifest, args.pred_dir):
        cm.accumulate(pred, truth)
    m = evaluation.metrics(cm)
    print(f"pixel acc.      {m.pixel_acc:.4f}")
    print(f"mean acc.       {m.mean_class_acc:.4f}")
    print(f"mean IoU        {m.mean_iou:.4f}")
    for c in range(args.classes):
        iou = m.per_class_iou[c]
        print(f"  class {c} IoU   " + ("n/a (empty union)" if np.isnan(iou) else f"{iou:.4f}"))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou", "evaluated"])
            for c in range(args.classes):
                w.writerow([c, f"{m.per_class_iou[c]:.6f}", int(m.evaluated[c])])
            w.writerow(["pixel_acc", f"{m.pixel_acc:.6f}", 1])
            w.writerow(["mean_acc", f"{m.mean_class_acc:.6f}", 1])
            w.writerow(["mean_iou", f"{m.mean_iou:.6f}", 1])
    return 0


def _cmd_trimap(args):
    radii = [int(r) for r in args.radii.split(",")]
    cms = {r: evaluation.ConfusionMatrix(args.classes) for r in radii}
    for pred, truth in _pred_truth_pairs(args.manifest, args.pred_dir):
        for r in radii:
            band = evaluation.trimap_band(truth, r)
            cms[r].accumulate(pred, truth, region=band)
    rows = []
    for r in radii:
        if cms[r].counts.sum() == 0:
            rows.append((r, float("nan"), float("nan")))
        else:
            m = evaluation.metrics(cms[r])
            rows.append((r, m.mean_iou, m.pixel_acc))
    print("radius  mean_iou  pixel_acc")
    for r, miou, pa in rows:
        print(f"{r:6d}  {miou:8.4f}  {pa:9.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["radius", "mean_iou", "pixel_acc"])
            for r, miou, pa in rows:
                w.writerow([r, f"{miou:.6f}", f"{pa:.6f}"])
    return 0


def _print_checks(results):
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_err={r.error:.3e}  tol={r.tol:.1e}  {status}")
        failures += 0 if r.passed else 1
    return failures


def _cmd_gradcheck(args):
    failures = _print_checks(verify.run_gradient_checks())
    print("gradcheck:", "all passed" if failures == 0 else f"{failures} FAILURES")
    return 0 if failures == 0 else 1


def _cmd_oracle_check(args):
    failures = _print_checks(verify.run_oracle_checks())
    print("oracle-check:", "all passed" if failures == 0 else f"{failures} FAILURES")
    return 0 if failures == 0 else 1


def build_parser():
    p = argparse.ArgumentParser(prog="lrr",
                                description="Multi-resolution segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-val", type=int, default=50)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--p-empty", type=float, default=0.0)
    g.add_argument("--color-jitter", type=float, default=0.1)
    g.add_argument("--clutter", type=int, default=0,
                   help="label-free full-span stripes per image (stress variant)")
    g.set_defaults(fn=_cmd_gen_data)

    e = sub.add_parser("extract-bases", help="fit the PCA basis dictionary")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--classes", type=int, default=5)
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--count", type=int, default=10000)
    e.add_argument("--patch", type=int, default=32)
    e.add_argument("--min-coverage", type=float, default=0.02)
    e.add_argument("--target", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=_cmd_extract_bases)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("config")
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=_cmd_train)

    pr = sub.add_parser("predict", help="segment one PPM image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--scales", default=None,
                    help="comma-separated inference scales, e.g. 1.0,0.8,0.6")
    pr.add_argument("--dump-dir", default=None,
                    help="write per-level scores/masks as LRRT plus argmax PGMs")
    pr.set_defaults(fn=_cmd_predict)

    ev = sub.add_parser("eval", help="score predictions against a manifest")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--pred-dir", required=True)
    ev.add_argument("--classes", type=int, default=5)
    ev.add_argument("--out", default=None, help="CSV output path")
    ev.set_defaults(fn=_cmd_eval)

    tr = sub.add_parser("trimap", help="boundary-band metric sweep")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--pred-dir", required=True)
    tr.add_argument("--classes", type=int, default=5)
    tr.add_argument("--radii", default="1,2,3,5,8")
    tr.add_argument("--out", default=None, help="CSV output path")
    tr.set_defaults(fn=_cmd_trimap)

    gc = sub.add_parser("gradcheck", help="run the finite-difference suite")
    gc.set_defaults(fn=_cmd_gradcheck)
    oc = sub.add_parser("oracle-check", help="run the naive-oracle equivalence suite")
    oc.set_defaults(fn=_cmd_oracle_check)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, ArithmeticError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
