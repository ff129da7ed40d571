"""``scasnet`` command line: gen-data, train, infer, eval, gradcheck, ablate.

Exit codes: 0 success, 1 failed check, 2 config error, 3 data error,
4 numerical divergence. Every output is a pure function of (config, seed)
when run with ``--threads 1``; nothing time-dependent is written.
"""
import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

import scasnet
from scasnet import kernels, layers
from scasnet.config import PROFILES, load_config
from scasnet.data import (
    CLASS_NAMES, load_patches, load_split, normalize, read_manifest, read_pgm, write_dataset, write_pgm,
)
from scasnet.evaluation import default_thresholds, erode_boundaries, pr_csv, pr_curve, score
from scasnet.infer import infer_image
from scasnet.model import ConfigError, ModelConfig, build_model, load_checkpoint, save_checkpoint
from scasnet.tensor import load_tensor, save_tensor
from scasnet.train import DivergenceError, EpochRecord, gradcheck_suite, history_csv, learning_rate, train_loop

log = logging.getLogger("scasnet")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
RUN_FORMAT_VERSION = 1

# the ablation ladder: baseline encoder, then one component added per row
LADDER = [
    ("baseline", dict(aggregation="none", refine_taps=[])),
    ("MSC", dict(aggregation="parallel_stack", context_correction=False, refine_taps=[])),
    ("MSC+SC", dict(aggregation="cascaded", context_correction=False, refine_taps=[])),
    ("MSC+SC+CReC", dict(aggregation="cascaded", context_correction=True, refine_taps=[])),
    ("+Ref", dict(aggregation="cascaded", context_correction=True, refine_correction=False)),
    ("+Ref+RReC", dict(aggregation="cascaded", context_correction=True, refine_correction=True)),
]


class DataError(Exception):
    pass


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(path, obj):
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _start_run(out, cfg, command, args):
    """Create the run directory with the echoed config, a run manifest and a log file."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    _write(out / "config.json", cfg.to_json())
    _dump_json(out / "run.json", {
        "format_version": RUN_FORMAT_VERSION,
        "command": command,
        "package_version": scasnet.__version__,
        "kernel_backend": kernels.BACKEND,
        "profile": args.profile,
        "seed": args.seed,
        "threads": args.threads,
    })
    handler = logging.FileHandler(out / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    for h in [h for h in root.handlers if isinstance(h, logging.FileHandler)]:
        root.removeHandler(h)
        h.close()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return out


def _load_manifest(data_dir):
    try:
        return read_manifest(data_dir)
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as e:
        raise DataError(str(e)) from e


def _load_training_set(data_dir):
    manifest = _load_manifest(data_dir)
    try:
        images, labels = load_patches(data_dir, manifest)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from e
    return normalize(images), labels


# -------------------------------------------------------------------- commands


def cmd_gen_data(cfg, args):
    out = _start_run(args.out, cfg, "gen-data", args)
    try:
        manifest = write_dataset(cfg.data, out)
    except OSError as e:
        raise DataError(f"cannot write dataset to {out}: {e}") from e
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    log.info("scenes %s, %d training patches", counts, len(manifest["patches"]["train"]))
    print(f"wrote {counts} scenes and {len(manifest['patches']['train'])} training patches to {out}")
    return EXIT_OK


def _train_model(model, images, labels, tcfg, out, start_epoch=0, velocity=None, history=None):
    ckpt_dir = Path(out) / "checkpoints"
    records = list(history or [])

    def save_hook(rec, opt):
        records.append(rec)
        if tcfg.save_every and (rec.epoch + 1) % tcfg.save_every == 0:
            save_checkpoint(
                model, ckpt_dir / f"epoch_{rec.epoch + 1:04d}", epoch=rec.epoch + 1,
                loss_history=[r.mean_loss for r in records], seed=tcfg.seed, optimizer_state=opt.velocity,
            )

    return train_loop(model, images, labels, tcfg, start_epoch, velocity, history, on_epoch=save_hook)


def cmd_train(cfg, args):
    images, labels = _load_training_set(args.data)
    out = _start_run(args.out, cfg, "train", args)
    tcfg = cfg.train
    if args.resume:
        try:
            model, manifest, velocity = load_checkpoint(args.resume)
        except (FileNotFoundError, ValueError) as e:
            raise DataError(f"cannot resume: {e}") from e
        if manifest["config"] != cfg.model.to_dict():
            raise ConfigError("resume checkpoint was trained with a different model config")
        start = manifest["epoch"]
        history = [EpochRecord(i, v, learning_rate(tcfg, i)) for i, v in enumerate(manifest["loss_history"])]
        log.info("resuming from %s at epoch %d", args.resume, start)
    else:
        model, start, velocity, history = build_model(cfg.model, tcfg.seed), 0, None, []
    log.info("model with %d parameters, %d training patches", model.num_params(), len(images))
    opt, history = _train_model(model, images, labels, tcfg, out, start, velocity, history)
    _write(out / "loss.csv", history_csv(history))
    save_checkpoint(
        model, out / "checkpoint", epoch=tcfg.epochs, loss_history=[r.mean_loss for r in history],
        seed=tcfg.seed, optimizer_state=opt.velocity,
    )
    final = history[-1].mean_loss if history else float("nan")
    print(f"trained {tcfg.epochs} epochs, final loss {final:.6f}; checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def _infer_split(model, data_dir, split, icfg, manifest=None):
    """Yield ``(scene_id, probs, pred, gt)`` for every scene in ``split``."""
    try:
        scenes = load_split(data_dir, split, manifest)
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise DataError(f"cannot read split {split!r}: {e}") from e
    for sid, image, gt in scenes:
        probs, pred = infer_image(model, normalize(image), icfg)
        yield sid, probs, pred, gt


def cmd_infer(cfg, args):
    manifest = _load_manifest(args.data)
    try:
        model, _, _ = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(f"cannot load checkpoint: {e}") from e
    out = _start_run(args.out, cfg, "infer", args)
    split = args.split or cfg.eval.split
    n = 0
    for sid, probs, pred, _ in _infer_split(model, args.data, split, cfg.infer, manifest):
        stem = sid.replace("/", "_")
        save_tensor(out / "probs" / f"{stem}.bin", probs)
        _dump_json(out / "probs" / f"{stem}.json", {
            "scene": sid, "shape": list(probs.shape), "classes": list(CLASS_NAMES),
            "scales": sorted(cfg.infer.scales), "patch_size": cfg.infer.patch_size,
        })
        write_pgm(out / "labels" / f"{stem}.pgm", pred.astype(np.uint8))
        n += 1
    log.info("inferred %d scenes of split %s", n, split)
    print(f"wrote probability maps and label maps for {n} {split} scenes to {out}")
    return EXIT_OK


def _evaluate(preds, cfg):
    """``preds`` yields ``(probs or None, pred, gt)``; returns (report, PR curves)."""
    k = len(CLASS_NAMES)
    thresholds = default_thresholds(cfg.eval.pr_thresholds)
    report = None
    pr_probs, pr_gt, pr_mask = [], [], []
    for probs, pred, gt in preds:
        mask = erode_boundaries(gt, cfg.eval.radius)
        r = score(pred, gt, mask, num_classes=k, class_names=list(CLASS_NAMES))
        report = r if report is None else report + r
        if probs is not None:
            pr_probs.append(probs.reshape(k, -1))
            pr_gt.append(gt.ravel())
            pr_mask.append(mask.ravel())
    if report is None:
        raise DataError("nothing to evaluate")
    curves = None
    if pr_probs:
        prob, gt, mask = np.concatenate(pr_probs, 1), np.concatenate(pr_gt), np.concatenate(pr_mask)
        curves = {c: pr_curve(prob, gt, mask, c, thresholds) for c in range(k)}
    return report, curves


def _write_report(out, report, curves):
    _write(out / "report.json", report.to_json())
    _write(out / "report.txt", report.to_text())
    if curves is not None:
        _write(out / "pr.csv", pr_csv(curves, list(CLASS_NAMES)))


def cmd_eval(cfg, args):
    manifest = _load_manifest(args.data)
    split = args.split or cfg.eval.split
    pred_dir = Path(args.pred)
    if not (pred_dir / "labels").is_dir():
        raise DataError(f"no label maps under {pred_dir / 'labels'}")
    out = _start_run(args.out, cfg, "eval", args)

    def pairs():
        for sid, _, gt in load_split(args.data, split, manifest):
            stem = sid.replace("/", "_")
            lab = pred_dir / "labels" / f"{stem}.pgm"
            if not lab.is_file():
                raise DataError(f"missing prediction {lab}")
            pb = pred_dir / "probs" / f"{stem}.bin"
            probs = load_tensor(pb) if pb.is_file() else None
            yield probs, read_pgm(lab), gt

    report, curves = _evaluate(pairs(), cfg)
    _write_report(out, report, curves)
    sys.stdout.write(report.to_text())
    return EXIT_OK


@contextlib.contextmanager
def injected_fault():
    """Scale the ReLU input gradient by 0.9 so every check through it fails."""
    original = layers.ReLU.backward

    def faulty(self, grad):
        return original(self, grad) * 0.9

    layers.ReLU.backward = faulty
    try:
        yield
    finally:
        layers.ReLU.backward = original


def cmd_gradcheck(cfg, args):
    out = _start_run(args.out, cfg, "gradcheck", args)
    ctx = injected_fault() if args.inject_fault else contextlib.nullcontext()
    with ctx:
        results = gradcheck_suite(seed=args.seed if args.seed is not None else 0, sample_count=args.samples)
    lines = [f"{name:<24} {rep}" for name, rep in results]
    ok = all(rep.passed for _, rep in results)
    lines.append("ALL PASS" if ok else "FAILED")
    _write(out / "gradcheck.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_CHECK


def ablation_config(base, overrides):
    d = base.to_dict()
    d.update(overrides)
    return ModelConfig.from_dict(d).validate()


def cmd_ablate(cfg, args):
    images, labels = _load_training_set(args.data)
    manifest = _load_manifest(args.data)
    out = _start_run(args.out, cfg, "ablate", args)
    split = cfg.eval.split
    rows = []
    for name, overrides in LADDER:
        mcfg = ablation_config(cfg.model, overrides)
        vdir = out / "variants" / name.replace("+", "plus_").strip("_")
        log.info("variant %s: %s", name, overrides)
        model = build_model(mcfg, cfg.train.seed)
        _, history = train_loop(model, images, labels, cfg.train)
        _write(vdir / "loss.csv", history_csv(history))
        _dump_json(vdir / "model.json", mcfg.to_dict())
        report, _ = _evaluate(
            ((None, pred, gt) for _, _, pred, gt in _infer_split(model, args.data, split, cfg.infer, manifest)), cfg,
        )
        _write(vdir / "report.json", report.to_json())
        row = {"variant": name, "mean_iou": report.mean_iou, "mean_f1": report.mean_f1,
               "overall_accuracy": report.overall_accuracy, "params": model.num_params()}
        row.update({f"iou_{c}": float(v) for c, v in zip(CLASS_NAMES, report.iou)})
        rows.append(row)
        print(f"{name:<14} mIoU {report.mean_iou:.4f}  mF1 {report.mean_f1:.4f}  OA {report.overall_accuracy:.4f}",
              flush=True)
    cols = list(rows[0])
    csv = [",".join(cols)] + [
        ",".join(str(r[c]) if isinstance(r[c], (str, int)) else f"{r[c]:.6f}" for c in cols) for r in rows
    ]
    _write(out / "ablation.csv", "\n".join(csv) + "\n")
    _dump_json(out / "ablation.json", rows)
    text = [f"{'variant':<14} {'mIoU':>7} {'mF1':>7} {'OA':>7}"]
    text += [f"{r['variant']:<14} {r['mean_iou']:7.4f} {r['mean_f1']:7.4f} {r['overall_accuracy']:7.4f}" for r in rows]
    _write(out / "ablation.txt", "\n".join(text) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------------ main


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config overlaid on the profile")
    common.add_argument("--profile", default="desk", choices=PROFILES)
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--seed", type=int, help="overrides data.seed and train.seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 is bit-reproducible")

    p = argparse.ArgumentParser(prog="scasnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"scasnet {scasnet.__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sp = sub.add_parser("train", parents=[common], help="train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp = sub.add_parser("infer", parents=[common], help="multi-scale tiled inference on a split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split")
    sp = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    sp.add_argument("--data", required=True)
    sp.add_argument("--pred", required=True, help="output directory of an infer run")
    sp.add_argument("--split")
    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--inject-fault", action="store_true", help="corrupt a backward pass (control run)")
    sp = sub.add_parser("ablate", parents=[common], help="train and score the component ladder")
    sp.add_argument("--data", required=True)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.profile)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        root = logging.getLogger()
        for h in [h for h in root.handlers if isinstance(h, logging.FileHandler)]:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
