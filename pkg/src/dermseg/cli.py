"""Command-line entry point: ``dermseg synth|segment|train|eval``.

Exit codes: 0 success, 2 input/output or configuration problems, 3 a
U-Net method was requested without a usable model, 4 training diverged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import dataio, fuzzyclust, posteval, unet
from .tensorcore import load_params

log = logging.getLogger("dermseg")

METHOD_ALGO = {"cluster": "2", "unet-a": "1A", "unet-b": "1B"}


class MissingModel(RuntimeError):
    pass


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, args, cfg, artifacts, extra=None):
    lines = [f"command={command}"]
    lines += [f"arg.{k}={v}" for k, v in sorted(vars(args).items()) if k not in ("func", "set")]
    lines += config_mod.format_config(cfg)
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    for name in sorted(artifacts):
        lines.append(f"artifact.{name}={sha256(artifacts[name])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    return config_mod.parse_lines(Path(path).read_text(encoding="utf-8"), str(path))


def sample_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# --------------------------------------------------------------------------
# synth


def cmd_synth(args, cfg):
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    artifacts, extra = {}, {}
    for i in range(args.count):
        sid = f"synth_{i:04d}"
        spec = dataio.random_spec(sample_seed(args.seed, i), width=args.width, height=args.height,
                                  hair_count=args.hairs, vignette=args.vignette)
        if args.vignette:
            # keep the lesion inside the field of view
            spec = replace(spec, center=None)
        img, mask = dataio.synth_lesion(spec)
        ip, mp = out / "images" / f"{sid}.png", out / "masks" / f"{sid}_segmentation.png"
        dataio.save_image(img, ip)
        dataio.save_mask(mask, mp)
        artifacts[f"{sid}.image"], artifacts[f"{sid}.mask"] = ip, mp
        extra[f"sample.{sid}"] = json.dumps(asdict(spec), sort_keys=True)
    write_manifest(out / "manifest.txt", "synth", args, cfg, artifacts, extra)
    return 0


# --------------------------------------------------------------------------
# models


def model_from_manifest(manifest) -> unet.UNet:
    fields = {k[5:]: v for k, v in manifest.items() if k.startswith("unet.")}
    kw = {}
    for name, typ in (("depth", int), ("base_features", int), ("kernel", int), ("classes", int),
                      ("dropout_p", float), ("in_channels", int), ("content_size", int),
                      ("seed", int)):
        if name in fields:
            kw[name] = typ(fields[name])
    return unet.build_model(unet.UNetConfig(**kw))


def load_model(path):
    if path is None:
        raise MissingModel("U-Net methods need --model")
    path = Path(path)
    side = Path(str(path) + ".manifest")
    if not path.is_file() or not side.is_file():
        raise MissingModel(f"model checkpoint {path} (or its .manifest) not found")
    manifest = read_manifest(side)
    model = model_from_manifest(manifest)
    model.load_arrays(load_params(path))
    return model, manifest


def unet_mask(model, img, algorithm, threshold, fwhm):
    mode = "1A" if algorithm == "1A" else "1B"
    prob = unet.predict_prob(model, img, mode, fwhm=fwhm)
    return posteval.binarize_and_clean(prob, threshold, algorithm)


def new_model(cfg, mode, seed):
    return unet.build_model(unet.UNetConfig(
        depth=cfg["unet.depth"], base_features=cfg["unet.base_features"],
        dropout_p=cfg["unet.dropout_p"], in_channels=3 if mode == "1A" else 5,
        content_size=cfg["color.target"], seed=seed))


def train_config(cfg, iterations, seed):
    return unet.TrainConfig(iterations=iterations, lr=cfg["train.lr"], augment=cfg["train.augment"],
                            checkpoint_every=cfg["train.checkpoint_every"], seed=seed)


def load_pairs(samples):
    return [(dataio.load_image(s.image_path), dataio.load_mask(s.mask_path)) for s in samples]


# --------------------------------------------------------------------------
# segment


def _cluster_one(job):
    path, ccfg = job
    return fuzzyclust.cluster_segment(dataio.load_image(path), ccfg)


def _map(fn, jobs, n_jobs):
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_segment(args, cfg):
    algo = METHOD_ALGO[args.method]
    model = manifest = None
    if algo != "2":
        model, manifest = load_model(args.model)
    src = Path(args.input)
    if src.is_dir():
        items = [(s.id, s.image_path) for s in dataio.scan_catalog(src)]
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        targets = [out_dir / f"{i}_segmentation.png" for i, _ in items]
        manifest_path = out_dir / "manifest.txt"
    elif src.is_file():
        items = [(src.stem, src)]
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        targets = [Path(args.out)]
        manifest_path = Path(str(args.out) + ".manifest")
    else:
        raise FileNotFoundError(f"input {src} does not exist")

    if algo == "2":
        ccfg = config_mod.cluster_config(cfg, seed=args.seed)
        masks = _map(_cluster_one, [(p, ccfg) for _, p in items], args.jobs)
    else:
        threshold = args.threshold
        if threshold is None:
            threshold = float(manifest.get("threshold", 0.5))
        masks = [unet_mask(model, dataio.load_image(p), algo, threshold, cfg["color.fwhm"])
                 for _, p in items]
    artifacts = {}
    for (sid, _), target, mask in zip(items, targets, masks):
        dataio.save_mask(mask, target)
        artifacts[sid] = target
    write_manifest(manifest_path, "segment", args, cfg, artifacts)
    return 0


# --------------------------------------------------------------------------
# train


def write_loss_csv(path, losses):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(losses, 1):
            fh.write(f"{i},{v!r}\n")


def cmd_train(args, cfg):
    mode = args.mode.upper()
    cat = dataio.scan_catalog(args.data).with_masks()
    if len(cat) == 0:
        raise FileNotFoundError(f"no image/mask pairs under {args.data}")
    model = new_model(cfg, mode, args.seed)
    tc = train_config(cfg, args.iterations, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res = unet.train(model, load_pairs(cat), mode, tc, checkpoint_path=out, fwhm=cfg["color.fwhm"])
    loss_csv = Path(str(out) + ".loss.csv")
    write_loss_csv(loss_csv, res.losses)
    extra = {"mode": mode, "seed": args.seed, "samples": len(cat),
             "artifact.loss_csv": sha256(loss_csv)}
    extra.update(dict(line.split("=", 1) for line in config_mod.format_config(cfg)))
    unet.write_checkpoint(out, model, args.iterations, res.losses[-1], extra)
    return 0


# --------------------------------------------------------------------------
# eval


def fold_unet(cfg, algo, train_pairs, val_imgs, seed, iterations, threshold_mode, val_truths):
    """Train one U-Net for a fold and return (masks, threshold)."""
    mode = "1A" if algo == "1A" else "1B"
    fwhm = cfg["color.fwhm"]
    holdout = []
    fit_pairs = list(train_pairs)
    if algo == "1B" and threshold_mode == "train-holdout" and len(fit_pairs) > 1:
        n_hold = max(1, int(round(cfg["eval.holdout_frac"] * len(fit_pairs))))
        n_hold = min(n_hold, len(fit_pairs) - 1)
        perm = np.random.default_rng(seed).permutation(len(fit_pairs))
        hold_idx = set(int(i) for i in perm[:n_hold])
        holdout = [p for i, p in enumerate(fit_pairs) if i in hold_idx]
        fit_pairs = [p for i, p in enumerate(fit_pairs) if i not in hold_idx]
    model = new_model(cfg, mode, seed)
    unet.train(model, fit_pairs, mode, train_config(cfg, iterations, seed), fwhm=fwhm)
    probs = [unet.predict_prob(model, img, mode, fwhm=fwhm) for img in val_imgs]
    tau = 0.5
    if algo == "1B":
        if threshold_mode == "test":
            tau = posteval.optimize_threshold(probs, val_truths)
        elif holdout:
            hp = [unet.predict_prob(model, img, mode, fwhm=fwhm) for img, _ in holdout]
            tau = posteval.optimize_threshold(hp, [m for _, m in holdout])
    return [posteval.binarize_and_clean(p, tau, algo) for p in probs], tau


def cmd_eval(args, cfg):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHOD_ALGO:
            raise config_mod.ConfigError(f"unknown method {m!r}")
    cat = dataio.scan_catalog(args.data).with_masks()
    ids = cat.ids
    plan = dataio.make_folds(len(cat), args.folds, cfg["eval.train_frac"], args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.txt").write_text(dataio.format_fold_plan(plan, ids), encoding="utf-8")

    images = [dataio.load_image(s.image_path) for s in cat]
    truths = [dataio.load_mask(s.mask_path) for s in cat]
    cluster_cache = {}
    rows, extra = [], {}
    mode = cfg["eval.threshold_mode"]
    for f, (train_idx, val_idx) in enumerate(plan.folds, 1):
        truth_map = {ids[i]: truths[i] for i in val_idx}
        for method in methods:
            algo = METHOD_ALGO[method]
            if algo == "2":
                todo = [i for i in val_idx if i not in cluster_cache]
                ccfg = config_mod.cluster_config(cfg, seed=args.seed)
                for i, m in zip(todo, _map(_cluster_one, [(cat.samples[i].image_path, ccfg) for i in todo],
                                           args.jobs)):
                    cluster_cache[i] = m
                preds = {ids[i]: cluster_cache[i] for i in val_idx}
            else:
                masks, tau = fold_unet(cfg, algo, [(images[i], truths[i]) for i in train_idx],
                                       [images[i] for i in val_idx], args.seed + f, args.iterations,
                                       mode, [truths[i] for i in val_idx])
                preds = {ids[i]: m for i, m in zip(val_idx, masks)}
                extra[f"fold{f}.{algo}.threshold"] = tau
            rows.append(posteval.evaluate_fold(f, algo, preds, truth_map, [ids[i] for i in val_idx]))
            log.info("fold %d %s J=%.4f D=%.4f", f, algo, rows[-1].jaccard, rows[-1].dice)

    report = posteval.emit_report(rows, threshold_mode=mode)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    arts = {n: out / n for n in ("folds.txt", "report.csv", "report.txt")}
    write_manifest(out / "manifest.txt", "eval", args, cfg, arts, extra)
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dermseg", description="Skin lesion segmentation toolkit")
    p.add_argument("--config", help=f"key=value config file (default: ${config_mod.ENV_VAR})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-image work")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic lesion images and masks")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hairs", type=int, default=0)
    s.add_argument("--vignette", action="store_true")
    s.add_argument("--width", type=int, default=200)
    s.add_argument("--height", type=int, default=160)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("segment", help="segment one image or a directory of images")
    s.add_argument("--method", choices=sorted(METHOD_ALGO), required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model")
    s.add_argument("--threshold", type=float, help="unet-b threshold (default: from checkpoint or 0.5)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("train", help="train a U-Net checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["1a", "1b", "1A", "1B"], required=True)
    s.add_argument("--iterations", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="fold evaluation and summary report")
    s.add_argument("--data", required=True)
    s.add_argument("--methods", default="cluster")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iterations", type=int, default=10000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.resolve(args.config, args.set)
        return args.func(args, cfg)
    except MissingModel as exc:
        log.error("%s", exc)
        return 3
    except unet.TrainingDiverged as exc:
        log.error("%s (checkpoint: %s)", exc, exc.checkpoint)
        return 4
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
