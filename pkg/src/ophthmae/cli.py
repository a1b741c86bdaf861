"""Command-line entry point: ``ophthmae <subcommand> [options]``."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import _accel


def _out_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_preprocess(args):
    from .data import EmptyImageError, ImageRecord, preprocess_image, quality_filter, read_manifest, \
        save_image, write_manifest

    manifest = read_manifest(args.manifest)
    out = _out_dir(args.out_dir)
    images = _out_dir(out / "images")
    kept, dropped, empty = [], 0, 0
    for i, rec in enumerate(manifest.records):
        if quality_filter(rec) == "exclude":
            dropped += 1
            continue
        try:
            image = preprocess_image(manifest.load(rec), rec.modality, args.size)
        except EmptyImageError:
            empty += 1
            continue
        name = f"{i:06d}_{Path(rec.path).stem}.png"
        save_image(image, images / name)
        kept.append(ImageRecord(f"images/{name}", rec.modality, rec.labels, rec.vessel_ratio, rec.split))
    write_manifest(manifest.replace(kept), out / "manifest.jsonl")
    print(f"kept {len(kept)}  quality-excluded {dropped}  empty {empty}")


def cmd_split(args):
    from .data import Manifest, clear_splits, read_manifest, split_counts, split_dataset, write_manifest

    manifest = read_manifest(args.manifest)
    if args.reset:
        manifest = clear_splits(manifest)
    out = split_dataset(manifest, args.seed)
    # keep paths valid relative to the output location
    target = Path(args.out)
    root = Path(manifest.root).resolve()
    out_dir = target.parent.resolve()
    if root != out_dir:
        for r in out.records:
            if not Path(r.path).is_absolute():
                r.path = str(root / r.path)
    write_manifest(Manifest(out.name, out.classes, out.records, str(out_dir)), target)
    print("train {} val {} test {}".format(*split_counts(len(out))))


def _vit_from_args(args):
    from .vit import ViTConfig

    base = ViTConfig.preset(args.preset).to_dict()
    for key in ("image_size", "patch_size"):
        if getattr(args, key, None) is not None:
            base[key] = getattr(args, key)
    return ViTConfig.from_dict(base)


def cmd_pretrain(args):
    from .checkpoint import model_checkpoint, save_checkpoint
    from .data import read_manifest
    from .mae import PretrainSchedule, pretrain

    _accel.set_num_threads(args.threads)
    manifest = read_manifest(args.manifest)
    if not len(manifest):
        raise ValueError("empty manifest")
    config = _vit_from_args(args)
    schedule = PretrainSchedule(total_epochs=args.epochs, warmup_epochs=args.warmup, peak_lr=args.lr,
                                batch_size=args.batch_size, mask_ratio=args.mask_ratio)
    out = _out_dir(args.out_dir)
    images = [manifest.load(r) for r in manifest.records]
    log_fh = open(out / "pretrain.log", "w", encoding="utf-8")

    def on_epoch(epoch, model, opt):
        ckpt = model_checkpoint("mae", model, config.to_dict(), opt, epoch=epoch, seed=args.seed,
                                mask_ratio=args.mask_ratio)
        save_checkpoint(ckpt, out / f"pretrain_epoch{epoch:03d}.omae")

    def log(line):
        log_fh.write(line + "\n")
        if not args.quiet:
            print(line)

    with log_fh:
        pretrain(images, config, schedule, args.seed, use_augment=not args.no_augment,
                 on_epoch=on_epoch, log=log)


def _run_config(args, **extra):
    from .experiment import load_run_config

    overrides = {
        "manifest": getattr(args, "manifest", None),
        "preset": getattr(args, "preset", None),
        "image_size": getattr(args, "image_size", None),
        "patch_size": getattr(args, "patch_size", None),
        "recipe": getattr(args, "recipe", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "threads": getattr(args, "threads", None),
        "encoder_checkpoint": getattr(args, "encoder_checkpoint", None),
        "head_hidden": getattr(args, "head_hidden", None),
        "linear_probe": True if getattr(args, "linear_probe", False) else None,
        "augment": False if getattr(args, "no_augment", False) else None,
        "paired": True if getattr(args, "paired", False) else None,
    }
    overrides.update(extra)
    return load_run_config(getattr(args, "config", None), overrides)


def cmd_finetune(args):
    from .data import read_manifest
    from .experiment import run_seed

    seeds = [args.seed] if args.seed is not None else None
    cfg = _run_config(args, seeds=seeds, checkpoint_dir=args.out_dir, report_dir=args.out_dir)
    cfg.check_paths()
    _accel.set_num_threads(cfg.threads)
    out = _out_dir(args.out_dir)
    lines = []
    manifest = read_manifest(cfg.manifest)
    metrics = run_seed(manifest, cfg, cfg.seeds[0], {}, log=lambda line: (lines.append(line), print(line)))
    (out / f"history_seed{cfg.seeds[0]}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best epoch {metrics['best_epoch']}  test AUROC {metrics['auroc']:.4f}  AUPR {metrics['aupr']:.4f}")


def cmd_experiment(args):
    from .experiment import run_experiment

    overrides = {}
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    for key in ("checkpoint_dir", "report_dir", "compare_report"):
        overrides[key] = getattr(args, key)
    cfg = _run_config(args, **overrides)
    report = run_experiment(cfg, log=None if args.quiet else print)
    from .metrics import format_table_row
    print(format_table_row(report["name"], report))


def cmd_predict(args):
    from .checkpoint import load_checkpoint
    from .classify import Classifier, predict
    from .data import atomic_write_text, read_manifest
    from .experiment import prediction_lines
    from .vit import ViTConfig

    _accel.set_num_threads(args.threads)
    ckpt = load_checkpoint(args.checkpoint, kind="classifier")
    config = ViTConfig.from_dict(ckpt.config)
    manifest = read_manifest(args.manifest)
    if ckpt.meta["num_classes"] != len(manifest.classes):
        raise ValueError(f"checkpoint has {ckpt.meta['num_classes']} classes, manifest {len(manifest.classes)}")
    model = Classifier(config, ckpt.meta["num_classes"], ckpt.meta["mode"], np.random.default_rng(0),
                       hidden=ckpt.meta.get("head_hidden"))
    model.load_state_dict(ckpt.params)
    records = manifest.split(args.split) if args.split != "all" else manifest.records
    if not records:
        raise ValueError(f"no records in split {args.split!r}")
    scores = predict(model, [manifest.load(r) for r in records])
    atomic_write_text(args.out, prediction_lines(manifest.classes, ckpt.meta["mode"], [r.path for r in records],
                                                 scores, [list(r.labels) for r in records]))
    print(f"wrote {len(records)} predictions to {args.out}")


def cmd_evaluate(args):
    from .experiment import evaluate_prediction_files, write_report
    from .metrics import format_table_row

    report = evaluate_prediction_files(args.predictions, paired=args.paired)
    report["name"] = args.name
    if args.report_dir:
        write_report(report, args.report_dir, name=args.name)
    print(format_table_row(args.name, report))


def cmd_compare(args):
    from .metrics import t_test_two_sided

    a, b = (json.loads(Path(p).read_text(encoding="utf-8")) for p in (args.report_a, args.report_b))
    res = t_test_two_sided(a[f"per_seed_{args.metric}"], b[f"per_seed_{args.metric}"], paired=args.paired)
    out = {"metric": args.metric, "t": res.statistic, "df": res.df, "p_value": res.p_value,
           "paired": args.paired}
    print(json.dumps(out, sort_keys=True))
    if args.out:
        from .data import atomic_write_text
        atomic_write_text(args.out, json.dumps(out, sort_keys=True, indent=2) + "\n")


def _qa_images(pairs, root, size):
    from .vqa import prepare_images, resolve_image

    for p in pairs:
        if not resolve_image(root, p.image_path).is_file():
            raise FileNotFoundError(f"missing image {p.image_path}")
    return prepare_images([str(resolve_image(root, p.image_path)) for p in pairs], size)


def cmd_vqa_train(args):
    from .checkpoint import load_checkpoint, model_checkpoint, save_checkpoint
    from .vqa import LMPretrain, VQARecipe, read_qa_manifest, train_vqa, vqa_meta

    _accel.set_num_threads(args.threads)
    pairs = read_qa_manifest(args.qa_manifest)
    if not pairs:
        raise ValueError("empty QA manifest")
    encoder_state = None
    if args.encoder_checkpoint:
        enc = load_checkpoint(args.encoder_checkpoint)
        encoder_state = enc.encoder_state()
        config = _vit_from_dict(enc.config)
    else:
        config = _vit_from_args(args)
    images = _qa_images(pairs, Path(args.qa_manifest).parent, config.image_size)
    recipe = VQARecipe(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lora_rank=args.rank,
                       lora_alpha=args.alpha, unfreeze_encoder=args.unfreeze_encoder)
    model = train_vqa(pairs, images, config, args.seed, encoder_state, recipe,
                      LMPretrain(args.lm_epochs, args.lm_lr), pooled_only=args.pooled_only, log=print)
    save_checkpoint(model_checkpoint("vqa", model, config.to_dict(), seed=args.seed, epoch=recipe.epochs,
                                     **vqa_meta(model, recipe)), args.out)
    print(f"saved {args.out}")


def _vit_from_dict(d):
    from .vit import ViTConfig
    return ViTConfig.from_dict(d)


def cmd_vqa_eval(args):
    from .checkpoint import load_checkpoint
    from .data import atomic_write_text
    from .metrics import vqa_report
    from .vqa import build_vqa_model, prediction_rows, read_qa_manifest

    _accel.set_num_threads(args.threads)
    ckpt = load_checkpoint(args.checkpoint, kind="vqa")
    config = _vit_from_dict(ckpt.config)
    model = build_vqa_model(config, ckpt.meta, ckpt.params)
    pairs = read_qa_manifest(args.qa_manifest)
    if not pairs:
        raise ValueError("empty QA manifest")
    images = _qa_images(pairs, Path(args.qa_manifest).parent, config.image_size)
    rows = prediction_rows(model, pairs, images)
    out = _out_dir(args.out_dir)
    atomic_write_text(out / "vqa_predictions.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    report = vqa_report([(r["prediction"], r["reference"]) for r in rows])
    atomic_write_text(out / "vqa_report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(json.dumps(report, sort_keys=True))


def cmd_visualize(args):
    from .checkpoint import load_checkpoint
    from .data import load_image, resize_cubic, sample_rng, save_image, to_three_channels
    from .mae import MAEModel, random_mask, reconstruct_visualize

    ckpt = load_checkpoint(args.checkpoint, kind="mae")
    config = _vit_from_dict(ckpt.config)
    model = MAEModel(config, np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    rows = []
    for i, path in enumerate(args.images):
        image = resize_cubic(to_three_channels(load_image(path)), config.image_size)
        plan = random_mask(config.num_patches, args.mask_ratio, sample_rng(args.seed, i))
        masked, recon = reconstruct_visualize(image, plan, model)
        gap = np.full((3, config.image_size, args.gap), 255, dtype=np.uint8)
        rows.append(np.concatenate([image, gap, masked, gap, recon], axis=2))
    sheet = np.concatenate(rows, axis=1)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_image(sheet, args.out)
    print(f"wrote {args.out} ({len(rows)} image(s): original | masked | reconstruction)")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_model(p):
    p.add_argument("--preset", choices=("desk", "paper"), default=None, help="backbone size preset")
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="ophthmae", description="MAE pretraining and adaptation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("preprocess", help="quality-filter, threshold-crop and resize images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="assign 55/15/30 train/val/test splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reset", action="store_true", help="discard existing split assignments first")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_model(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--mask-ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    def add_finetune_opts(p):
        p.add_argument("--config", help="INI run configuration; flags override it")
        p.add_argument("--manifest")
        p.add_argument("--encoder-checkpoint")
        _add_model(p)
        p.add_argument("--recipe", choices=("single_label", "multi_label"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--head-hidden", type=int)
        p.add_argument("--linear-probe", action="store_true")
        p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("finetune", help="fine-tune a classifier for one seed")
    add_finetune_opts(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("experiment", help="multi-seed fine-tune, test and aggregate")
    add_finetune_opts(p)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--report-dir")
    p.add_argument("--compare-report", help="report.json of a second model for the t-test")
    p.add_argument("--paired", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("predict", help="score images with a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "unassigned", "all"))
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics from one predictions file per seed")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--name", default="report")
    p.add_argument("--report-dir")
    p.add_argument("--paired", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="two-sided t-test between two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--metric", choices=("auroc", "aupr"), default="auroc")
    p.add_argument("--paired", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("vqa-train", help="LoRA visual question answering fine-tuning")
    p.add_argument("--qa-manifest", required=True)
    p.add_argument("--encoder-checkpoint")
    _add_model(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--lm-epochs", type=int, default=300, help="base language-model pretraining epochs")
    p.add_argument("--lm-lr", type=float, default=1e-2)
    p.add_argument("--pooled-only", action="store_true")
    p.add_argument("--unfreeze-encoder", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_vqa_train)

    p = sub.add_parser("vqa-eval", help="greedy answers and text metrics for a QA manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--qa-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_vqa_eval)

    p = sub.add_parser("visualize", help="original | masked | reconstruction sheet")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--mask-ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gap", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "preset", "unset") is None and args.command in ("pretrain", "vqa-train"):
        args.preset = "desk"
    try:
        args.func(args)
    except (ValueError, OSError, FloatingPointError, KeyError) as exc:
        print(f"ophthmae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
