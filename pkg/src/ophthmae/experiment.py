"""Run configuration and the multi-seed fine-tune / evaluate flow."""

import configparser
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _accel
from .checkpoint import load_checkpoint, model_checkpoint, save_checkpoint
from .classify import MULTI, SINGLE, FinetuneRecipe, LabeledImages, finetune, multi_hot, predict
from .data import atomic_write_text, clear_splits, read_manifest, split_dataset
from .metrics import PredictionSet, classification_metrics, eval_report, format_table_row
from .vit import ViTConfig

# INI layout: section -> {key: (RunConfig field, parser)}
_KEYS = {
    "model": {
        "preset": ("preset", str),
        "image_size": ("image_size", int),
        "patch_size": ("patch_size", int),
        "head_hidden": ("head_hidden", int),
    },
    "run": {
        "recipe": ("recipe", str),
        "seeds": ("seeds", lambda s: [int(v) for v in s.replace(",", " ").split()]),
        "threads": ("threads", int),
        "epochs": ("epochs", int),
        "batch_size": ("batch_size", int),
        "linear_probe": ("linear_probe", lambda s: _parse_bool(s)),
        "augment": ("augment", lambda s: _parse_bool(s)),
        "paired": ("paired", lambda s: _parse_bool(s)),
    },
    "paths": {
        "manifest": ("manifest", str),
        "encoder_checkpoint": ("encoder_checkpoint", str),
        "checkpoint_dir": ("checkpoint_dir", str),
        "report_dir": ("report_dir", str),
        "compare_report": ("compare_report", str),
    },
}


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    manifest: str = None
    preset: str = "desk"
    image_size: int = None
    patch_size: int = None
    head_hidden: int = None
    recipe: str = SINGLE
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    threads: int = 1
    epochs: int = None
    batch_size: int = None
    linear_probe: bool = False
    augment: bool = True
    paired: bool = False
    encoder_checkpoint: str = None
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    compare_report: str = None

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct: {self.seeds}")
        if self.recipe not in (SINGLE, MULTI):
            raise ValueError(f"unknown recipe {self.recipe!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def vit_config(self):
        base = ViTConfig.preset(self.preset).to_dict()
        for key in ("image_size", "patch_size"):
            if getattr(self, key) is not None:
                base[key] = getattr(self, key)
        return ViTConfig.from_dict(base)

    def finetune_recipe(self):
        make = FinetuneRecipe.single_label if self.recipe == SINGLE else FinetuneRecipe.multi_label
        overrides = {}
        if self.epochs is not None:
            overrides["epochs"] = self.epochs
            if self.recipe == SINGLE:
                # keep the warmup share of the schedule when shortening it
                overrides["warmup_epochs"] = min(10, self.epochs * 10 // 50)
        if self.batch_size is not None:
            overrides["batch_size"] = self.batch_size
        return make(**overrides)

    def check_paths(self):
        if self.manifest is None:
            raise ValueError("no manifest configured")
        for key in ("manifest", "encoder_checkpoint", "compare_report"):
            value = getattr(self, key)
            if value is not None and not Path(value).is_file():
                raise FileNotFoundError(f"{key}: {value} does not exist")

    def to_dict(self):
        return asdict(self)


def load_run_config(path=None, overrides=None):
    """RunConfig from an INI file, then non-None ``overrides`` (CLI flags) on top."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in _KEYS:
                raise ValueError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _KEYS[section]:
                    raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
                name, conv = _KEYS[section][key]
                values[name] = conv(raw)
    known = {f.name for f in fields(RunConfig)}
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = value
    return RunConfig(**values)


# --------------------------------------------------------------------------
# prediction files
# --------------------------------------------------------------------------

def prediction_lines(classes, mode, paths, scores, labels):
    head = {"classes": list(classes), "mode": mode}
    rows = [json.dumps(head, sort_keys=True)]
    for p, s, lab in zip(paths, np.asarray(scores, dtype=np.float64), labels):
        rows.append(json.dumps({"path": p, "scores": [float(v) for v in s], "labels": list(lab)}, sort_keys=True))
    return "\n".join(rows) + "\n"


def read_predictions(path):
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or "classes" not in rows[0]:
        raise ValueError(f"{path}: missing predictions header")
    head, body = rows[0], rows[1:]
    if not body:
        raise ValueError(f"{path}: no prediction rows")
    return head["classes"], head["mode"], np.array([r["scores"] for r in body]), [r["labels"] for r in body]


def metrics_from_predictions(classes, mode, scores, labels):
    k = len(classes)
    lab = np.array([l[0] for l in labels]) if mode == SINGLE else multi_hot(labels, k)
    return classification_metrics(PredictionSet(scores, lab, list(classes)))


def evaluate_prediction_files(paths, comparison=None, paired=False):
    per_seed = [metrics_from_predictions(*read_predictions(p)) for p in paths]
    return eval_report(per_seed, comparison, paired)


def write_report(report, report_dir, name="report"):
    report_dir = Path(report_dir)
    atomic_write_text(report_dir / f"{name}.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    atomic_write_text(report_dir / f"{name}.txt", format_table_row(report.get("name", name), report) + "\n")


# --------------------------------------------------------------------------
# experiment
# --------------------------------------------------------------------------

def _load_images(manifest, records, cache):
    out = []
    for r in records:
        if r.path not in cache:
            cache[r.path] = manifest.load(r)
        out.append(cache[r.path])
    return out


def run_seed(manifest, cfg, seed, cache, log=None):
    """Split (unless the manifest carries splits), fine-tune, predict test; returns metrics."""
    vit = cfg.vit_config()
    recipe = cfg.finetune_recipe()
    preassigned = all(r.split != "unassigned" for r in manifest.records)
    m = manifest if preassigned else split_dataset(clear_splits(manifest), seed)
    parts = {}
    for name in ("train", "val", "test"):
        recs = m.split(name)
        parts[name] = LabeledImages(_load_images(m, recs, cache), [list(r.labels) for r in recs])
    encoder_state = None
    if cfg.encoder_checkpoint:
        encoder_state = load_checkpoint(cfg.encoder_checkpoint).encoder_state()
    result = finetune(parts["train"], parts["val"], vit, len(m.classes), recipe, seed,
                      encoder_state=encoder_state, linear_probe=cfg.linear_probe,
                      head_hidden=cfg.head_hidden, use_augment=cfg.augment, log=log,
                      class_names=list(m.classes))
    ckpt = model_checkpoint("classifier", result.model, vit.to_dict(), seed=seed, epoch=result.best_epoch,
                            num_classes=len(m.classes), mode=recipe.mode, head_hidden=cfg.head_hidden,
                            classes=list(m.classes))
    save_checkpoint(ckpt, Path(cfg.checkpoint_dir) / f"finetune_seed{seed}.omae")
    scores = predict(result.model, parts["test"].images)
    test_paths = [r.path for r in m.split("test")]
    atomic_write_text(Path(cfg.report_dir) / f"predictions_seed{seed}.jsonl",
                      prediction_lines(m.classes, recipe.mode, test_paths, scores, parts["test"].labels))
    metrics = metrics_from_predictions(m.classes, recipe.mode, scores, parts["test"].labels)
    metrics["seed"] = seed
    metrics["best_epoch"] = result.best_epoch
    metrics["history"] = result.history
    return metrics


def run_experiment(cfg, log=None):
    """Fine-tune and test once per seed, aggregate, optionally t-test against another report."""
    cfg.check_paths()
    _accel.set_num_threads(cfg.threads)
    manifest = read_manifest(cfg.manifest)
    comparison = None
    if cfg.compare_report:
        comparison = json.loads(Path(cfg.compare_report).read_text(encoding="utf-8"))["per_seed_auroc"]
    cache, per_seed = {}, []
    for seed in cfg.seeds:
        try:
            per_seed.append(run_seed(manifest, cfg, seed, cache, log))
        except Exception as exc:
            partial = {"failed_seed": seed, "error": f"{type(exc).__name__}: {exc}", "completed": per_seed}
            atomic_write_text(Path(cfg.report_dir) / "partial_report.json",
                              json.dumps(_jsonable(partial), sort_keys=True, indent=2) + "\n")
            raise
    report = eval_report(per_seed, comparison, cfg.paired)
    report["name"] = manifest.name
    report["recipe"] = cfg.finetune_recipe().to_dict()
    report["backbone"] = cfg.vit_config().to_dict()
    report["seed_list"] = list(cfg.seeds)
    report["best_epochs"] = [m["best_epoch"] for m in per_seed]
    report = _jsonable(report)
    write_report(report, cfg.report_dir)
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj
