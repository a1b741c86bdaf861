"""Fine-tuning the encoder for single-label and multi-label classification."""

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import augment, eval_transform, sample_rng
from .metrics import PredictionSet, UndefinedMetricError, macro_aupr, macro_auroc
from .nn import AdamW, Linear, Module, bce_loss, soft_cross_entropy, warmup_cosine
from .vit import ViTEncoder

SINGLE = "single_label"
MULTI = "multi_label"


@dataclass
class FinetuneRecipe:
    mode: str = SINGLE
    batch_size: int = 16
    epochs: int = 50
    warmup_epochs: int = 10
    peak_lr: float = 5e-4
    min_lr: float = 1e-6
    constant_lr: bool = False
    smoothing: float = 0.1
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        if self.mode not in (SINGLE, MULTI):
            raise ValueError(f"unknown fine-tuning mode {self.mode!r}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    @classmethod
    def single_label(cls, **overrides):
        return cls(**{**dict(mode=SINGLE, batch_size=16, epochs=50, warmup_epochs=10, peak_lr=5e-4,
                             min_lr=1e-6), **overrides})

    @classmethod
    def multi_label(cls, **overrides):
        return cls(**{**dict(mode=MULTI, batch_size=4, epochs=30, warmup_epochs=0, peak_lr=0.01,
                             min_lr=0.01, constant_lr=True), **overrides})

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(epoch, recipe):
    """Learning rate at a (fractional) epoch under ``recipe``."""
    if recipe.constant_lr:
        return recipe.peak_lr
    return warmup_cosine(epoch, recipe.warmup_epochs, recipe.epochs, recipe.peak_lr, recipe.min_lr)


def label_smooth(one_hot, eps):
    """(1 - eps) * one_hot + eps / K."""
    one_hot = np.asarray(one_hot, dtype=np.float64)
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    hot = np.count_nonzero(one_hot, axis=-1)
    if np.any(hot != 1) or not np.isin(one_hot, (0.0, 1.0)).all():
        raise ValueError("label smoothing expects exactly one hot entry per row")
    k = one_hot.shape[-1]
    return (1.0 - eps) * one_hot + eps / k


def one_hot(labels, k):
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def multi_hot(label_lists, k):
    out = np.zeros((len(label_lists), k))
    for i, labs in enumerate(label_lists):
        out[i, list(labs)] = 1.0
    return out


class ClassifierHead(Module):
    def __init__(self, dim, num_classes, rng, hidden=None):
        self.hidden = Linear(dim, hidden, rng) if hidden else None
        self.out = Linear(hidden or dim, num_classes, rng)

    def forward(self, x):
        if self.hidden is not None:
            x = T.gelu(self.hidden(x))
        return self.out(x)


class Classifier(Module):
    def __init__(self, config, num_classes, mode, rng, hidden=None):
        if mode == SINGLE and num_classes < 2:
            raise ValueError("single-label classification needs at least two classes")
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.config = config
        self.mode = mode
        self.num_classes = num_classes
        self.encoder = ViTEncoder(config, rng)
        self.head = ClassifierHead(config.enc_dim, num_classes, rng, hidden)

    def forward(self, images):
        pooled, _ = self.encoder(images)
        return self.head(pooled)

    def loss(self, images, targets):
        logits = self(images)
        if self.mode == SINGLE:
            return soft_cross_entropy(logits, targets)
        return bce_loss(logits, targets)


@dataclass
class LabeledImages:
    images: list
    labels: list   # int per image (single-label) or list of ints (multi-label)

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_manifest(cls, manifest, split):
        recs = manifest.split(split)
        return cls([manifest.load(r) for r in recs], [list(r.labels) for r in recs])


def _targets(labels, k, mode):
    if mode == SINGLE:
        return one_hot([lab[0] if isinstance(lab, (list, tuple)) else lab for lab in labels], k)
    return multi_hot(labels, k)


def predict(model, images, batch_size=32, transformed=False):
    """Per-class probabilities (softmax) or scores (sigmoid), one row per image."""
    size = model.config.image_size
    xs = images if transformed else [eval_transform(im, size) for im in images]
    rows = []
    with T.no_grad():
        for i in range(0, len(xs), batch_size):
            batch = np.stack(xs[i:i + batch_size]).astype(model.encoder.cls_token.dtype)
            logits = model(batch)
            if model.mode == SINGLE:
                rows.append(T.softmax(logits, axis=-1).data)
            else:
                rows.append(T.sigmoid(logits).data)
    return np.concatenate(rows, axis=0).astype(np.float64)


def evaluate_scores(scores, labels, k, mode, class_names=None):
    lab = np.asarray([l[0] if isinstance(l, (list, tuple)) else l for l in labels]) if mode == SINGLE \
        else multi_hot(labels, k)
    preds = PredictionSet(scores, lab, class_names or [])
    return macro_auroc(preds), macro_aupr(preds)


def select_best_epoch(series):
    """1-based epoch with the largest value; earliest wins ties."""
    best, best_i = -math.inf, None
    for i, v in enumerate(series):
        if v > best:
            best, best_i = v, i
    if best_i is None:
        raise ValueError("empty or all-NaN metric series")
    return best_i + 1


@dataclass
class FinetuneResult:
    model: Classifier
    best_epoch: int
    best_state: dict
    history: list

    @property
    def best_val_auroc(self):
        return self.history[self.best_epoch - 1]["val_auroc"]


def finetune(train, val, config, num_classes, recipe, seed, encoder_state=None, linear_probe=False,
             head_hidden=None, use_augment=True, log=None, class_names=None):
    """Train encoder + head; keep the epoch with the best validation macro AUROC."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fine-tuning needs non-empty train and val sets")
    k, mode = num_classes, recipe.mode
    _warn_missing(train.labels, k, mode, "train")
    _require_evaluable(val.labels, k, mode)
    model = Classifier(config, k, mode, np.random.default_rng(seed), hidden=head_hidden)
    if encoder_state is not None:
        model.encoder.load_state_dict(encoder_state, prefix="encoder.")
    if linear_probe:
        model.encoder.requires_grad_(False)
    opt = AdamW(model.trainable(), betas=recipe.betas, weight_decay=recipe.weight_decay)
    targets = _targets(train.labels, k, mode)
    if mode == SINGLE:
        targets = label_smooth(targets, recipe.smoothing)
    val_x = [eval_transform(im, config.image_size) for im in val.images]

    n, bs = len(train), recipe.batch_size
    steps = math.ceil(n / bs)
    history, best_state, best_auroc, best_epoch = [], None, -math.inf, None
    dtype = model.encoder.cls_token.dtype
    for epoch in range(recipe.epochs):
        order = sample_rng(seed, epoch).permutation(n)
        running = 0.0
        for step in range(steps):
            idx = order[step * bs:(step + 1) * bs]
            if use_augment:
                xs = [augment(train.images[i], sample_rng(seed, epoch, i, 0), out_size=config.image_size)
                      for i in idx]
            else:
                xs = [eval_transform(train.images[i], config.image_size) for i in idx]
            lr = lr_at(epoch + step / steps, recipe)
            opt.zero_grad()
            loss = model.loss(np.stack(xs).astype(dtype), targets[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1} step {step}")
            loss.backward()
            opt.step(lr)
            running += value * len(idx)
        scores = predict(model, val_x, transformed=True)
        with warnings.catch_warnings():
            if epoch:
                warnings.simplefilter("ignore")
            auroc, aupr = evaluate_scores(scores, val.labels, k, mode, class_names)
        row = {"epoch": epoch + 1, "train_loss": running / n, "val_auroc": auroc.macro,
               "val_aupr": aupr.macro, "lr": lr_at(epoch + 1, recipe)}
        history.append(row)
        if log is not None:
            log(json.dumps(row, sort_keys=True))
        if auroc.macro > best_auroc:
            best_auroc, best_epoch = auroc.macro, epoch + 1
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return FinetuneResult(model, best_epoch, best_state, history)


def _warn_missing(labels, k, mode, split):
    present = set()
    for lab in labels:
        present.update(lab if isinstance(lab, (list, tuple)) else [lab])
    missing = sorted(set(range(k)) - present)
    if missing:
        warnings.warn(f"classes absent from {split} split: {missing}", stacklevel=3)


def _require_evaluable(labels, k, mode):
    # model selection needs at least one class with both label values in val
    y = _targets(labels, k, mode)
    if not np.any((y.min(axis=0) == 0) & (y.max(axis=0) == 1)):
        raise UndefinedMetricError("validation split has no class with both label values; "
                                   "AUROC-based model selection is undefined")


def finetune_single_label(train, val, config, num_classes, seed, recipe=None, **kwargs):
    recipe = recipe or FinetuneRecipe.single_label()
    if recipe.mode != SINGLE:
        raise ValueError("recipe is not single-label")
    return finetune(train, val, config, num_classes, recipe, seed, **kwargs)


def finetune_multi_label(train, val, config, num_classes, seed, recipe=None, **kwargs):
    recipe = recipe or FinetuneRecipe.multi_label()
    if recipe.mode != MULTI:
        raise ValueError("recipe is not multi-label")
    return finetune(train, val, config, num_classes, recipe, seed, **kwargs)
