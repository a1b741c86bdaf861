"""Evaluation metrics and multi-seed statistics."""

import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (for example a single-class label set)."""


# --------------------------------------------------------------------------
# ranking metrics
# --------------------------------------------------------------------------

def _binary_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores for {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("binary labels must be 0 or 1")
    return scores, labels.astype(bool)


def roc_auc_binary(scores, labels):
    """Mann-Whitney estimate P(s_pos > s_neg) + 0.5 P(tie) via mid-ranks."""
    scores, labels = _binary_inputs(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc_binary(scores, labels):
    """Step-wise area under the precision-recall curve (average precision).

    Tied scores enter the sweep together as one threshold.
    """
    scores, labels = _binary_inputs(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive sample")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


@dataclass
class PredictionSet:
    """Per-sample score vectors with integer or multi-hot labels."""

    scores: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.ndim != 2:
            raise ValueError("scores must be (samples, classes)")
        k = self.scores.shape[1]
        if not self.class_names:
            self.class_names = [str(i) for i in range(k)]
        if len(self.class_names) != k:
            raise ValueError(f"{len(self.class_names)} class names for {k} score columns")
        if self.labels.ndim == 1:
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
                raise ValueError("label index out of range")
        elif self.labels.shape != self.scores.shape:
            raise ValueError("multi-hot labels must match the score shape")

    def one_vs_rest(self, k):
        if self.labels.ndim == 1:
            return (self.labels == k).astype(np.int64)
        return self.labels[:, k].astype(np.int64)


@dataclass
class MacroResult:
    macro: float
    per_class: dict
    skipped: list


def macro_average(per_class_fn, preds):
    """Unweighted mean of ``per_class_fn`` over classes that are evaluable one-vs-rest."""
    per_class, skipped = {}, []
    for k, name in enumerate(preds.class_names):
        try:
            per_class[name] = per_class_fn(preds.scores[:, k], preds.one_vs_rest(k))
        except UndefinedMetricError:
            skipped.append(name)
    if skipped:
        warnings.warn(f"classes excluded from macro average (single label value): {', '.join(skipped)}",
                      stacklevel=2)
    if not per_class:
        raise UndefinedMetricError("no class has both label values; macro average undefined")
    return MacroResult(float(np.mean(list(per_class.values()))), per_class, skipped)


def macro_auroc(preds):
    return macro_average(roc_auc_binary, preds)


def macro_aupr(preds):
    # AUROC-evaluable classes only, so both macros average the same classes
    def fn(s, y):
        if y.min() == y.max():
            raise UndefinedMetricError("single label value")
        return pr_auc_binary(s, y)

    return macro_average(fn, preds)


# --------------------------------------------------------------------------
# text metrics
# --------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]", flags=re.UNICODE)


def normalize_text(text):
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def vqa_text_metrics(prediction, reference):
    pred = normalize_text(prediction)
    ref = normalize_text(reference)
    em = float(pred == ref)
    p_tok, r_tok = pred.split(), ref.split()
    if not p_tok and not r_tok:
        return {"exact_match": 1.0, "precision": 1.0, "recall": 1.0, "f1": 1.0}
    if not p_tok or not r_tok:
        return {"exact_match": em, "precision": 0.0, "recall": 0.0, "f1": 0.0}
    overlap = sum((Counter(p_tok) & Counter(r_tok)).values())
    precision = overlap / len(p_tok)
    recall = overlap / len(r_tok)
    f1 = 0.0 if overlap == 0 else 2 * precision * recall / (precision + recall)
    return {"exact_match": em, "precision": precision, "recall": recall, "f1": f1}


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(prediction, references, max_n=4):
    """Sentence BLEU-1..max_n without smoothing. Returns a list of ``max_n`` scores."""
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    if isinstance(references, str):
        references = [references]
    pred = normalize_text(prediction).split()
    refs = [normalize_text(r).split() for r in references]
    if not pred:
        return [0.0] * max_n
    log_p = []
    for n in range(1, max_n + 1):
        counts = _ngrams(pred, n)
        total = sum(counts.values())
        max_ref = Counter()
        for r in refs:
            for gram, c in _ngrams(r, n).items():
                max_ref[gram] = max(max_ref[gram], c)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        log_p.append(math.log(clipped / total) if clipped > 0 and total > 0 else -math.inf)
    # closest reference length, shorter one on ties
    ref_len = min((abs(len(r) - len(pred)), len(r)) for r in refs)[1]
    bp = min(1.0, math.exp(1.0 - ref_len / len(pred)))
    out = []
    for n in range(1, max_n + 1):
        if any(v == -math.inf for v in log_p[:n]):
            out.append(0.0)
        else:
            out.append(bp * math.exp(sum(log_p[:n]) / n))
    return out


def vqa_report(pairs):
    """Mean EM/precision/recall/F1 and BLEU-1..4 over (prediction, reference) pairs."""
    if not pairs:
        raise ValueError("no predictions to score")
    rows = [vqa_text_metrics(p, r) for p, r in pairs]
    blue = np.array([bleu(p, [r], 4) for p, r in pairs])
    out = {k: float(np.mean([row[k] for row in rows])) for k in ("exact_match", "f1", "precision", "recall")}
    for n in range(4):
        out[f"bleu{n + 1}"] = float(blue[:, n].mean())
    return out


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

def aggregate_runs(values):
    """Mean and 1.96 * standard-error half width (sample sd, n - 1 denominator)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no values to aggregate")
    mean = float(x.mean())
    if x.size < 2:
        return {"mean": mean, "se": 0.0, "ci_half_width": 0.0, "n": 1}
    se = float(x.std(ddof=1) / math.sqrt(x.size))
    return {"mean": mean, "se": se, "ci_half_width": 1.96 * se, "n": int(x.size)}


def _betacf(a, b, x, max_iter=300, tol=3e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a, b, x):
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return float(min(1.0, max(0.0, betainc_regularized(df / 2.0, 0.5, df / (df + t * t)))))


@dataclass
class TTestResult:
    statistic: float
    df: float
    p_value: float


def t_test_two_sided(sample_a, sample_b, paired=False):
    """Welch two-sample t-test (or the paired test when ``paired``).

    Zero variance: p = 1 when the means agree, p = 0 when they differ.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if paired:
        if a.shape != b.shape:
            raise ValueError("paired t-test needs samples of equal length")
        d = a - b
        if d.size < 2:
            raise ValueError("need at least two pairs")
        sd = d.std(ddof=1)
        if sd == 0:
            return TTestResult(0.0 if d.mean() == 0 else math.copysign(math.inf, d.mean()),
                               float(d.size - 1), 1.0 if d.mean() == 0 else 0.0)
        t = d.mean() / (sd / math.sqrt(d.size))
        df = float(d.size - 1)
        return TTestResult(float(t), df, t_two_sided_p(t, df))
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0:
        if diff == 0:
            return TTestResult(0.0, float(a.size + b.size - 2), 1.0)
        return TTestResult(math.copysign(math.inf, diff), float(a.size + b.size - 2), 0.0)
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return TTestResult(float(t), float(df), t_two_sided_p(t, df))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def classification_metrics(preds):
    auroc = macro_auroc(preds)
    aupr = macro_aupr(preds)
    return {
        "auroc": auroc.macro,
        "aupr": aupr.macro,
        "per_class_auroc": auroc.per_class,
        "per_class_aupr": aupr.per_class,
        "skipped": auroc.skipped,
    }


def eval_report(per_seed, comparison=None, paired=False):
    """Aggregate per-seed classification metrics into a report dict.

    ``per_seed`` is a list of ``classification_metrics`` outputs; ``comparison``
    optionally holds another model's per-seed AUROC list.
    """
    aurocs = [m["auroc"] for m in per_seed]
    auprs = [m["aupr"] for m in per_seed]
    classes = sorted({c for m in per_seed for c in m["per_class_auroc"]})
    report = {
        "seeds": len(per_seed),
        "per_seed_auroc": aurocs,
        "per_seed_aupr": auprs,
        "auroc": aggregate_runs(aurocs),
        "aupr": aggregate_runs(auprs),
        "per_class_auroc": {c: aggregate_runs([m["per_class_auroc"][c] for m in per_seed
                                               if c in m["per_class_auroc"]])["mean"] for c in classes},
        "per_class_aupr": {c: aggregate_runs([m["per_class_aupr"][c] for m in per_seed
                                              if c in m["per_class_aupr"]])["mean"] for c in classes},
        "skipped": sorted({c for m in per_seed for c in m["skipped"]}),
        "p_value": None,
    }
    if comparison is not None:
        report["comparison_auroc"] = list(comparison)
        report["p_value"] = t_test_two_sided(aurocs, comparison, paired=paired).p_value
    return report


def format_table_row(name, report):
    """``name  AUROC [lo, hi]  AUPR [lo, hi]  P value`` with three decimals."""
    def ci(stats):
        m, h = stats["mean"], stats["ci_half_width"]
        return f"{m:.3f} [{m - h:.3f}, {m + h:.3f}]"

    p = report.get("p_value")
    p_txt = "-" if p is None else f"{p:.3f}"
    return f"{name}\tAUROC {ci(report['auroc'])}\tAUPR {ci(report['aupr'])}\tP {p_txt}"
