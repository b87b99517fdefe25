"""Ensemble labeling of newcomer/reply pairs and its evaluation.

Every pair is sent to the generator ``k`` times; the share of completions
naming a class is that class's confidence. Ties between classes are broken
by the fixed order Counterspeech < HateSpeech < Other, both for ensemble
votes and for annotator majority votes.
"""
from __future__ import annotations

import enum
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class LabelClass(str, enum.Enum):
    COUNTERSPEECH = "Counterspeech"
    HATE_SPEECH = "HateSpeech"
    OTHER = "Other"


CLASS_ORDER = (LabelClass.COUNTERSPEECH, LabelClass.HATE_SPEECH, LabelClass.OTHER)
_SYNONYMS = {
    "counterspeech": LabelClass.COUNTERSPEECH,
    "counter speech": LabelClass.COUNTERSPEECH,
    "counter-speech": LabelClass.COUNTERSPEECH,
    "hate speech": LabelClass.HATE_SPEECH,
    "hatespeech": LabelClass.HATE_SPEECH,
    "hate-speech": LabelClass.HATE_SPEECH,
    "hate": LabelClass.HATE_SPEECH,
    "other": LabelClass.OTHER,
    "other speech": LabelClass.OTHER,
    "neutral": LabelClass.OTHER,
}
_ANSWER_RE = re.compile(
    r"\(\s*newcomer\s*:\s*([a-z \-]+?)\s*,\s*reply\s*:\s*([a-z \-]+?)\s*\)",
    re.IGNORECASE)


class LabelParseError(ValueError):
    pass


class InfeasibleThresholdError(ValueError):
    pass


class BootstrapInstabilityError(RuntimeError):
    pass


def as_label(value):
    if isinstance(value, LabelClass):
        return value
    key = str(value).strip().lower()
    for c in CLASS_ORDER:
        if key == c.value.lower():
            return c
    if key in _SYNONYMS:
        return _SYNONYMS[key]
    raise ValueError(f"unknown label {value!r}")


def parse_model_reply(text):
    """Parse ``(newcomer: X, reply: Y)``; case and whitespace insensitive."""
    m = _ANSWER_RE.search(text or "")
    if m is None:
        raise LabelParseError(f"no parseable answer in {text!r}")
    out = []
    for raw in m.groups():
        key = " ".join(raw.lower().split())
        if key not in _SYNONYMS:
            raise LabelParseError(f"unknown label {raw!r}")
        out.append(_SYNONYMS[key])
    return tuple(out)


@dataclass(frozen=True)
class ConfidenceRecord:
    item_id: str
    votes: dict          # LabelClass -> count

    @property
    def k(self):
        return sum(self.votes.values())

    @property
    def confidence(self):
        k = self.k
        return {c: self.votes.get(c, 0) / k for c in CLASS_ORDER}

    def conf(self, cls):
        cls = as_label(cls)
        return self.votes.get(cls, 0) / self.k

    @property
    def argmax_label(self):
        return max(CLASS_ORDER, key=lambda c: (self.votes.get(c, 0), -CLASS_ORDER.index(c)))

    def to_dict(self, role=None):
        d = {"item_id": self.item_id,
             "votes": {c.value: self.votes.get(c, 0) for c in CLASS_ORDER},
             "confidence": {c.value: self.conf(c) for c in CLASS_ORDER}}
        if role is not None:
            d["role"] = role
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["item_id"], {as_label(k): int(v) for k, v in d["votes"].items()})


@dataclass(frozen=True)
class LabelPair:
    """Texts for one prompt. ``reply`` may be empty when there was no reply."""
    newcomer_id: str
    context: str
    newcomer: str
    reply_id: str | None = None
    reply: str = ""


def load_prompt_template(path=None):
    if path is None:
        return resources.files("cspipe").joinpath("data/prompt_template.txt").read_text("utf-8")
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _one_line(text):
    return " ".join((text or "").split())


def render_prompt(template, pair, examples=""):
    """Fill the template slots. ``{examples}`` takes user-supplied few-shot text."""
    for slot in ("{context}", "{newcomer}", "{reply}"):
        if slot not in template:
            raise ValueError(f"prompt template lacks the {slot} slot")
    return (template.replace("{examples}", examples)
            .replace("{context}", _one_line(pair.context))
            .replace("{newcomer}", _one_line(pair.newcomer))
            .replace("{reply}", _one_line(pair.reply) or "(no reply)"))


def ensemble_label(pair, scorers, k=5, temperature=1.2, template=None, resample_budget=3):
    """Label both roles of a pair by ``k`` sampled completions.

    Completion ``s`` is requested with seed ``s`` (1-based). Unparseable
    completions are re-sampled with fresh seeds up to ``resample_budget``
    times each, then counted as Other with a warning. Returns
    ``(newcomer_record, reply_record_or_None)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if template is None:
        template = load_prompt_template()
    prompt = render_prompt(template, pair)
    votes_n = {c: 0 for c in CLASS_ORDER}
    votes_r = {c: 0 for c in CLASS_ORDER}
    next_seed = k + 1
    for s in range(1, k + 1):
        seed = s
        parsed = None
        for attempt in range(resample_budget + 1):
            text = scorers.generate_label(prompt, temperature, seed=seed,
                                          item_id=pair.newcomer_id)
            try:
                parsed = parse_model_reply(text)
                break
            except LabelParseError:
                seed = next_seed
                next_seed += 1
        if parsed is None:
            warnings.warn(f"unparseable completions for {pair.newcomer_id}; counted as Other",
                          RuntimeWarning, stacklevel=2)
            parsed = (LabelClass.OTHER, LabelClass.OTHER)
        votes_n[parsed[0]] += 1
        votes_r[parsed[1]] += 1
    rec_n = ConfidenceRecord(pair.newcomer_id, votes_n)
    rec_r = ConfidenceRecord(pair.reply_id, votes_r) if pair.reply_id else None
    return rec_n, rec_r


def majority_vote(table):
    """Modal label per item. Returns ``(labels, tie_flags)``."""
    labels, ties = [], []
    for row in table:
        row = [as_label(x) for x in row]
        counts = {c: row.count(c) for c in CLASS_ORDER}
        top = max(counts.values())
        winners = [c for c in CLASS_ORDER if counts[c] == top]
        labels.append(winners[0])
        ties.append(len(winners) > 1)
    return labels, ties


def fleiss_kappa(table, categories=CLASS_ORDER):
    """Fleiss' kappa of an items × raters table; NaN when chance agreement is 1."""
    rows = [[as_label(x) for x in row] for row in table]
    if len(rows) < 2:
        raise ValueError("need at least 2 items")
    n_raters = len(rows[0])
    if n_raters < 2 or any(len(r) != n_raters for r in rows):
        raise ValueError("need a rectangular table with at least 2 raters")
    counts = np.array([[r.count(c) for c in categories] for r in rows], dtype=np.float64)
    n_items = len(rows)
    p_i = (np.sum(counts ** 2, axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(axis=0) / (n_items * n_raters)
    p_e = np.sum(p_j ** 2)
    if math.isclose(p_e, 1.0):
        return math.nan
    return float((p_bar - p_e) / (1.0 - p_e))


def _confidences(records, cls):
    cls = as_label(cls)
    if isinstance(records, np.ndarray):
        return records.astype(np.float64)
    return np.array([r.conf(cls) if isinstance(r, ConfidenceRecord) else float(r)
                     for r in records], dtype=np.float64)


def _positives(gold, cls):
    cls = as_label(cls)
    return np.array([as_label(g) == cls for g in gold], dtype=bool)


def precision_at_threshold(records, gold, cls, threshold):
    """Precision among records with confidence(cls) >= threshold.

    Returns ``(precision, n_predicted)``; precision is NaN when nothing is
    predicted.
    """
    conf = _confidences(records, cls)
    pos = _positives(gold, cls)
    if len(conf) != len(pos):
        raise ValueError("records and gold labels differ in length")
    pred = conf >= threshold
    n = int(pred.sum())
    if n == 0:
        return math.nan, 0
    return float(pos[pred].sum() / n), n


def select_threshold(records, gold, cls, min_positives=10):
    """Observed confidence value maximizing precision with enough positives.

    Ties in precision go to the lowest threshold.
    """
    conf = _confidences(records, cls)
    best = None
    for t in sorted(set(conf.tolist())):
        prec, n = precision_at_threshold(conf, gold, cls, t)
        if n < min_positives or math.isnan(prec):
            continue
        if best is None or prec > best[1]:
            best = (t, prec)
    if best is None:
        raise InfeasibleThresholdError(
            f"no threshold yields at least {min_positives} predicted {as_label(cls).value}")
    return best[0]


def roc_auc(records, gold, cls):
    """Mann-Whitney AUC; ties count one half. NaN for single-class gold."""
    return _auc(_confidences(records, cls), _positives(gold, cls))


def _auc(conf, pos):
    p, n = conf[pos], conf[~pos]
    if len(p) == 0 or len(n) == 0:
        return math.nan
    ranks = rankdata(np.concatenate([p, n]))
    u = ranks[: len(p)].sum() - len(p) * (len(p) + 1) / 2.0
    return float(u / (len(p) * len(n)))


def bootstrap_ci(metric, data, n_resamples=1000, level=0.95, seed=0):
    """Percentile bootstrap interval of ``metric`` over resampled rows.

    ``data`` is a sequence (or array) of rows; ``metric`` receives the
    resampled rows as the same type. Resamples where the metric is NaN are
    skipped; more than half undefined raises.
    """
    n = len(data)
    if n == 0:
        raise ValueError("bootstrap needs data")
    rng = np.random.default_rng(seed)
    arr = data if isinstance(data, np.ndarray) else None
    values = []
    undefined = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        sample = arr[idx] if arr is not None else [data[i] for i in idx]
        v = metric(sample)
        if v is None or (isinstance(v, float) and math.isnan(v)):
            undefined += 1
            continue
        values.append(float(v))
    if undefined > n_resamples / 2:
        raise BootstrapInstabilityError(
            f"metric undefined on {undefined} of {n_resamples} resamples")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def binomial_se(p, n):
    return math.sqrt(p * (1.0 - p) / n) if n > 0 else math.nan


@dataclass
class ClassEval:
    label: LabelClass
    threshold: float
    precision: float
    precision_ci: tuple
    precision_se: float
    n_predicted: int
    auc: float
    auc_ci: tuple
    n_positive: int


@dataclass
class EvalReport:
    classes: dict = field(default_factory=dict)   # LabelClass -> ClassEval
    n_items: int = 0

    def to_dict(self):
        return {"n_items": self.n_items, "classes": {
            c.value: {"threshold": e.threshold, "precision": e.precision,
                      "precision_ci": list(e.precision_ci), "precision_se": e.precision_se,
                      "n_predicted": e.n_predicted, "roc_auc": e.auc,
                      "roc_auc_ci": list(e.auc_ci), "n_positive": e.n_positive}
            for c, e in self.classes.items()}}

    def to_table(self):
        lines = [f"{'class':<14} {'thr':>5} {'precision':>9} {'95% CI':>15} "
                 f"{'SE':>6} {'n_pred':>6} {'AUC':>6} {'95% CI':>15}"]
        for c, e in self.classes.items():
            lines.append(
                f"{c.value:<14} {e.threshold:5.2f} {e.precision:9.3f} "
                f"[{e.precision_ci[0]:.3f}, {e.precision_ci[1]:.3f}] {e.precision_se:6.3f} "
                f"{e.n_predicted:6d} {e.auc:6.3f} [{e.auc_ci[0]:.3f}, {e.auc_ci[1]:.3f}]")
        return "\n".join(lines) + "\n"


def evaluate(records, gold, classes=(LabelClass.COUNTERSPEECH, LabelClass.HATE_SPEECH),
             min_positives=10, n_resamples=1000, seed=0):
    """Precision at the selected threshold and ROC-AUC, each with a bootstrap CI."""
    conf_all = {c: _confidences(records, c) for c in classes}
    gold = [as_label(g) for g in gold]
    rep = EvalReport(n_items=len(gold))
    for c in classes:
        conf = conf_all[c]
        thr = select_threshold(conf, gold, c, min_positives)
        prec, n = precision_at_threshold(conf, gold, c, thr)
        rows = np.column_stack([conf, _positives(gold, c)])

        def prec_metric(s, thr=thr):
            pred = s[:, 0] >= thr
            return float(s[pred, 1].mean()) if pred.any() else math.nan

        def auc_metric(s):
            return _auc(s[:, 0], s[:, 1] > 0.5)

        rep.classes[c] = ClassEval(
            c, thr, prec, bootstrap_ci(prec_metric, rows, n_resamples, seed=seed),
            binomial_se(prec, n), n, roc_auc(conf, gold, c),
            bootstrap_ci(auc_metric, rows, n_resamples, seed=seed),
            int(_positives(gold, c).sum()))
    return rep


TEMPERATURES = tuple(round(0.1 * i, 1) for i in range(1, 21))


@dataclass
class SweepResult:
    best_temperature: float
    tie: bool
    rows: list   # dicts: temperature, threshold, precision, n_predicted


def temperature_sweep(pairs, gold, scorers, temperatures=TEMPERATURES, k=5, template=None,
                      cls=LabelClass.COUNTERSPEECH, min_positives=10):
    """Reply-label precision at the selected threshold for each temperature.

    Returns the temperature with the highest precision (lowest on ties).
    Temperatures where no threshold is feasible are reported with NaN.
    """
    temperatures = list(temperatures)
    if not temperatures:
        raise ValueError("empty temperature list")
    rows = []
    for t in temperatures:
        recs = [ensemble_label(p, scorers, k=k, temperature=t, template=template)[1]
                for p in pairs]
        try:
            thr = select_threshold(recs, gold, cls, min_positives)
            prec, n = precision_at_threshold(recs, gold, cls, thr)
        except InfeasibleThresholdError:
            thr, prec, n = math.nan, math.nan, 0
        rows.append({"temperature": t, "threshold": thr, "precision": prec, "n_predicted": n})
    valid = [r for r in rows if not math.isnan(r["precision"])]
    if not valid:
        raise InfeasibleThresholdError("no temperature produced a feasible threshold")
    top = max(r["precision"] for r in valid)
    winners = [r["temperature"] for r in valid if r["precision"] == top]
    return SweepResult(min(winners), len(winners) > 1, rows)
