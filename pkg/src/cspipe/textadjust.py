"""Use-mention toxicity adjustment for counterspeech replies.

Quoted lines are removed and listed slurs replaced by a neutral word before
re-scoring, so that replies that merely quote or mention hateful language
are not counted as toxic for it.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources

import numpy as np

_TOKEN_RE = re.compile(r"[^\W_]+")
_QUOTE_PREFIXES = ("&gt;", ">")


@dataclass(frozen=True)
class SlurList:
    terms: tuple
    replacement: str = "person"

    def __post_init__(self):
        terms = tuple(t.strip().lower() for t in self.terms)
        if any(not t for t in terms):
            raise ValueError("slur terms must be non-empty")
        if len(set(terms)) != len(terms):
            raise ValueError("duplicate slur terms")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def from_file(cls, path, replacement="person"):
        with open(path, encoding="utf-8") as fh:
            terms = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
        return cls(tuple(dict.fromkeys(t.lower() for t in terms)), replacement)


def load_word_list(path=None, default="stopwords.txt"):
    if path is None:
        text = resources.files("cspipe").joinpath(f"data/{default}").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return [ln.strip().lower() for ln in text.splitlines()
            if ln.strip() and not ln.startswith("#")]


def strip_blockquotes(text):
    """Drop lines starting (after whitespace) with ``&gt;`` or ``>``."""
    kept = [ln for ln in text.splitlines(keepends=True)
            if not ln.lstrip().startswith(_QUOTE_PREFIXES)]
    return "".join(kept)


def _slur_pattern(terms):
    alts = "|".join(re.escape(t) for t in sorted(terms, key=len, reverse=True))
    return re.compile(rf"(?<![^\W_])(?:{alts})(?![^\W_])", re.IGNORECASE)


def replace_slurs(text, slurs):
    """Case-insensitive whole-word replacement; other characters untouched."""
    if not text or not slurs.terms:
        return text
    return _slur_pattern(slurs.terms).sub(slurs.replacement, text)


def tokenize(text):
    return [t.lower() for t in _TOKEN_RE.findall(text)]


def tfidf_keywords(target, background, top_n=1000, stopwords=()):
    """Terms most characteristic of ``target`` documents.

    score(t) = tf_target(t) * (log((N + 1) / (df(t) + 1)) + 1), with N and df
    taken over the pooled documents. Ties are broken alphabetically.
    Returns ``[(term, score), ...]``.
    """
    if not target or not background:
        raise ValueError("both corpora must be non-empty")
    stop = set(stopwords)
    t_docs = [[w for w in tokenize(d) if w not in stop] for d in target]
    b_docs = [[w for w in tokenize(d) if w not in stop] for d in background]
    docs = t_docs + b_docs
    n = len(docs)
    df = Counter()
    for d in docs:
        df.update(set(d))
    tf = Counter()
    for d in t_docs:
        tf.update(d)
    scored = [(w, c * (math.log((n + 1) / (df[w] + 1)) + 1.0)) for w, c in tf.items()]
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[:top_n]


def _mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, 0
    se = v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else math.nan
    return float(v.mean()), float(se), int(v.size)


def adjust_text(text, slurs):
    return replace_slurs(strip_blockquotes(text), slurs)


def adjusted_toxicity_comparison(replies_by_class, slurs, score, adjust_classes=("Counterspeech",),
                                 baseline=None):
    """Mean toxicity per reply class, raw and adjusted.

    ``replies_by_class`` maps a class name to reply texts; ``score`` maps text
    to a toxicity probability. Only classes in ``adjust_classes`` are
    adjusted. Replies that are empty after adjustment keep their raw score.
    ``baseline`` optionally gives texts for an external reference group (for
    instance replies from non-hate communities). Ratios report how much more
    toxic counterspeech is than each comparison group, in percent.
    """
    out = {"classes": {}, "ratios": {}}
    for cls, texts in replies_by_class.items():
        raw = [score(t) for t in texts]
        if cls in adjust_classes:
            adj = []
            for t, r in zip(texts, raw):
                a = adjust_text(t, slurs)
                adj.append(score(a) if a.strip() else r)
        else:
            adj = raw
        m_raw, se_raw, n = _mean_se(raw)
        m_adj, se_adj, _ = _mean_se(adj)
        out["classes"][cls] = {"n": n, "raw_mean": m_raw, "raw_se": se_raw,
                               "adjusted_mean": m_adj, "adjusted_se": se_adj}
    groups = {k: v["raw_mean"] for k, v in out["classes"].items()}
    if baseline is not None:
        m, se, n = _mean_se([score(t) for t in baseline])
        out["baseline"] = {"n": n, "raw_mean": m, "raw_se": se}
        groups["baseline"] = m
    cs = out["classes"].get("Counterspeech")
    if cs is not None:
        for k, m in groups.items():
            if k != "Counterspeech" and m and not math.isnan(m):
                out["ratios"][f"Counterspeech_vs_{k}_pct"] = 100.0 * (cs["raw_mean"] / m - 1.0)
                out["ratios"][f"Counterspeech_adjusted_vs_{k}_pct"] = (
                    100.0 * (cs["adjusted_mean"] / m - 1.0))
    return out
