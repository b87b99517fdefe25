"""Command line: staged pipeline runs, robustness sweeps, reports and
synthetic corpora.

Every stage reads its inputs from the run directory, writes its artifacts
there and records their sha256 digests in ``manifest.json`` together with
the config digest and seed. Exit status is 0 on success, 1 on user errors
(bad config, missing inputs or upstream artifacts) and 2 on internal errors.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from importlib import resources

from . import __version__
from .estimator import (InsufficientSampleError, MatchedSample, estimate_effects,
                        naive_difference, subset_effect, toxic_followup_curve)
from .ingest import (DAY, CorpusIntegrityError, CorpusParseError, Corpus, build_cohort,
                     candidate_pairs, dump_comments, filter_subreddits, label_candidates,
                     load_cohort, load_comments, load_labels, save_cohort, save_labels)
from .labeler import (CLASS_ORDER, InfeasibleThresholdError, LabelClass, LabelPair, as_label,
                      evaluate, load_prompt_template)
from .pipeline import (STARTING_PAIRS, balance_of, followup_inputs, match_cohort,
                       reply_class)
from .represent import METRICS
from .scorers import ScoreCache, ScorerError, Scorers
from .synth import SpecError, SynthSpec, generate_cohort, generate_gold, generate_threads
from .textadjust import SlurList, adjusted_toxicity_comparison, load_word_list, tfidf_keywords

log = logging.getLogger("cspipe")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

STAGES = ("ingest", "label", "match", "balance", "estimate", "followups", "adjust")
DEPENDS = {"ingest": (), "label": ("ingest",), "match": ("label",), "balance": ("match",),
           "estimate": ("match",), "followups": ("match",), "adjust": ("match",)}
OUTPUTS = {"ingest": "candidates.jsonl", "label": "labels.jsonl", "match": "matches.json",
           "balance": "balance.json", "estimate": "effects.json",
           "followups": "followups.json", "adjust": "adjust.json"}
SWEEP_AXES = {
    "threshold": (1.0, 0.8, 0.6),
    "matching-type": METRICS,
    "min_pairs": (0, 10, 100),
    "outcome": ("binary", "count"),
    "ordinal": (1, 2, 3),
}
REPORT_DECIMALS = 6


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    def __init__(self, stage, missing):
        super().__init__(f"stage {stage!r} needs {missing!r}; run stage "
                         f"{_producer(missing)!r} first")
        self.stage = stage
        self.missing = missing


def _producer(name):
    for st, out in OUTPUTS.items():
        if out == name:
            return st
    return "match" if name == "cohort.jsonl" else "?"


# ---------------------------------------------------------------- config

def default_config():
    text = resources.files("cspipe").joinpath("data/default_config.json").read_text("utf-8")
    return json.loads(text)


def _merge(base, over, where=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and k != "scorers":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


class PipelineConfig:
    """Key-value tree of pipeline settings over the shipped defaults.

    Relative paths are resolved against the directory of the config file.
    """

    def __init__(self, tree=None, base_dir="."):
        self.tree = _merge(default_config(), tree or {})
        self.declared = copy.deepcopy(self.tree)     # paths as written, for the digest
        for k, v in self.tree["paths"].items():
            if v and not os.path.isabs(v):
                self.tree["paths"][k] = os.path.normpath(os.path.join(base_dir, v))
        self.validate()

    @classmethod
    def load(cls, path=None, seed=None):
        tree, base = {}, "."
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    tree = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            base = os.path.dirname(os.path.abspath(path))
        if seed is not None:
            tree = dict(tree, seed=int(seed))
        return cls(tree, base)

    def __getitem__(self, key):
        return self.tree[key]

    @property
    def seed(self):
        return int(self.tree["seed"])

    def replace(self, **sections):
        """Copy with some ``section={key: value}`` entries overridden."""
        out = copy.copy(self)
        out.tree = copy.deepcopy(self.tree)
        out.declared = copy.deepcopy(self.declared)
        for tree in (out.tree, out.declared):
            for sec, vals in sections.items():
                if isinstance(vals, dict):
                    tree[sec].update(vals)
                else:
                    tree[sec] = vals
        out.validate()
        return out

    def validate(self):
        t = self.tree
        th = t["thresholds"]
        for k in ("counterspeech", "hate_speech", "toxicity"):
            if not 0.0 <= float(th[k]) <= 1.0:
                raise ConfigError(f"thresholds.{k} must be in [0, 1]")
        if th["smd"] <= 0 or th["vif"] <= 1:
            raise ConfigError("thresholds.smd must be > 0 and thresholds.vif > 1")
        if int(th["min_pairs"]) < 0:
            raise ConfigError("thresholds.min_pairs must be >= 0")
        if t["matching"]["metric"] not in METRICS:
            raise ConfigError(f"matching.metric must be one of {METRICS}")
        pairs = [tuple(p) for p in t["matching"]["starting_pairs"]]
        if not pairs or any(p not in STARTING_PAIRS for p in pairs):
            raise ConfigError(f"matching.starting_pairs must be drawn from {STARTING_PAIRS}")
        if t["estimation"]["outcome"] not in ("binary", "count"):
            raise ConfigError("estimation.outcome must be 'binary' or 'count'")
        if int(t["estimation"]["n_boot"]) < 0:
            raise ConfigError("estimation.n_boot must be >= 0")
        if int(t["cohort"]["ordinal"]) < 1:
            raise ConfigError("cohort.ordinal must be >= 1")
        if int(t["labeling"]["k"]) < 1 or not 0 <= float(t["labeling"]["temperature"]) <= 2:
            raise ConfigError("labeling.k must be >= 1 and temperature in [0, 2]")

    def digest(self):
        blob = json.dumps(self.declared, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- run directory

def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


class Run:
    """A run directory bound to a config."""

    def __init__(self, config, run_dir):
        self.config = config
        self.dir = run_dir
        os.makedirs(run_dir, exist_ok=True)
        self._corpus = None
        self._scorers = None

    @property
    def stamp(self):
        return {"config_digest": self.config.digest(), "seed": self.config.seed}

    def path(self, name):
        return os.path.join(self.dir, name)

    def require(self, stage, name):
        p = self.path(name)
        if not os.path.exists(p):
            raise DependencyError(stage, name)
        return p

    # manifest
    def manifest(self):
        p = self.path("manifest.json")
        if os.path.exists(p):
            with open(p, encoding="utf-8") as fh:
                return json.load(fh)
        return {"artifacts": {}}

    def _record(self, name):
        m = self.manifest()
        m.update(self.stamp)
        m["version"] = __version__
        m["artifacts"][name] = file_digest(self.path(name))
        m["artifacts"] = dict(sorted(m["artifacts"].items()))
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(_dumps(m))

    def write_json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(_dumps({"stamp": self.stamp, **obj}))
        self._record(name)

    def write_text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(text)
        self._record(name)

    def write_jsonl(self, name, writer):
        """JSON lines led by a ``{"stamp": ...}`` header; ``writer(fh)`` adds the rest."""
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"stamp": self.stamp}, sort_keys=True) + "\n")
            writer(fh)
        self._record(name)

    def read_json(self, stage, name):
        with open(self.require(stage, name), encoding="utf-8") as fh:
            return json.load(fh)

    def read_jsonl(self, stage, name, reader):
        with open(self.require(stage, name), encoding="utf-8") as fh:
            fh.readline()
            return reader(fh)

    # shared inputs
    @property
    def corpus(self):
        if self._corpus is None:
            path = self.config["paths"]["corpus"]
            if not path:
                raise ConfigError("paths.corpus is not set")
            if not os.path.exists(path):
                raise FileNotFoundError(f"corpus not found: {path}")
            with open(path, "rb") as fh:
                self._corpus = Corpus(load_comments(fh))
        return self._corpus

    @property
    def scorers(self):
        if self._scorers is None:
            cache_path = self.config["paths"]["cache"] or None
            self._scorers = Scorers.from_config(self.config["scorers"], ScoreCache(cache_path))
        return self._scorers


# ---------------------------------------------------------------- stages

def _subreddits(cfg):
    s = cfg["cohort"]["subreddits"]
    return None if s is None else list(s)


def stage_ingest(run):
    cfg = run.config
    corpus = run.corpus
    pairs = candidate_pairs(corpus, int(cfg["cohort"]["ordinal"]), _subreddits(cfg))

    def write(fh):
        for p in pairs:
            fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")

    run.write_jsonl("candidates.jsonl", write)
    subs = {}
    for c in corpus.comments:
        subs[c.subreddit] = subs.get(c.subreddit, 0) + 1
    run.write_json("corpus.json", {
        "corpus_digest": file_digest(cfg["paths"]["corpus"]),
        "n_comments": len(corpus.comments), "n_indexed": len(corpus.by_id),
        "n_dropped": len(corpus.index.dropped), "subreddits": dict(sorted(subs.items())),
        "n_candidates": len(pairs)})
    log.info("ingest: %d comments, %d candidate events", len(corpus.comments), len(pairs))


def _read_pairs(fh):
    return [LabelPair(**json.loads(ln)) for ln in fh if ln.strip()]


def load_gold(path):
    """``{"item_id", "label"}`` JSON lines -> {item_id: LabelClass}."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            if ln.strip():
                d = json.loads(ln)
                out[d["item_id"]] = as_label(d["label"])
    return out


def _evaluate_labels(newcomer, reply, gold, cfg):
    out = {}
    min_pos = int(cfg["thresholds"]["min_positives"])
    for role, store, cls in (("reply", reply, LabelClass.COUNTERSPEECH),
                             ("newcomer", newcomer, LabelClass.HATE_SPEECH)):
        ids = sorted(k for k in store if k in gold)
        if not ids:
            continue
        recs = [store[k] for k in ids]
        try:
            rep = evaluate(recs, [gold[k] for k in ids], classes=(cls,), min_positives=min_pos,
                           seed=cfg.seed)
        except InfeasibleThresholdError as exc:
            log.warning("label evaluation for %s skipped: %s", cls.value, exc)
            continue
        d = rep.to_dict()["classes"][cls.value]
        d["role"] = role
        d["n_items"] = len(ids)
        out[cls.value] = d
    return out


def stage_label(run):
    cfg = run.config
    pairs = run.read_jsonl("label", "candidates.jsonl", _read_pairs)
    newcomer, reply = label_candidates(pairs, run.scorers, k=int(cfg["labeling"]["k"]),
                                       temperature=float(cfg["labeling"]["temperature"]),
                                       template=load_prompt_template())
    run.write_jsonl("labels.jsonl", lambda fh: save_labels(newcomer, reply, fh))
    if cfg["paths"]["gold"]:
        ev = _evaluate_labels(newcomer, reply, load_gold(cfg["paths"]["gold"]), cfg)
        run.write_json("label_eval.json", {"classes": ev})
    log.info("label: %d newcomer and %d reply records", len(newcomer), len(reply))


def cohort_units(run, cfg, newcomer, reply):
    """Hate-speech newcomer units in clusters passing ``min_pairs``."""
    th = cfg["thresholds"]
    units = build_cohort(run.corpus, newcomer, reply, run.scorers,
                         ordinal=int(cfg["cohort"]["ordinal"]),
                         cs_threshold=float(th["counterspeech"]),
                         hs_threshold=float(th["hate_speech"]),
                         subreddits=_subreddits(cfg),
                         window=int(cfg["cohort"]["window_days"]) * DAY)
    keep = set(filter_subreddits(units, int(th["min_pairs"])))
    return [u for u in units if u.cluster_id in keep]


def _match(cfg, units):
    m = cfg["matching"]
    return match_cohort(units, metric=m["metric"],
                        starting_pairs=[tuple(p) for p in m["starting_pairs"]],
                        n_components=int(m["n_components"]), ridge=float(m["ridge"]),
                        smd_threshold=float(cfg["thresholds"]["smd"]),
                        max_iters=int(m["max_iters"]))


def stage_match(run):
    cfg = run.config
    newcomer, reply = run.read_jsonl("match", "labels.jsonl", load_labels)
    units = cohort_units(run, cfg, newcomer, reply)
    run.write_jsonl("cohort.jsonl", lambda fh: save_cohort(units, fh))
    sample, results = _match(cfg, units)
    ids = [u.event.comment_id for u in sample.units]
    trip = [[ids[i] for i in row] for row in sample.triplets.tolist()]
    clusters = []
    for r in results:
        d = r.to_dict()
        clusters.append(d)
    run.write_json("matches.json", {"n_units": len(units), "n_triplets": len(trip),
                                    "clusters": clusters, "triplets": trip})
    log.info("match: %d units, %d triplets", len(units), len(trip))


def load_sample(run, stage):
    units = run.read_jsonl(stage, "cohort.jsonl", load_cohort)
    m = run.read_json(stage, "matches.json")
    pos = {u.event.comment_id: k for k, u in enumerate(units)}
    trip = [[pos[c] for c in row] for row in m["triplets"]]
    return units, MatchedSample(units, trip)


def stage_balance(run):
    cfg = run.config
    _, sample = load_sample(run, "balance")
    rep = balance_of(sample, float(cfg["thresholds"]["smd"]),
                     int(cfg["matching"]["n_components"]))
    run.write_json("balance.json", rep.to_dict())
    log.info("balance: %s", rep.pass_counts)


def effects_for(cfg, units, sample, subsets=True):
    """Main-model ATEs, the toxicity subsets and the naive contrast."""
    est = cfg["estimation"]
    seed = cfg.seed
    out = {"outcome": est["outcome"], "n_units": len(units), "n_triplets": len(sample)}
    if len(sample) == 0:
        out.update(main=None, subsets={}, naive=None)
        return out
    rep = estimate_effects(sample.matched_units(), outcome=est["outcome"],
                           vif_threshold=float(cfg["thresholds"]["vif"]),
                           n_boot=int(est["n_boot"]), seed=seed)
    out["main"] = rep.to_dict()
    out["subsets"] = {}
    for mode in ("toxic-only", "nontoxic-only") if subsets else ():
        try:
            e = subset_effect(sample, float(cfg["thresholds"]["toxicity"]), mode,
                              min_triplets=int(est["subset_min_triplets"]),
                              n_boot=int(est["n_boot"]), seed=seed, outcome=est["outcome"],
                              vif_threshold=float(cfg["thresholds"]["vif"]))
            out["subsets"][mode] = e.to_dict()
        except InsufficientSampleError as exc:
            log.warning("%s subset skipped: %s", mode, exc)
            out["subsets"][mode] = None
    try:
        out["naive"] = {"counterspeech": naive_difference(units, outcome=est["outcome"])}
    except InsufficientSampleError:
        out["naive"] = None
    return out


def stage_estimate(run):
    units, sample = load_sample(run, "estimate")
    run.write_json("effects.json", effects_for(run.config, units, sample))


def stage_followups(run):
    cfg = run.config
    units = run.read_jsonl("followups", "cohort.jsonl", load_cohort)
    replies, follow = followup_inputs(run.corpus, units, run.scorers)
    curve = toxic_followup_curve(replies, follow, bins=int(cfg["followups"]["bins"]),
                                 threshold=float(cfg["thresholds"]["toxicity"]))
    run.write_json("followups.json", {"n_replies": len(replies), "n_followups": len(follow),
                                      **curve.to_dict()})


def _slurs(cfg):
    path = cfg["paths"]["slurs"]
    if not path:
        path = str(resources.files("cspipe").joinpath("data/slurs_placeholder.txt"))
    return SlurList.from_file(path)


def stage_adjust(run):
    cfg = run.config
    units = run.read_jsonl("adjust", "cohort.jsonl", load_cohort)
    corpus = run.corpus
    by_class = {c.value: [] for c in CLASS_ORDER}
    for u in units:
        rid = u.event.first_reply_id
        if rid is not None:
            by_class[reply_class(u)].append(corpus.by_id[rid].body)
    baseline = None
    if cfg["paths"]["baseline"]:
        with open(cfg["paths"]["baseline"], "rb") as fh:
            baseline = [c.body for c in load_comments(fh)
                        if c.body.strip() not in ("", "[deleted]", "[removed]")]
    sc = run.scorers
    res = adjusted_toxicity_comparison(by_class, _slurs(cfg), lambda t: sc.score_toxicity(t),
                                       baseline=baseline)
    run.write_json("adjust.json", res)
    # candidate terms for curating the slur list: counterspeech vs the other replies
    target = by_class["Counterspeech"]
    rest = by_class["HateSpeech"] + by_class["Other"]
    stop = load_word_list(cfg["paths"]["stopwords"] or None)
    terms = tfidf_keywords(target, rest, top_n=1000, stopwords=stop) if target and rest else []
    run.write_json("keywords.json", {"n_target": len(target), "n_background": len(rest),
                                     "terms": [[w, sc_] for w, sc_ in terms]})


STAGE_FUNCS = {"ingest": stage_ingest, "label": stage_label, "match": stage_match,
               "balance": stage_balance, "estimate": stage_estimate,
               "followups": stage_followups, "adjust": stage_adjust}


def run(config, stage, run_dir):
    """Execute ``stage`` (or ``"all"``, in dependency order) in ``run_dir``."""
    r = Run(config, run_dir)
    if stage == "all":
        for st in STAGES:
            log.info("stage %s", st)
            STAGE_FUNCS[st](r)
        emit_report(run_dir)
    elif stage in STAGE_FUNCS:
        STAGE_FUNCS[stage](r)
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return r


# ---------------------------------------------------------------- sweeps

def robustness_sweep(config, axis, run_dir, points=None):
    """Re-estimate the main effects at each point of ``axis``.

    Labels come from the base run; the ordinal axis labels the k-th comment
    events on demand.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    points = list(SWEEP_AXES[axis] if points is None else points)
    r = Run(config, run_dir)
    newcomer, reply = r.read_jsonl("sweep", "labels.jsonl", load_labels)
    rows = []
    for pt in points:
        if axis == "threshold":
            cfg = config.replace(thresholds={"counterspeech": float(pt), "hate_speech": float(pt)})
        elif axis == "matching-type":
            cfg = config.replace(matching={"metric": str(pt)})
        elif axis == "min_pairs":
            cfg = config.replace(thresholds={"min_pairs": int(pt)})
        elif axis == "outcome":
            cfg = config.replace(estimation={"outcome": str(pt)})
        else:
            cfg = config.replace(cohort={"ordinal": int(pt)})
        nl, rl = newcomer, reply
        if axis == "ordinal" and int(pt) != int(config["cohort"]["ordinal"]):
            pairs = candidate_pairs(r.corpus, int(pt), _subreddits(cfg))
            nl, rl = label_candidates(pairs, r.scorers, k=int(cfg["labeling"]["k"]),
                                      temperature=float(cfg["labeling"]["temperature"]))
        units = cohort_units(r, cfg, nl, rl)
        if not units:
            rows.append({"point": pt, "n_units": 0, "n_triplets": 0, "effects": []})
            continue
        sample, _ = _match(cfg, units)
        eff = effects_for(cfg, units, sample, subsets=False)
        rows.append({"point": pt, "n_units": len(units), "n_triplets": len(sample),
                     "effects": eff["main"]["effects"] if eff["main"] else []})
        log.info("sweep %s=%s: %d triplets", axis, pt, len(sample))
    out = {"axis": axis, "points": rows}
    name = f"sweep_{axis}"
    r.write_json(name + ".json", out)
    r.write_text(name + ".txt", sweep_table(out))
    return out


def sweep_table(sweep):
    lines = [f"robustness sweep over {sweep['axis']}",
             f"{'point':<22}{'contrast':<18}{'ATE':>10}{'CI low':>10}{'CI high':>10}"
             f"{'p':>8}{'triplets':>10}"]
    for row in sweep["points"]:
        if not row["effects"]:
            lines.append(f"{str(row['point']):<22}{'-':<18}{'':>10}{'':>10}{'':>10}{'':>8}"
                         f"{row['n_triplets']:>10}")
        for e in row["effects"]:
            lines.append(f"{str(row['point']):<22}{e['contrast']:<18}{e['ate']:>10.4f}"
                         f"{e['ci_low']:>10.4f}{e['ci_high']:>10.4f}{e['p_value']:>8.3f}"
                         f"{row['n_triplets']:>10}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- reports

def _round(v):
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return None
        return round(v, REPORT_DECIMALS)
    if isinstance(v, dict):
        return {k: _round(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_round(x) for x in v]
    return v


def _load_if(run_dir, name):
    p = os.path.join(run_dir, name)
    if not os.path.exists(p):
        return None
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def build_report(run_dir):
    """Report tables assembled from whatever artifacts ``run_dir`` holds."""
    rep = {"labels": [], "effects": [], "subsets": [], "balance": None,
           "toxicity_by_class": [], "followups": [], "manifest": {}}
    man = _load_if(run_dir, "manifest.json") or {"artifacts": {}}
    rep["manifest"] = {k: v for k, v in man.items() if k != "artifacts"}
    rep["manifest"]["artifacts"] = {k: v for k, v in man["artifacts"].items()
                                    if not k.startswith("report.")}
    matches = _load_if(run_dir, "matches.json")
    n_trip = matches["n_triplets"] if matches else None
    ev = _load_if(run_dir, "label_eval.json")
    if ev:
        for cls, d in sorted(ev["classes"].items()):
            rep["labels"].append({"class": cls, "threshold": d["threshold"],
                                  "precision": d["precision"],
                                  "precision_ci": d["precision_ci"], "roc_auc": d["roc_auc"],
                                  "n_predicted": d["n_predicted"], "triplets": n_trip})
    eff = _load_if(run_dir, "effects.json")
    if eff and eff.get("main"):
        for e in eff["main"]["effects"]:
            rep["effects"].append({k: e[k] for k in ("contrast", "ate", "ci_low", "ci_high",
                                                     "p_value", "n")})
        for mode, e in sorted(eff["subsets"].items()):
            if e is not None:
                rep["subsets"].append({"subset": mode, **{k: e[k] for k in (
                    "ate", "ci_low", "ci_high", "p_value", "n")}})
    bal = _load_if(run_dir, "balance.json")
    if bal:
        total = sum(1 for c in bal["cells"] if c["stage"] == "post")
        rep["balance"] = {"threshold": bal["threshold"], "cells": total,
                          "pass_pre": bal["pass_counts"]["pre"],
                          "pass_post": bal["pass_counts"]["post"]}
    adj = _load_if(run_dir, "adjust.json")
    if adj:
        for cls, d in adj["classes"].items():
            rep["toxicity_by_class"].append({"class": cls, "n": d["n"], "raw_mean": d["raw_mean"],
                                             "raw_se": d["raw_se"],
                                             "adjusted_mean": d["adjusted_mean"]})
    fol = _load_if(run_dir, "followups.json")
    if fol:
        for cls, bins in fol["series"].items():
            for b in bins:
                rep["followups"].append({"class": cls, "low": b["low"], "high": b["high"],
                                         "p": b["p"], "n": b["n"]})
    return _round(rep)


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{REPORT_DECIMALS}f}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


_SECTIONS = (
    ("labels", "Label quality at the selected confidence threshold",
     ("class", "threshold", "precision", "precision_ci", "roc_auc", "n_predicted", "triplets")),
    ("effects", "Average treatment effects on the matched sample",
     ("contrast", "ate", "ci_low", "ci_high", "p_value", "n")),
    ("subsets", "Counterspeech effect by reply toxicity",
     ("subset", "ate", "ci_low", "ci_high", "p_value", "n")),
    ("toxicity_by_class", "Mean reply toxicity by class",
     ("class", "n", "raw_mean", "raw_se", "adjusted_mean")),
    ("followups", "Probability of a toxic follow-up by reply toxicity",
     ("class", "low", "high", "p", "n")),
)


def report_text(rep):
    out = []
    for key, title, cols in _SECTIONS:
        out.append(f"== {title}")
        rows = [[_fmt(r[c]) for c in cols] for r in rep[key]]
        widths = [max([len(c)] + [len(r[k]) for r in rows]) for k, c in enumerate(cols)]
        out.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip())
        for r in rows:
            out.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
        out.append("")
    out.append("== Covariate balance")
    b = rep["balance"]
    if b:
        out.append(f"cells with |SMD| < {_fmt(b['threshold'])}: pre {b['pass_pre']}/{b['cells']}"
                   f", post {b['pass_post']}/{b['cells']}")
    out.append("")
    out.append("== Manifest")
    m = rep["manifest"]
    for k in sorted(m):
        if k != "artifacts":
            out.append(f"{k}: {m[k]}")
    for k, v in sorted(m.get("artifacts", {}).items()):
        out.append(f"{k}  {v}")
    return "\n".join(out) + "\n"


def emit_report(run_dir, fmt="both"):
    """Write ``report.json`` and/or ``report.txt``; returns the paths written."""
    if fmt not in ("structured", "plain-table", "both"):
        raise ConfigError(f"unknown report format {fmt!r}")
    os.makedirs(run_dir, exist_ok=True)
    rep = build_report(run_dir)
    paths = []
    if fmt in ("structured", "both"):
        paths.append(os.path.join(run_dir, "report.json"))
        with open(paths[-1], "w", encoding="utf-8") as fh:
            fh.write(_dumps(rep))
    if fmt in ("plain-table", "both"):
        paths.append(os.path.join(run_dir, "report.txt"))
        with open(paths[-1], "w", encoding="utf-8") as fh:
            fh.write(report_text(rep))
    return paths


# ---------------------------------------------------------------- synthetic corpora

def write_synthetic(spec, out_dir):
    """Corpus, gold labels, ground truth and a ready-to-run config in ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "corpus.jsonl"), "w", encoding="utf-8") as fh:
        dump_comments(generate_threads(spec), fh)
    with open(os.path.join(out_dir, "gold.jsonl"), "w", encoding="utf-8") as fh:
        for k, v in generate_gold(spec).items():
            fh.write(json.dumps({"item_id": k, "label": v}, sort_keys=True) + "\n")
    units, truth = generate_cohort(spec)
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as fh:
        fh.write(_dumps(truth.to_dict()))
    with open(os.path.join(out_dir, "cohort.jsonl"), "w", encoding="utf-8") as fh:
        save_cohort(units, fh)
    cfg = {"seed": spec.seed,
           "paths": {"corpus": "corpus.jsonl", "gold": "gold.jsonl"},
           "cohort": {"subreddits": list(spec.cluster_names)}}
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(_dumps(cfg))
    return truth


# ---------------------------------------------------------------- argparse

def build_parser():
    p = argparse.ArgumentParser(prog="cspipe", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config (defaults are used for missing keys)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--run-dir", default="run", help="artifact directory (default: run)")

    r = sub.add_parser("run", help="run one pipeline stage or all of them")
    r.add_argument("stage", choices=STAGES + ("all",))
    common(r)

    s = sub.add_parser("sweep", help="robustness sweep over one axis")
    s.add_argument("axis", choices=sorted(SWEEP_AXES))
    s.add_argument("--points", nargs="+", help="sweep points (default: the axis preset)")
    common(s)

    rep = sub.add_parser("report", help="assemble the report from a run directory")
    rep.add_argument("--run-dir", default="run")
    rep.add_argument("--format", default="both", choices=("structured", "plain-table", "both"))

    syn = sub.add_parser("synth", help="write a synthetic corpus with known effects")
    syn.add_argument("--out", required=True)
    syn.add_argument("--spec", help="JSON file of SynthSpec fields")
    syn.add_argument("--seed", type=int)
    syn.add_argument("--n-clusters", type=int)
    syn.add_argument("--units-per-cluster", type=int)

    sub.add_parser("show-config", help="print the default config")
    return p


def _points(axis, raw):
    if raw is None:
        return None
    if axis in ("threshold",):
        return [float(x) for x in raw]
    if axis in ("min_pairs", "ordinal"):
        return [int(x) for x in raw]
    return raw


def _synth_spec(args):
    d = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            d = json.load(fh)
    for k in ("seed", "n_clusters", "units_per_cluster"):
        v = getattr(args, k)
        if v is not None:
            d[k] = v
    return SynthSpec.from_dict(d)


USER_ERRORS = (ConfigError, DependencyError, SpecError, CorpusParseError, CorpusIntegrityError,
               FileNotFoundError, InfeasibleThresholdError, InsufficientSampleError,
               ScorerError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=level)
    logging.captureWarnings(True)
    try:
        if args.command == "run":
            run(PipelineConfig.load(args.config, args.seed), args.stage, args.run_dir)
        elif args.command == "sweep":
            robustness_sweep(PipelineConfig.load(args.config, args.seed), args.axis,
                             args.run_dir, _points(args.axis, args.points))
        elif args.command == "report":
            for path in emit_report(args.run_dir, args.format):
                print(path)
        elif args.command == "synth":
            truth = write_synthetic(_synth_spec(args), args.out)
            print(json.dumps(truth.ate, sort_keys=True))
        elif args.command == "show-config":
            sys.stdout.write(_dumps(default_config()))
    except USER_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_USER
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
