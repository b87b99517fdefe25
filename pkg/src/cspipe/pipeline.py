"""Stage implementations shared by the command line and the test harnesses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import balance as bal
from . import matcher, represent
from .estimator import MatchedSample
from .ingest import SCALAR_NAMES, Arm, units_by_cluster

log = logging.getLogger(__name__)

STARTING_PAIRS = ((0, 1), (0, 2), (1, 2))


def unit_covariates(units):
    """Scalar confounders by name, as arrays aligned with ``units``."""
    m = np.array([u.covariates.scalars() for u in units]) if units else np.empty((0, 12))
    return {n: m[:, k] for k, n in enumerate(SCALAR_NAMES)}


def unit_embeddings(units):
    return np.array([u.covariates.embedding for u in units], dtype=np.float64)


def unit_arms(units):
    return np.array([int(u.arm) for u in units], dtype=np.intp)


@dataclass
class ClusterMatch:
    cluster: str
    n_units: int
    arm_sizes: tuple
    triplets: np.ndarray            # global unit indices
    starting_pair: tuple | None
    total_cost: float
    runs: list = field(default_factory=list)

    def to_dict(self):
        return {"cluster": self.cluster, "n_units": self.n_units,
                "arm_sizes": list(self.arm_sizes), "n_triplets": int(len(self.triplets)),
                "starting_pair": list(self.starting_pair) if self.starting_pair else None,
                "total_cost": self.total_cost, "runs": self.runs}


def match_cluster(units, offset=0, metric="propensity-euclidean", starting_pairs=STARTING_PAIRS,
                  n_components=5, ridge=1e-4, smd_threshold=0.1, max_iters=50, backend=None):
    """Triplet-match one cluster, keeping the run with the best balance."""
    name = units[0].cluster_id
    arms = unit_arms(units)
    sizes = tuple(int(np.sum(arms == k)) for k in (0, 1, 2))
    if min(sizes) == 0:
        log.warning("cluster %s has an empty arm %s; no triplets", name, sizes)
        return ClusterMatch(name, len(units), sizes, np.empty((0, 3), np.intp), None, 0.0)
    cov = unit_covariates(units)
    emb = unit_embeddings(units)
    feats = represent.assemble_features(emb, np.column_stack(list(cov.values())), SCALAR_NAMES)
    rep = represent.represent_cluster(feats.values, arms, metric=metric,
                                      n_components=n_components, ridge=ridge)
    dist, idx = rep.distances(arms)
    runs = []
    for sp in starting_pairs:
        run = matcher.triplet_match(dist, starting_pair=sp, max_iters=max_iters,
                                    backend=backend)
        local = run.triplet_set.as_array()
        glob = np.column_stack([idx[k][local[:, k]] for k in (0, 1, 2)]) if len(local) else \
            np.empty((0, 3), np.intp)
        run.balance = bal.balance_report(cov, arms, glob, threshold=smd_threshold)
        runs.append((run, glob))
    best = matcher.select_best_run([r for r, _ in runs], smd_threshold)
    glob = next(g for r, g in runs if r is best)
    info = [{"starting_pair": list(r.starting_pair), "total_cost": r.triplet_set.total_cost,
             "attach_cost": r.attach_cost, "iterations": r.iterations,
             "pass_count": bal.pass_count(r.balance, smd_threshold)} for r, _ in runs]
    return ClusterMatch(name, len(units), sizes, glob + offset, tuple(best.starting_pair),
                        float(best.triplet_set.total_cost), info)


def match_cohort(units, clusters=None, **kw):
    """Match every cluster; returns ``(MatchedSample, [ClusterMatch])``.

    ``units`` must be ordered so that each cluster's units are contiguous
    (cohort order is).
    """
    groups = units_by_cluster(units)
    ordered = [u for name in groups for u in groups[name]]
    if [id(u) for u in ordered] != [id(u) for u in units]:
        units = ordered
    results = []
    start = 0
    for name, members in groups.items():
        if clusters is None or name in clusters:
            results.append(match_cluster(members, offset=start, **kw))
        start += len(members)
    trip = np.vstack([r.triplets for r in results]) if results else np.empty((0, 3), np.intp)
    return MatchedSample(list(units), trip), results


def balance_of(sample, threshold=0.1, n_components=5):
    """Pooled balance report of a matched sample (pre-stage uses every unit)."""
    units = sample.units
    return bal.balance_report(unit_covariates(units), unit_arms(units), sample.triplets,
                              embeddings=unit_embeddings(units), n_components=n_components,
                              threshold=threshold)


def reply_class(unit):
    if unit.arm == Arm.COUNTERSPEECH:
        return "Counterspeech"
    return "HateSpeech" if unit.hate_reply_flag else "Other"


def followup_inputs(corpus, units, scorers):
    """(replies, followups) for the follow-up curve.

    Replies are the first replies of the cohort, classed as Counterspeech,
    HateSpeech or Other; follow-ups are the direct answers to those replies.
    """
    replies, followups = [], []
    for u in units:
        rid = u.event.first_reply_id
        if rid is None:
            continue
        replies.append((rid, reply_class(u), u.reply_toxicity))
        for fid in corpus.index.children.get(rid, ()):
            body = corpus.by_id[fid].body
            if body.strip() in ("", "[deleted]", "[removed]"):
                continue
            followups.append((rid, scorers.score_toxicity(body, item_id=fid)))
    return replies, followups


@dataclass
class SyntheticRun:
    seed: int
    truth: dict
    effects: dict
    naive: float
    n_triplets: int
    subsets: dict = field(default_factory=dict)


def run_synthetic(spec, n_boot=1000, metric="propensity-euclidean", subset_threshold=None,
                  cs_threshold=0.8, hs_threshold=0.8):
    """generate_threads -> ingest -> stub labels -> match -> estimate.

    With ``subset_threshold`` set, the toxic-only and nontoxic-only
    counterspeech subsets are estimated as well.
    """
    from .estimator import InsufficientSampleError, estimate_effects, naive_difference, subset_effect
    from .ingest import Corpus, build_cohort, candidate_pairs, label_candidates
    from .scorers import Scorers
    from .synth import generate_cohort, generate_threads

    comments = generate_threads(spec)
    _, truth = generate_cohort(spec)
    corpus = Corpus(comments)
    scorers = Scorers.stubs()
    pairs = candidate_pairs(corpus, subreddits=spec.cluster_names)
    newcomer, reply = label_candidates(pairs, scorers)
    units = build_cohort(corpus, newcomer, reply, scorers, cs_threshold=cs_threshold,
                         hs_threshold=hs_threshold, subreddits=spec.cluster_names)
    sample, _ = match_cohort(units, metric=metric)
    rep = estimate_effects(sample.matched_units(), n_boot=n_boot, seed=spec.seed)
    out = SyntheticRun(spec.seed, dict(truth.ate), {e.contrast: e for e in rep.effects},
                       naive_difference(units), len(sample))
    if subset_threshold is not None:
        for mode in ("toxic-only", "nontoxic-only"):
            try:
                out.subsets[mode] = subset_effect(sample, subset_threshold, mode,
                                                  n_boot=n_boot, seed=spec.seed)
            except InsufficientSampleError as exc:
                log.warning("seed %s: %s", spec.seed, exc)
                out.subsets[mode] = None
    return out
