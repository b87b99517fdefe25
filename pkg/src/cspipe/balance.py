"""Standardized-mean-difference balance diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

ARM_NAMES = ("NoReply", "Counterspeech", "OtherReply")
ARM_PAIRS = ((0, 1), (0, 2), (1, 2))
STAGES = ("pre", "post")


def smd(values_a, values_b):
    """Absolute standardized mean difference with sample (n-1) variances.

    Two constant samples give 0 when their means agree and ``inf`` otherwise.
    A single-element sample contributes zero variance.
    """
    a = np.asarray(values_a, dtype=np.float64).ravel()
    b = np.asarray(values_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("smd needs two non-empty samples")
    diff = abs(a.mean() - b.mean())
    va = a.var(ddof=1) if a.size > 1 else 0.0
    vb = b.var(ddof=1) if b.size > 1 else 0.0
    pooled = math.sqrt((va + vb) / 2.0)
    if pooled == 0.0:
        # constant samples: compare on a relative scale to absorb rounding
        scale = max(abs(a.mean()), abs(b.mean()), 1.0)
        return 0.0 if diff <= 1e-12 * scale else math.inf
    return float(diff / pooled)


@dataclass
class BalanceReport:
    # (covariate, (arm_i, arm_j), stage) -> |SMD|
    cells: dict = field(default_factory=dict)
    threshold: float = 0.1
    # (arm_i, arm_j) -> {"pre": mean cosine, "post": mean cosine}
    embedding_cosine: dict = field(default_factory=dict)
    n_matched: int = 0

    @property
    def covariates(self):
        seen = []
        for cov, _, _ in self.cells:
            if cov not in seen:
                seen.append(cov)
        return seen

    def stage_cells(self, stage):
        return {(c, p): v for (c, p, s), v in self.cells.items() if s == stage}

    @property
    def pass_counts(self):
        return {s: _count(self.stage_cells(s).values(), self.threshold)
                for s in STAGES}

    def to_dict(self):
        rows = []
        for (cov, pair, stage), v in self.cells.items():
            rows.append({"covariate": cov, "arms": [ARM_NAMES[pair[0]], ARM_NAMES[pair[1]]],
                         "stage": stage, "abs_smd": _jsonable(v)})
        cos = [{"arms": [ARM_NAMES[p[0]], ARM_NAMES[p[1]]],
                "pre": _jsonable(v.get("pre")), "post": _jsonable(v.get("post"))}
               for p, v in self.embedding_cosine.items()]
        return {"threshold": self.threshold, "n_matched": self.n_matched,
                "pass_counts": self.pass_counts, "cells": rows,
                "embedding_cosine": cos}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        """Covariate × arm-pair grid, one ``pre -> post`` entry per cell."""
        pairs = [p for p in ARM_PAIRS
                 if any(k[1] == p for k in self.cells)]
        heads = [f"{ARM_NAMES[i][:5]}-{ARM_NAMES[j][:5]}" for i, j in pairs]
        width = max([len(c) for c in self.covariates] + [9])
        lines = [f"{'covariate':<{width}}  " + "  ".join(f"{h:>17}" for h in heads)]
        for cov in self.covariates:
            cells = []
            for p in pairs:
                pre = self.cells.get((cov, p, "pre"), math.nan)
                post = self.cells.get((cov, p, "post"), math.nan)
                flag = "*" if post >= self.threshold else " "
                cells.append(f"{pre:7.4f} -> {post:6.4f}{flag}")
            lines.append(f"{cov:<{width}}  " + "  ".join(f"{c:>17}" for c in cells))
        pc = self.pass_counts
        total = len(self.stage_cells("post"))
        lines.append(f"cells with |SMD| < {self.threshold}: pre {pc['pre']}/{total}, "
                     f"post {pc['post']}/{total}  (* = fails post)")
        return "\n".join(lines) + "\n"


def _jsonable(v):
    if v is None:
        return None
    if math.isinf(v):
        return "inf"
    return round(float(v), 12)


def _count(values, threshold):
    return sum(1 for v in values if v < threshold)


def pass_count(report, threshold=None):
    """Number of post-matching cells with |SMD| strictly below ``threshold``."""
    if threshold is None:
        threshold = report.threshold
    return _count(report.stage_cells("post").values(), threshold)


def _mean_cosine_all(ea, eb):
    # mean over all cross pairs; embeddings are unit-normalized
    return float(ea.mean(axis=0) @ eb.mean(axis=0))


def balance_report(covariates, arms, triplets, embeddings=None, n_components=5,
                   threshold=0.1):
    """SMD per covariate and arm pair, before and after matching.

    ``covariates`` maps names to per-unit arrays; ``arms`` holds arm codes
    0/1/2; ``triplets`` is an ``(m, 3)`` array of unit row indices, column k
    holding the arm-k member. With ``embeddings`` given, the report adds the
    mean cosine similarity between arms and SMDs of the leading principal
    components of the embedding block.
    """
    from .represent import fit_pca, project

    arms = np.asarray(arms)
    trip = np.asarray(triplets, dtype=np.intp).reshape(-1, 3)
    cols = {k: np.asarray(v, dtype=np.float64) for k, v in covariates.items()}
    if embeddings is not None:
        emb = np.asarray(embeddings, dtype=np.float64)
        if len(emb) > n_components:
            pca = fit_pca(emb, n_components=n_components)
            scores = project(pca, emb)
            for c in range(scores.shape[1]):
                cols[f"embedding_pc{c + 1}"] = scores[:, c]
    rep = BalanceReport(threshold=threshold, n_matched=len(trip))
    members = {k: np.flatnonzero(arms == k) for k in (0, 1, 2)}
    for name, x in cols.items():
        for (i, j) in ARM_PAIRS:
            if len(members[i]) and len(members[j]):
                rep.cells[(name, (i, j), "pre")] = smd(x[members[i]], x[members[j]])
            if len(trip):
                rep.cells[(name, (i, j), "post")] = smd(x[trip[:, i]], x[trip[:, j]])
    if embeddings is not None:
        for (i, j) in ARM_PAIRS:
            entry = {}
            if len(members[i]) and len(members[j]):
                entry["pre"] = _mean_cosine_all(emb[members[i]], emb[members[j]])
            if len(trip):
                entry["post"] = float(np.mean(np.sum(emb[trip[:, i]] * emb[trip[:, j]], axis=1)))
            rep.embedding_cosine[(i, j)] = entry
    return rep
