"""Synthetic corpora with planted confounding and treatment effects.

A single seeded plan drives both outputs: :func:`generate_threads` renders it
as comment records (bodies carry ``[[...]]`` tags read by the stub scorers),
and :func:`generate_cohort` returns the unit records that ingesting those
comments must reproduce, together with the planted ground truth.

Arms follow a multinomial logit in standardized confounders; the engagement
outcome follows a random-intercept logistic model whose treatment
coefficients are calibrated so that the g-computation ATEs over the cohort
(random intercepts at zero) equal the requested values.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import optimize, special

from .ingest import (DAY, Arm, Comment, CovariateVector, NewcomerEvent,
                     UnitRecord)
from .scorers import Scorers

HOUR = 3600
VOCAB = (
    "forum", "people", "thread", "policy", "history", "country", "money", "school",
    "music", "movie", "game", "city", "family", "work", "science", "news",
    "sport", "food", "travel", "health", "media", "law", "market", "culture",
)
ELSEWHERE = "elsewhere"


class SpecError(ValueError):
    pass


def _pairs(d):
    return tuple(sorted((str(k), tuple(v) if isinstance(v, (list, tuple)) else float(v))
                        for k, v in dict(d).items()))


_MAPPING_FIELDS = ("arm_coefs", "hate_reply_coefs", "outcome_coefs", "toxicity_beta")


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    n_clusters: int = 10
    units_per_cluster: int = 500
    decoy_fraction: float = 0.1
    regulars_per_cluster: int = 40
    span_days: int = 365
    # arm model: multinomial logit vs NoReply, on standardized confounders
    arm_intercepts: tuple = (-0.81, -0.25)          # (Counterspeech, OtherReply)
    arm_coefs: tuple = _pairs({
        "score": (0.25, 0.15), "sentiment": (-0.2, -0.05), "nest_level": (0.15, 0.1),
        "thread_unique_commenters": (0.1, 0.0), "prior_submissions": (-0.1, 0.0),
        "relative_timestamp": (0.0, -0.1)})
    hate_reply_intercept: float = -0.7
    hate_reply_coefs: tuple = _pairs({"sentiment": -0.4, "score": 0.2})
    # outcome model
    outcome_intercept: float = 0.0
    outcome_coefs: tuple = _pairs({
        "score": 0.5, "sentiment": -0.4, "nest_level": 0.3, "relative_timestamp": 0.2,
        "prior_submissions": -0.2})
    ate_counterspeech: float = -0.02
    ate_hate_reply: float = 0.03
    toxicity_coef: float = -0.3
    interaction_coef: float = 0.0
    effect_mode: str = "all"                        # or "nontoxic-only"
    nontoxic_threshold: float = 0.7
    sigma2: float = 0.25
    # reply toxicity: Beta(a, b) per reply class
    toxicity_beta: tuple = _pairs({"counterspeech": (2.0, 4.0), "hate": (5.0, 2.0),
                                   "other": (1.5, 5.0)})
    followup_rate: float = 1.2
    followup_slope: float = 3.0

    def __post_init__(self):
        # mapping-valued fields are stored as sorted pairs so specs hash and compare
        for k in _MAPPING_FIELDS:
            v = getattr(self, k)
            if isinstance(v, dict):
                object.__setattr__(self, k, _pairs(v))
        self.validate()

    def validate(self):
        if not isinstance(self.seed, int):
            raise SpecError("seed must be an integer")
        if self.n_clusters < 1 or self.units_per_cluster < 1:
            raise SpecError("need at least one cluster and one unit")
        if not 0 <= self.decoy_fraction <= 1:
            raise SpecError("decoy_fraction must be in [0, 1]")
        if self.regulars_per_cluster < 2:
            raise SpecError("need at least two regulars per cluster")
        if self.sigma2 < 0:
            raise SpecError("sigma2 must be >= 0")
        if self.effect_mode not in ("all", "nontoxic-only"):
            raise SpecError(f"unknown effect_mode {self.effect_mode!r}")
        for a in (self.ate_counterspeech, self.ate_hate_reply):
            if not -0.5 < a < 0.5:
                raise SpecError("planted ATEs must lie in (-0.5, 0.5)")
        for _, (a, b) in self.toxicity_beta:
            if a <= 0 or b <= 0:
                raise SpecError("Beta parameters must be positive")
        if self.span_days < 90:
            raise SpecError("span_days must be >= 90")
        if not 0 < self.nontoxic_threshold < 1:
            raise SpecError("nontoxic_threshold must be in (0, 1)")

    @property
    def cluster_names(self):
        return [f"sub{c:02d}" for c in range(self.n_clusters)]

    def to_dict(self):
        d = asdict(self)
        for k in _MAPPING_FIELDS:
            d[k] = {a: (list(b) if isinstance(b, tuple) else b) for a, b in getattr(self, k)}
        d["arm_intercepts"] = list(self.arm_intercepts)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec field(s): {', '.join(sorted(unknown))}")
        if "seed" not in d:
            raise SpecError("seed is mandatory")
        kw = dict(d)
        if "arm_intercepts" in kw:
            kw["arm_intercepts"] = tuple(kw["arm_intercepts"])
        return cls(**kw)


@dataclass
class GroundTruth:
    coefficients: dict
    ate: dict
    sigma2: float
    cluster_effects: dict
    arm_counts: dict
    n_units: int
    standardization: dict
    spec: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class _Plan:
    comments: list
    units: list
    truth: GroundTruth
    gold: dict


def _fmt(x):
    return repr(float(x))


class _Words:
    """Buffered stream of vocabulary draws (scalar draws are slow)."""

    def __init__(self, rng, chunk=65536):
        self.rng = rng
        self.chunk = chunk
        self.buf = []
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            self.buf = self.buf[self.pos:] + [
                VOCAB[k] for k in self.rng.integers(0, len(VOCAB), size=self.chunk).tolist()]
            self.pos = 0
        self.pos += n
        return self.buf[self.pos - n:self.pos]


def _body(words, tags, n_words=6):
    words = " ".join(words.take(n_words))
    tag = ";".join(f"{k}={v}" for k, v in tags.items())
    return f"{words} [[{tag}]]"


def _tox(rng, ab):
    x = float(rng.beta(*ab))
    return float(f"{min(max(x, 1e-6), 1 - 1e-6):.6f}")


class _Ids:
    def __init__(self, prefix):
        self.prefix = prefix
        self.k = 0

    def __call__(self):
        self.k += 1
        return f"{self.prefix}{self.k:06d}"


def _draw_newcomer(rng, spec):
    d = int(rng.choice([1, 2, 3], p=[0.5, 0.3, 0.2]))
    sent = float(f"{float(np.clip(rng.normal(-0.2, 0.4), -1, 1)):.4f}")
    score = int(round(rng.normal(3.0, 4.0)))
    rel = float(rng.uniform(0.03, 0.85))
    T = int(rng.poisson(3.0)) + (1 if d >= 2 else 0)
    R = (d - 1) + int(rng.poisson(2.5))
    if R and not T:
        T = 1
    UT = T - int(rng.binomial(max(T - 1, 0), 0.15)) if T else 0
    UT = min(UT, spec.regulars_per_cluster)
    E = min(int(rng.binomial(R, 0.7)), spec.regulars_per_cluster - UT)
    act = float(rng.gamma(1.5, 2.0))
    n_com = int(rng.poisson(2.0 * act))
    n_sub = int(rng.poisson(0.4 * act))
    n_thr = n_com - int(rng.binomial(n_com, 0.1)) if n_com else 0
    n_thr = max(n_thr, 1) if n_com else 0
    return {"nest": d, "sent": sent, "score": score, "rel": rel, "T": T, "R": R, "UT": UT,
            "E": E, "n_com": n_com, "n_sub": n_sub, "n_thr": n_thr}


def _ate(beta, Z, cs, hate, tox, spec, which):
    """Planted g-computation ATE (random intercepts at zero)."""
    b_cs, b_h = beta
    lin = (spec.outcome_intercept + Z
           + spec.toxicity_coef * tox)

    def eta(c, h):
        eff = c if spec.effect_mode == "all" else c * (tox <= spec.nontoxic_threshold)
        return lin + b_cs * eff + b_h * h + spec.interaction_coef * tox * c

    if which == "counterspeech":
        return float(np.mean(special.expit(eta(1.0, hate)) - special.expit(eta(0.0, hate))))
    return float(np.mean(special.expit(eta(cs, 1.0)) - special.expit(eta(cs, 0.0))))


def _calibrate(Z, cs, hate, tox, spec):
    beta = [0.0, 0.0]
    targets = (spec.ate_counterspeech, spec.ate_hate_reply)
    names = ("counterspeech", "hate_reply")
    for _ in range(50):
        old = list(beta)
        for k in (0, 1):
            def f(b, k=k):
                bb = list(beta)
                bb[k] = b
                return _ate(bb, Z, cs, hate, tox, spec, names[k]) - targets[k]
            beta[k] = optimize.brentq(f, -20.0, 20.0, xtol=1e-14, rtol=1e-14)
        if max(abs(a - b) for a, b in zip(beta, old)) < 1e-13:
            break
    return beta


def _build_plan(spec):
    rng = np.random.default_rng(spec.seed)
    scorers = Scorers.stubs()
    span = spec.span_days * DAY
    comments = []
    clusters = spec.cluster_names
    per_cluster = []

    # pass 1: latent confounders for every newcomer
    for c, name in enumerate(clusters):
        n_hate = spec.units_per_cluster
        n_decoy = int(round(spec.decoy_fraction * n_hate))
        kinds = np.array([True] * n_hate + [False] * n_decoy)
        rng.shuffle(kinds)
        rows = [dict(_draw_newcomer(rng, spec), hate=bool(h)) for h in kinds]
        per_cluster.append(rows)

    flat = [r for rows in per_cluster for r in rows]
    raw = {
        "score": np.array([r["score"] for r in flat], float),
        "sentiment": np.array([r["sent"] for r in flat], float),
        "nest_level": np.array([r["nest"] for r in flat], float),
        "relative_timestamp": np.array([r["rel"] for r in flat], float),
        "thread_unique_commenters": np.array([r["UT"] + r["E"] for r in flat], float),
        "prior_submissions": np.array([r["n_sub"] for r in flat], float),
    }
    stdz = {k: (float(v.mean()), float(v.std()) or 1.0) for k, v in raw.items()}
    z = {k: (v - stdz[k][0]) / stdz[k][1] for k, v in raw.items()}

    # arms and reply classes
    arm_coefs = dict(spec.arm_coefs)
    zero = np.zeros(len(flat))
    lin_cs = spec.arm_intercepts[0] + sum((b[0] * z[k] for k, b in arm_coefs.items()), zero)
    lin_ot = spec.arm_intercepts[1] + sum((b[1] * z[k] for k, b in arm_coefs.items()), zero)
    probs = special.softmax(np.column_stack([np.zeros(len(flat)), lin_cs, lin_ot]), axis=1)
    hate_lin = spec.hate_reply_intercept + sum((b * z[k] for k, b in spec.hate_reply_coefs), zero)
    tox_ab = dict(spec.toxicity_beta)
    for i, r in enumerate(flat):
        arm = int(rng.choice(3, p=probs[i]))
        r["arm"] = arm
        r["hate_reply"] = bool(arm == 2 and rng.uniform() < special.expit(hate_lin[i]))
        if arm == 0:
            r["tox"] = None
        else:
            cls = "counterspeech" if arm == 1 else ("hate" if r["hate_reply"] else "other")
            r["tox"] = _tox(rng, tox_ab[cls])

    # outcome model, calibrated on the hate-speech cohort
    hate_mask = np.array([r["hate"] for r in flat])
    Zout = sum((b * z[k] for k, b in spec.outcome_coefs), zero)
    cs = np.array([1.0 if r["arm"] == 1 else 0.0 for r in flat])
    hr = np.array([1.0 if r["hate_reply"] else 0.0 for r in flat])
    tox = np.array([0.0 if r["tox"] is None else r["tox"] for r in flat])
    b_cs, b_h = _calibrate(Zout[hate_mask], cs[hate_mask], hr[hate_mask], tox[hate_mask], spec)
    u = rng.normal(0.0, math.sqrt(spec.sigma2), len(clusters)) if spec.sigma2 > 0 else np.zeros(len(clusters))
    cl_index = np.repeat(np.arange(len(clusters)), [len(rows) for rows in per_cluster])
    eff = cs if spec.effect_mode == "all" else cs * (tox <= spec.nontoxic_threshold)
    eta = (spec.outcome_intercept + Zout + b_cs * eff + b_h * hr + spec.toxicity_coef * tox
           + spec.interaction_coef * tox * cs + u[cl_index])
    engaged = rng.uniform(size=len(flat)) < special.expit(eta)
    for i, r in enumerate(flat):
        r["engaged"] = bool(engaged[i])

    # pass 2: render every cluster
    units = []
    gold = {}
    for c, name in enumerate(clusters):
        units.extend(_render_cluster(rng, spec, c, name, per_cluster[c], comments, scorers, span,
                                     gold))

    comments.sort(key=lambda x: (x.created_utc, x.id))
    units.sort(key=lambda x: (x.event.subreddit, x.event.created_utc, x.event.comment_id))
    truth_ate = {
        "counterspeech": _ate((b_cs, b_h), Zout[hate_mask], cs[hate_mask], hr[hate_mask],
                              tox[hate_mask], spec, "counterspeech"),
        "hate_reply": _ate((b_cs, b_h), Zout[hate_mask], cs[hate_mask], hr[hate_mask],
                           tox[hate_mask], spec, "hate_reply"),
    }
    counts = {a.label: 0 for a in Arm}
    for un in units:
        counts[un.arm.label] += 1
    coefs = {"const": spec.outcome_intercept, "counterspeech": b_cs, "hate_reply": b_h,
             "reply_toxicity": spec.toxicity_coef,
             "toxicity_x_counterspeech": spec.interaction_coef}
    coefs.update({f"z_{k}": float(b) for k, b in spec.outcome_coefs})
    truth = GroundTruth(coefs, truth_ate, spec.sigma2,
                        {n: float(v) for n, v in zip(clusters, u)}, counts, len(units),
                        {k: list(v) for k, v in stdz.items()}, spec.to_dict())
    return _Plan(comments, units, truth, gold)


def _render_cluster(rng, spec, c, name, rows, comments, scorers, span, gold):
    S0 = 1_600_000_000 + c * 10 * DAY
    ids = _Ids(f"{name}_")
    words = _Words(np.random.default_rng(rng.integers(2 ** 63)))
    regulars = [f"r{c:02d}_{j:03d}" for j in range(spec.regulars_per_cluster)]

    def add(**kw):
        cm = Comment(subreddit=name, **kw)
        comments.append(cm)
        return cm

    # chatter threads; the first opens the subreddit and hosts introductions
    n_chatter = 60
    chatter = []
    for j in range(n_chatter):
        sid = ids()
        t = S0 + (j * span) // n_chatter
        add(id=sid, author=regulars[j % len(regulars)], body=_body(words, {"votes": "ot5"}),
            score=int(rng.integers(0, 20)), created_utc=t, link_id=sid, is_submission=True)
        chatter.append((t, sid))
    for j, r in enumerate(regulars):
        add(id=ids(), author=r, body=_body(words, {"votes": "ot5", "sent": "0.1"}), score=1,
            created_utc=S0 + 60 * (j + 1), link_id=chatter[0][1], parent_id=chatter[0][1],
            is_submission=False)
    sid = ids()
    add(id=sid, author=regulars[0], body=_body(words, {"votes": "ot5"}), score=1,
        created_utc=S0 + span, link_id=sid, is_submission=True)
    chatter_t = np.array([t for t, _ in chatter])

    units = []
    for i, r in enumerate(rows):
        author = f"n{c:02d}_{i:05d}"
        t_ev = S0 + int(r["rel"] * span)
        # history elsewhere, strictly before the event
        hist_net = 0
        hist_threads = set()
        for k in range(r["n_com"]):
            th = k if k < r["n_thr"] else int(rng.integers(0, r["n_thr"]))
            link = f"x_{author}_t{th}"
            sc = int(round(rng.normal(2.0, 3.0)))
            hist_net += sc
            hist_threads.add(link)
            comments.append(Comment(f"x_{author}_c{k}", author, ELSEWHERE,
                                    _body(words, {"votes": "ot5"}), sc,
                                    t_ev - int(rng.integers(60, 200 * DAY)), link, False, link))
        for k in range(r["n_sub"]):
            sc = int(round(rng.normal(2.0, 3.0)))
            hist_net += sc
            sid_x = f"x_{author}_s{k}"
            hist_threads.add(sid_x)
            comments.append(Comment(sid_x, author, ELSEWHERE, _body(words, {"votes": "ot5"}), sc,
                                    t_ev - int(rng.integers(60, 200 * DAY)), sid_x, True, None))

        # the newcomer's own thread: submission, then prior activity
        n_prior = r["T"] + r["R"]
        gaps = np.sort(rng.choice(np.arange(60, 6 * HOUR), size=n_prior + 1, replace=False))[::-1]
        times = [t_ev - int(g) for g in gaps]           # increasing
        sub_id = ids()
        add(id=sub_id, author=regulars[int(rng.integers(len(regulars)))],
            body=_body(words, {"votes": "ot5"}), score=int(rng.integers(0, 50)),
            created_utc=times[0], link_id=sub_id, is_submission=True)
        pool = list(rng.permutation(regulars))
        top_auth = pool[:r["UT"]]
        extra_auth = pool[r["UT"]:r["UT"] + r["E"]]
        # creation order: chain first (top-level then replies), then the rest
        order = []
        if r["nest"] >= 2:
            order.append("top")
            order.extend(["chain"] * (r["nest"] - 2))
        rest = ["top"] * (r["T"] - (1 if r["nest"] >= 2 else 0)) + \
               ["reply"] * (r["R"] - max(r["nest"] - 2, 0))
        rest = list(rng.permutation(rest)) if rest else []
        # a reply needs an earlier comment to answer
        if rest and rest[0] == "reply" and not order:
            k = rest.index("top") if "top" in rest else None
            if k is not None:
                rest[0], rest[k] = rest[k], rest[0]
        order.extend(rest)
        made = []
        chain_end = None
        n_top = n_rep = 0
        for k, kind in enumerate(order):
            t = times[k + 1]
            if kind == "top":
                a = top_auth[n_top] if n_top < len(top_auth) else top_auth[int(rng.integers(len(top_auth)))]
                n_top += 1
                parent = sub_id
            else:
                allowed = top_auth + extra_auth
                a = extra_auth[n_rep] if n_rep < len(extra_auth) else allowed[int(rng.integers(len(allowed)))]
                n_rep += 1
                parent = chain_end if kind == "chain" else made[int(rng.integers(len(made)))]
            cid = ids()
            add(id=cid, author=a, body=_body(words, {"votes": "ot5"}), score=int(rng.integers(0, 10)),
                created_utc=t, link_id=sub_id, parent_id=parent, is_submission=False)
            made.append(cid)
            if k == 0 and r["nest"] >= 2:
                chain_end = cid
            elif kind == "chain":
                chain_end = cid
        parent = chain_end if r["nest"] >= 2 else sub_id

        # the newcomer comment
        if r["hate"]:
            votes = "hs5" if rng.uniform() < 0.6 else "hs4,ot1"
        else:
            votes = "ot5" if rng.uniform() < 0.5 else "hs3,ot2"
        nc_id = ids()
        body = _body(words, {"votes": votes, "sent": _fmt(r["sent"])})
        add(id=nc_id, author=author, body=body, score=r["score"], created_utc=t_ev,
            link_id=sub_id, parent_id=parent, is_submission=False)
        gold[nc_id] = "HateSpeech" if r["hate"] else "Other"

        # replies
        first_reply = None
        if r["arm"] != 0:
            if r["arm"] == 1:
                rv = "cs5" if rng.uniform() < 0.6 else "cs4,ot1"
            elif r["hate_reply"]:
                rv = "hs5" if rng.uniform() < 0.6 else "hs4,ot1"
            else:
                rv = ("ot5", "ot4,hs1", "ot3,cs2")[int(rng.integers(3))]
            t_r = t_ev + int(rng.integers(60, 3 * DAY))
            first_reply = ids()
            gold[first_reply] = ("Counterspeech" if r["arm"] == 1 else
                                 "HateSpeech" if r["hate_reply"] else "Other")
            add(id=first_reply, author=regulars[int(rng.integers(len(regulars)))],
                body=_body(words, {"votes": rv, "tox": _fmt(r["tox"])}),
                score=int(rng.integers(-5, 20)), created_utc=t_r, link_id=sub_id,
                parent_id=nc_id, is_submission=False)
            for _ in range(int(rng.integers(0, 3))):
                add(id=ids(), author=regulars[int(rng.integers(len(regulars)))],
                    body=_body(words, {"votes": "ot5"}), score=1,
                    created_utc=t_r + int(rng.integers(60, 2 * DAY)), link_id=sub_id,
                    parent_id=nc_id, is_submission=False)
            mean = special.expit(-1.5 + spec.followup_slope * r["tox"])
            for _ in range(int(rng.poisson(spec.followup_rate))):
                ft = _tox(rng, (1.0 + 4.0 * mean, 1.0 + 4.0 * (1.0 - mean)))
                add(id=ids(), author=regulars[int(rng.integers(len(regulars)))],
                    body=_body(words, {"votes": "ot5", "tox": _fmt(ft)}), score=1,
                    created_utc=t_r + int(rng.integers(60, 2 * DAY)), link_id=sub_id,
                    parent_id=first_reply, is_submission=False)
        if rng.uniform() < 0.2:
            add(id=ids(), author=author, body=_body(words, {"votes": "ot5"}), score=1,
                created_utc=t_ev + int(rng.integers(3 * DAY + 60, 6 * DAY)), link_id=sub_id,
                parent_id=sub_id, is_submission=False)

        # engagement outside the thread
        count = 0
        if r["engaged"]:
            want = 1 + int(rng.poisson(1.0))
            used = set()
            for _ in range(want):
                t = t_ev + int(rng.integers(HOUR, 28 * DAY - HOUR))
                open_ = [j for j in range(int(np.searchsorted(chatter_t, t))) if j not in used]
                if not open_:
                    continue
                j = open_[int(rng.integers(len(open_)))]
                used.add(j)
                add(id=ids(), author=author, body=_body(words, {"votes": "ot5"}), score=1,
                    created_utc=t, link_id=chatter[j][1], parent_id=chatter[j][1],
                    is_submission=False)
            count = len(used)
            if rng.uniform() < 0.3:
                t = t_ev + int(rng.integers(28 * DAY + HOUR, 45 * DAY))
                open_ = [j for j in range(int(np.searchsorted(chatter_t, t))) if j not in used]
                j = open_[int(rng.integers(len(open_)))]
                add(id=ids(), author=author, body=_body(words, {"votes": "ot5"}), score=1,
                    created_utc=t, link_id=chatter[j][1], parent_id=chatter[j][1],
                    is_submission=False)
            if count == 0:
                # no open chatter thread in the window: post after it instead
                t = t_ev + int(rng.integers(28 * DAY + HOUR, 45 * DAY))
                j = int(np.searchsorted(chatter_t, t)) - 1
                add(id=ids(), author=author, body=_body(words, {"votes": "ot5"}), score=1,
                    created_utc=t, link_id=chatter[j][1], parent_id=chatter[j][1],
                    is_submission=False)

        if not r["hate"]:
            continue
        emb = scorers.embed_text(body, item_id=nc_id)
        cov = CovariateVector(
            tuple(np.asarray(emb, dtype=np.float64).tolist()), r["nest"], float(scorers.score_sentiment(body, nc_id)),
            r["score"], float((t_ev - S0) / span),
            r["T"] + r["R"], r["UT"] + r["E"], r["T"], r["UT"],
            r["n_com"], r["n_sub"], len(hist_threads), hist_net)
        ev = NewcomerEvent(nc_id, author, name, 1, first_reply, t_ev, sub_id)
        units.append(UnitRecord(ev, cov, Arm(r["arm"]), r["hate_reply"], r["tox"],
                                r["engaged"], count, name))
    return units


_CACHE = {}


def _plan(spec):
    key = json.dumps(spec.to_dict(), sort_keys=True)
    if key not in _CACHE:
        _CACHE.clear()
        _CACHE[key] = _build_plan(spec)
    return _CACHE[key]


def generate_cohort(spec):
    """(unit records, ground truth) for the hate-speech newcomers of ``spec``."""
    p = _plan(spec)
    return list(p.units), p.truth


def generate_threads(spec):
    """Comment records (sorted by time, then id) realizing ``spec``."""
    return list(_plan(spec).comments)


def generate_gold(spec):
    """Intended class of every newcomer comment and first reply, by id."""
    return dict(sorted(_plan(spec).gold.items()))
