"""Threaded-comment corpora: loading, reply trees and cohort construction.

A *newcomer event* is the ``ordinal``-th comment an author makes in a
subreddit. Each event becomes a :class:`UnitRecord` holding its confounders,
its treatment arm (no reply, counterspeech reply, other reply) and its
outcomes. Every confounder is computed from data timestamped strictly before
the event, except ``relative_timestamp``, which uses the subreddit's
observation window (corpus-level metadata supplied through ``spans``).
"""
from __future__ import annotations

import bisect
import enum
import io
import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .labeler import ConfidenceRecord, LabelClass, LabelPair, as_label

log = logging.getLogger(__name__)

DAY = 86400
DEFAULT_WINDOW = 28 * DAY
DELETED_BODIES = frozenset({"", "[deleted]", "[removed]"})
_REQUIRED = ("id", "author", "subreddit", "body", "score", "created_utc", "link_id",
             "is_submission")

SCALAR_NAMES = (
    "nest_level", "sentiment", "score", "relative_timestamp",
    "thread_comments", "thread_unique_commenters", "thread_toplevel_comments",
    "thread_unique_toplevel_commenters",
    "prior_comments", "prior_submissions", "prior_unique_threads", "prior_net_score",
)


class CorpusParseError(ValueError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CorpusIntegrityError(ValueError):
    pass


class DanglingParentError(LookupError):
    pass


class MissingLabelError(LookupError):
    pass


class UndefinedPercentileError(ValueError):
    pass


class Arm(enum.IntEnum):
    NO_REPLY = 0
    COUNTERSPEECH = 1
    OTHER_REPLY = 2

    @property
    def label(self):
        return ("NoReply", "Counterspeech", "OtherReply")[self.value]

    @classmethod
    def parse(cls, v):
        if isinstance(v, cls):
            return v
        if isinstance(v, int):
            return cls(v)
        return {"NoReply": cls.NO_REPLY, "Counterspeech": cls.COUNTERSPEECH,
                "OtherReply": cls.OTHER_REPLY}[v]


@dataclass(frozen=True, slots=True)
class Comment:
    id: str
    author: str
    subreddit: str
    body: str
    score: int
    created_utc: int
    link_id: str
    is_submission: bool
    parent_id: str | None = None

    def to_dict(self):
        return {"id": self.id, "author": self.author, "subreddit": self.subreddit,
                "body": self.body, "score": self.score, "created_utc": self.created_utc,
                "parent_id": self.parent_id, "link_id": self.link_id,
                "is_submission": self.is_submission}


def _comment_from_record(rec, line_no):
    if not isinstance(rec, dict):
        raise CorpusParseError(line_no, "record is not an object")
    missing = [k for k in _REQUIRED if k not in rec or rec[k] is None]
    if missing:
        raise CorpusParseError(line_no, f"missing field(s) {', '.join(missing)}")
    try:
        created = int(rec["created_utc"])
        score = int(rec["score"])
    except (TypeError, ValueError) as exc:
        raise CorpusParseError(line_no, f"bad numeric field: {exc}") from exc
    if created < 0:
        raise CorpusParseError(line_no, "created_utc must be >= 0")
    is_sub = bool(rec["is_submission"])
    parent = rec.get("parent_id") or None
    if is_sub == (parent is not None):
        raise CorpusParseError(line_no, "parent_id must be absent exactly for submissions")
    return Comment(str(rec["id"]), str(rec["author"]), str(rec["subreddit"]),
                   str(rec["body"]), score, created, str(rec["link_id"]), is_sub,
                   None if parent is None else str(parent))


def load_comments(source):
    """Read line-delimited JSON records (bytes or text stream, or a path)."""
    if hasattr(source, "read"):
        stream = source
    elif isinstance(source, bytes):
        stream = source = io.BytesIO(source)
    else:
        stream = open(source, "rb")
    out = []
    seen = set()
    try:
        for line_no, raw in enumerate(stream, start=1):
            if isinstance(raw, bytes):
                raw = raw.decode("utf-8")
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(line_no, f"invalid JSON: {exc.msg}") from exc
            c = _comment_from_record(rec, line_no)
            if c.id in seen:
                raise CorpusIntegrityError(f"duplicate id {c.id!r} at line {line_no}")
            seen.add(c.id)
            out.append(c)
    finally:
        if stream is not source:
            stream.close()
    return out


def dump_comments(comments, fh):
    for c in comments:
        fh.write(json.dumps(c.to_dict(), sort_keys=True) + "\n")


def comments_to_bytes(comments):
    buf = io.StringIO()
    dump_comments(comments, buf)
    return buf.getvalue().encode("utf-8")


@dataclass
class ThreadIndex:
    children: dict      # id -> [reply ids] ordered by (created_utc, id)
    root: dict          # id -> thread root id
    depth: dict         # id -> nest level; submissions 0, top-level comments 1
    by_id: dict
    dropped: list = field(default_factory=list)


def build_thread_index(comments, strict=False):
    """Reply tree over ``comments``.

    A comment whose ``parent_id`` equals its ``link_id`` is top-level even
    when the submission itself is absent. Comments whose parent cannot be
    found are dropped together with their replies (with a warning), or raise
    :class:`DanglingParentError` under ``strict``.
    """
    by_id = {c.id: c for c in comments}
    kids = defaultdict(list)
    for c in comments:
        if not c.is_submission:
            kids[c.parent_id].append(c)
    depth, root = {}, {}
    stack = []
    for c in comments:
        if c.is_submission:
            depth[c.id], root[c.id] = 0, c.id
            stack.append(c.id)
        elif c.parent_id == c.link_id and c.link_id not in by_id:
            depth[c.id], root[c.id] = 1, c.link_id
            stack.append(c.id)
    while stack:
        pid = stack.pop()
        for ch in kids.get(pid, ()):
            if ch.id not in depth:
                depth[ch.id] = depth[pid] + 1
                root[ch.id] = root[pid]
                stack.append(ch.id)
    dropped = [c.id for c in comments if c.id not in depth]
    if dropped:
        if strict:
            first = by_id[dropped[0]]
            raise DanglingParentError(
                f"comment {first.id!r} references unknown parent {first.parent_id!r}")
        warnings.warn(f"dropping {len(dropped)} comment(s) with unreachable parents",
                      RuntimeWarning, stacklevel=2)
    children = {}
    for pid, lst in kids.items():
        if pid in depth:
            kept = sorted((c for c in lst if c.id in depth), key=lambda c: (c.created_utc, c.id))
            children[pid] = [c.id for c in kept]
    return ThreadIndex(children, root, depth, {k: by_id[k] for k in depth}, dropped)


@dataclass(frozen=True)
class SubredditSpan:
    start: int
    end: int


class Corpus:
    """Indexed view of a comment list used by cohort construction."""

    def __init__(self, comments, strict=False, spans=None, index=None):
        self.comments = list(comments)
        self.index = index if index is not None else build_thread_index(self.comments, strict)
        self.by_id = self.index.by_id
        live = [c for c in self.comments if c.id in self.by_id]
        self.threads = defaultdict(list)        # root -> [(t, id, author, depth)] comments only
        self.user_sub = defaultdict(list)       # (author, subreddit) -> posts (any kind)
        self.user_all = defaultdict(list)       # author -> posts (any kind)
        first, last = {}, {}
        for c in live:
            key = (c.created_utc, c.id)
            if not c.is_submission:
                self.threads[self.index.root[c.id]].append(
                    (c.created_utc, c.id, c.author, self.index.depth[c.id]))
            self.user_sub[(c.author, c.subreddit)].append(c)
            self.user_all[c.author].append(c)
            s = c.subreddit
            if s not in first or key < first[s]:
                first[s] = key
            if s not in last or key > last[s]:
                last[s] = key
        for lst in self.threads.values():
            lst.sort()
        for d in (self.user_sub, self.user_all):
            for lst in d.values():
                lst.sort(key=lambda c: (c.created_utc, c.id))
        self._user_all_times = {a: [c.created_utc for c in lst] for a, lst in self.user_all.items()}
        self.spans = {s: SubredditSpan(first[s][0], last[s][0]) for s in first}
        if spans:
            self.spans.update(spans)

    @property
    def subreddits(self):
        return sorted(self.spans)

    def truncated(self, t):
        """Corpus of records strictly before ``t``, keeping this corpus' spans."""
        return Corpus([c for c in self.comments if c.created_utc < t], spans=self.spans)


@dataclass(frozen=True)
class NewcomerEvent:
    comment_id: str
    author: str
    subreddit: str
    ordinal: int
    first_reply_id: str | None
    created_utc: int
    link_id: str

    def to_dict(self):
        return {"comment_id": self.comment_id, "author": self.author,
                "subreddit": self.subreddit, "ordinal": self.ordinal,
                "first_reply_id": self.first_reply_id, "created_utc": self.created_utc,
                "link_id": self.link_id}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def first_reply(corpus, comment_id):
    """Earliest direct reply (ties broken by id)."""
    kids = corpus.index.children.get(comment_id)
    return kids[0] if kids else None


def extract_newcomers(corpus, ordinal=1, label_filter=None, labels=None, subreddits=None,
                      excluded_authors=("[deleted]",)):
    """One event per (author, subreddit) whose ``ordinal``-th comment exists.

    ``label_filter`` is ``(class, threshold)``; with it only events whose
    comment's newcomer-role confidence for ``class`` reaches ``threshold``
    are kept (``labels`` maps comment id to :class:`ConfidenceRecord`).
    Events come back sorted by subreddit, time and id.
    """
    if ordinal < 1:
        raise ValueError("ordinal must be >= 1")
    if label_filter is not None and labels is None:
        raise ValueError("label_filter needs labels")
    wanted = None if subreddits is None else set(subreddits)
    skip = set(excluded_authors)
    events = []
    for (author, sub), posts in corpus.user_sub.items():
        if author in skip or (wanted is not None and sub not in wanted):
            continue
        comments = [c for c in posts if not c.is_submission]
        if len(comments) < ordinal:
            continue
        c = comments[ordinal - 1]
        if label_filter is not None:
            cls, thr = label_filter
            rec = labels.get(c.id)
            if rec is None or rec.conf(cls) < thr:
                continue
        events.append(NewcomerEvent(c.id, author, sub, ordinal, first_reply(corpus, c.id),
                                    c.created_utc, c.link_id))
    events.sort(key=lambda e: (e.subreddit, e.created_utc, e.comment_id))
    return events


@dataclass(frozen=True)
class CovariateVector:
    embedding: tuple
    nest_level: int
    sentiment: float
    score: int
    relative_timestamp: float
    thread_comments: int
    thread_unique_commenters: int
    thread_toplevel_comments: int
    thread_unique_toplevel_commenters: int
    prior_comments: int
    prior_submissions: int
    prior_unique_threads: int
    prior_net_score: int

    def scalars(self):
        return np.array([getattr(self, n) for n in SCALAR_NAMES], dtype=np.float64)

    def to_dict(self):
        d = {n: getattr(self, n) for n in SCALAR_NAMES}
        d["embedding"] = list(self.embedding)
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {n: d[n] for n in SCALAR_NAMES}
        return cls(embedding=tuple(float(x) for x in d["embedding"]), **kw)


def thread_activity(corpus, event):
    """(comments, unique commenters, top-level comments, unique top-level
    commenters) in the event's thread strictly before the event."""
    root = corpus.index.root[event.comment_id]
    lst = corpus.threads.get(root, [])
    k = bisect.bisect_left(lst, (event.created_utc,))
    prior = lst[:k]
    top = [p for p in prior if p[3] == 1]
    return (len(prior), len({p[2] for p in prior}), len(top), len({p[2] for p in top}))


class HistoryStore:
    """Per-author activity outside the event's subreddit, before the event.

    Built from the corpus by default; ``extra`` adds records (e.g. a separate
    history dump) that are not part of the corpus.
    """

    def __init__(self, corpus, extra=()):
        self._posts = defaultdict(list)
        for a, lst in corpus.user_all.items():
            self._posts[a].extend(lst)
        for c in extra:
            self._posts[c.author].append(c)
        for lst in self._posts.values():
            lst.sort(key=lambda c: (c.created_utc, c.id))
        self._times = {a: [c.created_utc for c in lst] for a, lst in self._posts.items()}

    def prior(self, author, before, exclude_subreddit):
        lst = self._posts.get(author, [])
        k = bisect.bisect_left(self._times.get(author, []), before)
        recs = [c for c in lst[:k] if c.subreddit != exclude_subreddit]
        n_com = sum(1 for c in recs if not c.is_submission)
        n_sub = len(recs) - n_com
        return n_com, n_sub, len({c.link_id for c in recs}), int(sum(c.score for c in recs))


def compute_covariates(event, corpus, history, scorers):
    """The thirteen confounders of one newcomer event."""
    c = corpus.by_id[event.comment_id]
    try:
        emb = scorers.embed_text(c.body, item_id=c.id)
        sent = scorers.score_sentiment(c.body, item_id=c.id)
    except Exception as exc:
        if getattr(exc, "item_id", None) in (None, ""):
            try:
                exc.item_id = c.id
            except AttributeError:
                pass
        raise
    span = corpus.spans[event.subreddit]
    width = span.end - span.start
    rel = (c.created_utc - span.start) / width if width > 0 else 0.0
    thread = thread_activity(corpus, event)
    prior = history.prior(event.author, c.created_utc, event.subreddit)
    return CovariateVector(tuple(np.asarray(emb, dtype=np.float64).tolist()), corpus.index.depth[c.id], float(sent),
                           int(c.score), float(rel), *thread, *prior)


def assign_treatment(event, reply_labels, cs_threshold=0.8, hs_threshold=0.8):
    """Arm of an event from the ensemble confidences of its first reply."""
    if event.first_reply_id is None:
        return Arm.NO_REPLY, False
    rec = reply_labels.get(event.first_reply_id)
    if rec is None:
        raise MissingLabelError(f"first reply {event.first_reply_id!r} has no label")
    if rec.conf(LabelClass.COUNTERSPEECH) >= cs_threshold:
        return Arm.COUNTERSPEECH, False
    return Arm.OTHER_REPLY, rec.conf(LabelClass.HATE_SPEECH) >= hs_threshold


def compute_outcome(event, corpus, window=DEFAULT_WINDOW, censor_at=None):
    """(engaged, thread_count) for an event.

    ``engaged``: the author posts again in the subreddit outside the event's
    thread (up to ``censor_at`` if given). ``thread_count``: distinct other
    threads posted in within ``window`` seconds after the event.
    """
    posts = corpus.user_sub.get((event.author, event.subreddit), [])
    root = corpus.index.root.get(event.comment_id, event.link_id)
    engaged = False
    threads = set()
    for p in posts:
        if p.created_utc <= event.created_utc or p.id == event.comment_id:
            continue
        if censor_at is not None and p.created_utc > censor_at:
            continue
        proot = corpus.index.root.get(p.id, p.link_id)
        if proot == root:
            continue
        engaged = True
        if window is None or p.created_utc - event.created_utc <= window:
            threads.add(proot)
    return engaged, len(threads)


def return_times(corpus, subreddit):
    """Seconds between each author's first and second post in ``subreddit``."""
    out = []
    for (author, sub), posts in sorted(corpus.user_sub.items()):
        if sub == subreddit and len(posts) >= 2:
            out.append(posts[1].created_utc - posts[0].created_utc)
    return out


def p90_return_time(durations, q=0.9):
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    vals = sorted(durations)
    if not vals:
        raise UndefinedPercentileError("no newcomer posted a second time")
    rank = max(1, math.ceil(q * len(vals) - 1e-12))
    return vals[rank - 1]


@dataclass(frozen=True)
class CensorRule:
    ban_date: int
    p90_return: int

    def __post_init__(self):
        if self.p90_return < 0:
            raise ValueError("p90_return must be >= 0")


@dataclass
class UnitRecord:
    event: NewcomerEvent
    covariates: CovariateVector
    arm: Arm
    hate_reply_flag: bool
    reply_toxicity: float | None
    outcome_engaged: bool
    outcome_thread_count: int
    cluster_id: str

    def __post_init__(self):
        self.arm = Arm.parse(self.arm)
        if (self.arm == Arm.NO_REPLY) != (self.event.first_reply_id is None):
            raise ValueError("arm NoReply iff there is no first reply")
        if (self.reply_toxicity is None) != (self.arm == Arm.NO_REPLY):
            raise ValueError("reply_toxicity must be present iff there is a reply")
        if self.hate_reply_flag and self.arm != Arm.OTHER_REPLY:
            raise ValueError("hate_reply_flag requires arm OtherReply")

    def to_dict(self):
        return {"event": self.event.to_dict(), "covariates": self.covariates.to_dict(),
                "arm": self.arm.label, "hate_reply_flag": self.hate_reply_flag,
                "reply_toxicity": self.reply_toxicity,
                "outcome_engaged": self.outcome_engaged,
                "outcome_thread_count": self.outcome_thread_count,
                "cluster_id": self.cluster_id}

    @classmethod
    def from_dict(cls, d):
        return cls(NewcomerEvent.from_dict(d["event"]),
                   CovariateVector.from_dict(d["covariates"]), Arm.parse(d["arm"]),
                   bool(d["hate_reply_flag"]), d["reply_toxicity"], bool(d["outcome_engaged"]),
                   int(d["outcome_thread_count"]), d["cluster_id"])


def save_cohort(units, fh):
    for u in units:
        fh.write(json.dumps(u.to_dict(), sort_keys=True) + "\n")


def load_cohort(fh):
    return [UnitRecord.from_dict(json.loads(ln)) for ln in fh if ln.strip()]


def apply_censoring(units, rule, corpus=None, window=DEFAULT_WINDOW):
    """Simulated ban: drop units too close to the ban to observe a return.

    Units with event time after ``ban_date - p90_return`` are removed. With
    ``corpus`` supplied, outcomes of the kept units are recomputed ignoring
    posts after the ban.
    """
    cutoff = rule.ban_date - rule.p90_return
    kept = [u for u in units if u.event.created_utc <= cutoff]
    if corpus is None:
        return kept
    out = []
    for u in kept:
        eng, cnt = compute_outcome(u.event, corpus, window=window, censor_at=rule.ban_date)
        out.append(UnitRecord(u.event, u.covariates, u.arm, u.hate_reply_flag,
                              u.reply_toxicity, eng, cnt, u.cluster_id))
    return out


def retention_curve(corpus, subreddit, authors=None):
    """[(n, P(post in an (n+1)-th thread | posted in n), binomial SE), ...]."""
    per_user = defaultdict(set)
    for (author, sub), posts in corpus.user_sub.items():
        if sub != subreddit or (authors is not None and author not in authors):
            continue
        for p in posts:
            per_user[author].add(corpus.index.root.get(p.id, p.link_id))
    counts = np.array([len(v) for v in per_user.values()], dtype=int)
    out = []
    if counts.size == 0:
        return out
    for n in range(1, int(counts.max()) + 1):
        at_n = int(np.sum(counts >= n))
        more = int(np.sum(counts >= n + 1))
        p = more / at_n
        out.append((n, p, math.sqrt(p * (1 - p) / at_n)))
    return out


def counterspeech_pairs(units):
    """Number of hate-speech newcomers answered by counterspeech, per cluster."""
    out = defaultdict(int)
    for u in units:
        out[u.cluster_id] += 0
        if u.arm == Arm.COUNTERSPEECH:
            out[u.cluster_id] += 1
    return dict(out)


def filter_subreddits(units, min_pairs=10):
    """Clusters with strictly more than ``min_pairs`` counterspeech pairs.

    ``min_pairs=0`` keeps every cluster, including those without any pair.
    """
    counts = counterspeech_pairs(units)
    if min_pairs <= 0:
        return sorted(counts)
    return sorted(c for c, n in counts.items() if n > min_pairs)


def candidate_pairs(corpus, ordinal=1, subreddits=None):
    """Prompt inputs for every candidate event (no label filter yet)."""
    out = []
    for ev in extract_newcomers(corpus, ordinal, subreddits=subreddits):
        c = corpus.by_id[ev.comment_id]
        parent = corpus.by_id.get(c.parent_id)
        reply = corpus.by_id[ev.first_reply_id] if ev.first_reply_id else None
        out.append(LabelPair(c.id, parent.body if parent else "", c.body,
                             reply.id if reply else None, reply.body if reply else ""))
    return out


def _is_deleted(text):
    return text.strip() in DELETED_BODIES


def build_cohort(corpus, newcomer_labels, reply_labels, scorers, ordinal=1, cs_threshold=0.8,
                 hs_threshold=0.8, subreddits=None, history=None, window=DEFAULT_WINDOW):
    """Units for hate-speech newcomers, with arms, confounders and outcomes.

    Newcomers are kept when their comment's hate-speech confidence reaches
    ``hs_threshold``. Events whose comment or first reply has a deleted body
    are skipped with a warning.
    """
    if history is None:
        history = HistoryStore(corpus)
    events = extract_newcomers(corpus, ordinal, (LabelClass.HATE_SPEECH, hs_threshold),
                               newcomer_labels, subreddits)
    units = []
    skipped = 0
    for ev in events:
        body = corpus.by_id[ev.comment_id].body
        if _is_deleted(body) or (ev.first_reply_id and _is_deleted(corpus.by_id[ev.first_reply_id].body)):
            skipped += 1
            continue
        cov = compute_covariates(ev, corpus, history, scorers)
        arm, hate = assign_treatment(ev, reply_labels, cs_threshold, hs_threshold)
        tox = None
        if ev.first_reply_id is not None:
            tox = scorers.score_toxicity(corpus.by_id[ev.first_reply_id].body,
                                         item_id=ev.first_reply_id)
        eng, cnt = compute_outcome(ev, corpus, window=window)
        units.append(UnitRecord(ev, cov, arm, hate, tox, eng, cnt, ev.subreddit))
    if skipped:
        warnings.warn(f"skipped {skipped} event(s) with deleted or empty text",
                      RuntimeWarning, stacklevel=2)
    return units


def label_candidates(pairs, scorers, k=5, temperature=1.2, template=None):
    """Ensemble-label candidate pairs into newcomer and reply label maps."""
    from .labeler import ensemble_label, load_prompt_template

    if template is None:
        template = load_prompt_template()
    newcomer, reply = {}, {}
    for p in pairs:
        if _is_deleted(p.newcomer):
            continue
        if p.reply_id is not None and _is_deleted(p.reply):
            p = LabelPair(p.newcomer_id, p.context, p.newcomer)
        rn, rr = ensemble_label(p, scorers, k=k, temperature=temperature, template=template)
        newcomer[p.newcomer_id] = rn
        if rr is not None:
            reply[rr.item_id] = rr
    return newcomer, reply


def save_labels(newcomer, reply, fh):
    for role, store in (("newcomer", newcomer), ("reply", reply)):
        for k in sorted(store):
            fh.write(json.dumps(store[k].to_dict(role=role), sort_keys=True) + "\n")


def load_labels(fh):
    newcomer, reply = {}, {}
    for ln in fh:
        if not ln.strip():
            continue
        d = json.loads(ln)
        rec = ConfidenceRecord.from_dict(d)
        (newcomer if d.get("role") == "newcomer" else reply)[rec.item_id] = rec
    return newcomer, reply


def units_by_cluster(units):
    out = defaultdict(list)
    for u in units:
        out[u.cluster_id].append(u)
    return dict(sorted(out.items()))


def label_from_string(s):
    return as_label(s)
