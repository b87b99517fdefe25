import json

import pytest

from cspipe.ingest import DAY, Comment, Corpus
from cspipe.labeler import ConfidenceRecord, LabelClass
from cspipe.scorers import Scorers


def sub(id, author="op", subreddit="s", t=0, body="a submission", score=1):
    return Comment(id, author, subreddit, body, score, t, id, True, None)


def com(id, parent, link, author="u", subreddit="s", t=1, body="a comment", score=1):
    return Comment(id, author, subreddit, body, score, t, link, False, parent)


def record(item_id, cs=0, hs=0, ot=0):
    return ConfidenceRecord(item_id, {LabelClass.COUNTERSPEECH: cs,
                                      LabelClass.HATE_SPEECH: hs, LabelClass.OTHER: ot})


def to_jsonl(comments):
    return "".join(json.dumps(c.to_dict()) + "\n" for c in comments).encode()


@pytest.fixture
def stubs():
    return Scorers.stubs()


@pytest.fixture
def small_corpus():
    """Two threads in one subreddit plus outside history for author ``n``."""
    cs = [
        sub("t1", t=0),
        com("a", "t1", "t1", author="x", t=10),
        com("b", "a", "t1", author="y", t=20),
        com("c", "t1", "t1", author="y", t=30),
        com("d", "b", "t1", author="z", t=40),
        com("n1", "t1", "t1", author="n", t=50, body="hello [[votes=hs5;sent=-0.5]]"),
        com("r1", "n1", "t1", author="x", t=60, body="please stop [[votes=cs5;tox=0.2]]"),
        com("r2", "n1", "t1", author="y", t=70),
        sub("t2", t=100),
        com("n2", "t2", "t2", author="n", t=200),
        sub("e1", author="n", subreddit="other", t=5),
        com("e2", "e1", "e1", author="n", subreddit="other", t=6, score=4),
    ]
    return Corpus(cs)


DAYS = DAY
