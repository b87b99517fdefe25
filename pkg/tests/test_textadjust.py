import math

import pytest
from hypothesis import given, settings, strategies as st

from cspipe.textadjust import (SlurList, adjusted_toxicity_comparison, load_word_list,
                               replace_slurs, strip_blockquotes, tfidf_keywords, tokenize)

SLURS = SlurList(("badword",))
QUOTE_FIXTURE = "&gt; first quoted line\nmy actual  reply, kept\t as-is\n   > second quote\n"
text_st = st.lists(st.sampled_from(list("ab &gt;\n.!Bd") + ["badword", "BadWord", "x"]),
                   max_size=30).map("".join)


def penalizing_score(text):
    """0.9 when a placeholder slur is present, 0.2 otherwise."""
    return 0.9 if any(t in ("badword", "slurword") for t in tokenize(text)) else 0.2


def test_blockquote_fixtures():
    assert strip_blockquotes("&gt; quoted\nmy reply") == "my reply"
    plain = "no quotes here\nsecond line > not a quote\n"
    assert strip_blockquotes(plain) == plain
    assert strip_blockquotes(QUOTE_FIXTURE) == "my actual  reply, kept\t as-is\n"
    assert strip_blockquotes("") == ""


def test_slur_fixtures():
    assert replace_slurs("You BADWORD!", SLURS) == "You person!"
    assert replace_slurs("badwords", SLURS) == "badwords"
    assert replace_slurs("xbadword badword2", SLURS) == "xbadword badword2"
    assert replace_slurs("badword_y", SLURS) == "person_y"
    assert replace_slurs("", SLURS) == ""
    assert replace_slurs("(badword),badword.", SLURS) == "(person),person."
    assert replace_slurs("é badword ü", SLURS) == "é person ü"


def test_slur_list_validation_and_files(tmp_path):
    with pytest.raises(ValueError):
        SlurList(("a", "A"))
    with pytest.raises(ValueError):
        SlurList(("",))
    p = tmp_path / "s.txt"
    p.write_text("# comment\nFoo\n\nbar\nfoo\n")
    assert SlurList.from_file(p).terms == ("foo", "bar")
    assert "the" in load_word_list()
    assert load_word_list(None, "slurs_placeholder.txt") == ["badword", "slurword"]


@given(text_st)
@settings(max_examples=200)
def test_text_functions_idempotent(text):
    once = strip_blockquotes(text)
    assert strip_blockquotes(once) == once
    r1 = replace_slurs(text, SLURS)
    assert replace_slurs(r1, SLURS) == r1


@given(text_st)
@settings(max_examples=200)
def test_slur_length_bound(text):
    occ = sum(1 for t in tokenize(text) if t == "badword")
    out = replace_slurs(text, SLURS)
    assert abs(len(out) - len(text)) <= occ * max(len("badword"), len("person"))


def test_tfidf_fixtures():
    target = ["zeta common common"]
    background = ["common other"]
    ranked = dict(tfidf_keywords(target, background))
    # zeta: tf 1, df 1; common: tf 2, df 2 over N = 2 documents
    assert abs(ranked["zeta"] - (math.log(3 / 2) + 1)) < 1e-12
    assert abs(ranked["common"] - 2 * (math.log(3 / 3) + 1)) < 1e-12
    eq = dict(tfidf_keywords(["zeta shared"], ["shared x"]))
    assert eq["zeta"] > eq["shared"]


def test_tfidf_identical_corpora_is_tf_order():
    docs = ["b a a c c c", "a c d"]
    ranked = tfidf_keywords(docs, docs)
    tf = {"c": 4, "a": 3, "b": 1, "d": 1}
    assert [w for w, _ in ranked] == sorted(tf, key=lambda w: (-tf[w], w))


def test_tfidf_limits_stopwords_and_determinism():
    ranked = tfidf_keywords(["the cat sat"], ["a dog"], top_n=1000, stopwords=["the"])
    assert {w for w, _ in ranked} == {"cat", "sat"}
    assert len(tfidf_keywords(["x y z"], ["q"], top_n=2)) == 2
    assert tfidf_keywords(["x y z"], ["q"]) == tfidf_keywords(["x y z"], ["q"])
    with pytest.raises(ValueError):
        tfidf_keywords([], ["q"])


def test_adjustment_no_quotes_no_slurs_is_identity():
    texts = {"Counterspeech": ["please be kind", "that is not ok"], "Other": ["lol"]}
    out = adjusted_toxicity_comparison(texts, SLURS, penalizing_score)
    cs = out["classes"]["Counterspeech"]
    assert cs["adjusted_mean"] == cs["raw_mean"]


def test_adjusted_below_raw_under_penalizing_stub():
    texts = {
        "Counterspeech": ["&gt; you badword\nnot okay", "calling people a BADWORD is wrong",
                          "be nice"],
        "HateSpeech": ["badword badword"],
        "Other": ["hello"],
    }
    out = adjusted_toxicity_comparison(texts, SLURS, penalizing_score, baseline=["hi", "yo"])
    cs = out["classes"]["Counterspeech"]
    assert cs["adjusted_mean"] < cs["raw_mean"]
    assert abs(cs["raw_mean"] - (0.9 + 0.9 + 0.2) / 3) < 1e-12
    assert abs(cs["adjusted_mean"] - 0.2) < 1e-12
    # other classes are left raw
    hs = out["classes"]["HateSpeech"]
    assert hs["adjusted_mean"] == hs["raw_mean"] == 0.9
    r = out["ratios"]
    assert abs(r["Counterspeech_vs_Other_pct"] - 100 * (cs["raw_mean"] / 0.2 - 1)) < 1e-9
    assert "Counterspeech_adjusted_vs_baseline_pct" in r


def test_fully_quoted_reply_keeps_raw_score():
    out = adjusted_toxicity_comparison({"Counterspeech": ["&gt; badword"]}, SLURS,
                                       penalizing_score)
    assert out["classes"]["Counterspeech"]["adjusted_mean"] == 0.9
