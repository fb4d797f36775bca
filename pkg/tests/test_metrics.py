import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scripts.metrics import (
    ALL_METRICS,
    EvalPair,
    MetricConfig,
    aggregate_runs,
    align,
    bleu_corpus,
    cider,
    evaluate_corpus,
    lcs_length,
    meteor,
    meteor_segment,
    rouge_l,
    significance_band,
    stem,
)
from scripts.utils import ConfigError, DataError


def pair(hyp, *refs):
    return EvalPair(hyp.split(), [r.split() for r in refs])


def brute_force_cider(pairs, n=4):
    """Dense-vector CIDEr over the full n-gram vocabulary of each order."""
    N = len(pairs)
    total = 0.0
    for k in range(1, n + 1):
        def grams(tokens):
            return [tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1)]

        vocab = sorted({g for p in pairs for t in (p.hypothesis,) + p.references for g in grams(t)})
        index = {g: i for i, g in enumerate(vocab)}
        df = np.zeros(len(vocab))
        for p in pairs:
            for g in {g for r in p.references for g in grams(r)}:
                df[index[g]] += 1
        idf = np.maximum(0.0, np.log(N / (1.0 + df)))

        def vec(tokens):
            v = np.zeros(len(vocab))
            for g, c in Counter(grams(tokens)).items():
                v[index[g]] = c
            return v * idf

        order = 0.0
        for p in pairs:
            h = vec(p.hypothesis)
            sims = []
            for r in p.references:
                rv = vec(r)
                denom = np.linalg.norm(h) * np.linalg.norm(rv)
                sims.append(0.0 if denom == 0 else float(h @ rv) / denom)
            order += np.mean(sims)
        total += order / N
    return 10.0 * total / n


def random_sentences(rng, count, words=("a", "b", "c", "d", "e", "f", "g", "h")):
    return [" ".join(rng.choice(words, size=rng.integers(4, 12))) for _ in range(count)]


def brute_force_alignment(hyp, ref):
    """Best (exact matches, matches, -chunks) over every one-to-one partial matching."""
    best = (0, 0, 0)

    def visit(i, used, pairs, n_exact):
        nonlocal best
        if i == len(hyp):
            chunks = sum(1 for n, (h, r) in enumerate(pairs) if n == 0 or pairs[n - 1] != (h - 1, r - 1))
            best = max(best, (n_exact, len(pairs), -chunks))
            return
        visit(i + 1, used, pairs, n_exact)
        for j, r in enumerate(ref):
            if j in used:
                continue
            if r == hyp[i] or stem(r) == stem(hyp[i]):
                visit(i + 1, used | {j}, pairs + [(i, j)], n_exact + (r == hyp[i]))

    visit(0, frozenset(), [], 0)
    return best[1], -best[2]


# # # #
def test_bleu_clipping():
    assert bleu_corpus([pair("the the the the", "the cat")], 1) == pytest.approx(0.25)


def test_bleu_identity():
    pairs = [pair("the cat sat on the mat", "the cat sat on the mat")]
    for order in range(1, 5):
        assert bleu_corpus(pairs, order) == pytest.approx(1.0)


def test_bleu_brevity_penalty_and_closest_reference():
    # hypothesis of 4 tokens; closest reference has 5 tokens
    p = pair("a b c d", "a b c d e", "a b c d e f g h")
    assert bleu_corpus([p], 1) == pytest.approx(math.exp(1 - 5 / 4))
    # equidistant references: the shorter one counts
    tie = pair("a b c d", "a b c", "a b c d e")
    assert bleu_corpus([tie], 1) == pytest.approx(1.0)


def test_bleu_no_overlap_is_zero():
    assert bleu_corpus([pair("x y z w", "a b c d")], 4) == 0.0
    assert bleu_corpus([pair("a b", "a b")], 4) == 0.0


def test_bleu_deleting_matched_token_never_increases():
    before = bleu_corpus([pair("the cat sat down", "the cat sat on the mat")], 1)
    after = bleu_corpus([pair("the cat down", "the cat sat on the mat")], 1)
    assert after <= before


def test_empty_corpus():
    with pytest.raises(DataError):
        bleu_corpus([])
    with pytest.raises(DataError):
        EvalPair(["a"], [])


# # # #
def test_meteor_identity():
    assert meteor_segment("the cat sat".split(), "the cat sat".split()) == pytest.approx(1 - 0.5 / 27, abs=1e-4)
    assert meteor_segment("the cat sat".split(), "the cat sat".split()) == pytest.approx(0.9815, abs=1e-4)


def test_meteor_swapped_words():
    assert meteor_segment(["the", "cat"], ["cat", "the"]) == pytest.approx(0.5)


def test_meteor_no_match():
    assert meteor_segment(["dog"], ["cat"]) == 0.0


def test_meteor_stem_stage():
    a = align(["cats", "sat"], ["cat", "sat"])
    assert a.matches == 2
    assert stem("cats") == stem("cat")


def test_meteor_exact_stage_first():
    # "walk" must take the exact "walk" even though "walking" shares its stem
    a = align(["walk", "walking"], ["walking", "walk"])
    assert sorted(a.pairs) == [(0, 1), (1, 0)]


def test_meteor_minimum_chunks_with_repeats():
    a = align("a b a b".split(), "a b a b".split())
    assert a.matches == 4 and a.chunks == 1


def test_meteor_minimum_chunks_beats_greedy():
    hyp, ref = "a b a b".split(), "b a b a".split()
    assert align(hyp, ref, exhaustive_limit=0).chunks == 4
    a = align(hyp, ref)
    assert a.matches == 4 and a.chunks == 2
    assert a.pairs in ([(0, 1), (1, 2), (2, 3), (3, 0)], [(0, 3), (1, 0), (2, 1), (3, 2)])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.sampled_from(["a", "b", "c", "cat", "cats"]), max_size=5),
    st.lists(st.sampled_from(["a", "b", "c", "cat", "cats"]), max_size=5),
)
def test_meteor_alignment_matches_brute_force(hyp, ref):
    a = align(hyp, ref)
    assert (a.matches, a.chunks) == brute_force_alignment(hyp, ref)


def test_meteor_repetitive_twenty_tokens():
    hyp = "c b b a a a a a a c b c b b c c b b b c".split()
    ref = "a c c a b c b a c c c a a c a b a a b b".split()
    a = align(hyp, ref)
    assert a.matches == 17 and a.chunks <= 11
    assert meteor_segment(hyp, ref) >= 0.7348


def test_meteor_corpus_sums_statistics():
    pairs = [pair("the cat", "cat the"), pair("a dog ran", "a dog ran")]
    # matches 5, chunks 3, lengths 5 / 5
    assert meteor(pairs) == pytest.approx(1 - 0.5 * (3 / 5) ** 3)


def test_meteor_best_reference():
    assert meteor([pair("the cat sat", "dogs bark loudly", "the cat sat")]) == pytest.approx(1 - 0.5 / 27)


# # # #
def test_lcs():
    assert lcs_length("a b c d".split(), "a c d".split()) == 3
    assert lcs_length([], ["a"]) == 0


def test_rouge_l_example():
    assert rouge_l([pair("a b c d", "a c d")]) == pytest.approx(2.44 * 0.75 / (1 + 1.44 * 0.75), abs=1e-9)
    assert rouge_l([pair("a b c d", "a c d")]) == pytest.approx(0.8798, abs=1e-4)


def test_rouge_l_disjoint():
    assert rouge_l([pair("x y", "a b")]) == 0.0


# # # #
def test_cider_identity_is_scale():
    pairs = [pair(s, s) for s in ("a b c d", "e f g h i", "j k l m n o")]
    assert cider(pairs) == pytest.approx(10.0)


def test_cider_brute_force():
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(6):
        hyp, *refs = random_sentences(rng, 1 + rng.integers(1, 4))
        pairs.append(pair(hyp, *refs))
    assert cider(pairs) == pytest.approx(brute_force_cider(pairs), abs=1e-9)


def test_cider_two_image_corpus():
    pairs = [pair("a b c d", "a b c e", "a b"), pair("x y z", "x y w")]
    # every reference n-gram has df >= 1, so idf = max(0, log(2 / (1 + df))) = 0
    assert brute_force_cider(pairs) == 0.0
    assert cider(pairs) == pytest.approx(brute_force_cider(pairs), abs=1e-9)
    assert cider(pairs[::-1]) == pytest.approx(0.0, abs=1e-9)


def test_cider_needs_two_pairs():
    with pytest.raises(DataError):
        cider([pair("a b c d", "a b c d")])


# # # #
def test_self_evaluation():
    rng = np.random.default_rng(3)
    sentences = random_sentences(rng, 20)
    pairs = [pair(s, s) for s in sentences]
    scores = evaluate_corpus(pairs, ("B-1", "B-2", "B-3", "B-4", "METEOR", "ROUGE-L"))
    for metric in ("B-1", "B-2", "B-3", "B-4", "ROUGE-L"):
        assert scores[metric] == pytest.approx(1.0)
    total = sum(len(s.split()) for s in sentences)
    assert scores["METEOR"] == pytest.approx(1 - 0.5 * (20 / total) ** 3)


WORDS = st.sampled_from(["the", "cat", "sat", "on", "mat", "runs", "dog"])
SENTENCE = st.lists(WORDS, min_size=1, max_size=6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(SENTENCE, st.lists(SENTENCE, min_size=1, max_size=2)), min_size=2, max_size=4))
def test_metric_bounds(corpus):
    pairs = [EvalPair(hyp, refs) for hyp, refs in corpus]
    scores = evaluate_corpus(pairs)
    for metric in ("B-1", "B-2", "B-3", "B-4", "METEOR", "ROUGE-L"):
        assert 0.0 <= scores[metric] <= 1.0 + 1e-12
    assert scores["CIDEr"] >= 0.0


def test_reference_order_invariance():
    refs = ["the cat sat on a mat", "a cat is sitting", "cats sit on mats"]
    p1 = pair("the cat is on the mat", *refs)
    p2 = pair("the cat is on the mat", *reversed(refs))
    other = pair("dogs run far away", "dogs run fast", "a dog runs")
    for metric in ("B-1", "B-2", "ROUGE-L", "CIDEr"):
        a = evaluate_corpus([p1, other], (metric,))[metric]
        b = evaluate_corpus([p2, other], (metric,))[metric]
        assert a == pytest.approx(b, abs=1e-12)


def test_evaluate_corpus_metrics():
    pairs = [pair("a b c d", "a b c d"), pair("e f g h", "e f g x")]
    scores = evaluate_corpus(pairs)
    assert tuple(scores) == ALL_METRICS
    with pytest.raises(ConfigError):
        evaluate_corpus(pairs, ("SPICE",))
    with pytest.raises(ConfigError):
        evaluate_corpus(pairs, config=MetricConfig(rouge_beta=0.0))


# # # #
def test_significance_band():
    assert significance_band(33.03, 31.85, 0.5) == ("*", False)
    assert significance_band(31.85, 31.85, 0.5) == ("", False)
    assert significance_band(32.5, 31.85, 0.5) == ("+", False)
    assert significance_band(33.5, 31.85, 0.5) == ("**", False)
    assert significance_band(1.0, 2.0, 0.0) == ("**", True)


def test_aggregate_single_seed_has_zero_std():
    report = aggregate_runs({"chargrid": {"METEOR": [0.3]}}, "chargrid")
    summary = report.systems["chargrid"]["METEOR"]
    assert summary.std == 0.0 and summary.band == ""


def test_aggregate_bands():
    scores = {
        "gpt2": {"METEOR": [0.3135, 0.3235], "CIDEr": [1.0, 1.0]},
        "chargrid": {"METEOR": [0.3303, 0.3303, 0.3303], "CIDEr": [2.0, 2.0]},
    }
    report = aggregate_runs(scores, "gpt2")
    assert report.metrics == ("METEOR", "CIDEr")
    summary = report.systems["chargrid"]["METEOR"]
    assert summary.mean == pytest.approx(0.3303)
    assert summary.band == "*"
    assert report.systems["gpt2"]["METEOR"].std == pytest.approx(0.005)
    cider_summary = report.systems["chargrid"]["CIDEr"]
    assert cider_summary.band == "**" and cider_summary.zero_variance
    scaled = report.to_dict()
    assert scaled["systems"]["chargrid"]["METEOR"]["mean"] == pytest.approx(33.03)
    assert scaled["systems"]["chargrid"]["CIDEr"]["mean"] == pytest.approx(2.0)


def test_aggregate_unknown_reference():
    with pytest.raises(ConfigError):
        aggregate_runs({"a": {"B-1": [1.0]}}, "b")
