"""
Reference-based story metrics computed from scratch: corpus BLEU-1..4, METEOR
(exact and Porter-stem stages), ROUGE-L and CIDEr, plus aggregation of
per-seed scores with standard-deviation bands against a reference system.

All metric inputs are ``EvalPair``s of already tokenized text.
"""

import logging
import math
import sys
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from nltk.stem.porter import PorterStemmer
from nltk.util import ngrams

from scripts.utils import ConfigError, DataError, StateError

logger = logging.getLogger(__name__)

BLEU_METRICS = ("B-1", "B-2", "B-3", "B-4")
ALL_METRICS = BLEU_METRICS + ("METEOR", "ROUGE-L", "CIDEr")
# reported x100; CIDEr keeps its own 0-10 scale
UNIT_METRICS = frozenset(BLEU_METRICS + ("METEOR", "ROUGE-L"))

_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=65536)
def stem(token):
    return _stemmer.stem(token)


@dataclass(frozen=True)
class EvalPair:
    hypothesis: tuple
    references: tuple

    def __post_init__(self):
        object.__setattr__(self, "hypothesis", tuple(self.hypothesis))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not self.references:
            raise DataError("an evaluation pair needs at least one reference")


@dataclass(frozen=True)
class MetricConfig:
    bleu_max_order: int = 4
    meteor_gamma: float = 0.5
    meteor_beta: float = 3.0
    meteor_exhaustive_limit: int = 20
    rouge_beta: float = 1.2
    cider_n: int = 4
    cider_scale: float = 10.0

    def validate(self):
        for f in ("bleu_max_order", "meteor_gamma", "meteor_beta", "rouge_beta", "cider_n", "cider_scale"):
            if getattr(self, f) <= 0:
                raise ConfigError("{} must be positive".format(f))
        if self.meteor_exhaustive_limit < 0:
            raise ConfigError("meteor_exhaustive_limit must be non-negative")
        return self


def _check_corpus(pairs):
    pairs = list(pairs)
    if not pairs:
        raise DataError("empty hypothesis corpus")
    return pairs


def _counts(tokens, n):
    return Counter(ngrams(tokens, n))


# ---------------------------------------------------------------- BLEU


def bleu_corpus(pairs, max_order=4):
    """Cumulative corpus BLEU over orders 1..max_order, no smoothing."""
    pairs = _check_corpus(pairs)
    clipped = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for pair in pairs:
        hyp = pair.hypothesis
        hyp_len += len(hyp)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in pair.references)[1]
        for n in range(1, max_order + 1):
            hyp_counts = _counts(hyp, n)
            max_ref = Counter()
            for ref in pair.references:
                max_ref |= _counts(ref, n)
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in hyp_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)

    if hyp_len == 0 or min(clipped) == 0:
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(clipped, totals)) / max_order
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_precision)


# -------------------------------------------------------------- METEOR


@dataclass
class _Alignment:
    matches: int = 0
    chunks: int = 0
    hyp_len: int = 0
    ref_len: int = 0
    pairs: list = field(default_factory=list)


def _stage_quotas(hyp, ref):
    """Exact matches per word and stem matches per stem on the exact-stage residue."""
    hyp_counts, ref_counts = Counter(hyp), Counter(ref)
    exact = {w: min(c, ref_counts[w]) for w, c in hyp_counts.items() if ref_counts[w]}
    hyp_rest, ref_rest = Counter(), Counter()
    for w, c in hyp_counts.items():
        hyp_rest[stem(w)] += c - exact.get(w, 0)
    for w, c in ref_counts.items():
        ref_rest[stem(w)] += c - exact.get(w, 0)
    stems = {s: min(c, ref_rest[s]) for s, c in hyp_rest.items() if min(c, ref_rest[s]) > 0}
    return exact, stems


def _count_chunks(pairs):
    chunks, prev = 0, None
    for i, j in sorted(pairs):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _greedy_alignment(hyp, ref, exact, stems):
    used, pairs = set(), []
    left = dict(exact)
    for i, w in enumerate(hyp):
        if left.get(w, 0) > 0:
            j = next(j for j, r in enumerate(ref) if r == w and j not in used)
            used.add(j)
            pairs.append((i, j))
            left[w] -= 1
    matched = {i for i, _ in pairs}
    left = dict(stems)
    for i, w in enumerate(hyp):
        s = stem(w)
        if i in matched or left.get(s, 0) <= 0:
            continue
        j = next(
            (j for j, r in enumerate(ref) if j not in used and r != w and stem(r) == s),
            None,
        )
        if j is not None:
            used.add(j)
            pairs.append((i, j))
            left[s] -= 1
    return pairs


def _search_alignment(hyp, ref, exact, stems):
    """Maximum staged matching with the fewest chunks.

    Memoized search over (hypothesis position, used reference tokens, quotas
    left, reference index of the previous match). Exact for any input; callers
    bound it by the number of matched unigrams.
    """
    keys = sorted(("exact", w) for w in exact) + sorted(("stem", s) for s in stems)
    slot = {key: n for n, key in enumerate(keys)}
    quota = tuple(exact[name] if kind == "exact" else stems[name] for kind, name in keys)
    ref_stems = [stem(r) for r in ref]
    cands = []
    for w in hyp:
        s = stem(w)
        options = []
        for j, r in enumerate(ref):
            if r == w and ("exact", w) in slot:
                options.append((j, slot[("exact", w)]))
            elif r != w and ref_stems[j] == s and ("stem", s) in slot:
                options.append((j, slot[("stem", s)]))
        cands.append(options)
    n = len(hyp)
    # supply[i][k]: positions at or after i that could still spend quota k
    supply = [[0] * len(keys) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        supply[i] = list(supply[i + 1])
        for k in {k for _, k in cands[i]}:
            supply[i][k] += 1
    cand_refs = [{j for j, _ in options} for options in cands] + [set()]
    memo = {}

    def carry(i, j):
        # a previous match only matters if it can be extended at the next position
        return j if j + 1 in cand_refs[i + 1] else None

    def best(i, used, left, last):
        if not any(left):
            return 0
        if i == n or any(q > s for q, s in zip(left, supply[i])):
            return None
        state = (i, used, left, last)
        if state in memo:
            return memo[state][0]
        result, choice = best(i + 1, used, left, None), None
        for j, k in cands[i]:
            if used >> j & 1 or not left[k]:
                continue
            rest = best(i + 1, used | 1 << j, left[:k] + (left[k] - 1,) + left[k + 1 :], carry(i, j))
            if rest is None:
                continue
            cost = rest + (last is None or j != last + 1)
            if result is None or cost < result:
                result, choice = cost, (j, k)
        memo[state] = (result, choice)
        return result

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 2 * n + 100))
    try:
        if best(0, 0, quota, None) is None:
            raise StateError("no alignment spends the stage quotas {}".format(quota))
    finally:
        sys.setrecursionlimit(limit)

    pairs, i, used, left, last = [], 0, 0, quota, None
    while any(left):
        choice = memo[(i, used, left, last)][1]
        if choice is None:
            last = None
        else:
            j, k = choice
            pairs.append((i, j))
            used |= 1 << j
            left = left[:k] + (left[k] - 1,) + left[k + 1 :]
            last = carry(i, j)
        i += 1
    logger.debug("METEOR alignment search visited {} states".format(len(memo)))
    return pairs


def align(hyp, ref, exhaustive_limit=20):
    """Maximum exact-then-stem unigram matching between two token lists.

    Up to ``exhaustive_limit`` matched unigrams the chunk count is minimal;
    beyond it matches are taken greedily in hypothesis order.
    """
    exact, stems = _stage_quotas(hyp, ref)
    m = sum(exact.values()) + sum(stems.values())
    if 0 < m <= exhaustive_limit:
        pairs = _search_alignment(hyp, ref, exact, stems)
    else:
        pairs = _greedy_alignment(hyp, ref, exact, stems)
    return _Alignment(
        matches=len(pairs),
        chunks=_count_chunks(pairs),
        hyp_len=len(hyp),
        ref_len=len(ref),
        pairs=sorted(pairs),
    )


def _meteor_formula(matches, chunks, hyp_len, ref_len, gamma=0.5, beta=3.0):
    if matches == 0:
        return 0.0
    precision = matches / hyp_len
    recall = matches / ref_len
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = gamma * (chunks / matches) ** beta
    return f_mean * (1.0 - penalty)


def meteor_segment(hyp, ref, config=None):
    config = config or MetricConfig()
    a = align(hyp, ref, config.meteor_exhaustive_limit)
    return _meteor_formula(
        a.matches, a.chunks, a.hyp_len, a.ref_len, config.meteor_gamma, config.meteor_beta
    )


def meteor(pairs, config=None):
    """Corpus METEOR: best reference per segment, statistics summed before the formula."""
    config = config or MetricConfig()
    pairs = _check_corpus(pairs)
    total = _Alignment()
    for pair in pairs:
        best, best_score = None, -1.0
        for ref in pair.references:
            a = align(pair.hypothesis, ref, config.meteor_exhaustive_limit)
            score = _meteor_formula(
                a.matches, a.chunks, a.hyp_len, a.ref_len, config.meteor_gamma, config.meteor_beta
            )
            if score > best_score:
                best, best_score = a, score
        total.matches += best.matches
        total.chunks += best.chunks
        total.hyp_len += best.hyp_len
        total.ref_len += best.ref_len
    return _meteor_formula(
        total.matches,
        total.chunks,
        total.hyp_len,
        total.ref_len,
        config.meteor_gamma,
        config.meteor_beta,
    )


# ------------------------------------------------------------- ROUGE-L


def lcs_length(a, b):
    if not a or not b:
        return 0
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i, x in enumerate(a, start=1):
        for j, y in enumerate(b, start=1):
            table[i, j] = table[i - 1, j - 1] + 1 if x == y else max(table[i - 1, j], table[i, j - 1])
    return int(table[-1, -1])


def _rouge_f(hyp, ref, beta):
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    recall, precision = lcs / len(ref), lcs / len(hyp)
    return (1 + beta**2) * recall * precision / (recall + beta**2 * precision)


def rouge_l(pairs, beta=1.2):
    pairs = _check_corpus(pairs)
    return float(
        np.mean([max(_rouge_f(p.hypothesis, r, beta) for r in p.references) for p in pairs])
    )


# --------------------------------------------------------------- CIDEr


def _tfidf(counts, df, n_docs):
    return {g: c * max(0.0, math.log(n_docs / (1.0 + df[g]))) for g, c in counts.items()}


def _cosine(u, v):
    norm_u = math.sqrt(sum(x * x for x in u.values()))
    norm_v = math.sqrt(sum(x * x for x in v.values()))
    if norm_u == 0.0 or norm_v == 0.0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (norm_u * norm_v)


def cider(pairs, n=4, scale=10.0):
    """Plain CIDEr: idf over the images' reference sets, mean cosine over references."""
    pairs = _check_corpus(pairs)
    if len(pairs) < 2:
        raise DataError("CIDEr needs at least 2 pairs, got {}".format(len(pairs)))
    n_docs = len(pairs)
    per_order = []
    for k in range(1, n + 1):
        df = Counter()
        for pair in pairs:
            df.update(set(g for ref in pair.references for g in ngrams(ref, k)))
        scores = []
        for pair in pairs:
            hyp_vec = _tfidf(_counts(pair.hypothesis, k), df, n_docs)
            sims = [_cosine(hyp_vec, _tfidf(_counts(ref, k), df, n_docs)) for ref in pair.references]
            scores.append(sum(sims) / len(sims))
        per_order.append(sum(scores) / len(scores))
    return scale * sum(per_order) / n


def evaluate_corpus(pairs, metrics=ALL_METRICS, config=None):
    """Score a corpus with any subset of the metric suite."""
    config = (config or MetricConfig()).validate()
    pairs = _check_corpus(pairs)
    unknown = [m for m in metrics if m not in ALL_METRICS]
    if unknown:
        raise ConfigError("unknown metrics: {}".format(", ".join(unknown)))
    scores = {}
    for name in metrics:
        if name in BLEU_METRICS:
            scores[name] = bleu_corpus(pairs, int(name[2:]))
        elif name == "METEOR":
            scores[name] = meteor(pairs, config)
        elif name == "ROUGE-L":
            scores[name] = rouge_l(pairs, config.rouge_beta)
        else:
            scores[name] = cider(pairs, config.cider_n, config.cider_scale)
    return scores


# ----------------------------------------------------------- aggregation


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    band: str = ""
    zero_variance: bool = False


@dataclass
class MetricReport:
    reference: str
    metrics: tuple
    systems: dict

    def to_dict(self, scaled=True):
        out = {"reference": self.reference, "systems": {}}
        for system, summaries in self.systems.items():
            out["systems"][system] = {}
            for metric, s in summaries.items():
                factor = 100.0 if scaled and metric in UNIT_METRICS else 1.0
                out["systems"][system][metric] = {
                    "mean": s.mean * factor,
                    "std": s.std * factor,
                    "band": s.band,
                    "zero_variance": s.zero_variance,
                }
        return out


def significance_band(mean, ref_mean, ref_std):
    """'', '+', '*' or '**' for a distance of <1, >=1, >=2, >=3 reference stds.

    Returns:
        band, zero_variance flag
    """
    delta = abs(mean - ref_mean)
    if delta == 0.0:
        return "", False
    if ref_std == 0.0:
        return "**", True
    ratio = delta / ref_std
    if ratio >= 3:
        return "**", False
    if ratio >= 2:
        return "*", False
    if ratio >= 1:
        return "+", False
    return "", False


def aggregate_runs(scores, reference):
    """Mean and population std per system and metric, banded against ``reference``.

    Args:
        scores: ``{system: {metric: [score per seed]}}``
        reference: name of the system the bands are computed against
    """
    if reference not in scores:
        raise ConfigError("reference system `{}` has no scores".format(reference))
    metrics = tuple(m for m in ALL_METRICS if m in scores[reference]) + tuple(
        sorted(m for m in scores[reference] if m not in ALL_METRICS)
    )
    stats = {}
    for system, per_metric in scores.items():
        stats[system] = {}
        for metric, values in per_metric.items():
            if not len(values):
                raise DataError("system `{}` has no {} scores".format(system, metric))
            values = np.asarray(values, dtype=np.float64)
            stats[system][metric] = (float(values.mean()), float(values.std()))

    systems = {}
    for system, per_metric in stats.items():
        systems[system] = {}
        for metric, (mean, std) in per_metric.items():
            band, flag = "", False
            if system != reference and metric in stats[reference]:
                ref_mean, ref_std = stats[reference][metric]
                band, flag = significance_band(mean, ref_mean, ref_std)
            systems[system][metric] = MetricSummary(mean, std, band, flag)
    return MetricReport(reference=reference, metrics=metrics, systems=systems)
