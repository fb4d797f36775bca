"""
Corpus analytics for annotated stories: entity-grid coherence, Jaccard
similarity of events between stories of one sequence, event and predicate
n-gram diversity, visual groundedness tables, corpus statistics, and the
crowd-worker review and qualification rules used during data collection.
"""

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from itertools import combinations

import numpy as np
import pandas as pd
from nltk.util import ngrams

from scripts.corpus import PLACEHOLDER_RE
from scripts.utils import DataError, read_jsonl

logger = logging.getLogger(__name__)

ROLES = ("S", "O", "X", "-")
ARG_ROLES = ("arg0", "arg1", "arg2", "arg-loc")
JACCARD_ROLES = ("characters", "predicate") + ARG_ROLES + ("arguments",)
GROUNDEDNESS_KINDS = ("event", "argument")
GROUNDEDNESS_LABELS = ("Grounded", "Inferred", "Hallucinated")
_KIND_ALIASES = {"e": "event", "event": "event", "a": "argument", "argument": "argument"}
_LABEL_ALIASES = {
    "grounded": "Grounded",
    "inferred": "Inferred",
    "hallucinated": "Hallucinated",
    "hallucianted": "Hallucinated",
}
ANALYSES = ("coherence", "jaccard", "diversity", "groundedness", "stats")


# ----------------------------------------------------------------- types


@dataclass(frozen=True)
class EntityRoleGrid:
    entities: tuple
    rows: tuple

    def __post_init__(self):
        rows = tuple(tuple("-" if c in ("−", "_") else c.upper() for c in row) for row in self.rows)
        width = len(self.entities)
        for r, row in enumerate(rows):
            if len(row) != width:
                raise DataError("entity grid row {} has {} cells for {} entities".format(r, len(row), width))
            bad = [c for c in row if c not in ROLES]
            if bad:
                raise DataError("entity grid row {} has unknown roles {}".format(r, bad))
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "rows", rows)

    def columns(self):
        return [[row[b] for row in self.rows] for b in range(len(self.entities))]


@dataclass(frozen=True)
class GroundednessAnnotation:
    kind: str
    label: str

    @classmethod
    def parse(cls, kind, label):
        k = _KIND_ALIASES.get(str(kind).strip().lower())
        lab = _LABEL_ALIASES.get(str(label).strip().lower())
        if k is None or lab is None:
            raise DataError("unknown groundedness annotation ({}, {})".format(kind, label))
        return cls(k, lab)


@dataclass(frozen=True)
class SRLStory:
    """One story reduced to lowercased predicate lemmas and argument token sets."""

    sequence_id: str
    predicates: tuple = ()
    args: dict = field(default_factory=dict)
    characters: frozenset = frozenset()
    tokens: tuple = ()
    n_events: int = 0
    n_images: int = 0
    grid: object = None
    groundedness: tuple = ()

    def role_set(self, role):
        if role == "characters":
            return self.characters
        if role == "predicate":
            return frozenset(self.predicates)
        if role == "arguments":
            return frozenset().union(*(self.args.get(r, frozenset()) for r in ARG_ROLES))
        return self.args.get(role, frozenset())


def story_from_annotation(obj, context=None):
    try:
        srl = obj.get("srl") or []
        predicates = tuple(str(ev["predicate"]).lower() for ev in srl)
        args = {role: set() for role in ARG_ROLES}
        for ev in srl:
            for role, tokens in (ev.get("args") or {}).items():
                role = role.lower()
                if role not in args:
                    raise DataError("unknown argument role `{}`".format(role), context)
                args[role].update(t.lower() for t in tokens)
        grid = None
        if obj.get("entity_grid"):
            grid = EntityRoleGrid(obj["entity_grid"]["entities"], obj["entity_grid"]["rows"])
        characters = obj.get("characters")
        tokens = tuple(obj.get("tokens", ()))
        if characters is None:
            characters = [t for t in tokens if PLACEHOLDER_RE.match(t)]
        return SRLStory(
            sequence_id=str(obj["sequence_id"]),
            predicates=predicates,
            args={role: frozenset(v) for role, v in args.items()},
            characters=frozenset(c.lower() for c in characters),
            tokens=tokens,
            n_events=len(srl),
            n_images=int(obj.get("n_images", 0)),
            grid=grid,
            groundedness=tuple(
                GroundednessAnnotation.parse(g["kind"], g["label"]) for g in obj.get("groundedness", [])
            ),
        )
    except KeyError as e:
        raise DataError("missing field {}".format(e), context) from e


def load_annotations(path):
    stories = [story_from_annotation(obj, "{}:{}".format(path, n)) for n, obj in read_jsonl(path)]
    logger.info("Read {} annotated stories from {}".format(len(stories), path))
    return stories


def stories_from_records(records):
    """Annotated-story view of dataset records (no entity grids or groundedness)."""
    out = []
    for record in records:
        for story in record.stories:
            obj = {
                "sequence_id": record.id,
                "tokens": story.surface_tokens(),
                "srl": [{"predicate": ev.predicate, "args": dict(ev.args)} for ev in story.srl],
                "n_images": len(record.images),
            }
            out.append(story_from_annotation(obj, record.id))
    return out


# ------------------------------------------------------------ coherence


@dataclass
class EntityGridModel:
    h: int
    alpha: float
    counts: dict = field(default_factory=lambda: defaultdict(Counter))

    def prob(self, role, context):
        counts = self.counts.get(tuple(context), Counter())
        denominator = sum(counts.values()) + self.alpha * len(ROLES)
        if denominator == 0:
            return 1.0 / len(ROLES)
        return (counts[role] + self.alpha) / denominator

    def distribution(self, context):
        return {role: self.prob(role, context) for role in ROLES}


def _transitions(grid, h):
    for column in grid.columns():
        padded = ["-"] * h + column
        for t, role in enumerate(column):
            yield tuple(padded[t : t + h]), role


def train_entity_grid(grids, h=2, alpha=0.1):
    """Count role transitions per entity column, history padded with '-'."""
    if h < 0 or alpha < 0:
        raise DataError("history length and smoothing must be non-negative")
    model = EntityGridModel(h=h, alpha=alpha)
    for grid in grids:
        for context, role in _transitions(grid, h):
            model.counts[context][role] += 1
    return model


def score_coherence(model, grid):
    ll = 0.0
    for context, role in _transitions(grid, model.h):
        p = model.prob(role, context)
        ll += math.log(p) if p > 0 else -math.inf
    cells = len(grid.rows) * len(grid.entities)
    return {"LL": ll, "avg_LL": ll / cells if cells else 0.0}


def coherence_report(stories, model=None, h=2, alpha=0.1):
    grids = [s.grid for s in stories if s.grid is not None]
    if model is None:
        model = train_entity_grid(grids, h, alpha)
    scores = [score_coherence(model, g) for g in grids]
    return {
        "stories": len(grids),
        "LL": float(np.mean([s["LL"] for s in scores])) if scores else 0.0,
        "avg_LL": float(np.mean([s["avg_LL"] for s in scores])) if scores else 0.0,
    }


# -------------------------------------------------------------- Jaccard


def jaccard(a, b):
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def jaccard_similarity(stories):
    """Per-role Jaccard averaged over story pairs, then over image sequences.

    Sequences with fewer than two stories are skipped and counted.
    """
    by_sequence = defaultdict(list)
    for story in stories:
        by_sequence[story.sequence_id].append(story)
    per_role = {role: [] for role in JACCARD_ROLES}
    used = skipped = 0
    for sequence_id in sorted(by_sequence):
        group = by_sequence[sequence_id]
        if len(group) < 2:
            skipped += 1
            continue
        used += 1
        for role in JACCARD_ROLES:
            values = [jaccard(a.role_set(role), b.role_set(role)) for a, b in combinations(group, 2)]
            per_role[role].append(sum(values) / len(values))
    return {
        "sequences": used,
        "skipped": skipped,
        "roles": {role: float(np.mean(v)) if v else 0.0 for role, v in per_role.items()},
    }


# ------------------------------------------------------------ diversity


def event_diversity(stories, top_k=5):
    """Vocabulary and verb counts; percentages are on a 0-100 scale."""
    tokens = [t for s in stories for t in s.tokens]
    verbs = Counter(p for s in stories for p in s.predicates)
    vocab = len(set(tokens))
    unique_verbs = len(verbs)
    occurrences = sum(verbs.values())
    top = {v for v, _ in sorted(verbs.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]}
    diverse = sum(c for v, c in verbs.items() if v not in top)
    return {
        "vocab": vocab,
        "verbs": unique_verbs,
        "verb_vocab_pct": 100.0 * unique_verbs / vocab if vocab else 0.0,
        "verb_token_pct": 100.0 * unique_verbs / len(tokens) if tokens else 0.0,
        "diverse_verb_pct": 100.0 * diverse / occurrences if occurrences else 0.0,
    }


def predicate_ngram_diversity(stories, orders=(1, 2, 3)):
    """Unique:total ratio of predicate n-grams; n-grams never cross stories."""
    ratios = {}
    for n in orders:
        grams = Counter(g for s in stories for g in ngrams(s.predicates, n))
        total = sum(grams.values())
        ratios[n] = len(grams) / total if total else 0.0
    return ratios


# --------------------------------------------------------- groundedness


def percent(count, total):
    """Half-up rounding to one decimal."""
    value = Decimal(count) * 100 / Decimal(total)
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def groundedness_table(annotations):
    """Counts and percentages per (kind, label); kinds without annotations are omitted."""
    counts = Counter((a.kind, a.label) for a in annotations)
    table = {}
    for kind in GROUNDEDNESS_KINDS:
        total = sum(counts[(kind, label)] for label in GROUNDEDNESS_LABELS)
        if not total:
            continue
        table[kind] = {
            label: {"count": counts[(kind, label)], "percent": percent(counts[(kind, label)], total)}
            for label in GROUNDEDNESS_LABELS
        }
        table[kind]["total"] = total
    return table


# ----------------------------------------------------------- statistics


def corpus_stats(stories):
    if not stories:
        return {"texts": 0}
    images = [s.n_images for s in stories]
    return {
        "texts": len(stories),
        "images_per_text": [min(images), max(images)],
        "tokens_per_text": float(np.mean([len(s.tokens) for s in stories])),
        "events_per_text": float(np.mean([s.n_events for s in stories])),
        "characters_per_text": float(np.mean([len(s.characters) for s in stories])),
    }


def analyze_corpus(stories, analyses=ANALYSES, model=None, h=2, alpha=0.1):
    report = {}
    for name in analyses:
        if name == "coherence":
            report[name] = coherence_report(stories, model, h, alpha)
        elif name == "jaccard":
            report[name] = jaccard_similarity(stories)
        elif name == "diversity":
            report[name] = dict(event_diversity(stories))
            report[name].update(
                {"predicate_{}gram".format(n): r for n, r in predicate_ngram_diversity(stories).items()}
            )
        elif name == "groundedness":
            report[name] = groundedness_table([a for s in stories for a in s.groundedness])
        elif name == "stats":
            report[name] = corpus_stats(stories)
        else:
            raise DataError("unknown analysis `{}`".format(name))
    return report


def compare_corpora(corpora, analyses=ANALYSES, h=2, alpha=0.1):
    """Reports for several named corpora; coherence uses one model trained on all of them."""
    model = None
    if "coherence" in analyses:
        grids = [s.grid for stories in corpora.values() for s in stories if s.grid is not None]
        model = train_entity_grid(grids, h, alpha)
    return {name: analyze_corpus(stories, analyses, model, h, alpha) for name, stories in corpora.items()}


# --------------------------------------------------------------- workers


@dataclass(frozen=True)
class WorkerStats:
    worker_id: str
    acceptance_rate: float
    quality: float
    accepted: int
    n_w: int = 0

    def __post_init__(self):
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise DataError("acceptance rate {} outside [0, 1]".format(self.acceptance_rate), self.worker_id)
        if not 1.0 <= self.quality <= 5.0:
            raise DataError("story quality {} outside [1, 5]".format(self.quality), self.worker_id)
        if self.accepted < 0 or self.n_w < 0:
            raise DataError("negative assignment counts", self.worker_id)


def plan_review_sample(stats):
    """Stories to review for one worker: 10, or 10*log10(n_w) from n_w = 10 on, capped at n_w."""
    n_w = stats.n_w if isinstance(stats, WorkerStats) else int(stats)
    if n_w < 0:
        raise DataError("negative story count {}".format(n_w))
    if n_w < 10:
        return min(10, n_w)
    # rounding first keeps exact powers of ten from ceiling up
    return min(n_w, math.ceil(round(10 * math.log10(n_w), 9)))


def qualify(stats):
    return stats.acceptance_rate >= 0.9 and stats.quality > 3.1 and stats.accepted >= 5


def load_workers(path):
    table = pd.read_csv(path, dtype={"worker_id": str})
    required = ["worker_id", "acceptance_rate", "quality", "accepted"]
    missing = [c for c in required if c not in table.columns]
    if missing:
        raise DataError("worker table lacks columns {}".format(", ".join(missing)), str(path))
    if "n_w" not in table.columns:
        table["n_w"] = 0
    return [
        WorkerStats(str(r.worker_id), float(r.acceptance_rate), float(r.quality), int(r.accepted), int(r.n_w))
        for r in table.itertuples(index=False)
    ]


def review_batch(workers):
    """Review sample per worker and whether the qualification is kept or revoked."""
    rows = [
        {
            "worker_id": w.worker_id,
            "n_w": w.n_w,
            "review": plan_review_sample(w),
            "qualified": qualify(w),
            "action": "keep" if qualify(w) else "revoke",
        }
        for w in workers
    ]
    frame = pd.DataFrame(rows, columns=["worker_id", "n_w", "review", "qualified", "action"])
    logger.info(
        "Batch review: {} workers, {} stories to review, {} qualifications revoked".format(
            len(frame), int(frame["review"].sum()), int((frame["action"] == "revoke").sum())
        )
    )
    return frame
