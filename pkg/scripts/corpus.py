"""
Dataset records, tokenizer and vocabulary, entity anonymization, representative
character instances and seeded dataset splits.
"""

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from scripts.data_validate import IngestBounds, validate_record
from scripts.utils import ConfigError, DataError, SizeError, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

MAX_CHARACTERS = 5
GENDERS = ("male", "female", "unknown")
PLACEHOLDER_GENDERS = ("male", "female")

SPECIAL_TOKENS = (
    ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[sent]", "[location]"]
    + ["[male{}]".format(i) for i in range(MAX_CHARACTERS)]
    + ["[female{}]".format(i) for i in range(MAX_CHARACTERS)]
)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, SENT_ID, LOCATION_ID = range(6)
SENT = "[sent]"
LOCATION = "[location]"

TOKEN_RE = re.compile(r"\[[a-z]+\d*\]|\w+|[^\w\s]")
PLACEHOLDER_RE = re.compile(r"^\[(male|female)(\d+)\]$")


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    global_feat: np.ndarray


@dataclass(frozen=True)
class CharacterInstance:
    image_index: int
    bbox: tuple
    sharpness: float


@dataclass(frozen=True, eq=False)
class CharacterRecord:
    char_id: str
    gender: str
    instances: tuple
    representative_feat: np.ndarray


@dataclass(frozen=True, eq=False)
class ObjectRecord:
    object_id: str
    feat: np.ndarray


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int
    kind: str
    name: str


@dataclass(frozen=True)
class SRLEvent:
    predicate: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StoryRecord:
    raw_text: str
    entity_spans: tuple = ()
    srl: tuple = ()
    tokens: tuple = ()
    mapping: dict = field(default_factory=dict)

    def surface_tokens(self):
        return list(self.tokens) if self.tokens else tokenize(self.raw_text)


@dataclass(frozen=True, eq=False)
class ImageSequenceRecord:
    id: str
    images: tuple
    characters: tuple = ()
    objects: tuple = ()
    stories: tuple = ()

    @property
    def feature_dim(self):
        return int(self.images[0].global_feat.shape[0]) if self.images else 0

    def image_matrix(self):
        return np.stack([image.global_feat for image in self.images])

    def character_matrix(self):
        return _stack(
            [c.representative_feat for c in self.characters], self.feature_dim
        )

    def object_matrix(self):
        return _stack([o.feat for o in self.objects], self.feature_dim)

    def to_dict(self):
        return {
            "id": self.id,
            "images": [
                {"image_id": im.image_id, "global_feat": im.global_feat.tolist()}
                for im in self.images
            ],
            "characters": [
                {
                    "char_id": c.char_id,
                    "gender": c.gender,
                    "instances": [
                        {
                            "image_index": inst.image_index,
                            "bbox": list(inst.bbox),
                            "sharpness": inst.sharpness,
                        }
                        for inst in c.instances
                    ],
                    "representative_feat": c.representative_feat.tolist(),
                }
                for c in self.characters
            ],
            "objects": [
                {"object_id": o.object_id, "feat": o.feat.tolist()}
                for o in self.objects
            ],
            "stories": [_story_to_dict(s) for s in self.stories],
        }

    @classmethod
    def from_dict(cls, d, context=None):
        context = context or d.get("id")
        try:
            images = tuple(
                ImageRecord(str(im["image_id"]), _vector(im["global_feat"]))
                for im in d["images"]
            )
            characters = tuple(
                CharacterRecord(
                    char_id=str(c["char_id"]),
                    gender=c.get("gender", "unknown"),
                    instances=tuple(
                        CharacterInstance(
                            int(inst["image_index"]),
                            tuple(int(v) for v in inst.get("bbox", (0, 0, 0, 0))),
                            float(inst.get("sharpness", 0.0)),
                        )
                        for inst in c.get("instances", [])
                    ),
                    representative_feat=_vector(c["representative_feat"]),
                )
                for c in d.get("characters", [])
            )
            objects = tuple(
                ObjectRecord(str(o["object_id"]), _vector(o["feat"]))
                for o in d.get("objects") or []
            )
            stories = tuple(_story_from_dict(s) for s in d.get("stories", []))
            return cls(str(d["id"]), images, characters, objects, stories)
        except KeyError as e:
            raise DataError("missing field {}".format(e), context) from e
        except (TypeError, ValueError) as e:
            raise DataError("malformed record ({})".format(e), context) from e


def _vector(values):
    return np.asarray(values, dtype=np.float64).reshape(-1)


def _stack(vectors, dim):
    if not vectors:
        return np.zeros((0, dim), dtype=np.float64)
    return np.stack(vectors)


def _story_from_dict(s):
    if isinstance(s, str):
        return StoryRecord(raw_text=s)
    return StoryRecord(
        raw_text=s.get("raw_text", ""),
        entity_spans=tuple(
            EntitySpan(int(e["start"]), int(e["end"]), e["kind"], e["name"])
            for e in s.get("entity_spans", [])
        ),
        srl=tuple(
            SRLEvent(
                ev["predicate"],
                {role: tuple(tokens) for role, tokens in ev.get("args", {}).items()},
            )
            for ev in s.get("srl") or []
        ),
        tokens=tuple(s.get("tokens", ())),
        mapping=dict(s.get("mapping", {})),
    )


def _story_to_dict(s):
    d = {
        "raw_text": s.raw_text,
        "entity_spans": [
            {"start": e.start, "end": e.end, "kind": e.kind, "name": e.name}
            for e in s.entity_spans
        ],
        "srl": [
            {"predicate": ev.predicate, "args": {r: list(t) for r, t in ev.args.items()}}
            for ev in s.srl
        ],
        "tokens": list(s.tokens),
    }
    if s.mapping:
        d["mapping"] = s.mapping
    return d


def load_dataset(path, bounds=None):
    """Read and validate a JSON Lines dataset, one ImageSequenceRecord per line."""
    bounds = bounds or IngestBounds()
    records = []
    seen = set()
    for lineno, obj in read_jsonl(path):
        context = "{}:{}".format(path, lineno)
        record = ImageSequenceRecord.from_dict(obj, context)
        validate_record(record, bounds, context)
        if record.id in seen:
            raise DataError("duplicate sequence id `{}`".format(record.id), context)
        seen.add(record.id)
        records.append(record)
    logger.info("Read {} image sequences from {}".format(len(records), path))
    return records


def save_dataset(path, records):
    write_jsonl(path, (r.to_dict() for r in records))


def tokenize(text):
    """Lowercase and split on whitespace and punctuation; bracketed placeholders stay whole."""
    return TOKEN_RE.findall(text.lower())


def load_gender_table(path):
    """Read ``name,male_count,female_count`` into ``{name: (male, female)}``."""
    table = pd.read_csv(path)
    expected = ["name", "male_count", "female_count"]
    if list(table.columns[:3]) != expected:
        raise DataError(
            "gender table header must be {}".format(",".join(expected)), str(path)
        )
    return {
        str(row.name).strip().lower(): (int(row.male_count), int(row.female_count))
        for row in table.itertuples(index=False)
    }


def gender_of(name, gender_table):
    """Majority gender of the first name in the table, else ``unknown``."""
    parts = name.strip().lower().split()
    if not parts:
        return "unknown"
    male, female = gender_table.get(parts[0], gender_table.get(name.strip().lower(), (0, 0)))
    if male > female:
        return "male"
    if female > male:
        return "female"
    return "unknown"


def anonymize(story, gender_table):
    """Replace person names with [maleK]/[femaleK] and locations with [location].

    The k-th distinct name of a gender, in order of first mention, becomes
    placeholder k. Names of unknown gender alternate male/female by the order
    in which they are first mentioned.

    Returns:
        story: the anonymized StoryRecord (entity spans consumed)
        mapping: placeholder -> original name
    """
    if not story.entity_spans:
        return story, dict(story.mapping)
    spans = sorted(story.entity_spans, key=lambda s: s.start)
    for prev, nxt in zip(spans, spans[1:]):
        if nxt.start < prev.end:
            raise DataError(
                "overlapping entity spans `{}` and `{}`".format(prev.name, nxt.name)
            )

    text = story.raw_text
    slots = {}
    mapping = {}
    counts = {"male": 0, "female": 0}
    unknown_seen = 0
    pieces = []
    cursor = 0
    for span in spans:
        pieces.append(text[cursor : span.start])
        if span.kind == "location":
            placeholder = LOCATION
        elif span.kind == "person":
            key = span.name.strip().lower()
            if key not in slots:
                gender = gender_of(span.name, gender_table)
                if gender == "unknown":
                    gender = PLACEHOLDER_GENDERS[unknown_seen % 2]
                    unknown_seen += 1
                if counts[gender] >= MAX_CHARACTERS:
                    raise SizeError(
                        "more than {} distinct {} characters".format(
                            MAX_CHARACTERS, gender
                        )
                    )
                slots[key] = "[{}{}]".format(gender, counts[gender])
                mapping[slots[key]] = span.name
                counts[gender] += 1
            placeholder = slots[key]
        else:
            raise DataError("unknown entity kind `{}`".format(span.kind))
        pieces.append(" {} ".format(placeholder))
        cursor = span.end
    pieces.append(text[cursor:])
    anonymized = " ".join("".join(pieces).split())
    return (
        replace(story, raw_text=anonymized, entity_spans=(), tokens=(), mapping=mapping),
        mapping,
    )


def select_representative(character):
    """Image index of the sharpest instance; ties go to the lowest image index."""
    if not character.instances:
        raise DataError("character has no instances", character.char_id)
    best = min(character.instances, key=lambda inst: (-inst.sharpness, inst.image_index))
    return best.image_index


class Vocabulary:
    """Token <-> id bijection; the special tokens hold the lowest ids."""

    def __init__(self, tokens=(), min_freq=1):
        self.itos = list(SPECIAL_TOKENS)
        specials = set(SPECIAL_TOKENS)
        self.itos.extend(t for t in tokens if t not in specials)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")
        self.min_freq = min_freq

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id_of(self, token):
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.id_of(t) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def to_dict(self):
        return {"min_freq": self.min_freq, "tokens": self.itos}

    @classmethod
    def from_dict(cls, d):
        tokens = d["tokens"]
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise DataError("vocabulary does not start with the special tokens")
        return cls(tokens[len(SPECIAL_TOKENS) :], d.get("min_freq", 1))

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def build_vocab(corpus, min_freq=1):
    """Vocabulary of tokens seen at least ``min_freq`` times, most frequent first."""
    counts = Counter(tok for stream in corpus for tok in stream)
    kept = sorted(
        (tok for tok, n in counts.items() if n >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(kept, min_freq)


def encode_story(vocab, tokens):
    return vocab.encode(tokens) + [EOS_ID]


def split_dataset(records, seed, val_count, test_count):
    """Seeded partition by sequence id into train/val/test.

    Returns:
        dict with keys train, val, test; each split sorted by sequence id
    """
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or not 0 <= seed < 2**32:
        raise ConfigError("split seed must be an integer in [0, 2**32), got {!r}".format(seed))
    if val_count < 0 or test_count < 0:
        raise SizeError("split counts must be non-negative")
    records = sorted(records, key=lambda r: r.id)
    held_count = val_count + test_count
    if held_count >= len(records) and held_count > 0:
        raise SizeError(
            "cannot hold out {} of {} sequences".format(held_count, len(records))
        )
    if held_count == 0:
        return {"train": records, "val": [], "test": []}

    train, held = train_test_split(records, test_size=held_count, random_state=seed)
    if val_count == 0:
        val, test = [], held
    elif test_count == 0:
        val, test = held, []
    else:
        val, test = train_test_split(held, test_size=test_count, random_state=seed)

    def by_id(split):
        return sorted(split, key=lambda r: r.id)

    return {"train": by_id(train), "val": by_id(val), "test": by_id(test)}
