"""
Greedy and nucleus decoding, plus realization of generated placeholder text
into readable stories.
"""

import logging
import re
from dataclasses import dataclass

import numpy as np

from scripts.corpus import EOS_ID, LOCATION, PLACEHOLDER_RE, SENT
from scripts.model import assemble_input, forward_logits
from scripts.numerics import softmax
from scripts.utils import ConfigError, NumericError, ResourceError

logger = logging.getLogger(__name__)

DECODING_MODES = ("greedy", "nucleus")
DEFAULT_LOCATIONS = ("the park", "the city", "the harbor", "the village", "the station")
_BRACKETED = re.compile(r"^\[[^\]]+\]$")


@dataclass(frozen=True)
class DecodingConfig:
    mode: str = "nucleus"
    p: float = 0.1
    max_new_tokens: int = 200
    seed: int = 0

    def validate(self):
        if self.mode not in DECODING_MODES:
            raise ConfigError("unknown decoding mode `{}`".format(self.mode))
        if not 0.0 < self.p <= 1.0:
            raise ConfigError("nucleus p must be in (0, 1], got {}".format(self.p))
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be non-negative")
        return self


def _check_distribution(dist):
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or dist.size == 0:
        raise NumericError("distribution must be a non-empty vector")
    if not np.all(np.isfinite(dist)) or np.any(dist < 0):
        raise NumericError("distribution has negative or non-finite entries")
    if abs(dist.sum() - 1.0) > 1e-9:
        raise NumericError("distribution sums to {}, not 1".format(dist.sum()))
    return dist


def nucleus_support(dist, p):
    """Token ids of the nucleus and their renormalized probabilities.

    Tokens are ranked by probability, ties to the lower id; the nucleus is the
    shortest ranked prefix whose cumulative mass reaches ``p``.
    """
    dist = _check_distribution(dist)
    if not 0.0 < p <= 1.0:
        raise ConfigError("nucleus p must be in (0, 1], got {}".format(p))
    order = np.lexsort((np.arange(dist.size), -dist))
    cumulative = np.cumsum(dist[order])
    k = min(int(np.searchsorted(cumulative, p, side="left")) + 1, dist.size)
    support = order[:k]
    probs = dist[support]
    return support, probs / probs.sum()


def nucleus_sample(dist, p, rng):
    support, probs = nucleus_support(dist, p)
    if support.size == 1:
        return int(support[0])
    return int(support[rng.choice(support.size, p=probs)])


def generate(model, seq, config, index=0):
    """Autoregressive story ids after the conditioning prefix and [BOS].

    Stops at [EOS] (not included) or after ``max_new_tokens`` / ``T_max`` tokens.
    Nucleus mode draws from a generator seeded by ``(config.seed, index)``.
    """
    config.validate()
    rng = np.random.default_rng([config.seed, index])
    limit = min(config.max_new_tokens, model.config.t_max)
    ids = []
    for _ in range(limit):
        logits = forward_logits(model, assemble_input(model.config, seq, ids))[-1]
        if config.mode == "greedy":
            token = int(np.argmax(logits))
        else:
            token = nucleus_sample(softmax(logits), config.p, rng)
        if token == EOS_ID:
            break
        ids.append(token)
    return ids


def names_from_gender_table(table):
    """Split a gender table into majority-gender name pools, sorted and capitalized."""
    pools = {"male": [], "female": []}
    for name, (male, female) in sorted(table.items()):
        if male > female:
            pools["male"].append(name.title())
        elif female > male:
            pools["female"].append(name.title())
    return pools


def detokenize(tokens):
    """Join tokens with spaces and re-attach punctuation and contractions."""
    text = " ".join(tokens)
    text = re.sub(r" ([.,!?;:%)\]}])", r"\1", text)
    text = re.sub(r"([(\[{]) ", r"\1", text)
    text = re.sub(r"(\w) ' (\w)", r"\1'\2", text)
    text = re.sub(r"(\w) - (\w)", r"\1-\2", text)
    return re.sub(r"(^|[.!?] )([a-z])", lambda m: m.group(1) + m.group(2).upper(), text)


def realize(tokens, names, rng, locations=DEFAULT_LOCATIONS):
    """Render a token stream for display.

    Each distinct placeholder gets one name, drawn without replacement from
    ``names[gender]``; [location] gets one place name per story; [sent]
    starts a new paragraph; other bracketed tokens are dropped.
    """
    assigned = {}
    used = set()
    location = None
    paragraphs, words = [], []
    for tok in tokens:
        match = PLACEHOLDER_RE.match(tok)
        if match:
            if tok not in assigned:
                gender = match.group(1)
                pool = [n for n in names.get(gender, ()) if n not in used]
                if not pool:
                    raise ResourceError("no {} names left for `{}`".format(gender, tok))
                assigned[tok] = pool[int(rng.integers(len(pool)))]
                used.add(assigned[tok])
            words.append(assigned[tok])
        elif tok == LOCATION:
            if location is None:
                if not locations:
                    raise ResourceError("no location names to realize [location]")
                location = locations[int(rng.integers(len(locations)))]
            words.append(location)
        elif tok == SENT:
            if words:
                paragraphs.append(detokenize(words))
            words = []
        elif not _BRACKETED.match(tok):
            words.append(tok)
    if words:
        paragraphs.append(detokenize(words))
    return "\n\n".join(paragraphs)
