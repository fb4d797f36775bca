"""
Synthetic corpus whose stories are determined by the character grid.

Every sequence gets its own orthonormal character features, and each image's
global feature equals the feature of the one character shown in it, so each
grid row is one-hot. The story has one ``[maleB] <verb> [sent]`` section per
image, naming the character of that image. Which placeholder fills a section
can only be read off the grid (or recomputed from the raw features).
"""

import numpy as np

from scripts.corpus import (
    CharacterInstance,
    CharacterRecord,
    ImageRecord,
    ImageSequenceRecord,
    StoryRecord,
)

VERBS = ("walks", "talks", "waits", "runs", "sings")
SECTION_LENGTH = 3


def synthetic_sequence(rng, index, n_images=5, n_characters=3, dim=8):
    q, _ = np.linalg.qr(rng.normal(size=(dim, n_characters)))
    features = q.T
    shown = rng.integers(n_characters, size=n_images)
    images = tuple(ImageRecord("img{}".format(a), features[b].copy()) for a, b in enumerate(shown))
    characters = tuple(
        CharacterRecord(
            char_id="c{}".format(b),
            gender="male",
            instances=tuple(
                CharacterInstance(int(a), (0, 0, 1, 1), 1.0) for a in np.flatnonzero(shown == b)
            ),
            representative_feat=features[b].copy(),
        )
        for b in range(n_characters)
    )
    tokens = []
    for b in shown:
        tokens += ["[male{}]".format(b), VERBS[b % len(VERBS)], "[sent]"]
    story = StoryRecord(raw_text=" ".join(tokens), tokens=tuple(tokens))
    return ImageSequenceRecord(
        id="syn{:05d}".format(index), images=images, characters=characters, stories=(story,)
    )


def synthetic_corpus(n_sequences, seed, n_images=5, n_characters=3, dim=8):
    rng = np.random.default_rng(seed)
    return [synthetic_sequence(rng, i, n_images, n_characters, dim) for i in range(n_sequences)]


def placeholder_positions(n_images=5):
    """Story indices holding the grid-determined placeholder of each section."""
    return list(range(0, SECTION_LENGTH * n_images, SECTION_LENGTH))
