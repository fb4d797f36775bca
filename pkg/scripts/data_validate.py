"""
Ingest validation for image-sequence records.

Hard invariants (image count bounds, feature dimensions, character limits,
instance indices) raise DataError. Drift against a previously recorded schema
only warns, so a new batch of data can still be inspected.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from scripts.utils import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IngestBounds:
    min_images: int = 5
    max_images: int = 10
    max_characters: int = 5
    max_objects: int = 20


def validate_record(record, bounds=None, context=None):
    bounds = bounds or IngestBounds()
    context = context or record.id
    n_images = len(record.images)
    if not bounds.min_images <= n_images <= bounds.max_images:
        raise DataError(
            "sequence `{}` has {} images, expected {} to {}".format(
                record.id, n_images, bounds.min_images, bounds.max_images
            ),
            context,
        )
    if len(record.characters) > bounds.max_characters:
        raise DataError(
            "sequence `{}` has {} characters, at most {} allowed".format(
                record.id, len(record.characters), bounds.max_characters
            ),
            context,
        )
    if len(record.objects) > bounds.max_objects:
        raise DataError(
            "sequence `{}` has {} objects, at most {} allowed".format(
                record.id, len(record.objects), bounds.max_objects
            ),
            context,
        )

    dim = record.feature_dim
    vectors = [("image " + im.image_id, im.global_feat) for im in record.images]
    vectors += [("character " + c.char_id, c.representative_feat) for c in record.characters]
    vectors += [("object " + o.object_id, o.feat) for o in record.objects]
    for what, vec in vectors:
        if vec.shape != (dim,):
            raise DataError(
                "{} has dimension {}, expected {}".format(what, vec.shape[0], dim),
                context,
            )
        if not np.all(np.isfinite(vec)):
            raise DataError("{} has non-finite features".format(what), context)

    for c in record.characters:
        if c.gender not in ("male", "female", "unknown"):
            raise DataError(
                "character `{}` has unknown gender `{}`".format(c.char_id, c.gender),
                context,
            )
        for inst in c.instances:
            if not 0 <= inst.image_index < n_images:
                raise DataError(
                    "character `{}` instance points at image {} of {}".format(
                        c.char_id, inst.image_index, n_images
                    ),
                    context,
                )

    for story in record.stories:
        n_sections = count_sections(story.surface_tokens())
        if n_sections > n_images:
            raise DataError(
                "story has {} [sent] sections for {} images".format(n_sections, n_images),
                context,
            )


def count_sections(tokens):
    """Number of non-empty [sent]-delimited sections."""
    n, open_section = 0, False
    for tok in tokens:
        if tok == "[sent]":
            open_section = False
        elif not open_section:
            n += 1
            open_section = True
    return n


def infer_schema(records):
    """Summarise feature dimension and count ranges of a dataset."""
    if not records:
        return {}

    def count_range(values):
        return {"min": int(min(values)), "max": int(max(values))}

    return {
        "feature_dim": {"type": "int", "domain": sorted({r.feature_dim for r in records})},
        "images": count_range([len(r.images) for r in records]),
        "characters": count_range([len(r.characters) for r in records]),
        "objects": count_range([len(r.objects) for r in records]),
        "stories": count_range([len(r.stories) for r in records]),
    }


def compare_to_schema(records, schema):
    """Check a dataset against a schema from an earlier run.

    Returns:
        "Failed" when the feature dimension changed (models cannot be reused),
        otherwise "Passed"; count ranges outside the schema only warn.
    """
    current = infer_schema(records)
    for key in schema:
        if key not in current:
            logger.error("Schema field `{}` is missing from dataset".format(key))
            return "Failed"

    old_dims = set(schema["feature_dim"]["domain"])
    new_dims = set(current["feature_dim"]["domain"])
    if new_dims != old_dims:
        logger.error(
            'Expected feature dimension {} but got {}'.format(
                sorted(old_dims), sorted(new_dims)
            )
        )
        return "Failed"

    for key in ("images", "characters", "objects", "stories"):
        if key not in schema:
            continue
        if current[key]["max"] > schema[key]["max"]:
            warnings.warn(
                "Field `{}` has values ({}) higher than max of schema ({})".format(
                    key, current[key]["max"], schema[key]["max"]
                )
            )
        if current[key]["min"] < schema[key]["min"]:
            warnings.warn(
                "Field `{}` has values ({}) lower than min of schema ({})".format(
                    key, current[key]["min"], schema[key]["min"]
                )
            )
    return "Passed"
