"""
Prepare step: ingest a dataset, anonymize and tokenize its stories, split it
by sequence id and build the vocabulary from the training split.

Writes ``train.jsonl``, ``val.jsonl``, ``test.jsonl``, ``vocab.json`` and
``schema.json`` into the output directory and logs them to MLflow under
``trainvaltest_data/`` and ``data_schema/``.
"""

import json
import logging
import os
from dataclasses import replace

import mlflow

from scripts.corpus import (
    anonymize,
    build_vocab,
    load_dataset,
    load_gender_table,
    save_dataset,
    split_dataset,
    tokenize,
)
from scripts.data_validate import compare_to_schema, infer_schema
from scripts.utils import DataError, dump_json, file_md5

logger = logging.getLogger(__name__)


def prepare_story(story, gender_table):
    if story.entity_spans:
        story, _ = anonymize(story, gender_table)
    return replace(story, tokens=tuple(tokenize(story.raw_text)))


def prepare_records(records, gender_table):
    """Anonymized, tokenized copies of the records."""
    prepared = []
    for record in records:
        try:
            stories = tuple(prepare_story(s, gender_table) for s in record.stories)
        except DataError as e:
            raise DataError(str(e), record.id) from e
        prepared.append(replace(record, stories=stories))
    return prepared


def prepare(dataset, out_dir, names=None, seed=0, val_count=1, test_count=1, min_freq=1, schema=None, bounds=None):
    """Run the prepare step end to end.

    Args:
        dataset (str): JSON Lines dataset
        out_dir (str): where split files, vocabulary and schema are written
        names (str): gender table CSV used to anonymize person names
        schema (str): schema.json of an earlier dataset to check drift against

    Returns:
        dict with split sizes, vocabulary size and the dataset md5
    """
    records = load_dataset(dataset, bounds)
    if not records:
        raise DataError("dataset is empty", str(dataset))
    gender_table = load_gender_table(names) if names else {}

    current_schema = infer_schema(records)
    if schema:
        with open(schema, "r", encoding="utf-8") as f:
            previous = json.load(f)
        if compare_to_schema(records, previous) == "Failed":
            raise DataError("dataset does not match schema {}".format(schema), str(dataset))

    prepared = prepare_records(records, gender_table)
    splits = split_dataset(prepared, seed, val_count, test_count)
    vocab = build_vocab(
        (s.surface_tokens() for r in splits["train"] for s in r.stories), min_freq
    )

    os.makedirs(out_dir, exist_ok=True)
    for name, split in splits.items():
        save_dataset(os.path.join(out_dir, "{}.jsonl".format(name)), split)
        logger.info("Wrote {} sequences to {}.jsonl".format(len(split), name))
    vocab.save(os.path.join(out_dir, "vocab.json"))
    with open(os.path.join(out_dir, "schema.json"), "w", encoding="utf-8") as f:
        f.write(dump_json(current_schema))
    logger.info("Vocabulary has {} tokens (min_freq={})".format(len(vocab), min_freq))

    summary = {
        "train": len(splits["train"]),
        "val": len(splits["val"]),
        "test": len(splits["test"]),
        "vocab": len(vocab),
        "dataset_md5": file_md5(dataset),
    }
    with mlflow.start_run(run_name="prepare", nested=mlflow.active_run() is not None):
        mlflow.log_params({"seed": seed, "val_count": val_count, "test_count": test_count, "min_freq": min_freq})
        mlflow.set_tag("dataset_hash", summary["dataset_md5"])
        mlflow.log_dict(current_schema, "data_schema/schema.json")
        mlflow.log_artifacts(out_dir, "trainvaltest_data")
    return summary
