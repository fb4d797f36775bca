"""
Evaluate step: score hypothesis files with the metric suite and compare
systems over seeds.

A hypothesis file is JSON Lines of ``{id, hypothesis, references}`` (token
lists or plain strings). Files written by ``generate`` (``{sequence_id,
tokens}``) are accepted too when a dataset supplies the references.
"""

import io
import logging
from collections import OrderedDict

import mlflow
import pandas as pd
from tabulate import tabulate

from scripts.corpus import load_dataset, tokenize
from scripts.metrics import ALL_METRICS, UNIT_METRICS, EvalPair, aggregate_runs, evaluate_corpus
from scripts.utils import ConfigError, DataError, dump_json, read_jsonl

logger = logging.getLogger(__name__)


def _tokens(value):
    return tokenize(value) if isinstance(value, str) else [str(t) for t in value]


def read_pairs(path, references=None):
    """EvalPairs from a hypothesis file; ``references`` maps sequence id -> token lists."""
    pairs = []
    for lineno, row in read_jsonl(path):
        context = "{}:{}".format(path, lineno)
        seq_id = row.get("id", row.get("sequence_id"))
        if "hypothesis" in row:
            hypothesis = _tokens(row["hypothesis"])
        elif "tokens" in row:
            hypothesis = _tokens(row["tokens"])
        else:
            raise DataError("row has neither `hypothesis` nor `tokens`", context)
        if "references" in row:
            refs = [_tokens(r) for r in row["references"]]
        elif references is not None and seq_id in references:
            refs = references[seq_id]
        else:
            raise DataError("no references for sequence `{}`".format(seq_id), context)
        if not refs:
            raise DataError("empty reference list", context)
        pairs.append(EvalPair(hypothesis, refs))
    if not pairs:
        raise DataError("no hypotheses", str(path))
    return pairs


def references_from_dataset(path):
    return {r.id: [s.surface_tokens() for s in r.stories] for r in load_dataset(path)}


def parse_run_spec(spec):
    """``SYSTEM=PATH`` or bare ``PATH`` (system named ``system``)."""
    system, sep, path = spec.partition("=")
    if not sep:
        return "system", spec
    if not system or not path:
        raise ConfigError("bad run spec `{}`, expected SYSTEM=PATH".format(spec))
    return system, path


def evaluate_runs(run_specs, metrics=ALL_METRICS, reference_system=None, references=None):
    """Score every run file and aggregate the runs of each system.

    Returns:
        per_run: list of ``{system, path, scores}``
        report: MetricReport banded against ``reference_system`` (first system by default)
    """
    runs = OrderedDict()
    for spec in run_specs:
        system, path = parse_run_spec(spec)
        runs.setdefault(system, []).append(path)
    if not runs:
        raise ConfigError("no runs to evaluate")
    reference_system = reference_system or next(iter(runs))

    per_run = []
    scores = {}
    for system, paths in runs.items():
        scores[system] = {m: [] for m in metrics}
        for path in paths:
            result = evaluate_corpus(read_pairs(path, references), metrics)
            per_run.append({"system": system, "path": path, "scores": result})
            for m, v in result.items():
                scores[system][m].append(v)
            logger.info(
                "{} {}: {}".format(system, path, ", ".join("{} {:.4f}".format(m, v) for m, v in result.items()))
            )
    return per_run, aggregate_runs(scores, reference_system)


def report_frame(report):
    rows = []
    for system, summaries in report.systems.items():
        row = {"system": system}
        for metric in report.metrics:
            s = summaries.get(metric)
            if s is None:
                continue
            factor = 100.0 if metric in UNIT_METRICS else 1.0
            row[metric] = "{:.2f}{}".format(s.mean * factor, s.band)
            row[metric + " std"] = "{:.2f}".format(s.std * factor)
        rows.append(row)
    return pd.DataFrame(rows)


def format_report(report, fmt="text"):
    if fmt == "json":
        return dump_json(report.to_dict())
    frame = report_frame(report)
    if fmt == "csv":
        buf = io.StringIO()
        frame.to_csv(buf, index=False)
        return buf.getvalue()
    flagged = [
        "{} {}".format(system, metric)
        for system, summaries in report.systems.items()
        for metric, s in summaries.items()
        if s.zero_variance
    ]
    table = tabulate(frame.values.tolist(), headers=list(frame.columns), tablefmt="simple")
    footer = "bands vs {}: + >=1 std, * >=2 std, ** >=3 std".format(report.reference)
    if flagged:
        footer += "\nzero reference variance: " + ", ".join(flagged)
    return table + "\n\n" + footer


def log_report(report):
    with mlflow.start_run(run_name="evaluate", nested=mlflow.active_run() is not None):
        for system, summaries in report.systems.items():
            for metric, s in summaries.items():
                key = "{}_{}".format(system, metric).replace("+", "_plus_").replace(",", "_")
                mlflow.log_metric(key, s.mean)
        mlflow.log_dict(report.to_dict(), "metrics/report.json")
