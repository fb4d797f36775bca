"""
Command line entry point for the whole pipeline:

    prepare -> train -> generate -> evaluate, plus grid, analyze and plan.

A YAML file given with ``--config`` supplies option defaults per subcommand
(``train: {epochs: 5, seeds: "1,2"}``); flags on the command line win.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric or
training error.
"""

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd
from tabulate import tabulate

from scripts import analytics, chargrid
from scripts.checkpoint import load_checkpoint
from scripts.corpus import Vocabulary, load_dataset, load_gender_table
from scripts.decoding import DecodingConfig, detokenize, generate, names_from_gender_table, realize
from scripts.evaluate import evaluate_runs, format_report, log_report, references_from_dataset
from scripts.metrics import ALL_METRICS
from scripts.model import FEATURE_SETS, GRID_MODES, VARIANTS, ModelConfig, variant_config
from scripts.preprocess import prepare as prepare_step
from scripts.train import TrainConfig, fit
from scripts.utils import ConfigError, DataError, VWPError, dump_json, file_md5, load_config, setup_logging, write_jsonl

logger = logging.getLogger(__name__)

PROG = "vwp"


def _int_list(value):
    if isinstance(value, (list, tuple)):
        value = ",".join(str(v) for v in value)
    try:
        return tuple(int(v) for v in str(value).split(",") if v.strip())
    except ValueError as e:
        raise ConfigError("expected comma-separated integers, got `{}`".format(value)) from e


def _name_list(value, allowed, what):
    names = tuple(v.strip() for v in str(value).split(",") if v.strip())
    unknown = [n for n in names if n not in allowed]
    if unknown:
        raise ConfigError("unknown {}: {}".format(what, ", ".join(unknown)))
    return names


def _emit(text, out=None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as f:
            f.write(text if text.endswith("\n") else text + "\n")
        logger.info("Wrote {}".format(out))
    else:
        click.echo(text)


@click.group(help="Character-grid visual story generation pipeline.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML file of per-subcommand option defaults.")
@click.pass_context
def cli(ctx, config_path):
    setup_logging()
    ctx.default_map = load_config(config_path)


@cli.command(help="Ingest, anonymize, tokenize and split a dataset; build the vocabulary.")
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default="prepared")
@click.option("--names", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Gender table CSV (name,male_count,female_count).")
@click.option("--seed", type=int, default=0)
@click.option("--val-count", type=click.IntRange(0), default=1)
@click.option("--test-count", type=click.IntRange(0), default=1)
@click.option("--min-freq", type=click.IntRange(1), default=1)
@click.option("--schema", type=click.Path(exists=True, dir_okay=False), default=None,
              help="schema.json of an earlier dataset to check drift against.")
def prepare(dataset, out, names, seed, val_count, test_count, min_freq, schema):
    summary = prepare_step(dataset, out, names, seed, val_count, test_count, min_freq, schema)
    click.echo(dump_json(summary))


@cli.command(help="Print the character (or object/entity) grid of one sequence.")
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--sequence", type=str, required=True)
@click.option("--mode", type=click.Choice(["char", "obj", "entity"]), default="char")
@click.option("--format", "fmt", type=click.Choice(["text", "csv", "json"]), default="text")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def grid(dataset, sequence, mode, fmt, out):
    records = {r.id: r for r in load_dataset(dataset)}
    if sequence not in records:
        raise DataError("no sequence `{}`".format(sequence), dataset)
    compute = {
        "char": chargrid.compute_grid,
        "obj": chargrid.compute_object_grid,
        "entity": chargrid.compute_entity_grid,
    }[mode]
    result = compute(records[sequence])
    csv_text, table = chargrid.grid_report(result)
    if fmt == "csv":
        _emit(csv_text, out)
    elif fmt == "json":
        _emit(
            dump_json(
                {
                    "image_ids": list(result.image_ids),
                    "column_ids": list(result.column_ids),
                    "values": result.values.tolist(),
                }
            ),
            out,
        )
    else:
        _emit(table, out)


def _model_config(variant, features, grid_mode, **kwargs):
    if variant:
        return variant_config(variant, **kwargs)
    return ModelConfig(
        features=_name_list(features, FEATURE_SETS, "features"), grid_mode=grid_mode, **kwargs
    ).validate()


@cli.command(help="Train one model per seed and select epochs by validation METEOR.")
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Output directory of `prepare`.")
@click.option("--out", type=click.Path(file_okay=False), default="checkpoints")
@click.option("--seeds", type=str, default="1,2,3")
@click.option("--epochs", type=click.IntRange(1), default=15)
@click.option("--batch-size", type=click.IntRange(1), default=8)
@click.option("--lr", type=float, default=1e-3)
@click.option("--variant", type=click.Choice(sorted(VARIANTS)), default=None,
              help="Named feature/grid preset; overrides --features and --grid-mode.")
@click.option("--features", type=str, default="global,char")
@click.option("--grid-mode", type=click.Choice(GRID_MODES), default="char")
@click.option("--d-model", type=click.IntRange(1), default=128)
@click.option("--n-layers", type=click.IntRange(0), default=2)
@click.option("--n-heads", type=click.IntRange(1), default=4)
@click.option("--t-max", type=click.IntRange(1), default=256)
@click.option("--dropout", type=float, default=0.1)
@click.option("--decoding", type=click.Choice(["greedy", "nucleus"]), default="nucleus")
@click.option("--p", type=float, default=0.1)
@click.option("--max-new-tokens", type=click.IntRange(0), default=200)
@click.option("--seed", type=int, default=0, help="Validation decoding seed.")
def train(data_dir, out, seeds, epochs, batch_size, lr, variant, features, grid_mode, d_model,
          n_layers, n_heads, t_max, dropout, decoding, p, max_new_tokens, seed):
    setup_logging(artifact_dir=out)
    splits = {
        name: load_dataset(os.path.join(data_dir, "{}.jsonl".format(name)))
        for name in ("train", "val")
    }
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.json"))
    model_config = _model_config(
        variant,
        features,
        grid_mode,
        vocab_size=len(vocab),
        feat_dim=splits["train"][0].feature_dim if splits["train"] else 1,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        t_max=t_max,
        dropout=dropout,
    )
    config = TrainConfig(
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        seeds=_int_list(seeds),
        decoding=DecodingConfig(mode=decoding, p=p, max_new_tokens=max_new_tokens, seed=seed),
        checkpoint_dir=out,
    )
    logs, summary = fit(
        config,
        splits,
        model_config,
        vocab,
        out_dir=out,
        dataset_hash=file_md5(os.path.join(data_dir, "train.jsonl")),
    )
    click.echo(dump_json({"runs": [log.to_dict() for log in logs], "summary": summary}))


@cli.command(help="Decode stories for every sequence of a dataset.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--vocab", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--decoding", type=click.Choice(["greedy", "nucleus"]), default="greedy")
@click.option("--p", type=float, default=0.1)
@click.option("--max-new-tokens", type=click.IntRange(0), default=200)
@click.option("--seed", type=int, default=0)
@click.option("--names", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Gender table CSV; realizes placeholders with sampled names.")
def generate_cmd(checkpoint, dataset, vocab, out, decoding, p, max_new_tokens, seed, names):
    model = load_checkpoint(checkpoint)
    vocabulary = Vocabulary.load(vocab)
    if len(vocabulary) != model.config.vocab_size:
        raise DataError(
            "vocabulary has {} tokens, model expects {}".format(len(vocabulary), model.config.vocab_size),
            vocab,
        )
    config = DecodingConfig(mode=decoding, p=p, max_new_tokens=max_new_tokens, seed=seed).validate()
    pools = names_from_gender_table(load_gender_table(names)) if names else None
    rows = []
    for index, record in enumerate(load_dataset(dataset)):
        tokens = vocabulary.decode(generate(model, record, config, index=index))
        if pools is not None:
            text = realize(tokens, pools, np.random.default_rng([seed, index]))
        else:
            text = detokenize(tokens)
        rows.append({"sequence_id": record.id, "seed": seed, "tokens": tokens, "text": text})
    if out:
        write_jsonl(out, rows)
        logger.info("Wrote {} stories to {}".format(len(rows), out))
    else:
        for row in rows:
            click.echo(json.dumps(row, sort_keys=True, ensure_ascii=False))


cli.add_command(generate_cmd, name="generate")


@cli.command(help="Score hypothesis files and compare systems over seeds.")
@click.option("--run", "runs", multiple=True, required=True, help="[SYSTEM=]PATH, once per seed.")
@click.option("--reference-system", type=str, default=None)
@click.option("--references", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Dataset supplying references for files written by `generate`.")
@click.option("--metrics", type=str, default=",".join(ALL_METRICS))
@click.option("--format", "fmt", type=click.Choice(["text", "json", "csv"]), default="text")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def evaluate(runs, reference_system, references, metrics, fmt, out):
    refs = references_from_dataset(references) if references else None
    _, report = evaluate_runs(
        runs, _name_list(metrics, ALL_METRICS, "metrics"), reference_system, refs
    )
    log_report(report)
    _emit(format_report(report, fmt), out)


def _render_analysis(reports, fmt):
    if fmt == "json":
        return dump_json(reports)
    rows = {}
    for corpus, report in reports.items():
        for analysis, values in report.items():
            flat = pd.json_normalize(values, sep=".").to_dict(orient="records")[0] if values else {}
            for key, value in flat.items():
                rows.setdefault((analysis, key), {})[corpus] = value
    frame = pd.DataFrame.from_dict(rows, orient="index")
    frame.index = ["{} {}".format(a, k) for a, k in frame.index]
    if fmt == "csv":
        return frame.to_csv(index_label="measure")
    return tabulate(frame.fillna("").reset_index().values.tolist(),
                    headers=["measure"] + list(frame.columns), tablefmt="simple", floatfmt=".4f")


@cli.command(help="Coherence, Jaccard, diversity, groundedness and statistics of story corpora.")
@click.option("--annotations", multiple=True, help="NAME=PATH of an annotated-story file; repeatable.")
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Analyze the stories of a dataset instead.")
@click.option("--analysis", "analyses", type=click.Choice(analytics.ANALYSES), multiple=True)
@click.option("--h", "history", type=click.IntRange(0), default=2)
@click.option("--alpha", type=click.FloatRange(0.0), default=0.1)
@click.option("--format", "fmt", type=click.Choice(["text", "json", "csv"]), default="text")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def analyze(annotations, dataset, analyses, history, alpha, fmt, out):
    corpora = {}
    for spec in annotations:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        if not os.path.exists(path):
            raise DataError("no such annotation file", path)
        corpora[name] = analytics.load_annotations(path)
    if dataset:
        corpora[Path(dataset).stem] = analytics.stories_from_records(load_dataset(dataset))
    if not corpora:
        raise ConfigError("give at least one --annotations or --dataset")
    reports = analytics.compare_corpora(corpora, analyses or analytics.ANALYSES, history, alpha)
    _emit(_render_analysis(reports, fmt), out)


@cli.command(help="Review sample sizes and qualification decisions for crowd workers.")
@click.option("--workers", type=click.Path(exists=True, dir_okay=False), default=None,
              help="CSV with worker_id,acceptance_rate,quality,accepted,n_w.")
@click.option("--n-w", type=click.IntRange(0), default=None, help="Stories written by a single worker.")
@click.option("--format", "fmt", type=click.Choice(["text", "json", "csv"]), default="text")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def plan(workers, n_w, fmt, out):
    if workers is None and n_w is None:
        raise ConfigError("give --workers or --n-w")
    if workers is None:
        _emit(str(analytics.plan_review_sample(n_w)), out)
        return
    frame = analytics.review_batch(analytics.load_workers(workers))
    if fmt == "json":
        text = dump_json(json.loads(frame.to_json(orient="records")))
    elif fmt == "csv":
        text = frame.to_csv(index=False)
    else:
        text = tabulate(frame.values.tolist(), headers=list(frame.columns), tablefmt="simple")
    _emit(text, out)


def run(argv=None):
    """Run the CLI and map failures to exit codes."""
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        click.echo(cli.get_help(click.Context(cli, info_name=PROG)), err=True)
        return 1
    try:
        result = cli.main(args=argv, prog_name=PROG, standalone_mode=False)
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except VWPError as e:
        logger.error(str(e))
        return e.exit_code
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(run())
