"""
Maximum-likelihood training with per-epoch validation and METEOR-based model
selection, repeated over several seeds.

Each seed gets its own MLflow run (nested when a parent run is active) with
per-epoch ``train_loss``, ``val_loss`` and ``val_meteor`` metrics, the best
checkpoint and the run log as artifacts.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import mlflow
import numpy as np

from scripts.checkpoint import save_checkpoint
from scripts.corpus import encode_story
from scripts.decoding import DecodingConfig, generate
from scripts.metrics import EvalPair, meteor
from scripts.model import assemble_input, build_model, forward_logits, layout_loss, loss_and_grad
from scripts.numerics import adam_step, clip_grad_norm
from scripts.utils import ConfigError, DataError, NumericError, TrainingError, dump_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr: float = 1e-3
    seeds: tuple = (1, 2, 3)
    clip_norm: float = 1.0
    decoding: DecodingConfig = DecodingConfig(mode="nucleus", p=0.1, max_new_tokens=200, seed=0)
    checkpoint_dir: str = "checkpoints"

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        self.decoding.validate()
        return self


@dataclass
class RunLog:
    seed: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_meteor: list = field(default_factory=list)
    best_epoch: int = 0
    best_checkpoint: str = ""
    completed: bool = False

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(dump_json(self.to_dict()))


def build_layouts(model_config, records, vocab):
    """One training layout per (sequence, story)."""
    layouts = []
    for record in records:
        for story in record.stories:
            ids = encode_story(vocab, story.surface_tokens())
            layouts.append(assemble_input(model_config, record, ids))
    return layouts


def train_epoch(model, layouts, config, seed, epoch=1):
    """One seeded pass over ``layouts``; Adam state lives in the model's ParamStore.

    Returns:
        mean story loss over the examples of the pass
    """
    if not layouts:
        raise DataError("empty training set")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(layouts))
    losses = []
    for batch_no, start in enumerate(range(0, len(order), config.batch_size), start=1):
        batch = order[start : start + config.batch_size]
        model.store.zero_grad()
        try:
            for idx in batch:
                loss = loss_and_grad(model, layouts[idx], rng, scale=1.0 / len(batch))
                if not np.isfinite(loss):
                    raise TrainingError("non-finite training loss", epoch, batch_no)
                losses.append(loss)
            norm = clip_grad_norm(model.store, config.clip_norm)
        except TrainingError:
            raise
        except NumericError as e:
            raise TrainingError(str(e), epoch, batch_no) from e
        if not np.isfinite(norm):
            raise TrainingError("non-finite gradient norm", epoch, batch_no)
        adam_step(model.store, lr=config.lr)
        logger.debug("epoch {} batch {}: grad norm {:.4f}".format(epoch, batch_no, norm))
    return float(np.mean(losses))


def select_best(scores):
    """1-based epoch with the highest validation score, earliest on ties."""
    if len(scores) == 0:
        raise DataError("no validation scores recorded")
    return int(np.argmax(np.asarray(scores, dtype=np.float64))) + 1


def evaluate_loss(model, layouts):
    if not layouts:
        raise DataError("no layouts to evaluate")
    return float(np.mean([layout_loss(model, layout) for layout in layouts]))


def token_accuracy(model, layouts, positions=None):
    """Fraction of story tokens predicted correctly by argmax under teacher forcing.

    ``positions[k]`` optionally restricts layout ``k`` to those story indices.
    """
    correct = total = 0
    for k, layout in enumerate(layouts):
        predicted = forward_logits(model, layout).argmax(axis=1)
        story = np.flatnonzero(layout.loss_mask)
        if positions is not None:
            story = story[np.asarray(positions[k], dtype=np.int64)]
        correct += int((predicted[story] == layout.targets[story]).sum())
        total += story.size
    if total == 0:
        raise DataError("no positions to score")
    return correct / total


def validate(model, records, vocab, decoding):
    """METEOR of decoded stories against every reference story of each sequence."""
    if not records:
        raise DataError("empty validation set")
    pairs = []
    for index, record in enumerate(records):
        hypothesis = vocab.decode(generate(model, record, decoding, index=index))
        references = [story.surface_tokens() for story in record.stories]
        if references:
            pairs.append(EvalPair(hypothesis, references))
    return meteor(pairs)


def _train_seed(config, model_config, splits, vocab, seed, out_dir, dataset_hash):
    model_config = replace(model_config, seed=seed)
    model = build_model(model_config)
    train_layouts = build_layouts(model_config, splits["train"], vocab)
    val_layouts = build_layouts(model_config, splits["val"], vocab)
    seed_dir = Path(out_dir) / "seed_{}".format(seed)
    runlog_path = seed_dir / "runlog.json"
    log = RunLog(seed=seed, best_checkpoint=str(seed_dir / "best.ckpt"))

    with mlflow.start_run(run_name="seed-{}".format(seed), nested=mlflow.active_run() is not None):
        mlflow.log_params(
            {
                "seed": seed,
                "epochs": config.epochs,
                "batch_size": config.batch_size,
                "lr": config.lr,
                "features": ",".join(model_config.features),
                "grid_mode": model_config.grid_mode,
                "d_model": model_config.d_model,
                "n_layers": model_config.n_layers,
                "n_heads": model_config.n_heads,
                "n_params": model.n_params(),
            }
        )
        if dataset_hash:
            mlflow.set_tag("dataset_hash", dataset_hash)

        try:
            for epoch in range(1, config.epochs + 1):
                log.train_loss.append(train_epoch(model, train_layouts, config, seed, epoch))
                log.val_loss.append(evaluate_loss(model, val_layouts))
                log.val_meteor.append(validate(model, splits["val"], vocab, config.decoding))
                mlflow.log_metric("train_loss", log.train_loss[-1], step=epoch)
                mlflow.log_metric("val_loss", log.val_loss[-1], step=epoch)
                mlflow.log_metric("val_meteor", log.val_meteor[-1], step=epoch)
                best = select_best(log.val_meteor)
                if best == epoch:
                    save_checkpoint(log.best_checkpoint, model)
                log.best_epoch = best
                logger.info(
                    "seed {} epoch {}: train loss {:.4f}, val loss {:.4f}, val METEOR {:.4f}, best epoch {}".format(
                        seed, epoch, log.train_loss[-1], log.val_loss[-1], log.val_meteor[-1], best
                    )
                )
                log.save(runlog_path)
        except TrainingError:
            log.save(runlog_path)
            logger.error("Training for seed {} failed, partial run log kept in {}".format(seed, runlog_path))
            raise

        log.completed = True
        log.save(runlog_path)
        mlflow.log_dict(log.to_dict(), "runlog.json")
        mlflow.log_artifact(log.best_checkpoint, "checkpoint")
        mlflow.log_metric("best_val_meteor", log.val_meteor[log.best_epoch - 1])
    return log


def summarize(logs):
    """Mean and population std across seeds of the selected epoch's scores."""
    summary = {}
    for key in ("val_meteor", "val_loss", "train_loss"):
        values = np.array([getattr(log, key)[log.best_epoch - 1] for log in logs])
        summary[key] = {"mean": float(values.mean()), "std": float(values.std())}
    summary["best_epoch"] = [log.best_epoch for log in logs]
    return summary


def fit(config, splits, model_config, vocab, out_dir=None, dataset_hash=None):
    """Train one model per seed and aggregate the best-epoch scores.

    Returns:
        logs: RunLog per seed, in seed order
        summary: mean/std per score across seeds
    """
    config.validate()
    model_config.validate()
    if not splits.get("train"):
        raise DataError("training split is empty")
    if not splits.get("val"):
        raise DataError("validation split is empty")
    out_dir = out_dir or config.checkpoint_dir
    logs = []
    for seed in config.seeds:
        logger.info("Training seed {} for at most {} epochs".format(seed, config.epochs))
        logs.append(_train_seed(config, model_config, splits, vocab, seed, out_dir, dataset_hash))
    summary = summarize(logs)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        f.write(dump_json(summary))
    logger.info(
        "Validation METEOR over {} seed(s): {:.4f} +/- {:.4f}".format(
            len(logs), summary["val_meteor"]["mean"], summary["val_meteor"]["std"]
        )
    )
    return logs, summary
