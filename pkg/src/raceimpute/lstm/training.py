"""Training loop (minibatch Adam, early stopping on validation loss) and
batch inference over PersonRecords."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..core import DatasetSplit, PersonRecord, RaceDistribution, TractRecord
from ..errors import InvariantError
from .network import (
    GEO_DIM,
    LstmGeoConfig,
    LstmGeoModel,
    batch_loss,
    init_model,
    loss_and_gradients,
    predict_proba,
    single_thread_blas,
)
from .optimizer import AdamState, adam_step
from .tokenizer import tokenize


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_loss: float | None
    seconds: float


class EarlyStopper:
    """Validation-loss early stopping with a minimum-improvement threshold.

    An epoch only becomes the new best when it beats the incumbent by at
    least ``min_delta``; after ``patience`` consecutive non-improvements the
    loop stops and the best epoch's parameters are restored.
    """

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (is_new_best, should_stop)."""
        if val_loss <= self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class BatchPrediction:
    distributions: list[RaceDistribution]
    imputed_geo: list[bool]


def geo_vector(tract: TractRecord) -> np.ndarray:
    """5 tract race shares plus income decile scaled to [0,1] via (d-1)/9."""
    return np.array([*tract.composition.p, (tract.income_decile - 1) / 9.0], dtype=np.float64)


def mean_geo_vector(tract_table: dict[str, TractRecord]) -> np.ndarray:
    """Table-wide mean geo features, the stand-in for unknown tracts."""
    if not tract_table:
        return np.array([0.2, 0.2, 0.2, 0.2, 0.2, 0.5])
    vecs = np.stack([geo_vector(t) for t in tract_table.values()])
    return vecs.mean(axis=0)


def prepare_examples(
    records: list[PersonRecord],
    tract_table: dict[str, TractRecord],
    config: LstmGeoConfig,
    require_labels: bool = True,
) -> tuple[list[tuple[list[int], np.ndarray | None, int]], list[bool]]:
    """Tokenize records and attach geo features (mean-imputed when unknown)."""
    mean_geo = mean_geo_vector(tract_table) if config.geo_enabled else None
    examples = []
    imputed = []
    for r in records:
        if require_labels and r.label is None:
            raise InvariantError(f"row {r.row_id}: training requires labels")
        tokens = tokenize(r.first, r.middle, r.last, max_len=config.max_len, use_middle=config.use_middle_name)
        geo = None
        row_imputed = False
        if config.geo_enabled:
            tract = tract_table.get(r.tract_geoid) if r.tract_geoid else None
            if tract is None:
                geo = mean_geo
                row_imputed = True
            else:
                geo = geo_vector(tract)
        examples.append((tokens, geo, int(r.label) if r.label is not None else -1))
        imputed.append(row_imputed)
    return examples, imputed


def train(
    config: LstmGeoConfig,
    split: DatasetSplit,
    tract_table: dict[str, TractRecord],
) -> tuple[LstmGeoModel, list[TrainLogEntry]]:
    """Seeded epoch loop; stops when validation loss stops improving by at
    least ``early_stop_min_delta`` for ``early_stop_patience`` epochs, and
    returns the parameters from the best epoch under that threshold."""
    if not split.train:
        raise InvariantError("empty training partition")
    root = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, dropout_ss = root.spawn(3)
    model = init_model(config, np.random.default_rng(init_ss))
    train_examples, _ = prepare_examples(split.train, tract_table, config)
    val_examples, _ = prepare_examples(split.validation, tract_table, config) if split.validation else ([], [])

    n = len(train_examples)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    adam = AdamState.for_params(model.params)
    stopper = EarlyStopper(config.early_stop_patience, config.early_stop_min_delta)
    best_params = model.copy_params()
    best_epoch = 0
    log: list[TrainLogEntry] = []
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        batch_losses = []
        with single_thread_blas():
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch = [train_examples[i] for i in idx]
                seed = int(dropout_rng.integers(0, 2**63))
                loss, grads = loss_and_gradients(model, batch, dropout_seed=seed)
                adam_step(model.params, adam, grads, config.learning_rate)
                batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))
        val_loss = batch_loss(model, val_examples) if val_examples else None
        log.append(TrainLogEntry(epoch, train_loss, val_loss, time.perf_counter() - t0))
        if val_loss is None:
            best_params = model.copy_params()
            best_epoch = epoch
            continue
        new_best, stop = stopper.update(epoch, val_loss)
        if new_best:
            best_params = model.copy_params()
            best_epoch = epoch
        if stop:
            break
    model.params = best_params
    model.epochs_run = best_epoch
    model.final_val_loss = float(stopper.best_loss) if np.isfinite(stopper.best_loss) else None
    return model, log


def predict_batch(
    model: LstmGeoModel,
    records: list[PersonRecord],
    tract_table: dict[str, TractRecord],
) -> BatchPrediction:
    """Inference over records; unknown tracts get the mean geo vector and an
    imputed_geo flag. Output order matches input order."""
    if not records:
        return BatchPrediction([], [])
    examples, imputed = prepare_examples(records, tract_table, model.config, require_labels=False)
    token_lists = [ex[0] for ex in examples]
    geo = np.stack([ex[1] for ex in examples]) if model.config.geo_enabled else None
    probs = predict_proba(model, token_lists, geo)
    return BatchPrediction([RaceDistribution.from_probs(p) for p in probs], imputed)


def training_accuracy(model: LstmGeoModel, records: list[PersonRecord], tract_table: dict[str, TractRecord]) -> float:
    pred = predict_batch(model, records, tract_table)
    hits = sum(1 for d, r in zip(pred.distributions, records) if d.argmax() == r.label)
    return hits / len(records)
