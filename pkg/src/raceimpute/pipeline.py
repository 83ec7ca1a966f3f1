"""End-to-end benchmark pipeline: split, train the neural models and the
boosted-tree filter, score Bayesian baselines, and collect holdout metrics.
Shared by the test/acceptance suites and by anyone replicating the desk-scale
benchmark without the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gbdt, lstm
from .bayes import bifsg_posterior, bisg_posterior, build_bayes_inputs
from .core import DatasetSplit, PersonRecord, RaceClass, RaceDistribution, stratified_split
from .metrics import ConfusionMatrix, class_metrics, confusion
from .synth import SynthConfig, SynthDataset


def benchmark_lstm_config(geo_enabled: bool, seed: int, **overrides) -> lstm.LstmGeoConfig:
    """Lean architecture for 20k-record benchmark runs (minutes, not hours)."""
    base = dict(
        embed_dim=24,
        hidden_units=48,
        num_layers=1,
        geo_enabled=geo_enabled,
        learning_rate=3e-3,
        batch_size=256,
        max_epochs=6,
        seed=seed,
    )
    base.update(overrides)
    return lstm.LstmGeoConfig(**base)


def benchmark_filter_config(seed: int, **overrides) -> gbdt.GbdtConfig:
    base = dict(num_rounds=150, learning_rate=0.15, max_depth=3, seed=seed)
    base.update(overrides)
    return gbdt.GbdtConfig(**base)


@dataclass
class BenchmarkRun:
    seed: int
    split: DatasetSplit
    name_model: lstm.LstmGeoModel
    geo_model: lstm.LstmGeoModel
    filter_model: gbdt.GbdtModel
    distributions: dict[str, list[RaceDistribution]]  # model -> holdout outputs
    predictions: dict[str, list[RaceClass]]
    accuracy: dict[str, float] = field(default_factory=dict)
    white_fpr: dict[str, float] = field(default_factory=dict)

    def confusion_for(self, model: str) -> ConfusionMatrix:
        labels = [r.label for r in self.split.holdout]
        return confusion(self.predictions[model], labels)


def _score(preds: list[RaceClass], labels: list[RaceClass]) -> tuple[float, float]:
    cm = confusion(preds, labels)
    return float(np.trace(cm.counts)) / cm.n, class_metrics(cm, RaceClass.WHITE).fpr


def bayes_distributions(
    dataset: SynthDataset,
    records: list[PersonRecord],
    use_first: bool = False,
) -> list[RaceDistribution]:
    out = []
    firstname_table = dataset.firstname_table if use_first else None
    for record in records:
        inputs, _ = build_bayes_inputs(
            record, dataset.surname_table, dataset.tract_table, dataset.marginal, firstname_table
        )
        out.append(bifsg_posterior(inputs) if use_first else bisg_posterior(inputs))
    return out


def run_benchmark_pipeline(
    config: SynthConfig,
    dataset: SynthDataset,
    seed: int,
    lstm_overrides: dict | None = None,
    filter_overrides: dict | None = None,
) -> BenchmarkRun:
    """Train name-only LSTM, LSTM+Geo, and the post-filter; score everything
    (plus BISG/BIFSG) on the holdout partition."""
    split = stratified_split(dataset.records, seed=seed)
    holdout = split.holdout
    labels = [r.label for r in holdout]

    name_model, _ = lstm.train(
        benchmark_lstm_config(False, seed, **(lstm_overrides or {})), split, dataset.tract_table
    )
    geo_model, _ = lstm.train(
        benchmark_lstm_config(True, seed, **(lstm_overrides or {})), split, dataset.tract_table
    )

    # the filter trains on the validation partition's neural outputs so it
    # learns the model's error patterns on data the LSTM did not fit
    val_pred = lstm.predict_batch(geo_model, split.validation, dataset.tract_table)
    X_val = gbdt.build_filter_matrix(val_pred.distributions, split.validation, dataset.tract_table)
    filter_model = gbdt.fit(
        X_val, [r.label for r in split.validation], benchmark_filter_config(seed, **(filter_overrides or {}))
    )

    distributions: dict[str, list[RaceDistribution]] = {}
    distributions["bisg"] = bayes_distributions(dataset, holdout, use_first=False)
    distributions["bifsg"] = bayes_distributions(dataset, holdout, use_first=True)
    distributions["lstm"] = lstm.predict_batch(name_model, holdout, dataset.tract_table).distributions
    geo_hold = lstm.predict_batch(geo_model, holdout, dataset.tract_table)
    distributions["lstm-geo"] = geo_hold.distributions
    X_hold = gbdt.build_filter_matrix(geo_hold.distributions, holdout, dataset.tract_table)
    distributions["lstm-geo-xgb"] = [
        RaceDistribution.from_probs(p) for p in gbdt.predict_proba(filter_model, X_hold)
    ]

    run = BenchmarkRun(
        seed=seed,
        split=split,
        name_model=name_model,
        geo_model=geo_model,
        filter_model=filter_model,
        distributions=distributions,
        predictions={k: [d.argmax() for d in v] for k, v in distributions.items()},
    )
    for model, preds in run.predictions.items():
        run.accuracy[model], run.white_fpr[model] = _score(preds, labels)
    return run
