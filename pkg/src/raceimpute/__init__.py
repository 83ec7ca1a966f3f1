"""Race/ethnicity imputation from names and census-tract geolocation.

Five model families share one currency (a 5-way class distribution over
White/Black/Hispanic/Asian/Other): Bayesian surname geocoding (BISG) and its
first-name extension (BIFSG), a character-level bidirectional LSTM with or
without geolocation fusion, and a gradient-boosted tree post-filter over the
neural probabilities. A synthetic-population generator with exact Bayes
oracles provides the desk-scale ground truth, and the metrics module covers
per-class false-positive rates and income-binned misclassification bias.
"""

from .core import (
    DatasetSplit,
    NamePriorTable,
    PersonRecord,
    RaceClass,
    RaceDistribution,
    TractRecord,
    load_name_prior_table,
    load_person_records,
    load_tract_table,
    lookup_prior,
    map_voter_race,
    normalize_name,
    stratified_split,
)
from .bayes import BayesInputs, bifsg_posterior, bisg_posterior, classify

__version__ = "0.1.0"

__all__ = [
    "BayesInputs",
    "DatasetSplit",
    "NamePriorTable",
    "PersonRecord",
    "RaceClass",
    "RaceDistribution",
    "TractRecord",
    "bifsg_posterior",
    "bisg_posterior",
    "classify",
    "load_name_prior_table",
    "load_person_records",
    "load_tract_table",
    "lookup_prior",
    "map_voter_race",
    "normalize_name",
    "stratified_split",
    "__version__",
]
