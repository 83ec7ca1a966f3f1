"""BISG and BIFSG posteriors under conditional independence, plus hard
classification with deterministic tie-breaking."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import NamePriorTable, PersonRecord, RaceClass, RaceDistribution, TractRecord, lookup_prior
from .errors import DegeneratePosteriorWarning, InvalidMarginal, MissingFirstNamePrior


@dataclass(frozen=True)
class BayesInputs:
    """Per-person conditionals feeding the posterior computation."""

    surname_prior: RaceDistribution  # P(race | surname)
    tract_composition: RaceDistribution  # P(race | tract)
    marginal: RaceDistribution  # P(race), strictly positive
    firstname_prior: RaceDistribution | None = None  # P(race | first name)


def _check_marginal(marginal: RaceDistribution) -> np.ndarray:
    m = marginal.as_array()
    if np.any(m <= 0):
        raise InvalidMarginal(f"marginal has non-positive components: {marginal.p}")
    return m


def bisg_posterior(inputs: BayesInputs) -> RaceDistribution:
    """Posterior over race given surname and tract.

    Combines P(race|surname) * P(race|tract) / P(race) and renormalizes. An
    all-zero product falls back to the surname prior with a
    DegeneratePosteriorWarning.
    """
    m = _check_marginal(inputs.marginal)
    unnormalized = inputs.surname_prior.as_array() * inputs.tract_composition.as_array() / m
    total = unnormalized.sum()
    if total <= 0.0:
        warnings.warn("all-zero BISG posterior; falling back to surname prior", DegeneratePosteriorWarning)
        return inputs.surname_prior
    return RaceDistribution.from_probs(unnormalized / total)


def bifsg_posterior(inputs: BayesInputs) -> RaceDistribution:
    """Posterior over race given first name, surname, and tract.

    Adds a first-name factor to BISG: P(race|first) * P(race|surname) *
    P(race|tract) / P(race)^2. An all-zero product falls back to the BISG
    posterior (which may itself fall back to the surname prior).
    """
    if inputs.firstname_prior is None:
        raise MissingFirstNamePrior("bifsg_posterior requires a first-name prior")
    m = _check_marginal(inputs.marginal)
    unnormalized = (
        inputs.firstname_prior.as_array()
        * inputs.surname_prior.as_array()
        * inputs.tract_composition.as_array()
        / (m * m)
    )
    total = unnormalized.sum()
    if total <= 0.0:
        warnings.warn("all-zero BIFSG posterior; falling back to BISG", DegeneratePosteriorWarning)
        return bisg_posterior(inputs)
    return RaceDistribution.from_probs(unnormalized / total)


def classify(dist: RaceDistribution) -> RaceClass:
    """Argmax class; ties break to the lowest class code."""
    return dist.argmax()


def build_bayes_inputs(
    record: PersonRecord,
    surname_table: NamePriorTable,
    tract_table: dict[str, TractRecord],
    marginal: RaceDistribution,
    firstname_table: NamePriorTable | None = None,
) -> tuple[BayesInputs, bool]:
    """Assemble per-record inputs from loaded tables.

    A missing or unknown tract resolves to the marginal (the tract factor
    then cancels); the second return value flags that imputation.
    """
    tract = tract_table.get(record.tract_geoid) if record.tract_geoid else None
    imputed_geo = tract is None
    firstname_prior = None
    if firstname_table is not None:
        firstname_prior = lookup_prior(firstname_table, record.first)
    return (
        BayesInputs(
            surname_prior=lookup_prior(surname_table, record.last),
            tract_composition=tract.composition if tract is not None else marginal,
            marginal=marginal,
            firstname_prior=firstname_prior,
        ),
        imputed_geo,
    )
