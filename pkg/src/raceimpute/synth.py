"""Synthetic labeled population with a fully known generative model.

The sampling chain is race -> (latent SES tier) -> tract -> name characters,
with every conditional available in closed form, so exact Bayes-optimal
posteriors and accuracy ceilings are computable by enumeration. In
independent mode, surname/first-name/tract are conditionally independent
given race, so Bayesian surname geocoding on the generator-true tables IS the
Bayes-optimal classifier. In ses_confounded mode, high-SES minority records
are preferentially routed to affluent majority-White tracts and given
White-typical (anglicized) names, breaking conditional independence the same
way affluent-neighborhood misclassification does in observational data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import (
    N_CLASSES,
    NamePriorTable,
    PersonRecord,
    RaceClass,
    RaceDistribution,
    TractRecord,
    assign_income_deciles,
    write_marginal,
    write_name_prior_table,
    write_person_records,
    write_tract_table,
)
from .errors import InvariantError, OutOfSupport

INDEPENDENT = "independent"
SES_CONFOUNDED = "ses_confounded"

# Evidence count attached to generator-true table rows: large enough that
# Laplace smoothing toward the marginal is far below 1e-12.
EXACT_COUNT = 10**15

N_LETTERS = 26
N_BUCKETS = 3  # first char, interior chars, last char


@dataclass(frozen=True)
class SynthConfig:
    prevalences: RaceDistribution = RaceDistribution((0.6, 0.15, 0.15, 0.07, 0.03))
    n_records: int = 20000
    n_tracts: int = 200
    concentration: float = 3.0  # Dirichlet precision; lower = more segregated tracts
    independence_mode: str = INDEPENDENT
    first_informativeness: float = 0.25  # weight on class-specific letter mass
    surname_informativeness: float = 0.2
    first_len: tuple[int, int] = (4, 7)
    last_len: tuple[int, int] = (5, 9)
    middle_prob: float = 0.5
    p_high_ses: float = 0.3
    confound_strength: float = 0.6  # P(high-SES minority draws a White-conditional tract)
    anglicize_prob: float = 0.6  # P(high-SES minority draws White-model names)
    income_low: float = 30000.0
    income_high: float = 250000.0
    income_noise: float = 0.15
    exact_tables: bool = True  # emit generator-true conditionals, not sample estimates
    seed: int = 42

    def __post_init__(self):
        if self.n_records < 1 or self.n_tracts < 1:
            raise InvariantError("record and tract counts must be >= 1")
        if not (self.concentration > 0):
            raise InvariantError("concentration must be > 0")
        if self.independence_mode not in (INDEPENDENT, SES_CONFOUNDED):
            raise InvariantError(f"unknown independence_mode {self.independence_mode!r}")
        for lo, hi in (self.first_len, self.last_len):
            if not (1 <= lo <= hi):
                raise InvariantError("bad name length range")
        for v in (
            self.first_informativeness,
            self.surname_informativeness,
            self.middle_prob,
            self.p_high_ses,
            self.confound_strength,
            self.anglicize_prob,
        ):
            if not (0.0 <= v <= 1.0):
                raise InvariantError("probability knobs must lie in [0, 1]")


def benchmark_config(mode: str = INDEPENDENT, seed: int = 42, **overrides) -> SynthConfig:
    """The frozen canonical desk-scale benchmark (20k records, 200 tracts)."""
    return replace(SynthConfig(), independence_mode=mode, seed=seed, **overrides)


@dataclass
class SynthDataset:
    records: list[PersonRecord]
    tract_table: dict[str, TractRecord]
    surname_table: NamePriorTable
    firstname_table: NamePriorTable
    marginal: RaceDistribution


class Generator:
    """Closed-form generator state derived deterministically from a config."""

    def __init__(self, config: SynthConfig):
        self.config = config
        root = np.random.SeedSequence(config.seed)
        tract_ss, name_ss, income_ss, records_ss = root.spawn(4)
        self.pi = config.prevalences.as_array()
        self._build_name_models(np.random.default_rng(name_ss))
        self._build_tracts(np.random.default_rng(tract_ss), np.random.default_rng(income_ss))
        self._record_seeds = records_ss.spawn(config.n_records)

    # -- name model --------------------------------------------------------

    def _build_name_models(self, rng: np.random.Generator):
        # per field kind: (classes, buckets, letters) probabilities; each class
        # boosts a private 5-letter block on top of a shared base distribution
        self.letter_probs: dict[str, np.ndarray] = {}
        for kind, rho in (("first", self.config.first_informativeness), ("last", self.config.surname_informativeness)):
            table = np.empty((N_CLASSES, N_BUCKETS, N_LETTERS))
            for b in range(N_BUCKETS):
                base = rng.dirichlet(np.full(N_LETTERS, 2.0))
                for c in range(N_CLASSES):
                    boost = np.zeros(N_LETTERS)
                    boost[5 * c : 5 * c + 5] = rng.dirichlet(np.full(5, 2.0))
                    table[c, b] = (1.0 - rho) * base + rho * boost
            self.letter_probs[kind] = table

    @staticmethod
    def _bucket(pos: int, length: int) -> int:
        if pos == 0:
            return 0
        if pos == length - 1:
            return 2
        return 1

    def _len_range(self, kind: str) -> tuple[int, int]:
        return self.config.first_len if kind == "first" else self.config.last_len

    def _sample_name(self, kind: str, cls: int, rng: np.random.Generator) -> str:
        lo, hi = self._len_range(kind)
        length = int(rng.integers(lo, hi + 1))
        probs = self.letter_probs[kind][cls]
        chars = [
            chr(ord("a") + int(rng.choice(N_LETTERS, p=probs[self._bucket(i, length)])))
            for i in range(length)
        ]
        return "".join(chars)

    def name_likelihoods(self, kind: str, name: str) -> np.ndarray:
        """P(name | class) for all 5 classes; zeros when out of support."""
        lo, hi = self._len_range(kind)
        length = len(name)
        if not (lo <= length <= hi) or any(not ("a" <= ch <= "z") for ch in name):
            return np.zeros(N_CLASSES)
        out = np.full(N_CLASSES, 1.0 / (hi - lo + 1))
        table = self.letter_probs[kind]
        for i, ch in enumerate(name):
            out *= table[:, self._bucket(i, length), ord(ch) - ord("a")]
        return out

    # -- tract model ---------------------------------------------------------

    def _build_tracts(self, rng: np.random.Generator, income_rng: np.random.Generator):
        cfg = self.config
        T = cfg.n_tracts
        pos = self.pi > 0
        if np.isinf(cfg.concentration):
            Q = np.tile(self.pi, (T, 1))
        else:
            Q = np.zeros((T, N_CLASSES))
            Q[:, pos] = rng.dirichlet(cfg.concentration * self.pi[pos], size=T)
            # matrix scaling so tract compositions aggregate exactly to the
            # configured marginal while rows remain distributions
            for _ in range(10000):
                col = Q.mean(axis=0)
                err = np.max(np.abs(col[pos] - self.pi[pos]))
                if err < 1e-14:
                    break
                scale = np.ones(N_CLASSES)
                scale[pos] = self.pi[pos] / col[pos]
                Q *= scale
                Q /= Q.sum(axis=1, keepdims=True)
        self.Q = Q  # true P(race | tract) of the pre-confound mixture
        # P0(t | r): uniform tract weights, so proportional to the column
        self.M0 = np.zeros((T, N_CLASSES))
        col_sums = Q.sum(axis=0)
        for r in range(N_CLASSES):
            self.M0[:, r] = Q[:, r] / col_sums[r] if col_sums[r] > 0 else 1.0 / T
        # whiter tracts get higher incomes, with configurable noise
        score = Q[:, 0] + cfg.income_noise * income_rng.standard_normal(T)
        incomes = np.round(np.geomspace(cfg.income_low, cfg.income_high, T)).astype(np.int64)
        self.median_income = np.empty(T, dtype=np.float64)
        self.median_income[np.argsort(score, kind="stable")] = incomes
        self.geoids = [f"99{t:09d}" for t in range(T)]
        self._geoid_index = {g: t for t, g in enumerate(self.geoids)}
        self.income_decile = assign_income_deciles(self.median_income.tolist(), self.geoids)

    # -- confound machinery ---------------------------------------------------

    def _confounded(self) -> bool:
        return self.config.independence_mode == SES_CONFOUNDED

    def _kappa(self, r: int) -> float:
        """P(name fields drawn from the White model | race r), marginally."""
        if self._confounded() and r != 0:
            return self.config.p_high_ses * self.config.anglicize_prob
        return 0.0

    def tract_conditional(self, r: int) -> np.ndarray:
        """Effective P(t | r) with the SES tier integrated out."""
        if self._confounded() and r != 0:
            w = self.config.p_high_ses * self.config.confound_strength
            return (1.0 - w) * self.M0[:, r] + w * self.M0[:, 0]
        return self.M0[:, r]

    def implied_composition(self) -> np.ndarray:
        """True P(race | tract) under the full (possibly confounded) joint."""
        joint = np.stack([self.pi[r] * self.tract_conditional(r) for r in range(N_CLASSES)], axis=1)
        return joint / joint.sum(axis=1, keepdims=True)

    def field_likelihood(self, kind: str, name: str) -> np.ndarray:
        """Per-field P(name | r) with anglicization integrated out."""
        base = self.name_likelihoods(kind, name)
        out = base.copy()
        for r in range(1, N_CLASSES):
            k = self._kappa(r)
            if k > 0:
                out[r] = (1.0 - k) * base[r] + k * base[0]
        return out

    # -- sampling ------------------------------------------------------------

    def sample_records(self) -> list[PersonRecord]:
        cfg = self.config
        records = []
        for i in range(cfg.n_records):
            rng = np.random.default_rng(self._record_seeds[i])
            r = int(rng.choice(N_CLASSES, p=self.pi))
            high_ses = bool(rng.random() < cfg.p_high_ses) if self._confounded() else False
            anglicized = bool(
                self._confounded() and r != 0 and high_ses and rng.random() < cfg.anglicize_prob
            )
            if self._confounded() and r != 0 and high_ses and rng.random() < cfg.confound_strength:
                tract = int(rng.choice(cfg.n_tracts, p=self.M0[:, 0]))
            else:
                tract = int(rng.choice(cfg.n_tracts, p=self.M0[:, r]))
            name_cls = 0 if anglicized else r
            first = self._sample_name("first", name_cls, rng)
            last = self._sample_name("last", name_cls, rng)
            middle = self._sample_name("first", name_cls, rng) if rng.random() < cfg.middle_prob else None
            records.append(
                PersonRecord(
                    row_id=f"syn{i:06d}",
                    first=first,
                    middle=middle,
                    last=last,
                    tract_geoid=self.geoids[tract],
                    label=RaceClass(r),
                )
            )
        return records

    # -- exact oracles ---------------------------------------------------------

    def posterior(
        self,
        surname: str | None = None,
        first: str | None = None,
        middle: str | None = None,
        tract_geoid: str | None = None,
    ) -> RaceDistribution:
        """Exact P(race | given features) by enumeration over the 5 classes
        and the latent SES/anglicization variables."""
        names = []
        if surname is not None:
            names.append(self.name_likelihoods("last", surname))
        if first is not None:
            names.append(self.name_likelihoods("first", first))
        if middle is not None:
            names.append(self.name_likelihoods("first", middle))
        own = np.ones(N_CLASSES)
        white = np.ones(N_CLASSES)  # same fields under the White name model
        for lik in names:
            own *= lik
            white *= lik[0]
        tract_idx = None
        if tract_geoid is not None:
            tract_idx = self._geoid_index.get(tract_geoid)
            if tract_idx is None:
                raise OutOfSupport(f"unknown tract geoid {tract_geoid!r}")
        like = np.empty(N_CLASSES)
        cfg = self.config
        for r in range(N_CLASSES):
            if not self._confounded() or r == 0:
                t_factor = self.M0[tract_idx, r] if tract_idx is not None else 1.0
                like[r] = t_factor * own[r]
                continue
            p, s, lam = cfg.p_high_ses, cfg.confound_strength, cfg.anglicize_prob
            t_low = self.M0[tract_idx, r] if tract_idx is not None else 1.0
            t_high = (
                (1.0 - s) * self.M0[tract_idx, r] + s * self.M0[tract_idx, 0]
                if tract_idx is not None
                else 1.0
            )
            names_high = (1.0 - lam) * own[r] + lam * white[r]
            like[r] = (1.0 - p) * t_low * own[r] + p * t_high * names_high
        unnormalized = self.pi * like
        total = unnormalized.sum()
        if total <= 0.0 or not np.isfinite(total):
            raise OutOfSupport("features have zero likelihood under every class")
        return RaceDistribution.from_probs(unnormalized / total)


@lru_cache(maxsize=8)
def build_generator(config: SynthConfig) -> Generator:
    return Generator(config)


def _exact_name_table(gen: Generator, kind: str, names: set[str], marginal: RaceDistribution) -> NamePriorTable:
    entries = {}
    for name in sorted(names):
        lik = gen.field_likelihood("last" if kind == "surname" else "first", name)
        unnormalized = gen.pi * lik
        total = unnormalized.sum()
        if total <= 0:
            continue
        entries[name] = (RaceDistribution.from_probs(unnormalized / total), float(EXACT_COUNT))
    return NamePriorTable(kind=kind, entries=entries, marginal=marginal)


def _estimated_name_table(kind: str, names_with_labels: list[tuple[str, int]], marginal: RaceDistribution) -> NamePriorTable:
    counts: dict[str, np.ndarray] = {}
    for name, label in names_with_labels:
        counts.setdefault(name, np.zeros(N_CLASSES))[label] += 1
    entries = {}
    for name in sorted(counts):
        c = counts[name]
        entries[name] = (RaceDistribution.from_probs(c / c.sum()), float(c.sum()))
    return NamePriorTable(kind=kind, entries=entries, marginal=marginal)


def generate(config: SynthConfig) -> SynthDataset:
    """Sample the dataset and emit tables (generator-true by default)."""
    gen = build_generator(config)
    records = gen.sample_records()
    # a zero-prevalence class would make the marginal unusable as a Bayes
    # denominator; floor it at a denormal-free tiny value
    marg_vals = np.maximum(gen.pi, 1e-300)
    marginal = RaceDistribution.from_probs(marg_vals / marg_vals.sum())
    composition = gen.implied_composition()
    tract_table = {}
    for t, geoid in enumerate(gen.geoids):
        tract_table[geoid] = TractRecord(
            geoid=geoid,
            composition=RaceDistribution.from_probs(composition[t], normalize=True),
            median_income=float(gen.median_income[t]),
            income_decile=gen.income_decile[t],
        )
    if config.exact_tables:
        surnames = {r.last for r in records}
        firstnames = {r.first for r in records} | {r.middle for r in records if r.middle}
        surname_table = _exact_name_table(gen, "surname", surnames, marginal)
        firstname_table = _exact_name_table(gen, "firstname", firstnames, marginal)
    else:
        surname_table = _estimated_name_table(
            "surname", [(r.last, int(r.label)) for r in records], marginal
        )
        first_pairs = [(r.first, int(r.label)) for r in records]
        first_pairs += [(r.middle, int(r.label)) for r in records if r.middle]
        firstname_table = _estimated_name_table("firstname", first_pairs, marginal)
    return SynthDataset(
        records=records,
        tract_table=tract_table,
        surname_table=surname_table,
        firstname_table=firstname_table,
        marginal=marginal,
    )


def bayes_optimal_posterior(
    config: SynthConfig,
    surname: str | None = None,
    first: str | None = None,
    tract_geoid: str | None = None,
    middle: str | None = None,
) -> RaceDistribution:
    """Exact posterior from the generator's own parameters (see Generator)."""
    return build_generator(config).posterior(surname=surname, first=first, middle=middle, tract_geoid=tract_geoid)


def bayes_optimal_accuracy(
    config: SynthConfig,
    records: list[PersonRecord],
    use_first: bool = True,
    use_middle: bool = True,
    use_tract: bool = True,
) -> float:
    """Expected accuracy of the exact-posterior classifier over the sample.

    This is the ceiling for models consuming the same feature set; restrict
    the flags to score against a reduced-feature oracle (e.g. surname+tract
    for Bayesian surname geocoding).
    """
    gen = build_generator(config)
    total = 0.0
    for r in records:
        post = gen.posterior(
            surname=r.last,
            first=r.first if use_first else None,
            middle=r.middle if use_middle and r.middle else None,
            tract_geoid=r.tract_geoid if use_tract else None,
        )
        total += max(post.p)
    return total / len(records)


def oracle_predictions(
    config: SynthConfig,
    records: list[PersonRecord],
    use_first: bool = True,
    use_middle: bool = True,
    use_tract: bool = True,
) -> list[RaceClass]:
    gen = build_generator(config)
    preds = []
    for r in records:
        post = gen.posterior(
            surname=r.last,
            first=r.first if use_first else None,
            middle=r.middle if use_middle and r.middle else None,
            tract_geoid=r.tract_geoid if use_tract else None,
        )
        preds.append(post.argmax())
    return preds


def make_separable_dataset(n: int = 500, seed: int = 0) -> list[PersonRecord]:
    """Two classes with disjoint character alphabets; trivially learnable."""
    rng = np.random.default_rng(seed)
    alphabets = {RaceClass.WHITE: "abcdef", RaceClass.HISPANIC: "mnopqr"}
    classes = [RaceClass.WHITE, RaceClass.HISPANIC]
    records = []
    for i in range(n):
        cls = classes[int(rng.integers(0, 2))]
        letters = alphabets[cls]
        first = "".join(rng.choice(list(letters), size=int(rng.integers(4, 9))))
        last = "".join(rng.choice(list(letters), size=int(rng.integers(4, 9))))
        records.append(PersonRecord(row_id=f"sep{i:05d}", first=first, last=last, label=cls))
    return records


def write_dataset(dataset: SynthDataset, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": out / "records.csv",
        "tracts": out / "tracts.csv",
        "surnames": out / "surnames.csv",
        "firstnames": out / "firstnames.csv",
        "marginal": out / "marginal.csv",
    }
    write_person_records(dataset.records, paths["records"])
    write_tract_table(dataset.tract_table, paths["tracts"])
    write_name_prior_table(dataset.surname_table, paths["surnames"])
    write_name_prior_table(dataset.firstname_table, paths["firstnames"])
    write_marginal(dataset.marginal, paths["marginal"])
    return paths
