"""Domain types, dataset ingestion, race-code mapping, income deciles, and the
stratified train/validation/holdout split."""

from __future__ import annotations

import csv
import json
import unicodedata
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import (
    DuplicateGeoid,
    EmptyClassWarning,
    InvariantError,
    ParseError,
    UnknownSourceCode,
)

PROB_SUM_TOL = 1e-9
PCT_SUM_TOL = 0.5  # percent rows must sum to 100 +- this


class RaceClass(IntEnum):
    """The unified five-class race/ethnicity system, stable codes 0..4."""

    WHITE = 0
    BLACK = 1
    HISPANIC = 2
    ASIAN = 3
    OTHER = 4

    @classmethod
    def parse(cls, text: str) -> "RaceClass":
        key = text.strip().casefold()
        try:
            return _RACE_BY_NAME[key]
        except KeyError:
            raise InvariantError(f"not a race class name: {text!r}") from None

    def canonical(self) -> str:
        return self.name.lower()


_RACE_BY_NAME = {r.name.casefold(): r for r in RaceClass}

N_CLASSES = len(RaceClass)


@dataclass(frozen=True)
class RaceDistribution:
    """A 5-way probability vector over RaceClass; the currency between models."""

    p: tuple[float, float, float, float, float]

    def __post_init__(self):
        if len(self.p) != N_CLASSES:
            raise InvariantError(f"expected {N_CLASSES} probabilities, got {len(self.p)}")
        for v in self.p:
            if not np.isfinite(v) or v < -1e-12 or v > 1.0 + 1e-12:
                raise InvariantError(f"probability component out of [0, 1]: {v!r}")
        s = float(sum(self.p))
        if abs(s - 1.0) > PROB_SUM_TOL:
            raise InvariantError(f"probabilities sum to {s!r}, not 1")

    @classmethod
    def from_probs(cls, values: Iterable[float], normalize: bool = False) -> "RaceDistribution":
        vals = [float(v) for v in values]
        if normalize:
            s = sum(vals)
            if s <= 0 or not np.isfinite(s):
                raise InvariantError(f"cannot normalize values summing to {s!r}")
            vals = [v / s for v in vals]
        # clip floating dust so downstream exact checks stay clean
        vals = [min(max(v, 0.0), 1.0) for v in vals]
        return cls(tuple(vals))

    @classmethod
    def uniform(cls) -> "RaceDistribution":
        return cls((0.2, 0.2, 0.2, 0.2, 0.2))

    def as_array(self) -> np.ndarray:
        return np.array(self.p, dtype=np.float64)

    def __getitem__(self, race: RaceClass) -> float:
        return self.p[int(race)]

    def argmax(self) -> RaceClass:
        # ties break toward the lowest class code
        best = 0
        for i in range(1, N_CLASSES):
            if self.p[i] > self.p[best]:
                best = i
        return RaceClass(best)


@dataclass(frozen=True)
class PersonRecord:
    """One person row: names, optional tract GEOID, optional self-reported label."""

    row_id: str
    first: str
    last: str
    middle: str | None = None
    tract_geoid: str | None = None
    label: RaceClass | None = None

    def __post_init__(self):
        if not self.last.strip():
            raise InvariantError(f"row {self.row_id}: last name empty after trim")
        if self.tract_geoid is not None:
            g = self.tract_geoid
            if len(g) != 11 or not g.isdigit():
                raise InvariantError(f"row {self.row_id}: tract_geoid {g!r} is not 11 decimal digits")


@dataclass(frozen=True)
class TractRecord:
    """Census-tract enrichment payload: race composition and income."""

    geoid: str
    composition: RaceDistribution
    median_income: float
    income_decile: int

    def __post_init__(self):
        if not (1 <= self.income_decile <= 10):
            raise InvariantError(f"tract {self.geoid}: income_decile {self.income_decile} not in 1..10")
        if self.median_income < 0 or not np.isfinite(self.median_income):
            raise InvariantError(f"tract {self.geoid}: median_income {self.median_income!r} invalid")


@dataclass
class NamePriorTable:
    """Name -> (race distribution, evidence count), with a marginal fallback.

    ``alpha`` is the Laplace smoothing constant pulling low-count entries
    toward the marginal; unseen names resolve to the marginal itself.
    """

    kind: str  # "surname" | "firstname"
    entries: dict[str, tuple[RaceDistribution, float]]
    marginal: RaceDistribution
    alpha: float = 1.0

    def __post_init__(self):
        if any(v <= 0 for v in self.marginal.p):
            raise InvariantError("name-prior marginal must have strictly positive components")


@dataclass
class DatasetSplit:
    """Train / validation / holdout partition of labeled PersonRecords."""

    train: list[PersonRecord]
    validation: list[PersonRecord]
    holdout: list[PersonRecord]

    def partitions(self) -> tuple[list[PersonRecord], list[PersonRecord], list[PersonRecord]]:
        return self.train, self.validation, self.holdout


# ---------------------------------------------------------------------------
# Name normalization
# ---------------------------------------------------------------------------

_APOSTROPHES = {"’": "'", "‘": "'", "ʼ": "'"}
_HYPHENS = {"‐": "-", "‑": "-", "–": "-", "—": "-"}


def normalize_name(text: str) -> str:
    """Trim, casefold, fold diacritics to ASCII, collapse whitespace.

    Keeps a-z, space, apostrophe, and hyphen; drops everything else.
    """
    for src, dst in {**_APOSTROPHES, **_HYPHENS}.items():
        text = text.replace(src, dst)
    decomposed = unicodedata.normalize("NFKD", text.strip().casefold())
    kept = []
    for ch in decomposed:
        if unicodedata.combining(ch):
            continue
        if ch.isspace():
            kept.append(" ")
        elif ("a" <= ch <= "z") or ch in "'-":
            kept.append(ch)
    return " ".join("".join(kept).split())


# ---------------------------------------------------------------------------
# Source race-code mapping
# ---------------------------------------------------------------------------

# Canonical class names plus the source identities the five-class system folds
# into "other". Anything else must come from a user-supplied mapping config.
DEFAULT_RACE_MAP: dict[str, RaceClass] = {
    "white": RaceClass.WHITE,
    "black": RaceClass.BLACK,
    "hispanic": RaceClass.HISPANIC,
    "asian": RaceClass.ASIAN,
    "other": RaceClass.OTHER,
    "american indian or alaska native": RaceClass.OTHER,
    "american indian/alaska native": RaceClass.OTHER,
    "multiracial": RaceClass.OTHER,
}


def map_voter_race(source_code: str, mapping: Mapping[str, RaceClass] | None = None) -> RaceClass:
    """Map a source vocabulary race code onto the unified five classes."""
    table = DEFAULT_RACE_MAP if mapping is None else mapping
    key = source_code.strip().casefold()
    try:
        return table[key]
    except KeyError:
        raise UnknownSourceCode(f"race code {source_code!r} not in mapping config") from None


def load_race_map(path: str | Path) -> dict[str, RaceClass]:
    """Load a JSON or TOML mapping of source race codes to the five classes.

    Keys are matched case-insensitively; values are canonical class names.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"bad race-map config: {exc}", path=str(path)) from exc
    if not isinstance(data, dict):
        raise ParseError("race-map config must be a table of code -> class name", path=str(path))
    mapping = dict(DEFAULT_RACE_MAP)
    for code, name in data.items():
        mapping[str(code).strip().casefold()] = RaceClass.parse(str(name))
    return mapping


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

PCT_COLUMNS = ("pct_white", "pct_black", "pct_hispanic", "pct_asian", "pct_other")


def _open_csv(path: str | Path, required: Sequence[str]) -> tuple[csv.DictReader, object]:
    handle = open(path, "r", encoding="utf-8", newline="")
    reader = csv.DictReader(handle)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        handle.close()
        raise ParseError(f"missing columns {missing}", path=str(path))
    return reader, handle


def _parse_pct_row(row: Mapping[str, str], path: str, rownum: int) -> RaceDistribution:
    try:
        pcts = [float(row[c]) for c in PCT_COLUMNS]
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad percent value: {exc}", path=path, row=rownum) from exc
    for c, v in zip(PCT_COLUMNS, pcts):
        if v < 0 or v > 100 or not np.isfinite(v):
            raise ParseError(f"{c}={v!r} outside 0..100", path=path, row=rownum)
    total = sum(pcts)
    if abs(total - 100.0) > PCT_SUM_TOL:
        raise InvariantError(f"{path}:{rownum}: percents sum to {total}, outside 100+-{PCT_SUM_TOL}")
    return RaceDistribution.from_probs(pcts, normalize=True)


def load_name_prior_table(
    path: str | Path,
    kind: str,
    marginal: RaceDistribution,
    alpha: float = 1.0,
) -> NamePriorTable:
    """Load a surname or first-name race-frequency CSV.

    Expected header: name, pct_white, pct_black, pct_hispanic, pct_asian,
    pct_other, count. Names are normalized; rows colliding after
    normalization are merged with count-weighted averaging.
    """
    if kind not in ("surname", "firstname"):
        raise InvariantError(f"kind must be surname|firstname, got {kind!r}")
    reader, handle = _open_csv(path, ("name", *PCT_COLUMNS, "count"))
    entries: dict[str, tuple[RaceDistribution, float]] = {}
    with handle:
        for rownum, row in enumerate(reader, start=2):
            name = normalize_name(row["name"] or "")
            if not name:
                raise ParseError("empty name after normalization", path=str(path), row=rownum)
            dist = _parse_pct_row(row, str(path), rownum)
            try:
                count = float(row["count"])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad count: {exc}", path=str(path), row=rownum) from exc
            if count < 0:
                raise ParseError(f"negative count {count}", path=str(path), row=rownum)
            if name in entries:
                prev_dist, prev_count = entries[name]
                tot = prev_count + count
                if tot > 0:
                    merged = (prev_dist.as_array() * prev_count + dist.as_array() * count) / tot
                else:
                    merged = (prev_dist.as_array() + dist.as_array()) / 2.0
                entries[name] = (RaceDistribution.from_probs(merged, normalize=True), tot)
            else:
                entries[name] = (dist, count)
    return NamePriorTable(kind=kind, entries=entries, marginal=marginal, alpha=alpha)


def lookup_prior(table: NamePriorTable, name: str) -> RaceDistribution:
    """Laplace-smoothed race prior for a name; the marginal for unseen names."""
    entry = table.entries.get(normalize_name(name))
    if entry is None:
        return table.marginal
    dist, count = entry
    a = table.alpha
    smoothed = (dist.as_array() * count + a * table.marginal.as_array()) / (count + a)
    return RaceDistribution.from_probs(smoothed)


def assign_income_deciles(incomes: Sequence[float], keys: Sequence[str]) -> list[int]:
    """Rank-based decile 1..10 per income; ties broken by key order."""
    n = len(incomes)
    order = sorted(range(n), key=lambda i: (incomes[i], keys[i]))
    deciles = [0] * n
    for rank, idx in enumerate(order):
        deciles[idx] = min(10 * rank // n + 1, 10)
    return deciles


def load_tract_table(path: str | Path) -> dict[str, TractRecord]:
    """Load tract composition + income CSV, computing income deciles by rank.

    Expected header: geoid, pct_white, pct_black, pct_hispanic, pct_asian,
    pct_other, median_income.
    """
    reader, handle = _open_csv(path, ("geoid", *PCT_COLUMNS, "median_income"))
    geoids: list[str] = []
    comps: list[RaceDistribution] = []
    incomes: list[float] = []
    seen: set[str] = set()
    with handle:
        for rownum, row in enumerate(reader, start=2):
            geoid = (row["geoid"] or "").strip()
            if len(geoid) != 11 or not geoid.isdigit():
                raise ParseError(f"geoid {geoid!r} is not 11 decimal digits", path=str(path), row=rownum)
            if geoid in seen:
                raise DuplicateGeoid(f"{path}:{rownum}: duplicate geoid {geoid}")
            seen.add(geoid)
            comp = _parse_pct_row(row, str(path), rownum)
            try:
                income = float(row["median_income"])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad median_income: {exc}", path=str(path), row=rownum) from exc
            if income < 0 or not np.isfinite(income):
                raise ParseError(f"median_income {income!r} invalid", path=str(path), row=rownum)
            geoids.append(geoid)
            comps.append(comp)
            incomes.append(income)
    deciles = assign_income_deciles(incomes, geoids)
    return {
        g: TractRecord(geoid=g, composition=c, median_income=inc, income_decile=d)
        for g, c, inc, d in zip(geoids, comps, incomes, deciles)
    }


PERSON_COLUMNS = ("row_id", "first", "middle", "last", "tract_geoid", "race")


def load_person_records(
    path: str | Path,
    race_map: Mapping[str, RaceClass] | None = None,
    require_labels: bool = False,
) -> list[PersonRecord]:
    """Load person rows. Columns first,last required; row_id, middle,
    tract_geoid, race optional (row_id defaults to the row number)."""
    reader, handle = _open_csv(path, ("first", "last"))
    records: list[PersonRecord] = []
    with handle:
        for rownum, row in enumerate(reader, start=2):
            row_id = (row.get("row_id") or "").strip() or str(rownum - 2)
            middle = (row.get("middle") or "").strip() or None
            geoid = (row.get("tract_geoid") or "").strip() or None
            race_text = (row.get("race") or "").strip()
            label: RaceClass | None = None
            if race_text:
                label = map_voter_race(race_text, race_map)
            elif require_labels:
                raise ParseError("missing race label", path=str(path), row=rownum)
            try:
                records.append(
                    PersonRecord(
                        row_id=row_id,
                        first=(row.get("first") or "").strip(),
                        middle=middle,
                        last=(row.get("last") or "").strip(),
                        tract_geoid=geoid,
                        label=label,
                    )
                )
            except InvariantError as exc:
                raise ParseError(str(exc), path=str(path), row=rownum) from exc
    return records


def write_person_records(records: Iterable[PersonRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(PERSON_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.row_id,
                    r.first,
                    r.middle or "",
                    r.last,
                    r.tract_geoid or "",
                    r.label.canonical() if r.label is not None else "",
                ]
            )


def write_tract_table(tracts: Mapping[str, TractRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["geoid", *PCT_COLUMNS, "median_income"])
        for geoid in sorted(tracts):
            t = tracts[geoid]
            writer.writerow([geoid, *[repr(v * 100.0) for v in t.composition.p], repr(t.median_income)])


def write_name_prior_table(table: NamePriorTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["name", *PCT_COLUMNS, "count"])
        for name in sorted(table.entries):
            dist, count = table.entries[name]
            writer.writerow([name, *[repr(v * 100.0) for v in dist.p], int(count)])


def write_marginal(marginal: RaceDistribution, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["p_white", "p_black", "p_hispanic", "p_asian", "p_other"])
        writer.writerow([repr(v) for v in marginal.p])


def load_marginal(path: str | Path) -> RaceDistribution:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        rows = list(reader)
    if len(rows) != 1:
        raise ParseError(f"marginal file must have exactly one data row, got {len(rows)}", path=str(path))
    cols = ["p_white", "p_black", "p_hispanic", "p_asian", "p_other"]
    try:
        vals = [float(rows[0][c]) for c in cols]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad marginal row: {exc}", path=str(path), row=2) from exc
    return RaceDistribution.from_probs(vals, normalize=True)


# ---------------------------------------------------------------------------
# Stratified split
# ---------------------------------------------------------------------------


def stratified_split(
    records: Sequence[PersonRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Per-class seeded shuffle, then proportional allocation.

    Counts are floored per class per partition; remainders go to train first,
    then validation. Deterministic for a fixed seed.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvariantError(f"ratios must sum to 1, got {ratios}")
    for r in records:
        if r.label is None:
            raise InvariantError(f"row {r.row_id}: stratified_split requires labels")
    rng = np.random.default_rng(seed)
    parts: tuple[list[PersonRecord], ...] = ([], [], [])
    for race in RaceClass:
        members = [r for r in records if r.label == race]
        n = len(members)
        if n == 0:
            continue
        if n < 3:
            warnings.warn(f"class {race.canonical()} has only {n} rows", EmptyClassWarning)
        order = rng.permutation(n)
        counts = [int(np.floor(n * ratio)) for ratio in ratios]
        remainder = n - sum(counts)
        for i in range(remainder):
            counts[i % 2] += 1  # train first, then validation
        start = 0
        for part, cnt in zip(parts, counts):
            part.extend(members[i] for i in order[start : start + cnt])
            start += cnt
    return DatasetSplit(train=parts[0], validation=parts[1], holdout=parts[2])
