import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raceimpute.core import (
    DatasetSplit,
    NamePriorTable,
    PersonRecord,
    RaceClass,
    RaceDistribution,
    assign_income_deciles,
    load_name_prior_table,
    load_person_records,
    load_tract_table,
    lookup_prior,
    map_voter_race,
    normalize_name,
    stratified_split,
)
from raceimpute.errors import (
    DuplicateGeoid,
    EmptyClassWarning,
    InvariantError,
    ParseError,
    UnknownSourceCode,
)

MARGINAL = RaceDistribution((0.6, 0.13, 0.18, 0.06, 0.03))


def make_records(counts, with_geo=False):
    records = []
    i = 0
    for race, n in counts.items():
        for _ in range(n):
            records.append(
                PersonRecord(
                    row_id=f"r{i}",
                    first="ann",
                    last="lee",
                    tract_geoid="12345678901" if with_geo else None,
                    label=race,
                )
            )
            i += 1
    return records


class TestRaceDistribution:
    def test_valid(self):
        d = RaceDistribution((0.2, 0.2, 0.2, 0.2, 0.2))
        assert d[RaceClass.WHITE] == 0.2

    def test_sum_invariant(self):
        with pytest.raises(InvariantError):
            RaceDistribution((0.5, 0.5, 0.5, 0.0, 0.0))

    def test_negative_component(self):
        with pytest.raises(InvariantError):
            RaceDistribution((-0.1, 0.4, 0.3, 0.2, 0.2))

    def test_normalize(self):
        d = RaceDistribution.from_probs([2, 1, 1, 0, 0], normalize=True)
        assert d.p == (0.5, 0.25, 0.25, 0.0, 0.0)

    def test_argmax_tiebreak_low_code(self):
        assert RaceDistribution((0.4, 0.4, 0.1, 0.05, 0.05)).argmax() == RaceClass.WHITE
        assert RaceDistribution((0.2, 0.2, 0.2, 0.2, 0.2)).argmax() == RaceClass.WHITE


class TestNormalizeName:
    def test_diacritics_case_whitespace(self):
        assert normalize_name("  GARCÍA ") == "garcia"
        assert normalize_name("De  La\tCruz") == "de la cruz"

    def test_keeps_apostrophe_and_hyphen(self):
        assert normalize_name("O’Brien-Smith") == "o'brien-smith"

    def test_drops_digits_and_punctuation(self):
        assert normalize_name("J.R. 2nd") == "jr nd"


class TestMapVoterRace:
    def test_identity(self):
        assert map_voter_race("Hispanic") == RaceClass.HISPANIC

    def test_paper_other_folding(self):
        assert map_voter_race("American Indian or Alaska Native") == RaceClass.OTHER
        assert map_voter_race("Multiracial") == RaceClass.OTHER

    def test_unknown_code(self):
        with pytest.raises(UnknownSourceCode):
            map_voter_race("ZZ")

    def test_custom_mapping(self):
        mapping = {"wh": RaceClass.WHITE}
        assert map_voter_race("WH", mapping) == RaceClass.WHITE


class TestNamePriorTable:
    def write_table(self, tmp_path, rows):
        path = tmp_path / "names.csv"
        header = "name,pct_white,pct_black,pct_hispanic,pct_asian,pct_other,count\n"
        path.write_text(header + "".join(rows))
        return path

    def test_direct_rescale(self, tmp_path):
        path = self.write_table(tmp_path, ["garcia,5.0,0.5,92.0,1.5,1.0,100000\n"])
        table = load_name_prior_table(path, "surname", MARGINAL)
        dist, count = table.entries["garcia"]
        assert np.allclose(dist.as_array(), [0.05, 0.005, 0.92, 0.015, 0.01], atol=1e-12)
        assert count == 100000

    def test_renormalizes_within_tolerance(self, tmp_path):
        path = self.write_table(tmp_path, ["lee,40.2,30.1,10.0,15.1,5.0,10\n"])  # sums to 100.4
        table = load_name_prior_table(path, "surname", MARGINAL)
        dist, _ = table.entries["lee"]
        assert abs(sum(dist.p) - 1.0) < 1e-12

    def test_rejects_outside_tolerance(self, tmp_path):
        path = self.write_table(tmp_path, ["lee,40.0,30.0,10.0,12.0,5.0,10\n"])  # sums to 97
        with pytest.raises(InvariantError):
            load_name_prior_table(path, "surname", MARGINAL)

    def test_parse_error_carries_row(self, tmp_path):
        path = self.write_table(tmp_path, ["lee,oops,30,10,12,5,10\n"])
        with pytest.raises(ParseError) as err:
            load_name_prior_table(path, "surname", MARGINAL)
        assert err.value.row == 2

    def test_lookup_smoothing_derived_value(self):
        # (count*p + alpha*marginal) / (count + alpha) with alpha=1
        table = NamePriorTable(
            kind="surname",
            entries={"solo": (RaceDistribution((1.0, 0.0, 0.0, 0.0, 0.0)), 9.0)},
            marginal=MARGINAL,
        )
        got = lookup_prior(table, "Solo").as_array()
        assert np.allclose(got, [0.96, 0.013, 0.018, 0.006, 0.003], atol=1e-15)

    def test_lookup_unseen_returns_marginal(self):
        table = NamePriorTable(kind="surname", entries={}, marginal=MARGINAL)
        assert lookup_prior(table, "nobody") is MARGINAL

    def test_lookup_huge_count_keeps_stored_p(self):
        table = NamePriorTable(
            kind="surname",
            entries={"big": (RaceDistribution((0.1, 0.2, 0.3, 0.25, 0.15)), 1e15)},
            marginal=MARGINAL,
        )
        got = lookup_prior(table, "big").as_array()
        assert np.allclose(got, [0.1, 0.2, 0.3, 0.25, 0.15], atol=1e-13)

    def test_lookup_always_valid_distribution(self):
        table = NamePriorTable(
            kind="surname",
            entries={"x": (RaceDistribution((0.0, 0.0, 1.0, 0.0, 0.0)), 0.0)},
            marginal=MARGINAL,
        )
        dist = lookup_prior(table, "x")
        assert abs(sum(dist.p) - 1.0) < 1e-9


class TestTractTable:
    def write_tracts(self, tmp_path, rows):
        path = tmp_path / "tracts.csv"
        header = "geoid,pct_white,pct_black,pct_hispanic,pct_asian,pct_other,median_income\n"
        path.write_text(header + "".join(rows))
        return path

    def row(self, geoid, income):
        return f"{geoid},60,13,18,6,3,{income}\n"

    def test_ten_distinct_incomes_are_permutation(self, tmp_path):
        rows = [self.row(f"{10000000000 + i}", 30000 + 1000 * i) for i in range(10)]
        table = load_tract_table(self.write_tracts(tmp_path, rows))
        deciles = sorted(t.income_decile for t in table.values())
        assert deciles == list(range(1, 11))

    def test_all_tied_incomes_stay_in_range(self, tmp_path):
        rows = [self.row(f"{10000000000 + i}", 50000) for i in range(7)]
        table = load_tract_table(self.write_tracts(tmp_path, rows))
        assert all(1 <= t.income_decile <= 10 for t in table.values())

    def test_third_lowest_of_twenty_gets_decile_two(self, tmp_path):
        # brute-force check of floor(10*rank/N)+1 over 20 distinct incomes
        incomes = [40000 + 500 * i for i in range(20)]
        rows = [self.row(f"{10000000000 + i}", inc) for i, inc in enumerate(incomes)]
        table = load_tract_table(self.write_tracts(tmp_path, rows))
        third_lowest = "10000000002"
        assert table[third_lowest].income_decile == 10 * 2 // 20 + 1 == 2

    def test_duplicate_geoid(self, tmp_path):
        rows = [self.row("10000000000", 1), self.row("10000000000", 2)]
        with pytest.raises(DuplicateGeoid):
            load_tract_table(self.write_tracts(tmp_path, rows))

    def test_decile_monotone_in_income(self, tmp_path):
        rng = np.random.default_rng(0)
        incomes = rng.integers(20000, 200000, size=37).tolist()
        rows = [self.row(f"{10000000000 + i}", inc) for i, inc in enumerate(incomes)]
        table = load_tract_table(self.write_tracts(tmp_path, rows))
        by_income = sorted(table.values(), key=lambda t: t.median_income)
        deciles = [t.income_decile for t in by_income]
        assert deciles == sorted(deciles)


class TestStratifiedSplit:
    def test_proportional_allocation(self):
        records = make_records({RaceClass.WHITE: 500, RaceClass.BLACK: 300, RaceClass.HISPANIC: 200})
        split = stratified_split(records, seed=7)
        train_counts = {
            race: sum(1 for r in split.train if r.label == race)
            for race in (RaceClass.WHITE, RaceClass.BLACK, RaceClass.HISPANIC)
        }
        assert train_counts == {RaceClass.WHITE: 400, RaceClass.BLACK: 240, RaceClass.HISPANIC: 160}

    def test_deterministic(self):
        records = make_records({RaceClass.WHITE: 50, RaceClass.ASIAN: 30})
        a = stratified_split(records, seed=3)
        b = stratified_split(records, seed=3)
        assert [r.row_id for r in a.train] == [r.row_id for r in b.train]
        assert [r.row_id for r in a.holdout] == [r.row_id for r in b.holdout]

    def test_ten_rows_single_class(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            split = stratified_split(make_records({RaceClass.OTHER: 10}), seed=0)
        assert (len(split.train), len(split.validation), len(split.holdout)) == (8, 1, 1)

    def test_small_class_warns(self):
        records = make_records({RaceClass.WHITE: 50, RaceClass.OTHER: 2})
        with pytest.warns(EmptyClassWarning):
            stratified_split(records, seed=0)

    def test_unlabeled_rejected(self):
        records = [PersonRecord(row_id="a", first="x", last="y")]
        with pytest.raises(InvariantError):
            stratified_split(records, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(
        counts=st.tuples(
            st.integers(0, 60), st.integers(0, 60), st.integers(0, 60), st.integers(0, 60), st.integers(0, 60)
        ),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_is_partition(self, counts, seed):
        records = make_records({race: n for race, n in zip(RaceClass, counts)})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            split = stratified_split(records, seed=seed)
        all_ids = sorted(r.row_id for part in split.partitions() for r in part)
        assert all_ids == sorted(r.row_id for r in records)

    def test_share_within_two_points(self):
        records = make_records(
            {RaceClass.WHITE: 600, RaceClass.BLACK: 150, RaceClass.HISPANIC: 150, RaceClass.ASIAN: 70, RaceClass.OTHER: 30}
        )
        split = stratified_split(records, seed=11)
        total_share = {race: sum(1 for r in records if r.label == race) / len(records) for race in RaceClass}
        for part in split.partitions():
            for race in RaceClass:
                share = sum(1 for r in part if r.label == race) / len(part)
                assert abs(share - total_share[race]) <= 0.02 + 1e-9


class TestPersonRecords:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "people.csv"
        path.write_text(
            "row_id,first,middle,last,tract_geoid,race\n"
            "a,Ana,,Lopez,12345678901,hispanic\n"
            "b,Bo,Jo,Chan,,\n"
        )
        records = load_person_records(path)
        assert records[0].label == RaceClass.HISPANIC
        assert records[0].tract_geoid == "12345678901"
        assert records[1].middle == "Jo"
        assert records[1].label is None and records[1].tract_geoid is None

    def test_bad_geoid(self, tmp_path):
        path = tmp_path / "people.csv"
        path.write_text("first,last,tract_geoid\nAna,Lopez,123\n")
        with pytest.raises(ParseError):
            load_person_records(path)

    def test_empty_last_rejected(self, tmp_path):
        path = tmp_path / "people.csv"
        path.write_text("first,last\nAna, \n")
        with pytest.raises(ParseError):
            load_person_records(path)


def test_assign_income_deciles_rank_definition():
    incomes = [5.0, 1.0, 3.0, 2.0, 4.0]
    keys = list("abcde")
    # ranks: b=0, d=1, c=2, e=3, a=4 -> deciles floor(10r/5)+1
    assert assign_income_deciles(incomes, keys) == [9, 1, 5, 3, 7]
