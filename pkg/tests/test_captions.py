import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labprompt.captions import (
    IQR_MULTIPLIER,
    AnomalyReport,
    CaptionError,
    ReferenceRanges,
    detect_anomalies,
    fit_reference_ranges,
    number_to_words,
    parse_caption,
    render_caption,
    render_clause,
    words_to_number,
)

from test_corpus import make_series


class TestFitReferenceRanges:
    def test_known_pool_oracle(self):
        # pool [1,2,3,4,100]: brute-force linear-interpolation quantiles
        pool = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
        q1, q3 = np.quantile(pool, [0.25, 0.75], method="linear")
        assert (q1, q3) == (2.0, 4.0)
        ranges = fit_reference_ranges([make_series(pool)])
        lo, hi = ranges.bounds("var0")
        assert lo == q1 - IQR_MULTIPLIER * (q3 - q1) == -1.0
        assert hi == q3 + IQR_MULTIPLIER * (q3 - q1) == 7.0

    def test_random_pools_match_quantile_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pool = rng.normal(size=int(rng.integers(4, 40)))
            ranges = fit_reference_ranges([make_series(pool)])
            q1, q3 = np.quantile(pool, [0.25, 0.75], method="linear")
            iqr = q3 - q1
            lo, hi = ranges.bounds("var0")
            assert lo == pytest.approx(q1 - 1.5 * iqr)
            assert hi == pytest.approx(q3 + 1.5 * iqr)

    def test_constant_pool_widened(self):
        ranges = fit_reference_ranges([make_series([5.0, 5.0, 5.0, 5.0])])
        lo, hi = ranges.bounds("var0")
        assert lo < 5.0 < hi
        # a constant channel must read as normal
        report = detect_anomalies(make_series([5.0, 5.0, 5.0, 5.0]), ranges)
        assert report.above == (0,) and report.below == (0,)

    def test_identical_pools_give_identical_bounds(self):
        values = np.tile(np.array([1.0, 2.0, 3.0, 9.0])[:, None], (1, 2))
        ranges = fit_reference_ranges([make_series(values, variables=["a", "b"])])
        assert ranges.bounds("a") == ranges.bounds("b")

    def test_too_few_observations_is_an_error(self):
        with pytest.raises(CaptionError, match="var0"):
            fit_reference_ranges([make_series([1.0, 2.0, 3.0])])

    def test_padded_steps_excluded_from_pool(self):
        from labprompt.corpus import pad_series

        base = make_series([1.0, 2.0, 3.0, 4.0])
        padded = pad_series(base, 8)  # repeats 4.0 four more times
        fit_padded = fit_reference_ranges([padded])
        fit_plain = fit_reference_ranges([base])
        assert fit_padded.bounds("var0") == fit_plain.bounds("var0")

    def test_tsv_roundtrip(self, tmp_path):
        ranges = fit_reference_ranges([make_series([1.0, 2.0, 3.0, 4.0, 100.0])])
        path = tmp_path / "ranges.tsv"
        ranges.save_tsv(path)
        clone = ReferenceRanges.load_tsv(path)
        assert clone.bounds("var0") == ranges.bounds("var0")


class TestDetectAnomalies:
    def _ranges(self, lo, hi, var="var0"):
        return ReferenceRanges(
            variable_names=(var,), lower=(lo,), upper=(hi,), provenance="supplied"
        )

    def test_all_inside_gives_zero_counts(self):
        report = detect_anomalies(make_series([0.0, 1.0, 2.0]), self._ranges(-1.0, 7.0))
        assert report.above == (0,) and report.below == (0,)

    def test_exhaustive_comparison_oracle(self):
        report = detect_anomalies(make_series([8.0, 8.0, -2.0]), self._ranges(-1.0, 7.0))
        assert report.above == (2,) and report.below == (1,)

    def test_boundary_values_count_as_normal(self):
        report = detect_anomalies(make_series([-1.0, 7.0]), self._ranges(-1.0, 7.0))
        assert report.above == (0,) and report.below == (0,)

    def test_padded_tail_excluded(self):
        from labprompt.corpus import pad_series

        series = pad_series(make_series([8.0, 8.0]), 6)  # pads with more 8.0 rows
        report = detect_anomalies(series, self._ranges(-1.0, 7.0))
        assert report.above == (2,)

    def test_missing_variable_is_an_error(self):
        with pytest.raises(CaptionError):
            detect_anomalies(make_series([0.0], variables=["other"]), self._ranges(0, 1))

    def test_monotonicity_single_excursion(self):
        values = np.zeros((5, 2))
        base = detect_anomalies(make_series(values, variables=["a", "b"]),
                                ReferenceRanges(("a", "b"), (-1.0, -1.0), (1.0, 1.0), "supplied"))
        bumped = values.copy()
        bumped[3, 0] = 5.0
        after = detect_anomalies(make_series(bumped, variables=["a", "b"]),
                                 ReferenceRanges(("a", "b"), (-1.0, -1.0), (1.0, 1.0), "supplied"))
        assert after.above[0] == base.above[0] + 1
        assert after.above[1] == base.above[1]
        assert after.below == base.below


class TestNumberWords:
    def test_paper_examples(self):
        assert number_to_words(46) == "forty-six"
        assert number_to_words(1) == "one"

    def test_hyphenation(self):
        assert number_to_words(21) == "twenty-one"

    def test_selected_values(self):
        assert number_to_words(10) == "ten"
        assert number_to_words(15) == "fifteen"
        assert number_to_words(100) == "one hundred"
        assert number_to_words(101) == "one hundred one"
        assert number_to_words(999) == "nine hundred ninety-nine"
        assert number_to_words(1000) == "one thousand"
        assert number_to_words(9999) == "nine thousand nine hundred ninety-nine"

    def test_out_of_range(self):
        for n in (0, -1, 10_000):
            with pytest.raises(CaptionError):
                number_to_words(n)

    @given(st.integers(min_value=1, max_value=9999))
    @settings(max_examples=300, deadline=None)
    def test_words_roundtrip(self, n):
        assert words_to_number(number_to_words(n)) == n


# grammar transcribed from the four clause templates
_CLAUSE_GRAMMAR = re.compile(
    r"^(?P<var>[a-z][a-z ]*?) is (?:"
    r"normal all the time"
    r"|higher than normal (?P<a>[a-z -]+) times"
    r"|lower than normal (?P<b>[a-z -]+) times"
    r"|higher than normal (?P<a2>[a-z -]+) times and lower than normal (?P<b2>[a-z -]+) times"
    r")$"
)


class TestRenderCaption:
    def test_single_high_clause(self):
        report = AnomalyReport(("glucose",), (1,), (0,))
        assert render_caption(report).text == "glucose is higher than normal one times"

    def test_all_normal_clause(self):
        report = AnomalyReport(("heart rate",), (0,), (0,))
        assert render_caption(report).text == "heart rate is normal all the time"

    def test_both_directions_clause(self):
        report = AnomalyReport(("x",), (2,), (3,))
        assert (
            render_caption(report).text
            == "x is higher than normal two times and lower than normal three times"
        )

    def test_clauses_joined_in_variable_order(self):
        report = AnomalyReport(("b", "a"), (1, 0), (0, 0))
        assert render_caption(report).text == (
            "b is higher than normal one times, a is normal all the time"
        )

    def test_one_times_quirk_preserved(self):
        assert "one times" in render_clause("v", 1, 0)
        assert "one time," not in render_clause("v", 1, 0)

    def _random_report(self, rng):
        n = int(rng.integers(1, 6))
        names = tuple(f"lab {chr(97 + i)}" for i in range(n))
        above = tuple(int(rng.integers(0, 10000)) for _ in range(n))
        below = tuple(
            int(rng.integers(0, 10000)) if rng.random() < 0.5 else 0 for _ in range(n)
        )
        return AnomalyReport(names, above, below)

    def test_fuzzed_grammar_conformance_and_roundtrip(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            report = self._random_report(rng)
            caption = render_caption(report)
            for clause in caption.text.split(", "):
                assert _CLAUSE_GRAMMAR.match(clause), clause
            assert parse_caption(caption.text) == report

    @given(st.integers(min_value=0, max_value=9999), st.integers(min_value=0, max_value=9999))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_property(self, above, below):
        report = AnomalyReport(("glucose", "heart rate"), (above, 0), (below, 2))
        caption = render_caption(report)
        assert parse_caption(caption.text) == report
