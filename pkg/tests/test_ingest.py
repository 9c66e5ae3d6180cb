import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seasmap.errors import DomainError, DuplicateKeyError, ParseError, ValidationError
from seasmap.ingest import (
    CovariateStack,
    FacilityRecord,
    Observation,
    apply_offset_and_rescale,
    build_design,
    filter_outliers,
    load_covariates,
    load_facilities,
    log_observations,
    reduce_to_series,
)

HEADER = "facility_id,lon,lat,year,month,cases\n"


def facility_file(rows):
    return io.StringIO(HEADER + "".join(r + "\n" for r in rows))


def full_year(fid, year, counts, lon=47.5, lat=-19.0):
    return [FacilityRecord(fid, lon, lat, year, m + 1, float(c)) for m, c in enumerate(counts)]


def test_load_row():
    recs = load_facilities(facility_file(["HF1,47.5,-19.0,2014,3,21"]))
    assert recs == [FacilityRecord("HF1", 47.5, -19.0, 2014, 3, 21.0)]


def test_missing_cases_is_absent():
    recs = load_facilities(facility_file(["HF1,47.5,-19.0,2014,3,"]))
    assert recs[0].cases is None


def test_month_out_of_range():
    with pytest.raises(ValidationError):
        load_facilities(facility_file(["HF1,47.5,-19.0,2014,13,21"]))


def test_duplicate_key():
    with pytest.raises(DuplicateKeyError):
        load_facilities(facility_file(["HF1,47.5,-19.0,2014,3,21", "HF1,47.5,-19.0,2014,3,4"]))


def test_malformed_row_has_line_number():
    with pytest.raises(ParseError) as err:
        load_facilities(facility_file(["HF1,47.5,-19.0,2014,3,21", "HF1,47.5,x,2014,4,2"]))
    assert err.value.line == 3


def test_negative_cases_rejected():
    with pytest.raises(ValidationError):
        load_facilities(facility_file(["HF1,47.5,-19.0,2014,3,-1"]))


def test_bad_header():
    with pytest.raises(ParseError):
        load_facilities(io.StringIO("id,lon,lat,year,month,cases\n"))


def test_uniform_counts():
    series, drops = reduce_to_series(full_year("A", 2014, [5] * 12))
    np.testing.assert_allclose(series[0].proportions, 1 / 12)
    assert not series[0].zero_case and len(drops) == 0


def test_zero_counts_give_uniform_flagged():
    series, _ = reduce_to_series(full_year("A", 2014, [0] * 12))
    np.testing.assert_allclose(series[0].proportions, 1 / 12)
    assert series[0].zero_case


def test_even_year_median():
    base = [10] * 12
    other = [10] * 12
    other[0] = 30
    series, _ = reduce_to_series(full_year("A", 2013, base) + full_year("A", 2014, other))
    # month 1 median is (10 + 30) / 2 = 20; total 20 + 11 * 10 = 130
    assert series[0].median_counts[0] == 20
    assert series[0].proportions[0] == pytest.approx(20 / 130)


def test_missing_month_dropped():
    recs = full_year("A", 2014, [3] * 12)
    recs = [r for r in recs if r.month != 7] + full_year("B", 2014, [1] * 12)
    series, drops = reduce_to_series(recs)
    assert [s.facility_id for s in series] == ["B"]
    assert drops.lines() == ["DROPPED A missing_months=7"]


def test_partially_missing_month_uses_available_years():
    a = full_year("A", 2013, [4] * 12)
    b = [FacilityRecord("A", 47.5, -19.0, 2014, m, None if m == 2 else 8.0) for m in range(1, 13)]
    series, _ = reduce_to_series(a + b)
    assert series[0].median_counts[1] == 4
    assert series[0].median_counts[0] == 6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 50), min_size=12, max_size=12), min_size=1, max_size=4), st.randoms())
def test_reduce_order_invariant_and_normalised(years, rnd):
    recs = [r for k, counts in enumerate(years) for r in full_year("A", 2010 + k, counts)]
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    a, _ = reduce_to_series(recs)
    b, _ = reduce_to_series(shuffled)
    np.testing.assert_array_equal(a[0].proportions, b[0].proportions)
    assert abs(a[0].proportions.sum() - 1) < 1e-9
    assert np.all((a[0].proportions >= 0) & (a[0].proportions <= 1))


def test_offset_point_mass():
    out = apply_offset_and_rescale([1.0] + [0.0] * 11)
    assert out[0] == pytest.approx((1 + 1e-5) / (1 + 12e-5), rel=1e-14)
    assert out[0] == pytest.approx(0.99989, abs=5e-6)
    np.testing.assert_allclose(out[1:], 1e-5 / (1 + 12e-5), rtol=1e-12)
    assert out[1] == pytest.approx(0.0000099988, rel=1e-4)


def test_offset_uniform_and_zero():
    np.testing.assert_allclose(apply_offset_and_rescale(np.full(12, 1 / 12)), 1 / 12, rtol=1e-14)
    np.testing.assert_allclose(apply_offset_and_rescale(np.zeros(12)), 1 / 12, rtol=1e-14)


@given(st.lists(st.floats(1e-6, 1.0), min_size=12, max_size=12))
def test_offset_near_idempotent(raw):
    p = np.array(raw) / np.sum(raw)
    once = apply_offset_and_rescale(p)
    assert abs(once.sum() - 1) < 1e-12 and np.all(once > 0)
    twice = apply_offset_and_rescale(once)
    assert np.max(np.abs(twice - once)) <= 12e-5


def test_filter_outliers():
    obs = [Observation(0, 1, -11.2), Observation(0, 2, -2.0), Observation(0, 3, -11.0)]
    kept, n = filter_outliers(obs)
    assert kept == [Observation(0, 2, -2.0)] and n == 2
    assert filter_outliers([]) == ([], 0)
    kept, n = filter_outliers(obs, threshold=-12)
    assert n == 0


def test_log_observations_count():
    series, _ = reduce_to_series(full_year("A", 2014, range(1, 13)) + full_year("B", 2014, [2] * 12, lon=47.6))
    obs = log_observations(series)
    assert len(obs) == 24
    assert math.fsum(math.exp(o.value) for o in obs if o.location == 0) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Covariates and design
# ---------------------------------------------------------------------------

def make_stack(lags=(0, 2)):
    cells = np.array([(x, y) for x in (0.0, 1.0) for y in (0.0, 1.0)])
    month_values = np.arange(1, 13, dtype=float)
    g = np.tile(month_values[:, None], (1, 4)) + np.arange(4)[None, :] * 100
    return CovariateStack(cells, {"rain": g, "flat": np.zeros((12, 4))}, {"rain": lags, "flat": (0,)})


def test_standardisation_stats():
    s = make_stack()
    z = s.standardized("rain")
    assert abs(z.mean()) < 1e-12
    assert z.std(ddof=1) == pytest.approx(1.0)


def test_constant_covariate_gives_zero_column():
    s = make_stack()
    X = build_design(s, [(0.1, 0.1)], ["flat"])
    np.testing.assert_array_equal(X[:, 1], 0.0)
    np.testing.assert_array_equal(X[:, 0], 1.0)


def test_cyclic_lag_table():
    s = make_stack()
    X = build_design(s, [(0.0, 0.0)], ["rain", "rain_lag2"])
    mean, sd = s.stats["rain"]
    raw_lag2 = X[:, 2] * sd + mean  # cell 0 holds the month number itself
    # hand table: month 1 -> 11, month 2 -> 12, month 3 -> 1, ...
    expected = [11, 12, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
    np.testing.assert_allclose(raw_lag2, expected)
    np.testing.assert_allclose(X[:, 1] * sd + mean, np.arange(1, 13))


@given(st.integers(0, 30))
def test_lag_wrap_property(lag):
    s = make_stack(lags=(lag,))
    X = build_design(s, [(1.0, 1.0)], [f"rain_lag{lag}" if lag else "rain"])
    raw = s.grids["rain"][:, 3]
    mean, sd = s.stats["rain"]
    for i in range(1, 13):
        assert X[i - 1, 1] * sd + mean == pytest.approx(raw[(i - 1 - lag) % 12])


def test_design_row_order_month_major():
    s = make_stack()
    X = build_design(s, [(0.0, 0.0), (1.0, 1.0)], ["rain"])
    mean, sd = s.stats["rain"]
    assert X[1, 1] * sd + mean == pytest.approx(1 + 300)  # month 1, location 2
    assert X[2, 1] * sd + mean == pytest.approx(2)  # month 2, location 1


def test_unknown_covariate():
    with pytest.raises(ValidationError):
        build_design(make_stack(), [(0.0, 0.0)], ["evi"])


def test_outside_grid_named():
    with pytest.raises(DomainError, match="5"):
        build_design(make_stack(), [(5.0, 0.0)], ["rain"])


def test_load_covariates_round_trip():
    text = "covariate,month,lon,lat,value\n" + "".join(
        f"rain,{m},{x},{y},{m * 10 + x}\n" for m in range(1, 13) for x in (0, 1) for y in (0, 1)
    )
    s = load_covariates(io.StringIO(text), lags=(1,))
    assert s.column_names() == ["rain", "rain_lag1"]
    assert s.grids["rain"].shape == (12, 4)


def test_load_covariates_incomplete_grid():
    text = "covariate,month,lon,lat,value\nrain,1,0,0,1\n"
    with pytest.raises(ValidationError):
        load_covariates(io.StringIO(text))


def test_load_covariates_duplicate():
    text = "covariate,month,lon,lat,value\nrain,1,0,0,1\nrain,1,0,0,2\n"
    with pytest.raises(DuplicateKeyError):
        load_covariates(io.StringIO(text))
