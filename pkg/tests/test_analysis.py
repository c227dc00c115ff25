import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from dpmood import analysis as an
from dpmood import datamodel as dm
from dpmood import synthgen as sg
from dpmood.datamodel import RawSession

DAY0_MS = 1451865600000.0  # 2016-01-04 00:00 UTC, a Monday


def sess(subject, start_ms, durations, az=None, sid=None):
    n = len(durations)
    ts = start_ms + 100.0 * np.arange(1, n + 1)
    kp = np.column_stack([ts, durations, np.full(n, 100.0), np.zeros(n), np.zeros(n)])
    m = len(az) if az is not None else 3
    ac = np.column_stack([start_ms + 60.0 * np.arange(m), np.zeros(m), np.zeros(m),
                          az if az is not None else np.zeros(m)])
    return RawSession(subject, sid or f"{subject}-{start_ms}", kp, ac)


# ------------------------------------------------------------- aggregates

def test_hourly_buckets_examples():
    hour6 = DAY0_MS + 6 * dm.MS_PER_HOUR
    ds = dm.Dataset([sess("a", hour6 + 1000 * i, [80.0, 120.0]) for i in range(3)])
    stats = an.hourly_stats(ds, "duration")
    assert len(stats) == 24
    assert [s.count for s in stats] == [0] * 6 + [6] + [0] * 17
    assert stats[6].mean == 100.0 and stats[6].std == 20.0
    assert all(math.isnan(s.mean) for s in stats if s.count == 0)
    const = an.hourly_stats(dm.Dataset([sess("a", hour6, [55.0] * 4)]), "duration")[6]
    assert (const.mean, const.std) == (55.0, 0.0)
    with pytest.raises(ValueError):
        an.hourly_stats(ds, "pressure")


def test_dayofweek_buckets_examples():
    ds = dm.Dataset([sess("a", DAY0_MS + 2 * dm.MS_PER_DAY + 5e6, [70.0] * 3, az=[0.5] * 4)])
    stats = an.dayofweek_stats(ds, "az")
    assert [s.count for s in stats] == [0, 0, 4, 0, 0, 0, 0]  # a Wednesday
    assert stats[2].mean == 0.5 and stats[2].std == 0.0
    assert an.session_weekday(sess("a", DAY0_MS, [1.0])) == 0


def test_uniform_days_give_multinomial_counts():
    rng = np.random.default_rng(0)
    n = 100_000
    days = rng.integers(0, 7 * 40, n)
    ds = dm.Dataset([sess("a", DAY0_MS + d * dm.MS_PER_DAY + 3e6, [1.0], sid=str(i)) for i, d in enumerate(days)])
    counts = np.array([s.count for s in an.dayofweek_stats(ds, "duration")])
    sigma = math.sqrt(n * (1 / 7) * (6 / 7))
    assert counts.sum() == n
    assert np.all(np.abs(counts - n / 7) < 3 * sigma), counts


def test_usage_histogram():
    assert an.usage_histogram(dm.Dataset([])).sum() == 0
    ds, _ = sg.generate(sg.GenConfig(seed=1, sessions_per_subject=200))
    hist = an.usage_histogram(ds)
    assert hist.shape == (7, 24) and hist.sum() == len(ds)
    # the generator weights daytime hours far above 00-05
    assert hist[:, 8:23].sum() / 15 > 3 * hist[:, 0:6].sum() / 6
    assert np.all(hist[:, 8:23].sum(axis=0) > hist[:, 2:5].sum(axis=0).max())


def test_recovered_hourly_curve_tracks_planted_cosine():
    ds, truth = sg.generate(sg.GenConfig(seed=0, sessions_per_subject=300, n_bipolar1=0, n_bipolar2=0))
    stats = an.hourly_stats(ds, "duration")
    means = np.array([s.mean for s in stats])
    se = np.array([s.std / math.sqrt(s.count) for s in stats])
    # a bucket spans one hour; average the planted curve across it
    grid = np.arange(24)[:, None] + np.linspace(0, 1, 61)[None, :]
    planted = truth.duration_curve(grid).mean(axis=1)
    assert np.all(np.abs(means - planted) < 3 * se)
    assert np.argmax(means) in (1, 2, 3, 4) and np.argmin(means) in (13, 14, 15, 16)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_aggregates_are_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    sessions = [sess(f"s{i % 3}", DAY0_MS + float(rng.integers(0, 10**9)), rng.uniform(50, 150, 5).round(),
                     az=rng.normal(size=4).round(3), sid=str(i)) for i in range(12)]
    a = dm.Dataset(sessions)
    b = dm.Dataset([sessions[i] for i in rng.permutation(12)])
    for fn in (an.hourly_stats, an.dayofweek_stats):
        for sa, sb in zip(fn(a, "duration"), fn(b, "duration")):
            assert sa.count == sb.count
            assert sa.count == 0 or (sa.mean == pytest.approx(sb.mean, rel=1e-12)
                                     and sa.std == pytest.approx(sb.std, rel=1e-9, abs=1e-12))
    np.testing.assert_array_equal(an.usage_histogram(a), an.usage_histogram(b))
    ga, gb = an.pairwise_grid(a, "az"), an.pairwise_grid(b, "az")
    np.testing.assert_allclose(ga.p, gb.p, rtol=1e-9)


# ---------------------------------------------------------------- t tests

def t_pdf(x, df):
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))


def quad_two_sided(t, df):
    tail, _ = integrate.quad(t_pdf, abs(t), math.inf, args=(df,), epsabs=1e-13, epsrel=1e-12)
    return 2 * tail


def test_welch_matches_quadrature_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 100), rng.normal(1, 1, 100)
    res = an.welch_ttest(a, b)
    assert abs(res.p - quad_two_sided(res.t, res.df)) <= 1e-6
    for _ in range(20):
        na, nb = rng.integers(2, 60, 2)
        a = rng.normal(0, rng.uniform(0.2, 3), na)
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 3), nb)
        res = an.welch_ttest(a, b)
        assert abs(res.p - quad_two_sided(res.t, res.df)) <= 1e-6


def test_welch_statistic_by_hand():
    a, b = [1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 9.0]
    res = an.welch_ttest(a, b)
    va, vb = np.var(a, ddof=1) / 4, np.var(b, ddof=1) / 3
    assert res.t == pytest.approx((2.5 - 5.0) / math.sqrt(va + vb), rel=1e-14)
    assert res.df == pytest.approx((va + vb) ** 2 / (va ** 2 / 3 + vb ** 2 / 2), rel=1e-14)


def test_welch_edge_cases():
    x = np.random.default_rng(1).normal(size=30)
    assert tuple(an.welch_ttest(x, x)) == (0.0, 1.0)
    r1, r2 = an.welch_ttest(x, x + 0.3), an.welch_ttest(x + 0.3, x)
    assert r1.t == -r2.t and r1.p == r2.p
    same = an.welch_ttest([2.0, 2.0], [2.0, 2.0, 2.0])
    assert (same.t, same.p, same.degenerate) == (0.0, 1.0, True)
    diff = an.welch_ttest([1.0, 1.0], [2.0, 2.0])
    assert diff.p == 0.0 and diff.degenerate
    with pytest.raises(ValueError):
        an.welch_ttest([1.0], [1.0, 2.0])


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0.05, 50), b=st.floats(0.05, 50), x=st.floats(0, 1))
def test_betainc_symmetry(a, b, x):
    # near 0 the slope is huge, so the rounding in 1 - x alone can move I by 1e-12;
    # snap x so that x and 1 - x are exact complements (Sterbenz on whichever side is >= 0.5)
    x = 1 - (1 - x)
    assert abs(an.betainc(a, b, x) + an.betainc(b, a, 1 - x) - 1) <= 1e-12


def test_betainc_small_x_tail():
    # I_x(a, 1) = x^a exactly; far from the reflection threshold
    for a, x in ((0.25, 1.192092896e-07), (3.0, 1e-5), (0.05, 1e-300)):
        assert an.betainc(a, 1.0, x) == pytest.approx(x ** a, rel=1e-12)


def test_betainc_known_values():
    assert an.betainc(1, 1, 0.3) == pytest.approx(0.3, abs=1e-15)
    assert an.betainc(2, 1, 0.5) == pytest.approx(0.25, abs=1e-15)  # x^a for b = 1
    assert an.betainc(0.5, 0.5, 0.5) == pytest.approx(0.5, abs=1e-14)
    with pytest.raises(ValueError):
        an.betainc(0, 1, 0.5)


@settings(max_examples=50, deadline=None)
@given(t1=st.floats(0, 40), t2=st.floats(0, 40), df=st.floats(1, 500))
def test_p_is_monotone_in_abs_t(t1, t2, df):
    lo, hi = sorted((t1, t2))
    p_lo, p_hi = an.t_sf_two_sided(lo, df), an.t_sf_two_sided(-hi, df)
    assert 0.0 <= p_hi <= p_lo <= 1.0


# ----------------------------------------------------------- pairwise grid

def test_pairwise_grid_identical_subjects():
    durs = [80.0, 95.0, 110.0, 70.0]
    ds = dm.Dataset([sess("a", DAY0_MS, durs), sess("b", DAY0_MS + 1e7, durs), sess("c", DAY0_MS, [90.0])])
    g = an.pairwise_grid(ds, "duration")
    assert g.subjects == ["a", "b"] and g.excluded == ["c"]
    np.testing.assert_array_equal(g.p, np.ones((2, 2)))
    with pytest.raises(ValueError):
        an.pairwise_grid(dm.Dataset([sess("a", DAY0_MS, durs)]), "duration")


def test_pairwise_grid_separates_planted_means():
    rng = np.random.default_rng(3)
    ds = dm.Dataset([sess(f"u{k}", DAY0_MS + i * 1e6, rng.normal(80 + 25 * k, 5, 30), sid=f"{k}-{i}")
                     for k in range(4) for i in range(3)])
    g = an.pairwise_grid(ds, "duration")
    np.testing.assert_array_equal(g.p, g.p.T)
    np.testing.assert_array_equal(np.diag(g.p), 1.0)
    np.testing.assert_array_equal(g.t, -g.t.T)
    off = g.p[~np.eye(4, dtype=bool)]
    assert np.all(off < 0.05) and np.all((off >= 0) & (off <= 1))


def test_write_all_emits_four_csvs(tmp_path):
    ds, _ = sg.generate(sg.GenConfig(seed=4, sessions_per_subject=20))
    paths = an.write_all(ds, "duration", tmp_path)
    heads = {k: open(v).readline().strip() for k, v in paths.items()}
    assert heads == {"hourly.csv": "hour,feature,mean,std,count", "dayofweek.csv": "day,feature,mean,std,count",
                     "histogram.csv": "day,hour,count", "ttest_grid.csv": "subject_i,subject_j,t,p"}
    assert open(paths["ttest_grid.csv"]).read().count("\n") == 1 + 20 * 20
