import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpmood import fusion
from dpmood.datamodel import RawSession
from oracles import brute_nearest


def session(k_ts, a_ts, seed=0):
    rng = np.random.default_rng(seed)
    k_ts, a_ts = np.asarray(k_ts, float), np.asarray(a_ts, float)
    kp = np.column_stack([k_ts, rng.uniform(50, 150, len(k_ts)), rng.uniform(1, 300, len(k_ts)),
                          rng.integers(1, 5, len(k_ts)), rng.integers(1, 3, len(k_ts))])
    ac = np.column_stack([a_ts, rng.normal(size=(len(a_ts), 3))])
    return RawSession("s", "x", kp, ac)


def test_align_examples():
    assert fusion.align_nearest([100.0], [60.0, 180.0]).tolist() == [0]
    assert fusion.align_nearest([1.0, 50.0, 900.0], [400.0]).tolist() == [0, 0, 0]
    ts = np.arange(0.0, 600.0, 60.0)
    assert fusion.align_nearest(ts, ts).tolist() == list(range(10))
    assert fusion.align_nearest([120.0], [60.0, 180.0]).tolist() == [0]  # tie -> earlier
    with pytest.raises(ValueError):
        fusion.align_nearest([1.0], [])


def test_align_matches_brute_force_on_1000_sessions():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n_k, n_a = int(rng.integers(1, 30)), int(rng.integers(1, 60))
        # integer grids make exact ties common
        k = np.sort(rng.integers(0, 4000, n_k)).astype(float)
        a = np.sort(rng.integers(0, 4000, n_a)).astype(float)
        np.testing.assert_array_equal(fusion.align_nearest(k, a), brute_nearest(k, a))


def test_ef_dropna_examples():
    s = session(np.arange(10) * 200.0 + 7, np.arange(50) * 60.0)
    fused = fusion.ef_dropna(s)
    assert fused.rows.shape == (10, 7)
    idx = brute_nearest(s.keypresses[:, 0], s.accel[:, 0])
    np.testing.assert_array_equal(fused.rows, np.hstack([s.keypresses[:, 1:5], s.accel[idx, 1:4]]))
    # two keypresses sharing one accel row both carry its triple
    s2 = session([100.0, 110.0], [0.0, 105.0, 400.0])
    rows = fusion.ef_dropna(s2).rows
    np.testing.assert_array_equal(rows[0, 4:], s2.accel[1, 1:])
    np.testing.assert_array_equal(rows[1, 4:], s2.accel[1, 1:])
    # coincident timestamps: plain concatenation
    s3 = session([0.0, 60.0, 120.0], [0.0, 60.0, 120.0])
    np.testing.assert_array_equal(fusion.ef_dropna(s3).rows, np.hstack([s3.keypresses[:, 1:], s3.accel[:, 1:]]))


def test_ef_fillna_examples():
    s = session(np.arange(10) * 300.0, np.arange(50) * 60.0)
    fused = fusion.ef_fillna(s)
    assert fused.rows.shape == (50, 7) and fused.collisions == 0
    assert np.count_nonzero(np.any(fused.rows[:, :4] != 0, axis=1)) == 10
    assert np.all(fused.rows[46:, :4] == 0)  # accel tail after the last keypress
    np.testing.assert_array_equal(fused.rows[:, 4:], s.accel[:, 1:])


def test_ef_fillna_collisions_keep_latest():
    s = session(np.linspace(0.0, 9.0, 10), [0.0, 500.0, 1000.0])
    fused = fusion.ef_fillna(s)
    assert fused.collisions == 9
    np.testing.assert_array_equal(fused.rows[0, :4], s.keypresses[9, 1:5])
    assert np.all(fused.rows[1:, :4] == 0)


@settings(max_examples=60, deadline=None)
@given(n_k=st.integers(1, 40), n_a=st.integers(1, 80), seed=st.integers(0, 2**31 - 1))
def test_fusion_length_and_count_rules(n_k, n_a, seed):
    rng = np.random.default_rng(seed)
    s = session(np.sort(rng.uniform(0, 5000, n_k)), np.sort(rng.uniform(0, 5000, n_a)), seed)
    assert len(fusion.ef_dropna(s)) == n_k
    fused = fusion.ef_fillna(s)
    assert len(fused) == n_a
    nonzero = np.count_nonzero(np.any(fused.rows[:, :4] != 0, axis=1))
    assert nonzero + fused.collisions == n_k


def test_late_fusion_views_and_dispatch():
    s = session(np.arange(12) * 200.0, np.arange(200) * 60.0)
    v = fusion.late_fusion_views(s)
    assert v.alphanumeric.shape == (12, 4) and v.accelerometer.shape == (200, 3)
    assert [a.shape for a in fusion.fuse(s, "late")] == [(12, 4), (200, 3)]
    assert fusion.fuse(s, "ef-dropna")[0].shape == (12, 7)
    assert fusion.fuse(s, "ef-fillna")[0].shape == (200, 7)
    with pytest.raises(ValueError):
        fusion.fuse(s, "middle")


def test_write_fused_csv(tmp_path):
    s = session([0.0, 60.0], [0.0, 60.0])
    path = tmp_path / "fused.csv"
    fusion.write_fused_csv(path, fusion.ef_dropna(s))
    lines = path.read_text().splitlines()
    assert lines[0] == "row_timestamp," + ",".join(fusion.FEATURES)
    assert len(lines) == 3 and lines[2].startswith("60,")
