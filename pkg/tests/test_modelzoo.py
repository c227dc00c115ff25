import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpmood import diffengine as de
from dpmood import layers as L
from dpmood import modelzoo as mz
from dpmood.datamodel import LabeledSession


def sessions_for(subjects, n_keys=30, seed=0):
    out = []
    for i, subj in enumerate(subjects):
        s = mz.toy_session(n_keys, seed + i, subj)
        out.append(LabeledSession(s, float(i), "bipolar1"))
    return out


# ---------------------------------------------------------------- calibrate

def test_calibrate_examples():
    assert mz.calibrate(3.7, 11.0, mz.CalibrationParams(0.0, 1.3, 0.4, 1.0)) == pytest.approx(3.7)
    assert mz.calibrate(2.0, 5.0, mz.CalibrationParams(1.0, 0.0, math.pi / 2, 0.0)) == pytest.approx(2.0)
    assert mz.calibrate(1.0, 6.0, mz.CalibrationParams(0.5, 2 * math.pi / 24, 0.0, 1.0)) == pytest.approx(1.5)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-10, 10), t0=st.floats(0, 2000), a=st.floats(-2, 2), b=st.floats(0.05, 3),
       g=st.floats(-4, 4), d=st.floats(-3, 3), sign=st.sampled_from([1, -1]))
def test_calibrate_is_periodic(x, t0, a, b, g, d, sign):
    p = mz.CalibrationParams(a, sign * b, g, d)
    s0 = mz.calibrate(x, t0, p)
    s1 = mz.calibrate(x, t0 + 2 * math.pi / (sign * b), p)
    assert abs(s0 - s1) <= 1e-9 * max(1.0, abs(s0))


def test_calibrate_is_differentiable_in_all_inputs():
    p = mz.CalibrationParams(*(de.parameter(v) for v in (0.3, 0.2, 0.1, 1.2)))
    x = de.parameter(1.7)
    res = de.grad_check(lambda: mz.calibrate(x, 5.0, p), [x, p.alpha, p.beta, p.gamma, p.delta])
    assert res.passed(1e-8)


# -------------------------------------------------------------- model specs

def test_variant_flags():
    flags = {v: (mz.ModelSpec(v).fusion, mz.ModelSpec(v).calibration, mz.ModelSpec(v).backbone) for v in mz.VARIANTS}
    assert flags["dpMood-dropna"] == ("ef-dropna", "per-subject", "cnnrnn")
    assert flags["dpMood-fillna"] == ("ef-fillna", "per-subject", "cnnrnn")
    assert flags["CNNRNN-Cr"][1] == "shared"
    assert flags["CNNRNN-PsCr"][1] == "per-subject"
    for v in ("CNNRNN", "RNN", "CNN"):
        assert flags[v] == ("late", "none", v.lower())
    with pytest.raises(ValueError):
        mz.ModelSpec("dpMood-midna")
    spec = mz.ModelSpec("CNNRNN-PsCr", hidden=7)
    assert mz.ModelSpec.from_dict(spec.to_dict()) == spec


def test_dpmood_parameter_census():
    subjects = ["a", "b", "c"]
    m = mz.build_model("dpMood-dropna", subjects)
    shapes = {n: p.shape for n, p in m.named_parameters().items()}
    assert shapes["view0.conv1.weight"] == (10, 7, 3) and shapes["view0.conv2.weight"] == (20, 10, 3)
    assert shapes["view0.bigru.fwd.W"] == (20, 20) and shapes["head.weight"] == (1, 40)
    expected = (7 * 10 * 3 + 10) + (10 * 20 * 3 + 20) + 2 * 3 * (20 * 20 + 20 * 20) + (40 + 1) + 4 * len(subjects)
    assert m.parameter_count(include_norm=False) == expected
    assert m.parameter_count() == expected + 2 * (10 + 20)  # batch-norm scale and shift


def test_baseline_shapes():
    assert mz.build_model("CNNRNN-Cr", ["a", "b"]).calibration.params.shape == (1, 4)
    cnn = mz.build_model("CNN")
    assert [conv.out_channels for conv, _ in cnn.paths[0].convs.blocks] == [10, 20, 30]
    assert cnn.head.weight.shape == (1, 60)
    rnn = mz.build_model("RNN")
    assert [p.gru.fwd.input_size for p in rnn.paths] == [4, 3]
    assert rnn.head.weight.shape == (1, 80)
    assert mz.build_model("CNNRNN").head.weight.shape == (1, 80)
    assert mz.build_model("CNNRNN").calibration.params is None


# ------------------------------------------------------------------ forward

def test_zero_network_predicts_bias():
    ls = sessions_for(["a"])[0]
    m = mz.build_model("dpMood-dropna", ["a"])
    for p in m.parameters():
        p.data[...] = 0.0
    m.head.bias.data[:] = 2.25
    m.calibration.params.data[:] = [0.0, 0.3, 0.0, 1.0]
    assert mz.forward_session(m, ls).item() == pytest.approx(2.25)


def test_length_100_session_reaches_gru_with_24_steps():
    m = mz.build_model("dpMood-dropna", ["s0"])
    batch = m.collate(mz.make_examples(m.spec, [mz.toy_session(100)]))
    view = batch.views[0]
    assert view.lengths.tolist() == [100]
    x = de.transpose(de.tensor(view.data), (1, 0))[None]
    _, _, lengths = m.paths[0].convs(x, view.offsets, view.lengths, L.EVAL)
    assert lengths.tolist() == [24]
    assert m.paths[0].convs.out_length(100) == 24


def test_fillna_and_dropna_share_weights_but_not_inputs():
    ls = sessions_for(["a"])
    f, d = mz.build_model("dpMood-fillna", ["a"], seed=3), mz.build_model("dpMood-dropna", ["a"], seed=3)
    for (n1, p1), (n2, p2) in zip(f.named_parameters().items(), d.named_parameters().items()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    ef, ed = mz.make_examples(f.spec, ls)[0], mz.make_examples(d.spec, ls)[0]
    assert len(ef.views[0]) == ls[0].session.n_accel and len(ed.views[0]) == ls[0].session.n_keypresses


def test_batched_predictions_match_single_sessions():
    ls = sessions_for(["a", "b", "c", "a"], n_keys=20)
    ls += [LabeledSession(mz.toy_session(n, 9 + n, "b"), 1.0, "control") for n in (10, 57)]
    for variant in ("dpMood-dropna", "CNN", "RNN", "CNNRNN-PsCr"):
        m = mz.build_model(variant, ["a", "b", "c"], seed=1)
        batch_pred = m.predict(ls)
        single = [mz.forward_session(m, s).item() for s in ls]
        np.testing.assert_allclose(batch_pred, single, rtol=1e-12, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(c=st.floats(0.1, 10.0), seed=st.integers(0, 1000))
def test_scaling_alpha_and_delta_scales_predictions(c, seed):
    ls = sessions_for(["a", "b"], n_keys=15, seed=seed)
    m = mz.build_model("dpMood-dropna", ["a", "b"], seed=seed)
    m.calibration.params.data[:] += np.random.default_rng(seed).normal(0, 0.3, (2, 4))
    base = m.predict(ls)
    m.calibration.params.data[:, [0, 3]] *= c
    np.testing.assert_allclose(m.predict(ls), c * base, rtol=1e-12, atol=1e-14)


def test_uncalibrated_predictions_ignore_subject_and_time():
    ls = sessions_for(["a", "b", "c"], n_keys=25)
    m = mz.build_model("CNNRNN", ["a", "b", "c"], seed=2)
    base = m.predict(ls)
    ex = mz.make_examples(m.spec, ls)
    moved = [mz.Example(e.views, ex[(i + 1) % 3].subject_id, ex[(i + 2) % 3].t0_hours + 17.0) for i, e in enumerate(ex)]
    np.testing.assert_array_equal(m.predict(moved), base)


def test_unseen_subject_uses_mean_calibration(caplog):
    m = mz.build_model("dpMood-dropna", ["a", "b"])
    m.calibration.params.data[:] = [[0.1, 0.2, 0.3, 1.0], [0.3, 0.4, 0.5, 3.0]]
    ls = sessions_for(["zzz"])
    with caplog.at_level("WARNING"):
        pred = m.predict(ls)
    assert "zzz" in caplog.text
    x = m.uncalibrated(m.collate(mz.make_examples(m.spec, ls)))
    p = mz.CalibrationParams(0.2, 0.3, 0.4, 2.0)
    assert pred[0] == pytest.approx(mz.calibrate(x[0], ls[0].t0_hours, p), rel=1e-12)


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    ls = sessions_for(["a", "b"])
    m = mz.build_model("dpMood-fillna", ["a", "b"], seed=5)
    m.calibration.params.data[:] += 0.25
    m.feature_scale = [np.arange(1.0, 8.0)]
    for bn in m.named_batch_norms().values():
        bn.running_mean = bn.running_mean + 0.5
    path = tmp_path / "m.ckpt"
    mz.save_checkpoint(m, path, extra={"epochs": 3})
    assert path.read_bytes().startswith(b"DPMOOD1\n")
    m2, extra = mz.load_checkpoint(path)
    assert extra == {"epochs": 3} and m2.spec == m.spec and m2.subjects == m.subjects
    np.testing.assert_array_equal(m2.predict(ls), m.predict(ls))
    blob = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(blob + b"\0")
    with pytest.raises(ValueError):
        mz.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"NOTMODEL" + blob[8:])
    with pytest.raises(ValueError):
        mz.load_checkpoint(tmp_path / "junk.ckpt")


# ----------------------------------------------------------- gradient check

@pytest.mark.parametrize("variant", ["dpMood-dropna", "dpMood-fillna"])
def test_full_model_gradient_check(variant):
    res = mz.model_grad_check(variant, seed=0)
    assert res.checked > 5000
    assert res.passed(1e-4), (res.max_rel_error, res.worst)
