import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowgame.trace import (
    DelayModel, FlowTrace, IpdModel, TraceError, ipd, jitter_samples, load_trace, parse_trace,
    split_train_test, synth_flow, write_trace,
)


def _write(tmp_path, text, name="t.txt"):
    p = tmp_path / name
    p.write_bytes(text.encode("utf-8"))
    return p


def test_load_trace_basic(tmp_path):
    t = load_trace(_write(tmp_path, "0.0\n0.5\n1.2"))
    assert t == FlowTrace([0.0, 0.5, 1.2])


def test_load_single_packet(tmp_path):
    t = load_trace(_write(tmp_path, "0.0"))
    assert t.n == 1 and t.timestamps[0] == 0.0


def test_load_unsorted_is_error(tmp_path):
    with pytest.raises(TraceError, match="unsorted trace"):
        load_trace(_write(tmp_path, "1.0\n0.5"))


def test_load_empty_is_error(tmp_path):
    with pytest.raises(TraceError, match="empty trace"):
        load_trace(_write(tmp_path, "# only a comment\n\n"))


def test_load_bad_line_reports_line_number(tmp_path):
    with pytest.raises(TraceError, match="line 3"):
        load_trace(_write(tmp_path, "0.0\n0.1\nabc\n"))


def test_comments_and_crlf(tmp_path):
    t = load_trace(_write(tmp_path, "# capture\r\n0.25\r\n# mid\r\n0.75\r\n"))
    assert t == FlowTrace([0.25, 0.75])


def test_flowtrace_is_immutable():
    t = FlowTrace([0.0, 1.0])
    with pytest.raises(ValueError):
        t.timestamps[0] = 5.0


@pytest.mark.parametrize("ts, expected", [
    ([0.0, 0.5, 1.2], [0.5, 0.7]),
    ([3.0], []),
    ([1.0, 1.0, 2.0], [0.0, 1.0]),
])
def test_ipd(ts, expected):
    assert np.allclose(ipd(FlowTrace(ts)), expected)
    assert ipd(FlowTrace(ts)).size == len(ts) - 1


def test_synth_single_packet():
    assert synth_flow(IpdModel.exponential(1.0), 1, 7) == FlowTrace([0.0])


@pytest.mark.parametrize("model", [
    IpdModel.exponential(2.0), IpdModel.lognormal(-1.0, 0.5), IpdModel.pareto(2.5, 0.1),
    IpdModel.empirical([0.1, 0.2, 0.7]),
])
def test_synth_deterministic_and_positive(model):
    a = synth_flow(model, 200, 11)
    b = synth_flow(model, 200, 11)
    assert a == b
    assert a.timestamps[0] == 0.0
    d = ipd(a)
    assert d.size == 199 and np.all(d > 0)


def test_synth_exponential_mean():
    d = ipd(synth_flow(IpdModel.exponential(2.0), 10001, 1))
    assert abs(d.mean() - 0.5) < 0.05 * 0.5


def test_invalid_models():
    with pytest.raises(ValueError):
        IpdModel.exponential(0.0)
    with pytest.raises(ValueError):
        IpdModel.lognormal(0.0, -1.0)
    with pytest.raises(ValueError):
        IpdModel.empirical([0.3])
    with pytest.raises(ValueError):
        IpdModel("weibull", ())


def test_model_dict_round_trip():
    for m in (IpdModel.lognormal(-2, 1), IpdModel.empirical([0.1, 0.3])):
        assert IpdModel.from_dict(m.to_dict()) == m


def test_delay_model_nonnegative_and_zero_mean_jitter():
    rng = np.random.default_rng(3)
    dm = DelayModel(0.01, 0.02)
    assert np.all(dm.sample(rng, 10_000) >= 0)
    dd = jitter_samples(dm, dm, 200_000, rng)
    assert abs(dd.mean()) < 1e-3
    assert np.all(DelayModel(0.2, 0.0).sample(rng, 5) == 0.2)


def test_split_half():
    corpus = [FlowTrace([float(i)]) for i in range(4)]
    train, test = split_train_test(corpus, 0.5, 9)
    assert len(train) == len(test) == 2
    assert not {id(t) for t in train} & {id(t) for t in test}
    again = split_train_test(corpus, 0.5, 9)
    assert [t.timestamps[0] for t in train] == [t.timestamps[0] for t in again[0]]


def test_split_degenerate_rejected():
    with pytest.raises(ValueError, match="split produced empty part"):
        split_train_test([FlowTrace([0.0])], 0.5, 1)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2, 1.5])
def test_split_fraction_range(fraction):
    with pytest.raises(ValueError):
        split_train_test([FlowTrace([0.0])] * 4, fraction, 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10**14), min_size=1, max_size=30), st.floats(0, 1e4))
def test_ipd_shift_invariant(ticks, offset):
    ts = np.sort(np.array(ticks)) / 1024.0
    offset = round(offset * 1024) / 1024.0
    assert np.array_equal(ipd(FlowTrace(ts)), ipd(FlowTrace(ts + offset)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10**14), min_size=1, max_size=40))
def test_write_load_round_trip(tmp_path_factory, nanos):
    ts = np.array([float(f"{v // 10**9}.{v % 10**9:09d}") for v in sorted(nanos)])
    t = FlowTrace(ts)
    path = tmp_path_factory.mktemp("rt") / "trace.txt"
    write_trace(t, path)
    assert load_trace(path) == t
    assert parse_trace(path.read_text()) == t
