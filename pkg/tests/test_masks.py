import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from streamlmm.masks import StreamMask, build_causal_mask, build_stream_mask, verify_temporal_integrity

half_seconds = st.lists(st.integers(0, 30).map(lambda k: k / 2), max_size=15)


def test_examples():
    assert build_stream_mask([5], [5]).allowed.tolist() == [[True]]
    assert build_stream_mask([5, 6], [0, 7]).allowed.tolist() == [[True, False], [True, False]]
    m = build_stream_mask([1, 2], [])
    assert m.allowed.shape == (2, 0) and m.text_count == 2 and m.visual_count == 0


def test_random_instance_matches_double_loop():
    rng = np.random.default_rng(5)
    tt, ft = rng.uniform(0, 10, 20), rng.uniform(0, 10, 30)
    want = np.array([[f <= t for f in ft] for t in tt])
    assert np.array_equal(build_stream_mask(tt, ft).allowed, want)


def test_causal_mask():
    assert build_causal_mask(1).tolist() == [[True]]
    assert build_causal_mask(3).tolist() == [[True, False, False], [True, True, False], [True, True, True]]
    m = build_causal_mask(9)
    assert [int(r.sum()) for r in m] == list(range(1, 10))
    assert build_causal_mask(0).shape == (0, 0)


def test_integrity_mutation_reports_one_violation():
    tt, ft = [1.0, 2.0, 3.0], [0.5, 1.5, 2.5, 3.5]
    m = build_stream_mask(tt, ft)
    assert verify_temporal_integrity(m, tt, ft).passed
    bad = m.allowed.copy()
    bad[0, 3] = True
    rep = verify_temporal_integrity(StreamMask(bad), tt, ft)
    assert not rep.passed and rep.violations == [(0, 3, 1.0, 3.5)]
    empty = verify_temporal_integrity(build_stream_mask(tt, []), tt, [])
    assert empty.passed and empty.comparisons == 0


@settings(max_examples=200, deadline=None)
@given(half_seconds, half_seconds)
def test_monotone_rows_and_idempotent_verification(tt, ft):
    tt = sorted(tt)
    m = build_stream_mask(tt, ft)
    for i in range(1, len(tt)):
        assert np.all(m.allowed[i - 1] <= m.allowed[i])
    assert verify_temporal_integrity(m, tt, ft).passed


@settings(max_examples=200, deadline=None)
@given(half_seconds, half_seconds, st.integers(0, 20))
def test_streaming_consistency(tt, ft, k):
    # rows evaluated with only the frames visible at a step equal the
    # full-schedule rows restricted to those frames
    ft = sorted(ft)
    now = k / 2
    vis = [f for f in ft if f <= now]
    rows = [t for t in tt if t <= now]
    full = build_stream_mask(rows, ft).allowed
    cols = [j for j, f in enumerate(ft) if f <= now]
    assert np.array_equal(build_stream_mask(rows, vis).allowed, full[:, cols])


@settings(max_examples=200, deadline=None)
@given(half_seconds, half_seconds, st.integers(1, 6))
def test_capacity_keeps_newest_visible(tt, ft, cap):
    ft = sorted(ft)
    got = build_stream_mask(tt, ft, capacity=cap).allowed
    for i, t in enumerate(tt):
        vis = [j for j, f in enumerate(ft) if f <= t]
        want = set(vis[-cap:])
        assert set(np.nonzero(got[i])[0].tolist()) == want
