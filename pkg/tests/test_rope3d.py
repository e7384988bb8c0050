import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from streamlmm.rope3d import (
    ConfigError,
    RopeLayout,
    apply_rope3d,
    interleaved_positions,
    parallel_positions,
    rope_angles,
    split_dims,
    text_position,
    text_positions,
    visual_position,
)

L32 = RopeLayout.for_head_dim(32)


def rope_oracle(x, pos, layout):
    """Rotate each pair with an explicit 2x2 matrix, slice by slice."""
    out = np.array(x, dtype=np.float64)
    start = 0
    for coord, d in zip(pos, (layout.d_t, layout.d_h, layout.d_w)):
        for i in range(d // 2):
            ang = coord * layout.theta ** (-2 * i / d)
            c, s = np.cos(ang), np.sin(ang)
            a, b = x[start + 2 * i], x[start + 2 * i + 1]
            out[start + 2 * i] = c * a - s * b
            out[start + 2 * i + 1] = s * a + c * b
        start += d
    return out


@pytest.mark.parametrize("hd,want", [(48, (16, 16, 16)), (64, (24, 20, 20)), (6, (2, 2, 2)), (32, (12, 10, 10))])
def test_split_dims(hd, want):
    assert split_dims(hd) == want


@given(st.integers(3, 200))
def test_split_dims_invariants(pairs):
    dt, dh, dw = split_dims(2 * pairs)
    assert dt + dh + dw == 2 * pairs
    assert all(d > 0 and d % 2 == 0 for d in (dt, dh, dw))
    assert dh == dw and dt >= dh


@pytest.mark.parametrize("bad", [4, 7, 0, -2])
def test_split_dims_rejects(bad):
    with pytest.raises(ConfigError):
        split_dims(bad)


def test_layout_validation():
    with pytest.raises(ConfigError):
        RopeLayout(32, 10, 10, 10)
    with pytest.raises(ConfigError):
        RopeLayout(32, 13, 10, 9)


def test_positions():
    assert text_position(3.0) == (3, 3, 3)
    assert text_position(0.0, 7.5) == (0, 0, 0)
    assert text_position(2.5, 2) == (5, 5, 5)
    assert visual_position(3.0, 1.0, 0, 0) == (3, 0, 0)
    assert visual_position(3.0, 1.0, 2, 1).t == text_position(3.0).t
    p = visual_position(1.2, 5, 2, 7)
    assert p.t == pytest.approx(6.0) and (p.h, p.w) == (2, 7)
    with pytest.raises(ValueError):
        text_position(-1.0)
    with pytest.raises(ValueError):
        visual_position(1.0, 1.0, 4, 0, grid=(4, 4))


def test_rope_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=32)
        p = rng.uniform(0, 30, size=3)
        assert np.abs(apply_rope3d(x, p, L32) - rope_oracle(x, p, L32)).max() <= 1e-12


def test_rope_zero_and_inverse():
    x = np.random.default_rng(1).normal(size=(5, 32))
    assert np.array_equal(apply_rope3d(x, np.zeros((5, 3)), L32), x)
    pos = np.random.default_rng(2).uniform(0, 9, size=(5, 3))
    back = apply_rope3d(apply_rope3d(x, pos, L32), pos, L32, inverse=True)
    assert np.abs(back - x).max() <= 1e-12


def test_rope_3d_input_broadcasts_over_heads():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 32))
    pos = rng.uniform(0, 5, size=(4, 3))
    out = apply_rope3d(x, pos, L32)
    for h in range(2):
        assert np.array_equal(out[:, h], apply_rope3d(x[:, h], pos, L32))


def test_rope_length_mismatch():
    with pytest.raises(ValueError):
        apply_rope3d(np.ones(30), np.zeros(3), L32)


vec = hnp.arrays(np.float64, 32, elements=st.floats(-10, 10))
coord = hnp.arrays(np.float64, 3, elements=st.floats(0, 100))


@settings(max_examples=300, deadline=None)
@given(vec, coord)
def test_norm_preserved(x, p):
    assert abs(np.linalg.norm(apply_rope3d(x, p, L32)) - np.linalg.norm(x)) <= 1e-10 * max(1.0, np.linalg.norm(x))


@settings(max_examples=300, deadline=None)
@given(vec, vec, coord, coord)
def test_relative_position_identity(q, k, p, p2):
    lhs = apply_rope3d(q, p, L32) @ apply_rope3d(k, p2, L32)
    rhs = apply_rope3d(q, p - p2, L32) @ k
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, np.linalg.norm(q) * np.linalg.norm(k))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 500), st.sampled_from([0.5, 1.0, 2.0, 5.0]), st.integers(0, 15), st.integers(0, 15), vec)
def test_temporal_slice_shared_exactly(t, scale, row, col, x):
    tp, vp = text_position(t, scale), visual_position(t, scale, row, col)
    tx, vx = apply_rope3d(x, np.array(tp), L32), apply_rope3d(x, np.array(vp), L32)
    assert np.array_equal(tx[: L32.d_t], vx[: L32.d_t])


def test_text_only_reduces_to_1d_rope():
    # every slice of a text token rotates by the same coordinate
    ang = rope_angles(np.array([text_position(4.0)]), L32)[0]
    comp = L32.component_of_pair()
    freqs = L32.inv_freqs()
    assert np.allclose(ang, 4.0 * freqs)
    assert set(comp.tolist()) == {0, 1, 2}


def test_parallel_positions_example():
    tp, fps = parallel_positions([5.0, 6.0], [5.0], grid=(2, 2))
    assert tp[:, 0].tolist() == [5.0, 6.0]
    assert fps[0][:, 0].tolist() == [5.0] * 4
    assert fps[0][:, 1:].tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    tp2, fps2 = parallel_positions([5.0, 6.0], [], grid=(2, 2))
    assert np.array_equal(tp2, text_positions([5.0, 6.0])) and fps2 == []


def test_interleaved_gap_vs_parallel():
    # one text token per second, a 256-patch frame arriving every second
    text = [0.5, 1.5, 2.5, 3.5]
    frames = [1.0, 2.0, 3.0]
    idx, _ = interleaved_positions(text, frames, 256)
    assert np.all(np.diff(idx) >= 256)
    tp, _ = parallel_positions(text, frames, (16, 16))
    assert np.allclose(np.diff(tp[:, 0]), 1.0)
