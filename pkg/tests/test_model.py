import math

import numpy as np
import pytest

from streamlmm.model import ModelConfig, StreamLMM, read_config_file, write_config_file
from streamlmm.numkit import DimensionError, grad_check, rms_norm, silu
from streamlmm.rope3d import ConfigError, apply_rope3d, frame_positions, text_positions
from streamlmm.tokens import TimedToken
from streamlmm.verify import _tiny_config, _tiny_loss_fn, random_test_model


def small(**kw):
    base = dict(layers=4, model_dim=32, heads=2, head_dim=16, vocab=40, n_symbols=6, enc_dim=8, dtype="float64")
    base.update(kw)
    return StreamLMM(ModelConfig(**base))


def randomize_gates(model, seed=0):
    rng = np.random.default_rng(seed)
    for g in model.gate_params():
        g.value[...] = rng.uniform(0.2, 1.0, size=g.value.shape)
    return model


def test_config_invariants():
    cfg = ModelConfig()
    assert cfg.tokens_per_frame == 16 and cfg.cross_hosts == [1, 3, 5, 7] and cfg.n_cross == 4
    assert (cfg.rope.d_t, cfg.rope.d_h, cfg.rope.d_w) == (12, 10, 10)
    for bad in (dict(model_dim=100), dict(cross_every=0), dict(cross_every=9), dict(gate_kind="relu"), dict(gate_init=-1.0), dict(head_dim=30, model_dim=120, heads=4, rope_theta=1.0)):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)
    assert ModelConfig(reuse_params=True).reuse_params == "share"
    assert ModelConfig(reuse_params=False).reuse_params == "off"


def test_config_dict_and_file_roundtrip(tmp_path):
    cfg = ModelConfig(layers=4, gate_kind="tanh", reuse_params="copy", use_vffn=False, patch_grid=(2, 3))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    p = tmp_path / "m.ini"
    write_config_file(cfg, p)
    assert read_config_file(p) == cfg
    d = cfg.to_dict()
    d["rope_layout"] = [10, 12, 10]
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(d)


def test_logit_shape_contract():
    m = small(vocab=101)
    text = [TimedToken(i, float(i)) for i in range(7)]
    frames = [m.encode_frame(k, float(k)) for k in range(3)]
    assert m.forward(text, frames).shape == (7, 101)


def test_encode_frame_content_position_separation():
    m = small()
    a, b = m.encode_frame(3, 2.0), m.encode_frame(3, 7.0)
    assert np.array_equal(a.tokens, b.tokens)
    assert a.positions[0, 0] == 2.0 and b.positions[0, 0] == 7.0
    # symbolic: one table row broadcast over the grid
    assert np.array_equal(a.tokens, np.repeat(a.tokens[:1], 16, axis=0))
    with pytest.raises(ValueError):
        m.encode_frame(99, 0.0)


def test_pixel_zero_frame_is_bias_path():
    m = small(frame_mode="pixel", patch_size=2, channels=3)
    z = np.zeros((8, 8, 3))
    a, b = m.encode_frame(z, 0.0), m.encode_frame(z, 1.0)
    assert np.array_equal(a.tokens, b.tokens)
    from streamlmm.numkit import gelu

    want = gelu(np.zeros(32) + m.ad_b1.value) @ m.ad_w2.value + m.ad_b2.value
    assert np.allclose(a.tokens, want[None], atol=1e-14)
    with pytest.raises(ValueError):
        m.encode_frame(np.zeros((4, 4, 3)), 0.0)


def test_cross_attention_single_head_oracle():
    m = StreamLMM(ModelConfig(layers=1, model_dim=6, heads=1, head_dim=6, cross_every=1, vocab=5, patch_grid=(1, 1), n_symbols=2, enc_dim=3, dtype="float64"))
    randomize_gates(m)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6))
    v = rng.normal(size=(1, 6))
    tpos, vpos = text_positions([2.0]), frame_positions(1.0, (1, 1))
    blk = m.cross[0]
    got = m.cross_attention(x, v, vpos, np.ones((1, 1), bool), 0, tpos)
    a = x / np.sqrt(np.mean(x**2) + 1e-6) * blk.q_norm.value
    vn = v / np.sqrt(np.mean(v**2) + 1e-6) * blk.kv_norm.value
    q = apply_rope3d((a @ blk.wq.value)[0], tpos[0], m.layout)
    k = apply_rope3d((vn @ blk.wk.value)[0], vpos[0], m.layout)
    w = np.exp(q @ k / math.sqrt(6))
    out = (w / w) * (vn @ blk.wv.value) @ blk.wo.value
    assert np.abs(got - (x + blk.gate.value * out)).max() <= 1e-10
    # no frames visible: exact identity
    assert np.array_equal(m.cross_attention(x, v, vpos, np.zeros((1, 1), bool), 0, tpos), x)
    with pytest.raises(DimensionError):
        m.cross_attention(x, v, vpos, np.ones((1, 2), bool), 0, tpos)


def test_cross_attention_zero_gate_is_identity():
    m = small()
    m.set_gates(0.0)
    rng = np.random.default_rng(1)
    x, v = rng.normal(size=(3, 32)), rng.normal(size=(16, 32))
    got = m.cross_attention(x, v, frame_positions(0.0, (4, 4)), np.ones((3, 16), bool), 0, text_positions([0, 1, 2]))
    assert np.array_equal(got, x)


def test_vffn_update_oracle_and_identities():
    m = randomize_gates(small())
    v = np.random.default_rng(2).normal(size=(5, 32))
    blk = m.cross[0]
    n = v / np.sqrt(np.mean(v**2, axis=1, keepdims=True) + 1e-6) * blk.vffn_norm.value
    want = v + blk.vffn_gate.value * ((silu(n @ blk.vffn_gate_w.value) * (n @ blk.vffn_up.value)) @ blk.vffn_down.value)
    assert np.abs(m.vffn_update(v, 0) - want).max() <= 1e-10
    blk.vffn_gate.value[...] = 0
    assert np.array_equal(m.vffn_update(v, 0), v)
    off = small(use_vffn=False)
    assert np.array_equal(off.vffn_update(v, 0), v)
    assert not any("vffn" in n for n in off.named_params())


def test_vffn_experts_only_between_blocks_and_copied():
    m = small()
    assert [b.vffn_norm is not None for b in m.cross] == [True, False]
    b = m.cross[0]
    host = m.layers[b.host]
    assert np.array_equal(b.vffn_gate_w.value, host.w_gate.value) and b.vffn_gate_w is not host.w_gate


def test_parameter_sharing_identity():
    m = small()
    for blk in m.cross:
        host = m.layers[blk.host]
        assert blk.shares_projections_with(host)
        blk.wq.value[0, 0] += 1.0
        assert host.wq.value[0, 0] == blk.wq.value[0, 0]
    copy = small(reuse_params="copy")
    assert not copy.cross[0].shares_projections_with(copy.layers[copy.cross[0].host])
    assert np.array_equal(copy.cross[0].wq.value, copy.layers[copy.cross[0].host].wq.value)
    off = small(reuse_params="off")
    assert not np.array_equal(off.cross[0].wq.value, off.layers[off.cross[0].host].wq.value)


def test_shared_projection_gets_gradient_from_cross_path():
    m = randomize_gates(small())
    ids, t = [1, 2, 3], [1.0, 2.0, 3.0]
    m.zero_grad()
    logits, cache = m.forward_item(ids, t, [1, 2], [0.0, 1.0])
    _, d = m.loss(logits, [2, 3, 4], [True] * 3)
    m.backward(cache, d)
    with_cross = m.cross[0].wq.grad.copy()
    m.zero_grad()
    logits, cache = m.forward_item(ids, t, [], [])
    _, d = m.loss(logits, [2, 3, 4], [True] * 3)
    m.backward(cache, d)
    assert not np.allclose(with_cross, m.layers[m.cross[0].host].wq.grad)


def test_gate_kinds():
    assert all(np.all(g.value == 1e-4) for g in small().gate_params())
    assert all(np.all(g.value == 0) for g in small(gate_kind="tanh").gate_params())
    none = small(gate_kind="none")
    assert none.gate_params() == [] and not any("gate" in n and "w_gate" not in n for n in none.named_params())


def test_gate_zero_bit_identical_to_text_decoder():
    m = randomize_gates(small())
    m.set_gates(0.0)
    ids, t = [3, 1, 4, 1, 5], [0.0, 0.0, 1.0, 2.0, 3.0]
    full, _ = m.forward_item(ids, t, [1, 2, 3], [0.0, 0.5, 2.0])
    assert np.array_equal(full, m.forward_text_only(ids, t))


def test_no_frames_equals_text_decoder_for_any_gate():
    m = randomize_gates(small())
    ids, t = [3, 1, 4], [0.0, 1.0, 2.0]
    assert np.array_equal(m.forward_item(ids, t, [], [])[0], m.forward_text_only(ids, t))
    # frames that exist but are later than every row
    assert np.array_equal(m.forward_item(ids, t, [1], [5.0])[0], m.forward_text_only(ids, t))


def test_frame_list_permutation_invariance():
    m = randomize_gates(small())
    ids, t = [3, 1, 4, 1], [1.0, 2.0, 3.0, 4.0]
    frames = [m.encode_frame(s, ft) for s, ft in [(1, 0.0), (2, 1.5), (3, 2.5), (4, 3.0)]]
    text = [TimedToken(i, x) for i, x in zip(ids, t)]
    a = m.forward(text, frames)
    b = m.forward(text, frames[::-1])
    c = m.forward(text, [frames[2], frames[0], frames[3], frames[1]])
    assert np.abs(a - b).max() <= 1e-12 and np.abs(a - c).max() <= 1e-12
    assert np.abs(a - m.forward_text_only(ids, t)).max() > 1e-6


def test_monotone_context():
    m = randomize_gates(small())
    ids, t = [3, 1, 4, 1, 5, 9], [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    base, _ = m.forward_item(ids, t, [1, 2], [0.0, 1.0])
    more, _ = m.forward_item(ids, t, [1, 2, 3], [0.0, 1.0, 3.0])
    assert np.abs(base[:3] - more[:3]).max() <= 1e-12
    assert np.abs(base[3:] - more[3:]).max(axis=1).min() > 1e-8


def test_visual_stream_ignores_text():
    m = randomize_gates(small(layers=6, cross_every=2))
    _, c1 = m.forward_item([1, 2], [0.0, 1.0], [1, 2], [0.0, 1.0])
    _, c2 = m.forward_item([7, 8, 9], [0.0, 0.5, 3.0], [1, 2], [0.0, 1.0])
    assert len(c1["stages"]) == 3
    for a, b in zip(c1["stages"], c2["stages"]):
        assert np.array_equal(a, b)


def test_loss_at_init_close_to_log_vocab():
    m = StreamLMM(ModelConfig(vocab=512))
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 512, 20)
    logits, _ = m.forward_item(ids, np.arange(20.0), [1, 2], [0.0, 5.0])
    loss, _ = m.loss(logits, rng.integers(0, 512, 20), np.ones(20, bool))
    assert abs(loss - math.log(512)) < 0.1


@pytest.mark.parametrize(
    "overrides",
    [{}, {"gate_kind": "tanh"}, {"reuse_params": "off"}, {"reuse_params": "copy"}, {"use_vffn": False}, {"gate_kind": "none"},
     {"frame_mode": "pixel", "patch_size": 2, "channels": 1}, {"layers": 3, "cross_every": 2}],
)
def test_gradients_all_configurations(overrides):
    m = StreamLMM(_tiny_config(**overrides))
    randomize_gates(m, 4)
    f = _tiny_loss_fn(m) if m.cfg.frame_mode == "symbolic" else _pixel_loss_fn(m)
    res = grad_check(f, m.params(), samples_per_param=6, rng=np.random.default_rng(0))
    assert res["max_rel_err"] <= 1e-4, res["per_param"]


def _pixel_loss_fn(m):
    rng = np.random.default_rng(0)
    frames = [rng.normal(size=(4, 4, 1)) for _ in range(3)]

    def f():
        m.zero_grad()
        logits, cache = m.forward_item([1, 2, 3], [0.0, 1.0, 2.0], frames, [0.0, 0.5, 1.5], [1.0, 2.0, 3.0])
        loss, d = m.loss(logits, [2, 3, 4], [True] * 3)
        m.backward(cache, d)
        return loss

    return f


def test_frozen_encoder_gets_no_gradient_entry():
    m = small()
    assert m.enc.frozen and m.enc not in m.params()
    assert m.enc in m.params(include_frozen=True)


def test_checkpoint_roundtrip(tmp_path):
    m = random_test_model(3, layers=2, cross_every=1)
    p = tmp_path / "m.npz"
    m.save(p, {"note": "x"})
    back = StreamLMM.load(p)
    assert back.cfg == m.cfg
    for name, prm in m.named_params().items():
        assert np.array_equal(prm.value, back.named_params()[name].value)
    assert back.cross[0].shares_projections_with(back.layers[back.cross[0].host])


def test_dtype_respected():
    m32 = StreamLMM(ModelConfig(layers=2))
    logits, _ = m32.forward_item([1, 2], [0.0, 1.0], [1], [0.0])
    assert logits.dtype == np.float32
