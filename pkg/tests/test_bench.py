import numpy as np
import pytest

from streamlmm import bench
from streamlmm.model import ModelConfig, StreamLMM


@pytest.mark.parametrize("overrides", [{}, {"use_vffn": False}, {"cross_every": 1, "layers": 3}, {"cross_every": 3, "layers": 6, "vocab": 97}])
@pytest.mark.parametrize("frames", [0, 1, 5])
def test_closed_form_matches_counter(overrides, frames):
    cfg = ModelConfig(layers=overrides.pop("layers", 4), model_dim=32, heads=2, head_dim=16, dtype="float64", **overrides)
    model = StreamLMM(cfg)
    rows = bench.run_bench(model, [frames], text_len=7, repeats=1)
    for r in rows:
        assert r.flops_formula == r.flops_counted, r


def test_zero_frames_reduce_to_text_cost():
    cfg = ModelConfig(layers=4, model_dim=32, heads=2, head_dim=16)
    # the only difference at F=0 is the empty cross-attention query projections
    gap = bench.cross_flops(cfg, 10, 0) - bench.concat_flops(cfg, 10, 0)
    assert gap == cfg.n_cross * 4 * 10 * cfg.model_dim**2
    assert gap / bench.concat_flops(cfg, 10, 0) < 0.2


def test_growth_shapes():
    cfg = ModelConfig()
    fs = [8, 16, 32, 64]
    cross = [bench.cross_flops(cfg, 32, f) for f in fs]
    concat = [bench.concat_flops(cfg, 32, f) for f in fs]
    fc = bench.fit_growth(fs, cross)
    fk = bench.fit_growth(fs, concat)
    assert fc["linear_r2"] > 1 - 1e-12 and abs(fc["quadratic_coef"][0]) < 1e-3 * fc["linear_coef"][0]
    assert fk["quadratic_coef"][0] > 0 and fk["loglog_exponent"] > fc["loglog_exponent"]
    # visual-key cost doubles with F
    vis = [bench.cross_flops(cfg, 32, f) - bench.cross_flops(cfg, 32, 0) for f in fs]
    assert np.allclose(np.array(vis[1:]) / np.array(vis[:-1]), 2.0)


def test_fit_growth_exact_polynomials():
    x = [1, 2, 3, 4, 5]
    lin = bench.fit_growth(x, [3 * v + 1 for v in x])
    assert np.allclose(lin["linear_coef"], [3, 1]) and lin["linear_r2"] == pytest.approx(1.0)
    quad = bench.fit_growth(x, [v * v for v in x])
    assert quad["quadratic_coef"][0] == pytest.approx(1.0) and quad["quadratic_r2"] == pytest.approx(1.0)


def test_summary_layout():
    model = StreamLMM(ModelConfig(layers=2, model_dim=32, heads=2, head_dim=16, dtype="float64"))
    rows = bench.run_bench(model, [0, 2, 4], text_len=8, repeats=2)
    s = bench.summarize(rows)
    assert s["cross"]["frames"] == [0, 2, 4] and len(s["concat"]["wall_median_s"]) == 3
    assert all(r.wall_median_s > 0 and len(r.wall_all_s) == 2 for r in rows)
