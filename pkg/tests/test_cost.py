import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixnas import cost as C
from mixnas import model as M
from mixnas.config import ArchConfig, TaskShape
from mixnas.space import classification_space, translation_space


def softmax_config(n_layers=2, emb=64, heads=4, attn="softmax"):
    return ArchConfig(
        enc_layers=n_layers,
        enc_emb_dim=emb,
        enc_ffn_dims=(emb * 2,) * n_layers,
        enc_heads=(heads,) * n_layers,
        enc_attn_types=(attn,) * n_layers,
    )


class TestEstimateFlops:
    def test_additivity_exact(self):
        rng = np.random.default_rng(0)
        ts = translation_space()
        cs = classification_space()
        for _ in range(10):
            r = C.estimate_flops(ts.sample(rng), n_src=17, n_tgt=13)
            assert r.total_flops == sum(r.breakdown.values())
            r = C.estimate_flops(cs.sample(rng), n_src=64)
            assert r.total_flops == sum(r.breakdown.values())

    def test_components_present(self):
        r = C.estimate_flops(softmax_config(), n_src=16, shape=TaskShape("classification", n_classes=10, patch_dim=48))
        assert "embeddings" in r.breakdown
        assert "head" in r.breakdown
        assert "enc.0.attn.core" in r.breakdown
        assert "enc.1.ffn" in r.breakdown

    def test_softmax_attention_term_scales_quadratically(self):
        cfg = softmax_config(attn="softmax")
        shape = TaskShape("classification", n_classes=10, patch_dim=48)
        small = C.estimate_flops(cfg, 256, shape=shape).attention_core_flops()
        big = C.estimate_flops(cfg, 512, shape=shape).attention_core_flops()
        assert abs(big / small - 4.0) < 0.05 * 4.0

    def test_linear_attention_term_scales_linearly(self):
        cfg = softmax_config(attn="linear")
        shape = TaskShape("classification", n_classes=10, patch_dim=48)
        small = C.estimate_flops(cfg, 256, shape=shape).attention_core_flops()
        big = C.estimate_flops(cfg, 512, shape=shape).attention_core_flops()
        assert abs(big / small - 2.0) < 0.05 * 2.0

    def test_invalid_lengths_rejected(self):
        with pytest.raises(ValueError):
            C.estimate_flops(softmax_config(), 0)

    def test_csv_round_trip(self):
        r = C.estimate_flops(softmax_config(), 32)
        again = C.CostReport.from_csv(r.to_csv())
        assert again.total_flops == r.total_flops
        assert again.breakdown == r.breakdown
        assert again.params == r.params
        assert (again.n_src, again.n_tgt) == (r.n_src, r.n_tgt)


class TestMeasureLatency:
    def test_median_is_middle_sample_on_stub(self, monkeypatch):
        # scripted clock: samples of 1ms, 5ms, 3ms -> median is the middle one
        ticks = iter([0.0, 0.001, 1.0, 1.005, 2.0, 2.003])
        monkeypatch.setattr(C.time, "perf_counter", lambda: next(ticks))
        rep = C.measure_callable(lambda: None, repeats=3)
        assert rep.median_ms == pytest.approx(3.0)
        assert rep.samples_ms == pytest.approx([1.0, 5.0, 3.0])

    def test_repeats_below_three_rejected(self):
        with pytest.raises(ValueError):
            C.measure_callable(lambda: None, repeats=2)

    def test_dispersion_flag(self, monkeypatch):
        ticks = iter([0.0, 0.001, 1.0, 1.9, 2.0, 2.001])
        monkeypatch.setattr(C.time, "perf_counter", lambda: next(ticks))
        rep = C.measure_callable(lambda: None, repeats=3)
        assert rep.unstable

    def test_deeper_model_is_slower(self):
        shape = TaskShape("classification", n_classes=10, patch_dim=48)
        deep = softmax_config(n_layers=12, emb=32, heads=2)
        shallow = softmax_config(n_layers=6, emb=32, heads=2)
        w_deep = M.build(deep, shape, seed=0)
        w_shallow = M.build(shallow, shape, seed=0)
        t_deep = C.measure_latency(deep, w_deep, n=16, repeats=5, shape=shape)
        t_shallow = C.measure_latency(shallow, w_shallow, n=16, repeats=5, shape=shape)
        assert t_deep.median_ms > t_shallow.median_ms


class _Rec:
    def __init__(self, latency):
        self.latency_ms = latency


class TestLatencyFilter:
    def test_p10_removes_one_from_each_end(self):
        recs = [_Rec(v) for v in [5, 1, 9, 3, 7, 2, 8, 4, 6, 10]]
        out = C.latency_filter(recs)
        assert len(out) == 8
        latencies = [r.latency_ms for r in out]
        assert 1 not in latencies and 10 not in latencies
        # original relative order preserved
        kept_in_input_order = [r.latency_ms for r in recs if r.latency_ms not in (1, 10)]
        assert latencies == kept_in_input_order

    def test_p9_removes_nothing(self):
        recs = [_Rec(v) for v in range(9)]
        out = C.latency_filter(recs)
        assert out == recs

    @given(st.integers(1, 100), st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_survivor_count_formula(self, p, seed):
        rng = np.random.default_rng(seed)
        recs = [_Rec(float(v)) for v in rng.standard_normal(p)]
        out = C.latency_filter(recs)
        assert len(out) == p - 2 * (p // 10)
        kept = [r.latency_ms for r in out]
        in_order = [r.latency_ms for r in recs if r in out]
        assert kept == in_order

    def test_survivor_extremes_strictly_inside_for_p20(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            recs = [_Rec(float(v)) for v in rng.standard_normal(25)]
            out = C.latency_filter(recs)
            lat = [r.latency_ms for r in out]
            all_lat = [r.latency_ms for r in recs]
            assert min(lat) > min(all_lat)
            assert max(lat) < max(all_lat)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            C.latency_filter([])
