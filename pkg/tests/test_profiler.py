import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sparsegate.errors import DimensionError
from sparsegate.model import BaseModel, FFBlock, ff_forward, layer_inputs, model_forward
from sparsegate.profiler import (ActivationTrace, collect_traces, load_trace, mask_study,
                                 random_mask_eval, save_trace, sparsity_stats, topk_mask,
                                 topk_mask_eval)
from sparsegate.toytrain import SynthDataset, base_quality, init_base


def trace_of(rows, layer=0):
    return ActivationTrace.from_values(layer, np.array(rows, dtype=np.float32))


class TestSparsityStats:
    def test_all_zero(self):
        p = sparsity_stats(trace_of(np.zeros((3, 4))))
        assert p.zero_fraction.tolist() == [1.0] * 4
        assert p.dead_neurons == frozenset(range(4))

    def test_hand_count(self):
        p = sparsity_stats(trace_of([[0, 1], [0, 0]]))
        assert p.zero_fraction.tolist() == [1.0, 0.5]
        assert p.dead_neurons == {0}
        assert p.mean_sparsity == 0.75

    def test_all_positive(self):
        p = sparsity_stats(trace_of(np.ones((5, 3))))
        assert p.mean_sparsity == 0.0 and not p.dead_neurons

    @given(hnp.arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                      elements=st.sampled_from([0.0, 0.5, 2.0])))
    def test_matches_brute_force_recount(self, values):
        p = sparsity_stats(ActivationTrace.from_values(0, values))
        n, f = values.shape
        for i in range(f):
            zeros = sum(1 for s in range(n) if values[s, i] == 0)
            assert p.zero_fraction[i] == zeros / n
        assert p.dead_neurons == {i for i in range(f) if all(values[s, i] == 0 for s in range(n))}
        assert p.mean_sparsity == pytest.approx(float(np.mean(p.zero_fraction)))

    def test_negative_values_rejected(self):
        with pytest.raises(ValueError):
            trace_of([[0, -1]])


class TestCollect:
    def test_zero_model_gives_zero_traces(self):
        m = BaseModel([FFBlock.zeros(3, 5), FFBlock.zeros(3, 5)])
        data = SynthDataset(np.ones((4, 3), np.float32), np.zeros((4, 3), np.float32))
        for tr in collect_traces(m, data):
            assert not tr.nonzero.any() and (tr.values == 0).all()

    def test_pattern_equals_per_sample_forward(self, small_trained):
        t = small_trained
        data = t.heldout.subset(0, 40)
        traces = collect_traces(t.base, data)
        ins = layer_inputs(t.base, data.x)
        for tr in traces:
            for s in range(data.n):
                h = ff_forward(t.base.layers[tr.layer], ins[tr.layer][s])[0]
                assert tr.values[s].tobytes() == h.tobytes()
                assert (tr.nonzero[s] == (h != 0)).all()

    def test_bitmap_and_full_agree(self, default_trained):
        t = default_trained
        data = t.train.subset(0, 1000)
        full = collect_traces(t.base, data, mode="full")
        bitmap = collect_traces(t.base, data, mode="bitmap")
        for a, b in zip(full, bitmap):
            assert b.values is None
            assert (a.nonzero == b.nonzero).all()
            pa, pb = sparsity_stats(a), sparsity_stats(b)
            assert 0 <= pa.mean_sparsity <= 1 and pa.mean_sparsity == pb.mean_sparsity

    def test_threads_do_not_change_result(self, small_trained):
        t = small_trained
        one = collect_traces(t.base, t.train, threads=1)
        four = collect_traces(t.base, t.train, threads=4)
        for a, b in zip(one, four):
            assert a.values.tobytes() == b.values.tobytes()

    def test_layer_out_of_range(self, small_trained):
        with pytest.raises(DimensionError):
            collect_traces(small_trained.base, small_trained.heldout, layers=[2])

    def test_layer_subset(self, small_trained):
        traces = collect_traces(small_trained.base, small_trained.heldout, layers=[1])
        assert [tr.layer for tr in traces] == [1]


class TestTraceFile:
    @pytest.mark.parametrize("mode", ["full", "bitmap"])
    def test_round_trip(self, tmp_path, mode, small_trained):
        tr = collect_traces(small_trained.base, small_trained.heldout.subset(0, 37), [1], mode)[0]
        save_trace(tr, tmp_path / "t.mgst")
        back = load_trace(tmp_path / "t.mgst")
        assert back.layer == 1 and back.mode == mode
        assert (back.nonzero == tr.nonzero).all()
        if mode == "full":
            assert back.values.tobytes() == tr.values.tobytes()

    def test_bitmap_is_compact(self, tmp_path):
        tr = trace_of(np.ones((10, 64))).to_bitmap()
        save_trace(tr, tmp_path / "t.mgst")
        assert len((tmp_path / "t.mgst").read_bytes()) == 4 + 16 + 1 + 80


class TestMasking:
    def test_keep_one_is_unmasked(self, small_trained):
        t = small_trained
        assert random_mask_eval(t.base, t.heldout, 1.0, 0) == base_quality(t.base, t.heldout)

    def test_keep_zero_is_zero_ff_model(self, small_trained):
        t = small_trained
        # b2 is zero after init, but training moves it; compare against a model
        # whose blocks contribute only b2.
        stripped = BaseModel([FFBlock(np.zeros_like(b.w1), np.zeros_like(b.b1), np.zeros_like(b.w2), b.b2)
                              for b in t.base.layers])
        assert random_mask_eval(t.base, t.heldout, 0.0, 0) == base_quality(stripped, t.heldout)

    def test_keep_zero_without_output_bias_is_identity(self):
        m = init_base(4, 8, 2, 0, 0.0)
        x = np.random.default_rng(0).standard_normal((10, 4)).astype(np.float32)
        data = SynthDataset(x, x.copy())
        assert random_mask_eval(m, data, 0.0, 3) == 0.0

    def test_half_keep_degrades(self, default_trained):
        t = default_trained
        assert random_mask_eval(t.base, t.heldout, 0.5, 0) > base_quality(t.base, t.heldout)

    def test_random_mask_reproducible(self, small_trained):
        t = small_trained
        assert random_mask_eval(t.base, t.heldout, 0.3, 5) == random_mask_eval(t.base, t.heldout, 0.3, 5)

    def test_keep_fraction_range(self, small_trained):
        with pytest.raises(ValueError):
            random_mask_eval(small_trained.base, small_trained.heldout, 1.5, 0)

    def test_topk_all_is_bit_identical(self, small_trained):
        t = small_trained
        assert topk_mask_eval(t.base, t.heldout, t.base.f) == base_quality(t.base, t.heldout)

    def test_topk_zero_equals_keep_zero(self, small_trained):
        t = small_trained
        assert topk_mask_eval(t.base, t.heldout, 0) == random_mask_eval(t.base, t.heldout, 0.0, 0)

    def test_topk_at_least_nonzeros_is_lossless(self, small_trained):
        t = small_trained
        hiddens, final = model_forward(t.base, t.heldout.x)
        k = max(int((h != 0).sum(axis=1).max()) for h in hiddens)
        assert topk_mask_eval(t.base, t.heldout, k) == base_quality(t.base, t.heldout)

    def test_topk_mask_ties_go_to_lower_index(self):
        keep = topk_mask(np.array([[1.0, 3.0, 3.0, 3.0, 0.0]], np.float32), 2)
        assert keep.tolist() == [[False, True, True, False, False]]

    def test_topk_range(self, small_trained):
        with pytest.raises(ValueError):
            topk_mask_eval(small_trained.base, small_trained.heldout, small_trained.base.f + 1)

    @pytest.mark.parametrize("layer", [0, 1])
    def test_cached_inputs_match_full_forward(self, small_trained, layer):
        t = small_trained
        ins = layer_inputs(t.base, t.heldout.x)
        assert (random_mask_eval(t.base, t.heldout, 0.4, 7, [layer], True, ins)
                == random_mask_eval(t.base, t.heldout, 0.4, 7, [layer], True))
        assert (topk_mask_eval(t.base, t.heldout, 5, [layer], True, ins)
                == topk_mask_eval(t.base, t.heldout, 5, [layer], True))

    def test_study_rows(self, small_trained):
        t = small_trained
        rows = mask_study(t.base, t.heldout, "random", [0.5, 0.9], seeds=[0, 1])
        assert [(r.layer, r.level) for r in rows] == [
            ("0", 0.5), ("1", 0.5), ("all", 0.5), ("0", 0.9), ("1", 0.9), ("all", 0.9)]
        assert all(0 <= r.sparsity <= 1 for r in rows)
        # random masking at level p zeroes at least a fraction p of the slots on average
        assert all(r.sparsity >= r.level - 0.02 for r in rows)
