from fractions import Fraction

import numpy as np
import pytest

from sparsegate.errors import AccountingError
from sparsegate.flops import (FLOPS_CSV_HEADER, MethodConfig, dense_ff_macs, measure, mgs_macs,
                              report_rows, sibs_macs)
from sparsegate.mgs import GateTrainConfig, MicroGate, train_gate
from sparsegate.profiler import collect_traces
from sparsegate.sibs import greedy_cover, mine_implications


@pytest.fixture(scope="module")
def gates(small_trained):
    t = small_trained
    return {i: train_gate(t.base, i, t.train, GateTrainConfig(epochs=2))[0] for i in range(2)}


@pytest.fixture(scope="module")
def tables(small_trained):
    t = small_trained
    traces = collect_traces(t.base, t.train.subset(0, 300), mode="bitmap")
    return {tr.layer: greedy_cover(mine_implications(tr), 8, tr.layer) for tr in traces}


class TestFormulas:
    @pytest.mark.parametrize("d,f,macs", [(1, 1, 2), (64, 256, 32768), (256, 2048, 1048576)])
    def test_dense(self, d, f, macs):
        assert dense_ff_macs(d, f) == macs

    def test_mgs_full_without_gate_is_dense(self):
        assert mgs_macs(64, 256, 0, 256) == dense_ff_macs(64, 256)

    def test_mgs_nothing_active_is_gate_only(self):
        assert mgs_macs(64, 256, 32, 0) == 32 * 64

    def test_detr_scale_gate_overhead(self):
        macs = mgs_macs(256, 2048, 256, 0)
        assert macs == 65536
        assert Fraction(macs, dense_ff_macs(256, 2048)) == Fraction(625, 10000)

    @pytest.mark.parametrize("d,f,g", [(64, 256, 32), (256, 2048, 256), (16, 64, 8)])
    def test_gate_overhead_ratio_exact(self, d, f, g):
        assert Fraction(g * d, dense_ff_macs(d, f)) == Fraction(g, 2 * f)

    def test_mgs_affine_in_active(self):
        vals = [mgs_macs(64, 256, 32, a) for a in range(257)]
        assert set(np.diff(vals)) == {2 * 64}

    def test_mgs_range(self):
        with pytest.raises(ValueError):
            mgs_macs(4, 8, 1, 9)

    def test_sibs(self):
        assert sibs_macs(64, 256, 0, 256) == dense_ff_macs(64, 256)
        assert sibs_macs(64, 256, 10, 10) == 10 * 2 * 64
        assert sibs_macs(256, 2048, 256, 2048 - 669) == (2048 - 669) * 256 * 2

    @pytest.mark.parametrize("ind,computed", [(5, 4), (-1, 3), (0, 300)])
    def test_sibs_inconsistent(self, ind, computed):
        with pytest.raises(ValueError):
            sibs_macs(64, 256, ind, computed)


class TestMeasure:
    def test_vanilla(self, small_trained):
        t = small_trained
        rep = measure(t.base, MethodConfig("vanilla", "vanilla"), t.heldout)
        assert rep.total.saved_fraction == 0.0
        assert rep.total.dense_macs == 2 * dense_ff_macs(16, 64) * t.heldout.n
        assert [r.layer for r in rep.rows] == ["0", "1", "total"]

    def test_threshold_zero_is_pure_overhead(self, small_trained, gates):
        t = small_trained
        cfg = MethodConfig("mgs-0", "mgs", gates={i: g.with_threshold(0.0) for i, g in gates.items()})
        rep = measure(t.base, cfg, t.heldout)
        g, f = gates[0].g, t.base.f
        for r in rep.rows:
            assert r.saved_fraction_exact == -Fraction(g, 2 * f)
            assert r.measured_sparsity == 0.0

    def test_disabled_has_no_gate_cost(self, small_trained):
        rep = measure(small_trained.base, MethodConfig("off", "mgs-disabled"), small_trained.heldout)
        assert rep.total.gate_macs == 0 and rep.total.saved_fraction == 0.0

    def test_affine_slope_one(self, small_trained, gates):
        t = small_trained
        g, f = gates[0].g, t.base.f
        for thr in (0.1, 0.25, 0.5, 0.9):
            cfg = MethodConfig(str(thr), "mgs", gates={i: gt.with_threshold(thr) for i, gt in gates.items()})
            for r in measure(t.base, cfg, t.heldout).rows[:-1]:
                masked = r.dense_macs - r.layer1_macs - r.layer2_macs
                sparsity = Fraction(masked, r.dense_macs)
                assert r.saved_fraction_exact + Fraction(g, 2 * f) == sparsity
                assert float(sparsity) == pytest.approx(r.measured_sparsity, abs=1e-12)

    def test_sibs_counts_match(self, small_trained, tables):
        t = small_trained
        rep = measure(t.base, MethodConfig("sibs", "sibs", tables=tables), t.heldout)
        for r in rep.rows[:-1]:
            assert r.gate_macs == 0
            assert r.indicator_macs == len(tables[int(r.layer)].indicators) * t.base.d * t.heldout.n
            assert r.saved_fraction == pytest.approx(r.measured_sparsity)

    def test_mismatch_is_hard_error(self, small_trained, gates, monkeypatch):
        import sparsegate.flops as flops
        monkeypatch.setattr(flops, "mgs_macs", lambda d, f, g, a: g * d + 2 * a * d + 1)
        cfg = MethodConfig("bad", "mgs", gates=gates)
        with pytest.raises(AccountingError):
            flops.measure(small_trained.base, cfg, small_trained.heldout)

    def test_unknown_method(self, small_trained):
        with pytest.raises(ValueError):
            measure(small_trained.base, MethodConfig("x", "nope"), small_trained.heldout)

    def test_report_rows_schema(self, small_trained, gates):
        rep = measure(small_trained.base, MethodConfig("m", "mgs", gates=gates), small_trained.heldout)
        rows = report_rows(rep)
        assert FLOPS_CSV_HEADER == ["config", "layer", "dense_macs", "method_macs", "gate_macs",
                                    "saved_fraction", "measured_sparsity"]
        assert all(len(r) == len(FLOPS_CSV_HEADER) for r in rows)
        assert rows[-1][1] == "total" and rows[-1][3] == rep.total.method_macs

    def test_partial_gating(self, small_trained):
        t = small_trained
        gate = MicroGate(1, np.zeros((8, 16)), np.full(8, -9.0), 64)
        rep = measure(t.base, MethodConfig("one", "mgs", gates={1: gate}), t.heldout)
        assert rep.rows[0].saved_fraction == 0.0
        assert rep.rows[1].measured_sparsity == 1.0
        assert rep.rows[1].method_macs == rep.rows[1].gate_macs
