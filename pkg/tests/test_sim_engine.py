"""End-to-end engine tests on a hand-built sparse matrix-vector graph."""

from __future__ import annotations

import numpy as np
import pytest

from einstream.errors import Deadlock
from einstream.graph import DataflowGraph
from einstream.sim import SimConfig, run
from einstream.tensors import COMPRESSED, LevelSpec, SparseTensor

CC = [LevelSpec(COMPRESSED), LevelSpec(COMPRESSED)]


def build_spmv_graph() -> DataflowGraph:
    """x(i) = B(i,k) * c(k) with both operands compressed."""
    g = DataflowGraph()
    root = g.add("root")
    bi = g.add("scan", "scan_B_i", tensor="B", level=0)
    bk = g.add("scan", "scan_B_k", tensor="B", level=1)
    rep = g.add("repeat", "rep_c")
    ck = g.add("scan", "scan_c_k", tensor="c", level=0)
    isect = g.add("intersect", "isect_k")
    bvals = g.add("vals", "vals_B", tensor="B")
    cvals = g.add("vals", "vals_c", tensor="c")
    mul = g.add("alu", "mul_k", op="mul")
    red = g.add("reduce", "sum_k", op="sum")
    drop = g.add("crddrop", "drop_i", stage="inner")
    wcrd = g.add("write_crd", "write_x_i", tensor="x", level=0)
    wval = g.add(
        "write_val",
        "write_x_val",
        tensor="x",
        shape=[2],
        mode_order=[0],
        formats=["compressed"],
        fill=0.0,
    )
    g.connect(root, "ref", bi, "ref", "ref")
    g.connect(root, "ref", rep, "data", "ref")
    g.connect(bi, "crd", rep, "ctrl", "crd")
    g.connect(bi, "ref", bk, "ref", "ref")
    g.connect(rep, "out", ck, "ref", "ref")
    g.connect(bk, "crd", isect, "crd0", "crd")
    g.connect(bk, "ref", isect, "p0", "ref")
    g.connect(ck, "crd", isect, "crd1", "crd")
    g.connect(ck, "ref", isect, "p1", "ref")
    g.connect(isect, "p0", bvals, "ref", "ref")
    g.connect(isect, "p1", cvals, "ref", "ref")
    g.connect(bvals, "val", mul, "in0", "val")
    g.connect(cvals, "val", mul, "in1", "val")
    g.connect(mul, "out", red, "in", "val")
    g.connect(bi, "crd", drop, "outer", "crd")
    g.connect(red, "out", drop, "inner", "val")
    g.connect(drop, "outer", wcrd, "crd", "crd")
    g.connect(drop, "inner", wval, "val", "val")
    return g


def spmv_tensors():
    B = SparseTensor.from_dense(np.array([[2.0, 0.0, 3.0], [0.0, 4.0, 0.0]]), CC)
    c = SparseTensor.from_dense(np.array([1.0, 2.0, 3.0]), [LevelSpec(COMPRESSED)])
    return {"B": B, "c": c}


def test_spmv_output_matches_hand_value():
    report = run(build_spmv_graph(), spmv_tensors(), SimConfig(mem_latency=0))
    x = report.outputs["x"]
    assert np.array_equal(x.to_dense(), [11.0, 8.0])


def test_spmv_flop_count():
    # 3 multiplies; row reductions of 2 and 1 values cost 1 and 0 adds
    report = run(build_spmv_graph(), spmv_tensors(), SimConfig(mem_latency=0))
    assert report.flops == 4
    assert report.node_flops["mul_k"] == 3
    assert report.node_flops["sum_k"] == 1


def test_spmv_byte_accounting():
    # read side, 4-byte metadata and 8-byte values, replays free:
    #   scan B rows: segs {0,1}, crds {0,1}            -> 16
    #   scan B cols: segs {0,1,2}, crds {0,1,2}        -> 24
    #   scan c (twice, same arrays): segs {0,1}, crds {0,1,2} -> 20
    #   vals B: 3 values                               -> 24
    #   vals c: positions 0,2 then 1                   -> 24
    report = run(build_spmv_graph(), spmv_tensors(), SimConfig(mem_latency=0))
    assert report.bytes_read == 108
    # written: 2 values (16) + compressed level segments [0,2] + crds [0,1] (16)
    assert report.bytes_written == 32


def test_spmv_drops_empty_rows():
    # second row of B intersects nowhere with c's support
    tensors = {
        "B": SparseTensor.from_dense(
            np.array([[2.0, 0.0, 3.0], [0.0, 4.0, 0.0]]), CC
        ),
        "c": SparseTensor.from_dense(
            np.array([1.0, 0.0, 3.0]), [LevelSpec(COMPRESSED)]
        ),
    }
    report = run(build_spmv_graph(), tensors, SimConfig(mem_latency=0))
    x = report.outputs["x"]
    assert np.array_equal(x.to_dense(), [11.0, 0.0])
    assert x.nnz == 1  # row 1 dropped, not stored as explicit zero


def test_outputs_identical_across_channel_depths():
    reports = [
        run(build_spmv_graph(), spmv_tensors(), SimConfig(channel_depth=d))
        for d in (1, 4, 256)
    ]
    base = reports[0]
    for rep in reports[1:]:
        assert rep.outputs["x"] == base.outputs["x"]
        assert rep.flops == base.flops
        assert rep.bytes_read == base.bytes_read
        assert rep.bytes_written == base.bytes_written


def test_report_deterministic_across_runs():
    a = run(build_spmv_graph(), spmv_tensors(), SimConfig())
    b = run(build_spmv_graph(), spmv_tensors(), SimConfig())
    assert a.counters() == b.counters()
    assert a.node_cycles == b.node_cycles


def test_bandwidth_rooflines_cycles():
    free = run(build_spmv_graph(), spmv_tensors(), SimConfig(bandwidth=0.0))
    tight = run(build_spmv_graph(), spmv_tensors(), SimConfig(bandwidth=0.5))
    assert tight.memory_cycles == int(np.ceil(tight.total_bytes / 0.5))
    assert tight.cycles == max(tight.dataflow_cycles, tight.memory_cycles)
    assert tight.cycles > free.cycles


def test_mem_latency_slows_dataflow():
    fast = run(build_spmv_graph(), spmv_tensors(), SimConfig(mem_latency=0))
    slow = run(build_spmv_graph(), spmv_tensors(), SimConfig(mem_latency=50))
    assert slow.dataflow_cycles > fast.dataflow_cycles


def test_structural_deadlock_detected():
    # an adder pairing a raw value stream with its own fiber reduction needs
    # buffering as deep as the fiber; depth 1 must deadlock
    g = DataflowGraph()
    root = g.add("root")
    ci = g.add("scan", "scan_c", tensor="c", level=0)
    cv = g.add("vals", "vals_c", tensor="c")
    red = g.add("reduce", "total", op="sum")
    add = g.add("alu", "add_total", op="add")
    g.connect(root, "ref", ci, "ref", "ref")
    g.connect(ci, "ref", cv, "ref", "ref")
    g.connect(cv, "val", add, "in0", "val")
    g.connect(cv, "val", red, "in", "val")
    g.connect(red, "out", add, "in1", "val")
    c = SparseTensor.from_dense(np.array([1.0, 2.0, 3.0]), [LevelSpec(COMPRESSED)])
    with pytest.raises(Deadlock):
        run(g, {"c": c}, SimConfig(channel_depth=1))


def test_graph_json_round_trip():
    g = build_spmv_graph()
    g2 = DataflowGraph.from_json(g.to_json())
    assert g2.to_json() == g.to_json()
    report = run(g2, spmv_tensors(), SimConfig())
    assert np.array_equal(report.outputs["x"].to_dense(), [11.0, 8.0])


def test_dot_export_mentions_every_node():
    g = build_spmv_graph()
    dot = g.to_dot()
    for nid in g.nodes:
        assert nid in dot
