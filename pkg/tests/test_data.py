import io
import json
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from bidca.data import (RESULT_FIELDS, Dataset, XorShift64Star, aggregate, fold_plan,
                        load_libsvm, parse_libsvm, read_results, record_line, split,
                        write_libsvm, write_results)
from bidca.errors import DataError
from bidca.verify import libsvm_round_trip


def parse(text, **kw):
    return parse_libsvm(io.StringIO(text), **kw)


def test_parse_basic_line():
    d = parse("+1 1:0.5 3:-1\n")
    assert d.labels.tolist() == [1.0]
    assert d.rows() == [(1.0, {1: 0.5, 3: -1.0})]
    assert d.n >= 3


def test_parse_empty_feature_line():
    d = parse("-1\n+1 2:1\n")
    assert d.rows()[0] == (-1.0, {})


def test_parse_rejects_repeated_index():
    with pytest.raises(DataError, match="line 1: non-increasing index"):
        parse("1 2:0.1 2:0.2\n")


@pytest.mark.parametrize("text", ["1 0:1\n", "1 a:1\n", "1 3\n", "x 1:1\n", "1 1:nan\n", ""])
def test_parse_rejects_malformed(text):
    with pytest.raises(DataError):
        parse(text)


def test_label_schemes():
    assert parse("0 1:1\n1 1:2\n").labels.tolist() == [-1.0, 1.0]
    assert parse("2 1:1\n4 1:2\n").labels.tolist() == [1.0, -1.0]
    assert parse("3.5 1:1\n", numeric_labels=True).labels.tolist() == [3.5]
    with pytest.raises(DataError):
        parse("0 1:1\n1 1:1\n5 1:1\n")


def test_sidecar_label_map(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("7 1:1\n9 1:2\n")
    (tmp_path / "d.txt.labels.json").write_text(json.dumps({"7": -1, "9": 1}))
    assert load_libsvm(f).labels.tolist() == [-1.0, 1.0]


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_libsvm(tmp_path / "absent")


def test_round_trip_fuzz():
    ok, _ = libsvm_round_trip(np.random.default_rng(0), 1000)
    assert ok


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([-1.0, 1.0]),
                          st.dictionaries(st.integers(1, 30),
                                          st.floats(-1e6, 1e6, allow_nan=False).filter(lambda v: v != 0),
                                          max_size=6)),
                min_size=1, max_size=20))
def test_write_parse_round_trip(rows):
    lines = [" ".join([str(int(lab))] + [f"{i}:{v!r}" for i, v in sorted(feat.items())])
             for lab, feat in rows]
    d = parse("\n".join(lines) + "\n", n_features=30)
    buf = io.StringIO()
    write_libsvm(d, buf)
    assert parse(buf.getvalue(), n_features=30).equals(d)


def test_xorshift_is_deterministic_permutation():
    a = XorShift64Star(5).permutation(100)
    assert np.array_equal(a, XorShift64Star(5).permutation(100))
    assert sorted(a.tolist()) == list(range(100))
    assert not np.array_equal(a, XorShift64Star(6).permutation(100))


def dummy(ell, n=2):
    rng = np.random.default_rng(0)
    return Dataset(np.where(rng.random(ell) < 0.5, -1.0, 1.0), sp.csr_matrix(rng.random((ell, n))))


def test_split_sizes():
    tr, te = split(dummy(690), 0)
    assert (tr.size, te.size) == (345, 345)
    tr, te = split(dummy(3), 0)
    assert (tr.size, te.size) == (2, 1)
    tr, te = split(dummy(10), 0, n_train=7)
    assert (tr.size, te.size) == (7, 3)
    with pytest.raises(ValueError):
        split(dummy(10), 0, n_train=10)


def test_split_deterministic_and_disjoint():
    d = dummy(50)
    a, b = split(d, 3)
    c, _ = split(d, 3)
    assert a.equals(c)
    assert a.size + b.size == 50


@pytest.mark.parametrize("ell, sizes", [(9, [3, 3, 3]), (10, [4, 3, 3])])
def test_fold_sizes(ell, sizes):
    assert fold_plan(ell, 3, 1).sizes == sizes


def test_fold_plan_deterministic():
    assert np.array_equal(fold_plan(40, 3, 2).assignment, fold_plan(40, 3, 2).assignment)
    with pytest.raises(ValueError):
        fold_plan(2, 3, 0)


def record(**kw):
    base = {k: None for k in RESULT_FIELDS}
    base.update(dataset="d", method="ipdca", epsilon=0.01, tol=0.01, seed=0, status="converged")
    base.update(kw)
    return base


def test_aggregate_statistics():
    recs = [record(seed=i, cv_error=v, test_error=v / 2) for i, v in enumerate([0.1, 0.2, 0.3])]
    agg = aggregate(recs)
    assert agg["cv_error_mean"] == pytest.approx(0.2)
    assert agg["cv_error_std"] == pytest.approx(0.1)
    assert agg["runs"] == agg["completed"] == 3


def test_aggregate_single_run():
    agg = aggregate([record(cv_error=0.4)])
    assert agg["cv_error_mean"] == 0.4 and agg["cv_error_std"] == 0.0


def test_empty_results_rejected():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        write_results([], fh=io.StringIO())


def test_results_document_round_trip(tmp_path):
    recs = [record(cv_error=0.25, time_sec=1.5), record(seed=1, cv_error=math.nan, status="MaxIterations")]
    path = tmp_path / "out" / "r.jsonl"
    footer = write_results(recs, path)
    runs, foot = read_results(path)
    assert foot == json.loads(record_line(footer))
    assert [r["seed"] for r in runs] == [0, 1]
    assert runs[1]["cv_error"] is None
    assert foot["status_counts"] == {"converged": 1, "MaxIterations": 1}


def test_record_missing_field_rejected():
    with pytest.raises(ValueError):
        write_results([{"dataset": "d"}], fh=io.StringIO())
