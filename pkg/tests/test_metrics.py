import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scch.metrics import average, format_icc, icc31, mae, score_table, write_report


def anova_icc(y, p):
    """ICC(3,1) from an explicit two-way ANOVA table built with plain loops."""
    rows = [[float(a), float(b)] for a, b in zip(y, p)]
    n, k = len(rows), 2
    grand = sum(sum(r) for r in rows) / (n * k)
    row_means = [sum(r) / k for r in rows]
    col_means = [sum(r[j] for r in rows) / n for j in range(k)]
    ss_rows = k * sum((m - grand) ** 2 for m in row_means)
    ss_cols = n * sum((m - grand) ** 2 for m in col_means)
    ss_total = sum((v - grand) ** 2 for r in rows for v in r)
    ss_err = ss_total - ss_rows - ss_cols
    bms = ss_rows / (n - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    if bms + (k - 1) * ems <= 1e-12 * max(1.0, ss_total):
        return None  # no variance to apportion
    return (bms - ems) / (bms + (k - 1) * ems)


def test_perfect_agreement_is_one():
    assert icc31([0, 1, 2, 3, 5], [0, 1, 2, 3, 5]) == pytest.approx(1.0)


def test_constant_offset_is_one():
    # consistency ICC ignores a systematic judge offset
    assert icc31([0, 1, 2, 3], [1, 2, 3, 4]) == pytest.approx(1.0)


def test_reversed_ranking_is_minus_one():
    assert icc31([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_frozen_small_table():
    # hand-evaluated ANOVA: BMS = 3.25, EMS = 0.25 -> 3 / 3.5
    assert icc31([1, 2, 3], [1, 3, 4]) == pytest.approx(anova_icc([1, 2, 3], [1, 3, 4]), abs=1e-12)
    assert icc31([0, 2, 4], [1, 2, 3]) == pytest.approx(0.8, abs=1e-12)


def test_degenerate_table_is_undefined():
    assert icc31([2, 2, 2], [2, 2, 2]) is None
    assert icc31([2, 2, 2], [3, 3, 3]) is None
    assert format_icc(None) == "undef"


def test_bad_inputs_raise():
    with pytest.raises(ValueError):
        icc31([1], [1])
    with pytest.raises(ValueError):
        icc31([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        mae([1.0, float("nan")], [1.0, 2.0])


@given(st.lists(st.tuples(st.integers(0, 5), st.floats(-2, 7, allow_nan=False)), min_size=3, max_size=30))
def test_icc_matches_anova_oracle(pairs):
    y, p = zip(*pairs)
    want = anova_icc(y, p)
    got = icc31(y, p)
    if want is None:
        assert got is None
    else:
        assert got == pytest.approx(want, abs=1e-9)
        assert -1.0 <= got <= 1.0


@given(st.lists(st.tuples(st.integers(0, 5), st.floats(-5, 10, allow_nan=False)), min_size=1, max_size=30))
def test_mae_exact(pairs):
    y, p = zip(*pairs)
    assert mae(y, p) == float(np.mean(np.abs(np.array(y, float) - np.array(p, float))))


def test_score_table_skips_undefined_in_average():
    labels = np.array([[0, 1], [1, 1], [2, 1]])
    preds = np.array([[0, 1], [1, 1], [2, 1]])
    rows = score_table(labels, preds, [3, 7])
    assert [r.au_id for r in rows] == ["3", "7", "avg"]
    assert rows[1].icc is None
    assert average(rows).icc == pytest.approx(1.0)
    assert average(rows).mae == 0.0


def test_average_is_unweighted():
    labels = np.array([[0, 0], [1, 2], [2, 4], [3, 1]], float)
    preds = labels.copy()
    preds[:, 1] = [4, 2, 0, 1]
    rows = score_table(labels, preds, [0, 1])
    assert average(rows).icc == pytest.approx((rows[0].icc + rows[1].icc) / 2)


def test_write_report(tmp_path):
    rows = score_table(np.array([[0, 2], [1, 2], [2, 2]]), np.array([[0, 2], [1, 2], [2, 2]]), [0, 1])
    jl, cs = write_report(rows, tmp_path / "eval")
    recs = [json.loads(line) for line in jl.read_text().splitlines()]
    assert recs[1] == {"au": "1", "icc": None, "icc_defined": False, "mae": 0.0, "n": 3}
    assert cs.read_text().splitlines()[0] == "au,icc,icc_defined,mae,n"
