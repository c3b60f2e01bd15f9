import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from braincl import TrainTestMatrix, ValidationError, avg, bwt, dsc, fwt, ilm
from braincl.metrics import (
    compute_all,
    load_matrix,
    matrix_csv,
    per_dataset_forgetting,
    write_metrics,
)

# Worked 3x3 example used throughout: hand arithmetic oracles below.
M3 = TrainTestMatrix(
    ["d1", "d2", "d3"],
    np.array([[0.8, 0.1, 0.0], [0.6, 0.7, 0.2], [0.5, 0.6, 0.75]]),
)


# -- naive double-loop references (independent of the implementation) --------


def ref_avg(m):
    p = len(m)
    total = 0.0
    for j in range(p):
        total += m[p - 1][j]
    return total / p


def ref_ilm(m):
    p = len(m)
    total = 0.0
    for i in range(p):
        for j in range(p):
            if i >= j:
                total += m[i][j]
    return total / (p * (p + 1) / 2)


def ref_bwt(m):
    p = len(m)
    total = 0.0
    for i in range(p - 1):
        total += m[p - 1][i] - m[i][i]
    return total / (p - 1)


def ref_fwt(m):
    p = len(m)
    total = 0.0
    for j in range(1, p):
        total += m[j - 1][j]
    return total / (p - 1)


# -- dsc ----------------------------------------------------------------------


def test_dsc_identical_nonempty():
    mask = np.zeros((4, 4, 4), dtype=np.uint8)
    mask[1:3, 1:3, 1:3] = 1
    assert dsc(mask, mask) == 1.0


def test_dsc_disjoint():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[0, 0] = 1
    b[3, 3] = 1
    assert dsc(a, b) == 0.0


def test_dsc_half_overlap():
    # |P|=4, |G|=4, |P∩G|=2 -> 2*2/(4+4) = 0.5
    pred = np.zeros(8, dtype=np.uint8)
    gt = np.zeros(8, dtype=np.uint8)
    pred[:4] = 1
    gt[2:6] = 1
    assert dsc(pred, gt) == 0.5


def test_dsc_both_empty_is_one():
    z = np.zeros((3, 3), dtype=np.uint8)
    assert dsc(z, z) == 1.0


def test_dsc_rejects_nonbinary():
    with pytest.raises(ValidationError):
        dsc(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValidationError):
        dsc(np.zeros((2, 2)), np.zeros((3, 3)))


# -- worked example -----------------------------------------------------------


def test_worked_example_values():
    assert abs(avg(M3) - (0.5 + 0.6 + 0.75) / 3) < 1e-12
    assert abs(ilm(M3) - (0.8 + 0.6 + 0.7 + 0.5 + 0.6 + 0.75) / 6) < 1e-12
    assert abs(bwt(M3) - ((0.5 - 0.8) + (0.6 - 0.7)) / 2) < 1e-12
    assert abs(fwt(M3) - (0.1 + 0.2) / 2) < 1e-12
    assert round(avg(M3), 5) == 0.61667
    assert round(ilm(M3), 5) == 0.65833
    assert round(bwt(M3), 5) == -0.2
    assert round(fwt(M3), 5) == 0.15


def test_constant_matrix_fixed_points():
    m = TrainTestMatrix(["a", "b", "c"], np.full((3, 3), 0.4))
    assert avg(m) == pytest.approx(0.4)
    assert ilm(m) == pytest.approx(0.4)
    assert bwt(m) == pytest.approx(0.0)  # columns constant -> no forgetting


def test_identity_like_matrix():
    m = TrainTestMatrix(["a", "b", "c"], np.eye(3))
    assert avg(m) == pytest.approx(1 / 3)


def test_bwt_no_forgetting_and_uniform_gain():
    vals = np.array([[0.5, 0.0], [0.5, 0.9]])
    assert bwt(TrainTestMatrix(["a", "b"], vals)) == pytest.approx(0.0)
    vals2 = np.array([[0.5, 0.0], [0.6, 0.9]])
    assert bwt(TrainTestMatrix(["a", "b"], vals2)) == pytest.approx(0.1)


def test_fwt_lower_triangular_is_zero():
    m = TrainTestMatrix(["a", "b", "c"], np.tril(np.full((3, 3), 0.7)))
    assert fwt(m) == 0.0


def test_fwt_p2_is_single_cell():
    m = TrainTestMatrix(["a", "b"], np.array([[0.5, 0.33], [0.4, 0.8]]))
    assert fwt(m) == pytest.approx(0.33)


def test_ilm_p2_is_lower_triangle_mean():
    m = TrainTestMatrix(["a", "b"], np.array([[0.6, 0.1], [0.3, 0.9]]))
    assert ilm(m) == pytest.approx((0.6 + 0.3 + 0.9) / 3)


def test_metrics_need_two_datasets():
    m = TrainTestMatrix(["solo"], np.array([[0.5]]))
    with pytest.raises(ValidationError):
        bwt(m)
    with pytest.raises(ValidationError):
        fwt(m)


def test_matrix_validation():
    with pytest.raises(ValidationError):
        TrainTestMatrix(["a", "b"], np.array([[0.1, 0.2]]))
    with pytest.raises(ValidationError):
        TrainTestMatrix(["a", "b"], np.array([[0.1, 1.2], [0.0, 0.5]]))
    with pytest.raises(ValidationError):
        TrainTestMatrix(["a", "b"], np.array([[0.1, np.nan], [0.0, 0.5]]))


def test_relabeling_invariance():
    renamed = TrainTestMatrix(["x", "y", "z"], M3.dsc.copy())
    for fn in (avg, ilm, bwt, fwt):
        assert fn(renamed) == fn(M3)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=2, max_value=5).flatmap(
        lambda p: st.lists(
            st.lists(
                st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
                min_size=p, max_size=p,
            ),
            min_size=p, max_size=p,
        )
    )
)
def test_oracle_equivalence(rows):
    matrix = TrainTestMatrix([f"d{i}" for i in range(len(rows))], np.array(rows))
    assert avg(matrix) == ref_avg(rows)
    assert ilm(matrix) == ref_ilm(rows)
    assert bwt(matrix) == ref_bwt(rows)
    assert fwt(matrix) == ref_fwt(rows)


def test_per_dataset_forgetting():
    vals = per_dataset_forgetting(M3)
    assert vals == pytest.approx([0.5 - 0.8, 0.6 - 0.7, 0.0])


def test_metrics_io(tmp_path):
    doc = {
        "datasets": ["d1", "d2", "d3"],
        "dsc": M3.dsc.tolist(),
        "alpha_t": [None, 0.3, 0.2],
        "strategy": {"name": "proposed"},
    }
    path = tmp_path / "matrix.json"
    path.write_text(json.dumps(doc))
    matrix = load_matrix(path)
    assert matrix.dataset_ids == ["d1", "d2", "d3"]

    out = tmp_path / "metrics.json"
    values = write_metrics(matrix, out)
    reread = json.loads(out.read_text())
    assert reread["avg"] == pytest.approx(values["avg"])
    assert set(reread) == {"avg", "ilm", "bwt", "fwt", "per_dataset_forgetting"}
    assert compute_all(matrix)["bwt"] == pytest.approx(-0.2)


def test_matrix_csv_shape():
    text = matrix_csv(M3)
    lines = text.strip().split("\n")
    assert lines[0] == "session,d1,d2,d3"
    assert len(lines) == 4
