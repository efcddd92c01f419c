import numpy as np
import pytest

from triprobe.triplets import (COMPONENTS, TripletTableError, build_table,
                               component_logits, full_product_table, load_table,
                               project, project_labels, save_table)


def test_single_class_table():
    t = build_table((1, 1, 1), [(0, 0, 0)])
    assert t.n_triplets == 1
    assert t.component_count("IV") == 1


def test_hundred_row_table_iv_bound():
    rng = np.random.default_rng(3)
    rows = set()
    while len(rows) < 100:
        rows.add((int(rng.integers(6)), int(rng.integers(10)), int(rng.integers(15))))
    t = build_table((6, 10, 15), sorted(rows))
    assert t.n_triplets == 100
    assert t.component_count("IV") <= 60
    assert t.component_count("IT") <= 90


def test_duplicate_row_rejected():
    with pytest.raises(TripletTableError):
        build_table((1, 1, 1), [(0, 0, 0), (0, 0, 0)])


def test_out_of_range_rejected():
    with pytest.raises(TripletTableError):
        build_table((2, 2, 2), [(0, 0, 2)])


def test_project_by_construction():
    t = build_table((6, 10, 15), [(2, 1, 7)])
    assert project(t, "I", 0) == 2
    assert project(t, "V", 0) == 1
    assert project(t, "T", 0) == 7
    assert project(t, "IT", 0) == t.it_pairs.index((2, 7))
    assert project(t, "IVT", 0) == 0


def test_project_out_of_range():
    t = build_table((1, 1, 1), [(0, 0, 0)])
    with pytest.raises(TripletTableError):
        project(t, "I", 1)
    with pytest.raises(TripletTableError):
        project(t, "Q", 0)


def test_component_logits_worked_example():
    t = build_table((2, 2, 2), [(0, 0, 0), (0, 1, 1), (1, 0, 1)])
    y = np.array([0.2, 0.7, 0.4])
    for d, expected in (("I", [0.7, 0.4]), ("V", [0.4, 0.7]), ("T", [0.2, 0.7])):
        vals, defined = component_logits(y, t, d)
        assert defined.all()
        assert np.allclose(vals, expected)


def test_component_logits_identity_for_ivt():
    t = full_product_table(2, 2, 2)
    y = np.random.default_rng(0).random(8)
    vals, defined = component_logits(y, t, "IVT")
    assert defined.all()
    assert np.array_equal(vals, y)


def test_component_logits_constant_input():
    t = full_product_table(2, 3, 2)
    y = np.full(12, 0.37)
    for d in COMPONENTS:
        vals, defined = component_logits(y, t, d)
        assert np.allclose(vals[defined], 0.37)


def test_component_logits_absent_class_nan():
    t = build_table((3, 1, 1), [(0, 0, 0), (2, 0, 0)])  # instrument 1 has no triplet
    vals, defined = component_logits(np.array([1.0, 2.0]), t, "I")
    assert defined.tolist() == [True, False, True]
    assert np.isnan(vals[1])


def test_component_logits_matches_bruteforce():
    rng = np.random.default_rng(42)
    for _ in range(50):
        rows = set()
        while len(rows) < 30:
            rows.add((int(rng.integers(6)), int(rng.integers(10)), int(rng.integers(15))))
        t = build_table((6, 10, 15), sorted(rows))
        y = rng.standard_normal(30)
        for d in COMPONENTS:
            vals, defined = component_logits(y, t, d)
            proj = t.projection(d)
            for k in range(t.component_count(d)):
                pre = [m for m in range(30) if proj[m] == k]
                if not pre:
                    assert not defined[k]
                else:
                    assert vals[k] == max(y[m] for m in pre)


def test_projection_consistency_and_monotonicity():
    rng = np.random.default_rng(9)
    t = full_product_table(3, 2, 3)
    y = rng.standard_normal(18)
    for d in COMPONENTS:
        vals, defined = component_logits(y, t, d)
        assert np.max(vals[defined]) == pytest.approx(y.max())
    # raising one logit never lowers any projected value
    y2 = y.copy()
    y2[7] += 1.5
    for d in COMPONENTS:
        v1, _ = component_logits(y, t, d)
        v2, _ = component_logits(y2, t, d)
        assert (np.nan_to_num(v2 - v1, nan=0.0) >= -1e-12).all()


def test_project_labels_or_semantics():
    t = build_table((2, 1, 1), [(0, 0, 0), (1, 0, 0)])
    lab = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=np.uint8)
    out = project_labels(lab, t, "I")
    assert np.array_equal(out, [[1, 0], [0, 1], [1, 1], [0, 0]])
    v = project_labels(lab, t, "V")
    assert np.array_equal(v.ravel(), [1, 1, 1, 0])


def test_map_file_roundtrip(tmp_path):
    t = full_product_table(3, 2, 3)
    path = tmp_path / "map.txt"
    save_table(t, path)
    t2 = load_table(path)
    assert np.array_equal(t.rows, t2.rows)
    assert (t2.n_instruments, t2.n_verbs, t2.n_targets) == (3, 2, 3)


def test_map_file_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0,0,0,0\n")
    with pytest.raises(TripletTableError, match="counts"):
        load_table(p)
    p.write_text("#counts 1 1 1 1\n0,0,0\n")
    with pytest.raises(TripletTableError, match="expected"):
        load_table(p)
    p.write_text("#counts 1 1 1 2\n0,0,0,0\n")
    with pytest.raises(TripletTableError, match="cover"):
        load_table(p)
    p.write_text("#counts 1 1 1 1\n# comment line\n0,0,0,0\n")
    assert load_table(p).n_triplets == 1


def test_length_mismatch():
    t = full_product_table(2, 2, 2)
    with pytest.raises(TripletTableError):
        component_logits(np.zeros(7), t, "I")
