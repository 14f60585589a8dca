import pytest
from hypothesis import given
from hypothesis import strategies as st

from skillnetx.metrics import (
    accuracy,
    bio_entities,
    entity_f1,
    macro_average,
    prf,
    span_f1_single,
    span_scores,
)


def test_accuracy():
    assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


def test_bio_entities_decoding():
    # O B-PER I-PER O B-LOC B-LOC I-ORG
    assert bio_entities([0, 1, 2, 0, 3, 3, 6]) == {(1, 2, 0), (4, 4, 1), (5, 5, 1), (6, 6, 2)}


def test_entity_f1_half_recall():
    gold = [[1, 2, 0, 3, 0]]
    pred = [[1, 2, 0, 0, 0]]
    res = entity_f1(pred, gold)
    assert (res["precision"], res["recall"]) == (1.0, 0.5)
    assert res["f1"] == pytest.approx(2 / 3, abs=1e-12)


def test_entity_f1_needs_exact_boundaries():
    assert entity_f1([[1, 0, 0]], [[1, 2, 0]])["f1"] == 0.0


def test_span_overlap_example():
    assert span_f1_single((3, 5), (4, 6)) == pytest.approx(2 / 3, abs=1e-12)
    assert span_f1_single((0, 1), (3, 4)) == 0.0
    assert span_f1_single((5, 4), (4, 5)) == 0.0


def test_span_scores_report_both_metrics():
    res = span_scores([(3, 5), (1, 1)], [(4, 6), (1, 1)])
    assert res["exact_match"] == 0.5
    assert res["f1"] == pytest.approx((2 / 3 + 1) / 2)


@given(st.integers(0, 20), st.integers(0, 5), st.integers(0, 20), st.integers(0, 5))
def test_span_f1_symmetric_and_bounded(s1, l1, s2, l2):
    a, b = (s1, s1 + l1), (s2, s2 + l2)
    f = span_f1_single(a, b)
    assert f == span_f1_single(b, a) and 0.0 <= f <= 1.0
    assert (f == 1.0) == (a == b)


def test_prf_empty_sets():
    assert prf(set(), set()) == (0.0, 0.0, 0.0)


def test_macro_average():
    assert macro_average([90.0, 80.0]) == 85.0
    with pytest.raises(ValueError):
        macro_average([])
