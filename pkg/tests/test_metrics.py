import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccssl import metrics as mt
from ccssl.errors import ContractError
from ccssl.semisup import PseudoLabelBatch


def test_top_k_basic():
    p = np.eye(4)
    assert mt.top_k_accuracy(p, np.arange(4)) == 1.0
    rng = np.random.default_rng(0)
    assert mt.top_k_accuracy(rng.random((10, 5)), rng.integers(0, 5, 10), k=5) == 1.0


def test_top_k_crafted_ranks():
    # true label ranks: 1st, 2nd, 3rd
    p = np.array([[0.6, 0.3, 0.1], [0.3, 0.6, 0.1], [0.5, 0.3, 0.2]])
    assert mt.top_k_accuracy(p, [0, 0, 2], k=2) == pytest.approx(2 / 3)
    assert mt.top_k_accuracy(p, [0, 0, 2], k=1) == pytest.approx(1 / 3)


def test_top_k_ties_go_to_lower_index():
    p = np.array([[0.5, 0.5, 0.0]])
    assert mt.top_k_accuracy(p, [0]) == 1.0
    assert mt.top_k_accuracy(p, [1]) == 0.0


def test_top_k_errors():
    with pytest.raises(ContractError):
        mt.top_k_accuracy(np.eye(3), [0, 1])
    with pytest.raises(ContractError):
        mt.top_k_accuracy(np.eye(3), [0, 1, 2], k=4)


def test_confusion_examples():
    np.testing.assert_array_equal(mt.confusion_matrix(np.eye(3), [0, 1, 2]), np.eye(3, dtype=int))
    c = mt.confusion_matrix(np.array([[0.1, 0.9]]), [0])
    assert c.sum() == 1 and c[0, 1] == 1


def test_confusion_hand_counted():
    pred = np.eye(3)[[0, 1, 1, 2, 0, 2]]
    labels = [0, 1, 0, 2, 2, 2]
    expected = np.array([[1, 1, 0],
                         [0, 1, 0],
                         [1, 0, 2]])
    np.testing.assert_array_equal(mt.confusion_matrix(pred, labels), expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(2, 6), st.integers(0, 10 ** 6))
def test_top1_equals_confusion_trace(n, c, seed):
    rng = np.random.default_rng(seed)
    pred, labels = rng.random((n, c)), rng.integers(0, c, n)
    counts = mt.confusion_matrix(pred, labels, c)
    assert counts.sum() == n
    assert mt.top_k_accuracy(pred, labels) == pytest.approx(np.trace(counts) / n, abs=1e-15)


def test_confusion_csv(tmp_path):
    counts = np.array([[3, 1], [0, 2]])
    mt.write_confusion_csv(counts, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == ["3,1", "0,2"]


def _plb(q_hat, mask):
    q_hat = np.asarray(q_hat)
    return PseudoLabelBatch(p=np.zeros((len(q_hat), 3)), q_hat=q_hat, q=np.ones(len(q_hat)),
                            mask=np.asarray(mask, bool), threshold=0.9)


def test_pseudo_label_accuracy_empty_mask():
    s = mt.pseudo_label_accuracy(_plb([0, 1], [False, False]), [0, 1], [False, False])
    assert s.accuracy is None and s.mask_rate == 0.0 and s.ood_mask_rate is None


def test_pseudo_label_accuracy_all_correct():
    s = mt.pseudo_label_accuracy(_plb([0, 1, 2], [True] * 3), [0, 1, 2], [False] * 3)
    assert s.accuracy == 1.0 and s.mask_rate == 1.0


def test_pseudo_label_accuracy_hand_counted():
    # 8 samples: masked ID are 0, 1, 2, 5 with 0 and 5 correct; OOD are 3, 4, 7 with 3, 4 masked
    q_hat = [0, 1, 2, 0, 1, 2, 1, 0]
    mask = [True, True, True, True, True, True, False, False]
    truth = [0, 2, 0, -1, -1, 2, 1, -1]
    ood = [False, False, False, True, True, False, False, True]
    s = mt.pseudo_label_accuracy(_plb(q_hat, mask), truth, ood)
    assert s.accuracy == pytest.approx(0.5)
    assert s.mask_rate == pytest.approx(6 / 8)
    assert s.ood_mask_rate == pytest.approx(2 / 3)
