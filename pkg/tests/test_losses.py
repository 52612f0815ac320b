import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from contralab import autodiff as ad
from contralab.losses import (
    ContractError,
    EmbeddingBatch,
    acgan_aux_loss,
    loss_2c,
    loss_2c_aps,
    loss_eq7,
    nt_xent,
    projection_term,
    proxy_nca,
)

ANCHOR = math.log(1 + 1 / math.e)  # -log(e / (e + 1))


def _batch(feats, labels, table=None):
    return EmbeddingBatch(ad.constant(feats), labels, None if table is None else ad.constant(table))


def _random_case(rng, m=None, d=None, C=None):
    m = m or int(rng.integers(1, 17))
    d = d or int(rng.integers(2, 9))
    C = C or int(rng.integers(2, 6))
    feats = oracles.random_unit_rows(rng, m, d)
    labels = rng.integers(0, C, size=m)
    table = rng.standard_normal((C, d))
    return feats, labels, table


def test_2c_single_sample_is_zero():
    feats = np.array([[0.6, 0.8]])
    assert loss_2c(_batch(feats, [0], [[1.0, 0.0]]), 1.0).item() == 0.0


def test_2c_two_distinct_labels_anchor():
    feats = np.eye(2)
    loss = loss_2c(_batch(feats, [0, 1], np.eye(2)), 1.0).item()
    assert loss == pytest.approx(0.31326, abs=5e-6)
    assert loss == pytest.approx(ANCHOR, abs=1e-15)


def test_2c_same_label_identical_is_zero():
    feats = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert loss_2c(_batch(feats, [3, 3], np.tile([1.0, 0.0], (4, 1))), 1.0).item() == pytest.approx(0.0, abs=1e-15)


def test_eq7_anchors():
    assert loss_eq7(_batch(np.array([[0.0, 1.0]]), [0], np.eye(2)), 1.0).item() == 0.0
    assert loss_eq7(_batch(np.eye(2), [0, 1], np.eye(2)), 1.0).item() == pytest.approx(ANCHOR, abs=1e-15)


def test_ntxent_examples():
    pair = oracles.random_unit_rows(np.random.default_rng(0), 2, 3)
    assert nt_xent(ad.constant(pair), 0.5).item() == pytest.approx(0.0, abs=1e-15)
    same = np.tile([0.0, 0.0, 1.0], (4, 1))
    assert nt_xent(ad.constant(same), 1.0).item() == pytest.approx(math.log(3), abs=1e-12)
    aligned = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0]])
    expected = -math.log(math.e / (math.e + 2))
    assert nt_xent(ad.constant(aligned), 1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5514, abs=5e-5)


def test_ntxent_odd_rows_rejected():
    with pytest.raises(ContractError):
        nt_xent(ad.constant(oracles.random_unit_rows(np.random.default_rng(1), 3, 2)), 1.0)


def test_aps_examples():
    f = np.array([[0.8, 0.6]])
    assert loss_2c_aps(_batch(f, [0]), ad.constant(f), 1.0).item() == 0.0
    feats = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    assert loss_2c_aps(_batch(feats, [0, 1]), ad.constant(feats), 1.0).item() == pytest.approx(ANCHOR, abs=1e-15)


def test_aps_equals_2c_when_augmented_rows_are_class_embeddings():
    rng = np.random.default_rng(2)
    feats, labels, table = _random_case(rng, m=9, d=4, C=3)
    unit_table = table / np.linalg.norm(table, axis=1, keepdims=True)
    a = loss_2c_aps(_batch(feats, labels), ad.constant(unit_table[labels]), 0.7).item()
    b = loss_2c(_batch(feats, labels, table), 0.7).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_aps_row_mismatch():
    rng = np.random.default_rng(3)
    feats = oracles.random_unit_rows(rng, 4, 3)
    with pytest.raises(ContractError):
        loss_2c_aps(_batch(feats, [0, 1, 0, 1]), ad.constant(feats[:3]), 1.0)


def test_pnca_examples():
    feats = np.array([[1.0, 0.0]])
    assert proxy_nca(_batch(feats, [0], np.eye(2)), 1.0).item() == pytest.approx(-1.0, abs=1e-12)
    same = np.tile([0.3, 0.4], (5, 1))
    f = oracles.random_unit_rows(np.random.default_rng(4), 6, 2)
    assert proxy_nca(_batch(f, [0, 1, 2, 3, 4, 0], same), 1.0).item() == pytest.approx(math.log(4), abs=1e-12)


def test_pnca_needs_two_classes():
    with pytest.raises(ContractError):
        proxy_nca(_batch(np.array([[1.0, 0.0]]), [0], [[1.0, 0.0]]), 1.0)


def test_pnca_invariant_to_nontarget_permutation():
    rng = np.random.default_rng(5)
    feats, _, table = _random_case(rng, m=6, d=5, C=4)
    labels = np.zeros(6, dtype=int)
    permuted = table.copy()
    permuted[1:] = table[[3, 1, 2]]
    a = proxy_nca(_batch(feats, labels, table), 0.5).item()
    b = proxy_nca(_batch(feats, labels, permuted), 0.5).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_acgan_examples():
    assert acgan_aux_loss(ad.constant(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10), abs=1e-12)
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 50.0
    assert acgan_aux_loss(ad.constant(logits), [1, 2]).item() == pytest.approx(0.0, abs=1e-20)
    rng = np.random.default_rng(6)
    for _ in range(20):
        z = rng.normal(0, 3, size=(7, 5))
        y = rng.integers(0, 5, 7)
        assert abs(acgan_aux_loss(ad.constant(z), y).item() - oracles.cross_entropy(z, y)) < 1e-10


def test_acgan_label_out_of_range():
    with pytest.raises(ContractError):
        acgan_aux_loss(ad.constant(np.zeros((2, 3))), [0, 3])


def test_projection_examples():
    one = projection_term(ad.constant([[1.0, 0.0]]), ad.constant([[1.0, 0.0]]), [0])
    assert one.shape == (1, 1) and one.item() == 1.0
    assert projection_term(ad.constant([[1.0, 0.0]]), ad.constant([[0.0, 1.0]]), [0]).item() == 0.0
    rng = np.random.default_rng(7)
    trunk, table, y = rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.integers(0, 3, 5)
    base = projection_term(ad.constant(trunk), ad.constant(table), y).data
    doubled = projection_term(ad.constant(2 * trunk), ad.constant(table), y).data
    np.testing.assert_allclose(doubled, 2 * base, rtol=1e-15)
    np.testing.assert_allclose(base.ravel(), oracles.projection(trunk, table, y), rtol=1e-13)


def test_projection_width_mismatch():
    with pytest.raises(ContractError):
        projection_term(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 4))), [0, 1])


def test_batch_contract_errors():
    with pytest.raises(ContractError):
        EmbeddingBatch(ad.constant([[2.0, 0.0]]), [0])
    with pytest.raises(ContractError):
        EmbeddingBatch(ad.constant([[1.0, 0.0]]), [2], ad.constant(np.eye(2)))
    with pytest.raises(ContractError):
        EmbeddingBatch(ad.constant([[1.0, 0.0]]), [0, 1])
    with pytest.raises(ContractError):
        loss_2c(_batch(np.array([[1.0, 0.0]]), [0], np.eye(2)), 0.0)


def test_losses_match_double_loop_oracles():
    rng = np.random.default_rng(8)
    for _ in range(100):
        feats, labels, table = _random_case(rng)
        t = float(rng.uniform(0.2, 3.0))
        b = _batch(feats, labels, table)
        assert abs(loss_2c(b, t).item() - oracles.contrastive_2c(feats, labels, table, t)) < 1e-9
        assert abs(loss_eq7(b, t).item() - oracles.eq7(feats, labels, table, t)) < 1e-9
        assert abs(proxy_nca(b, t).item() - oracles.pnca(feats, labels, table, t)) < 1e-9
        aug = oracles.random_unit_rows(rng, len(labels), feats.shape[1])
        assert abs(loss_2c_aps(b, ad.constant(aug), t).item() - oracles.aps(feats, labels, aug, t)) < 1e-9
        pairs = oracles.random_unit_rows(rng, 2 * int(rng.integers(1, 9)), feats.shape[1])
        assert abs(nt_xent(ad.constant(pairs), t).item() - oracles.ntxent(pairs, t)) < 1e-9


def test_distinct_labels_eq7_equals_2c():
    rng = np.random.default_rng(9)
    for _ in range(20):
        m = int(rng.integers(1, 8))
        feats, _, table = _random_case(rng, m=m, C=8)
        labels = rng.permutation(8)[:m]
        b = _batch(feats, labels, table)
        assert abs(loss_2c(b, 0.9).item() - loss_eq7(b, 0.9).item()) < 1e-12


def test_large_temperature_limit_counts_terms():
    rng = np.random.default_rng(10)
    feats, labels, table = _random_case(rng, m=10, d=4, C=3)
    counts = np.array([(labels == y).sum() for y in labels])
    expected = np.mean(np.log(10 / counts))
    values = [loss_2c(_batch(feats, labels, table), t).item() for t in (1.0, 10.0, 100.0, 1e6)]
    assert abs(values[-1] - expected) < 1e-5
    # approach from either side is monotone for this batch
    gaps = [abs(v - expected) for v in values]
    assert gaps == sorted(gaps, reverse=True)
    for t in (0.5, 5.0):
        assert abs(loss_2c(_batch(feats, labels, table), t).item() - oracles.contrastive_2c(feats, labels, table, t)) < 1e-9


unit_batches = st.integers(min_value=0, max_value=2**32 - 1).map(np.random.default_rng)


@settings(max_examples=60, deadline=None)
@given(rng=unit_batches, t=st.floats(min_value=0.05, max_value=20.0))
def test_contrastive_losses_non_negative(rng, t):
    feats, labels, table = _random_case(rng)
    b = _batch(feats, labels, table)
    assert loss_2c(b, t).item() >= 0.0
    assert loss_eq7(b, t).item() >= 0.0


@settings(max_examples=40, deadline=None)
@given(rng=unit_batches)
def test_2c_permutation_invariant(rng):
    feats, labels, table = _random_case(rng)
    perm = rng.permutation(len(labels))
    a = loss_2c(_batch(feats, labels, table), 0.8).item()
    b = loss_2c(_batch(feats[perm], labels[perm], table), 0.8).item()
    assert abs(a - b) < 1e-12


@settings(max_examples=40, deadline=None)
@given(rng=unit_batches)
def test_2c_ignores_class_table_scale(rng):
    feats, labels, table = _random_case(rng)
    a = loss_2c(_batch(feats, labels, table), 1.0).item()
    b = loss_2c(_batch(feats, labels, 7.5 * table), 1.0).item()
    assert abs(a - b) < 1e-12
