import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ReferenceQueue, brute_force_ncm, direct_nca
from trexlab import numkit
from trexlab.objectives import (EmptyMemoryError, LossConfig, MemoryBank, compute_prototypes, cosine_ce_loss,
                                oca_loss, ocm_loss, vanilla_ce_loss)


def unit(rng, n, d):
    return numkit.l2_normalize(rng.normal(size=(n, d)))


def test_cosine_ce_matches_direct_formula():
    rng = np.random.default_rng(0)
    z, w = unit(rng, 5, 4), rng.normal(size=(3, 4))
    labels = np.array([0, 1, 2, 1, 0])
    out = cosine_ce_loss(z, labels, w, 0.1)
    expected = 0.0
    for i in range(5):
        logits = [z[i] @ w[c] / np.linalg.norm(w[c]) / 0.1 for c in range(3)]
        expected -= logits[labels[i]] - np.log(np.sum(np.exp(logits)))
    assert out.loss == pytest.approx(expected / 5, rel=1e-12)


def test_cosine_ce_invariant_to_weight_scale():
    rng = np.random.default_rng(1)
    z, w = unit(rng, 4, 3), rng.normal(size=(3, 3))
    labels = np.array([0, 1, 2, 0])
    a = cosine_ce_loss(z, labels, w, 0.2).loss
    b = cosine_ce_loss(z, labels, w * np.array([[3.0], [0.5], [7.0]]), 0.2).loss
    assert a == pytest.approx(b, rel=1e-12)


def test_vanilla_ce_uses_raw_products():
    z = np.array([[1.0, 0.0]])
    w = np.array([[2.0, 0.0], [0.0, 1.0]])
    out = vanilla_ce_loss(z, [0], w)
    assert out.loss == pytest.approx(-np.log(np.exp(2) / (np.exp(2) + 1)))


def test_losses_reject_bad_inputs():
    z = np.ones((1, 2)) / np.sqrt(2)
    with pytest.raises(ValueError):
        cosine_ce_loss(z, [0], np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        cosine_ce_loss(z, [5], np.ones((2, 2)), 0.1)
    with pytest.raises(ValueError):
        LossConfig(temperature=-1)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 64), st.integers(1, 8), st.integers(2, 6), st.integers(0, 2**31))
def test_ocm_equals_brute_force_ncm(n, c, d, seed):
    rng = np.random.default_rng(seed)
    z = unit(rng, n, d)
    labels = rng.integers(0, c, n)
    # momentum 0 and the bank holding the whole dataset: prototypes are exact class means
    bank = MemoryBank(n, d, np.float64)
    bank.push(z, labels)
    out = ocm_loss(z, labels, compute_prototypes(bank, c), 0.1)
    assert out.loss == pytest.approx(brute_force_ncm(z, labels, z, labels, c, 0.1), abs=1e-6)
    assert out.n_skipped == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(1, 40), st.integers(1, 8), st.integers(2, 6), st.integers(0, 2**31))
def test_oca_equals_direct_nca(n, q, c, d, seed):
    rng = np.random.default_rng(seed)
    z, labels = unit(rng, n, d), rng.integers(0, c, n)
    bank = MemoryBank(q, d, np.float64)
    bank.push(unit(rng, q, d), rng.integers(0, c, q))
    bz, bl = bank.contents()
    try:
        out = oca_loss(z, labels, bank, 0.1)
    except EmptyMemoryError:
        assert not np.isin(labels, bl).any()
        return
    assert out.loss == pytest.approx(direct_nca(z, labels, bz, bl, 0.1), abs=1e-6)
    assert out.n_skipped == int(np.sum(~np.isin(labels, bl)))


def test_ocm_skips_absent_classes_and_counts_them():
    rng = np.random.default_rng(0)
    bank = MemoryBank(4, 3, np.float64)
    bank.push(unit(rng, 4, 3), [0, 0, 1, 1])
    z = unit(rng, 3, 3)
    out = ocm_loss(z, [0, 2, 1], compute_prototypes(bank, 3), 0.1)
    assert out.n_skipped == 1
    assert np.all(out.grad_z[1] == 0)
    with pytest.raises(EmptyMemoryError):
        ocm_loss(z, [2, 2, 2], compute_prototypes(bank, 3), 0.1)
    with pytest.raises(EmptyMemoryError):
        oca_loss(z, [0], MemoryBank(4, 3, np.float64), 0.1)


def test_memory_bank_matches_reference_queue():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        cap = int(rng.integers(1, 12))
        bank, ref = MemoryBank(cap, 2, np.float64), ReferenceQueue(cap)
        for _ in range(int(rng.integers(1, 6))):
            n = int(rng.integers(1, 2 * cap + 2))
            z, labels = unit(rng, n, 2), rng.integers(0, 5, n)
            bank.push(z, labels)
            ref.push(z, labels)
        bz, bl = bank.contents()
        rz, rl = ref.contents()
        assert np.array_equal(bz, rz) and np.array_equal(bl, rl)
        assert len(bank) == len(ref.items)


def test_memory_bank_contracts():
    bank = MemoryBank(4, 2, np.float64)
    with pytest.raises(ValueError, match="global"):
        bank.push(np.array([[1.0, 0.0]]), [0], source="local")
    with pytest.raises(ValueError, match="unit"):
        bank.push(np.array([[2.0, 0.0]]), [0])
    bank.push(np.array([[1.0, 0.0], [0.0, 1.0]]), [1, 2])
    clone = MemoryBank.from_state(bank.state())
    assert np.array_equal(clone.contents()[0], bank.contents()[0])
    assert clone.cursor == bank.cursor and len(clone) == 2


def test_prototypes_are_class_means():
    bank = MemoryBank(4, 2, np.float64)
    bank.push(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]]), [0, 0, 1, 1])
    p = compute_prototypes(bank, 3)
    np.testing.assert_allclose(p.means[0], [0.5, 0.5])
    np.testing.assert_allclose(p.normalized[0], [np.sqrt(0.5), np.sqrt(0.5)])
    assert p.present.tolist() == [True, True, False]
    assert p.counts.tolist() == [2, 2, 0]


def test_memory_capacity_rule():
    assert LossConfig().capacity(1000) == 8000
    assert LossConfig(memory_size=8192).capacity(1000) == 8192
    assert LossConfig().effective_temperature == 0.1
    assert LossConfig(kind="vanilla_ce").effective_temperature == 1.0
