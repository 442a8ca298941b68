import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import hsic_bruteforce
from paramtta import numerics as nx
from paramtta.adapter import (
    AdapterSite,
    DisentangledFeatures,
    adapter_forward,
    adapter_loss,
    centering_matrix,
    hsic,
    median_sigma,
    orth_loss,
)
from paramtta.numerics import DimensionError, Tensor


def feats(a, b) -> DisentangledFeatures:
    return DisentangledFeatures(Tensor(np.asarray(a, float)), Tensor(np.asarray(b, float)))


def random_site(rng, d=6, r1=2, r2=3, scale=0.5) -> AdapterSite:
    return AdapterSite(rng.normal(size=(d, d)), rng.normal(size=(d, r1)) * scale, rng.normal(size=(r1, d)) * scale,
                       rng.normal(size=(d, r2)) * scale, rng.normal(size=(r2, d)) * scale)


# -- adapter_forward ---------------------------------------------------------------

def test_zero_factors_bit_identical_to_base():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(5, 5))
    site = AdapterSite(W, np.zeros((5, 2)), np.zeros((2, 5)), np.zeros((5, 2)), np.zeros((2, 5)))
    x = rng.normal(size=(3, 5))
    y, _ = adapter_forward(x, site)
    assert np.array_equal(y.data, x @ W)


def test_fresh_init_is_exact_identity_perturbation():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(8, 8))
    site = AdapterSite.init(W, 2, 2, rng)
    x = rng.normal(size=(4, 8))
    assert np.array_equal(adapter_forward(x, site)[0].data, x @ W)


def test_copied_paths_cancel():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(4, 2)), rng.normal(size=(2, 4))
    W = rng.normal(size=(4, 4))
    site = AdapterSite(W, A, B, A.copy(), B.copy())
    x = rng.normal(size=(3, 4))
    assert np.allclose(adapter_forward(x, site)[0].data, x @ W, atol=1e-12)


def test_matches_explicit_updated_weight():
    rng = np.random.default_rng(3)
    site = random_site(rng, d=2, r1=1, r2=1)
    W_up = site.W_b.data + site.A_inv.data @ site.B_inv.data - site.A_sp.data @ site.B_sp.data
    x = rng.normal(size=(5, 2))
    y, f = adapter_forward(x, site)
    assert np.allclose(y.data, x @ W_up, atol=1e-12)
    assert np.allclose(site.effective_weight(), W_up)
    assert np.allclose(f.F_inv.data, x @ site.A_inv.data @ site.B_inv.data)


def test_width_mismatch():
    site = random_site(np.random.default_rng(4), d=4)
    with pytest.raises(DimensionError):
        adapter_forward(np.ones((2, 5)), site)


def test_parameter_count_and_low_rank_efficiency():
    site = AdapterSite.init(np.eye(32), 4, 4, np.random.default_rng(5))
    assert site.parameter_count == 32 * (4 + 4) * 2
    small = AdapterSite.init(np.eye(32), 3, 4, np.random.default_rng(5))  # r1 + r2 < d/2
    assert small.parameter_count < 32 * 32


def test_plain_variant_has_same_budget():
    rng = np.random.default_rng(6)
    dual = AdapterSite.init(np.eye(8), 2, 2, rng)
    plain = AdapterSite.init(np.eye(8), 2, 2, rng, variant="plain")
    assert plain.parameter_count == dual.parameter_count
    assert adapter_forward(np.ones((2, 8)), plain)[1] is None


def test_vector_and_record_roundtrip():
    site = random_site(np.random.default_rng(7))
    v = site.to_vector()
    clone = AdapterSite.from_record(json.loads(json.dumps(site.to_record())))
    assert np.array_equal(clone.to_vector(), v)
    clone.load_vector(v * 2)
    assert np.array_equal(clone.to_vector(), v * 2)
    with pytest.raises(DimensionError):
        clone.load_vector(v[:-1])


def test_rank_bounds():
    with pytest.raises(ValueError):
        AdapterSite(np.eye(2), np.ones((2, 3)), np.ones((3, 2)), np.ones((2, 1)), np.ones((1, 2)))


# -- orth_loss -----------------------------------------------------------------------

def test_orth_examples():
    # columns of F_inv lie along e1 of R^n, columns of F_sp along e2
    assert orth_loss(feats([[1, 2], [0, 0]], [[0, 0], [3, 1]])).item() == 0.0
    assert orth_loss(feats([[1, 0]], [[1, 0]])).item() == 1.0


def test_orth_homogeneity():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    base = orth_loss(feats(a, b)).item()
    assert orth_loss(feats(a, 2.5 * b)).item() == pytest.approx(2.5**2 * base, rel=1e-12)


def test_orth_zero_iff_cross_product_zero():
    rng = np.random.default_rng(9)
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    # rows of F_inv in span(Q[:, :3]) and F_sp in span(Q[:, 3:]) do NOT make F_inv^T F_sp vanish;
    # columns do: F_inv^T F_sp = 0 when the column spaces are orthogonal
    F_inv = Q[:, :2] @ rng.normal(size=(2, 4))
    F_sp = Q[:, 2:4] @ rng.normal(size=(2, 4))
    assert orth_loss(feats(F_inv, F_sp)).item() < 1e-24
    F_sp2 = F_sp + 0.1 * F_inv
    assert orth_loss(feats(F_inv, F_sp2)).item() > 1e-6


# -- centering matrix ----------------------------------------------------------------

def test_centering_matrix():
    assert np.array_equal(centering_matrix(2).data, [[0.5, -0.5], [-0.5, 0.5]])
    H = centering_matrix(7).data
    assert np.allclose(H @ np.ones(7), 0.0, atol=1e-15)
    assert np.max(np.abs(H @ H - H)) < 1e-12
    assert np.array_equal(H, H.T)
    with pytest.raises(ValueError):
        centering_matrix(1)


# -- hsic ---------------------------------------------------------------------------

def test_hsic_hand_case():
    f = feats([[1, 0], [0, 0]], [[1, 0], [0, 0]])
    assert abs(hsic(f).item() - 0.25) < 1e-12


def test_hsic_constant_sp_is_zero():
    rng = np.random.default_rng(10)
    F_inv = rng.normal(size=(6, 3))
    F_sp = np.tile(rng.normal(size=(1, 3)), (6, 1))
    assert abs(hsic(feats(F_inv, F_sp)).item()) < 1e-12
    assert abs(hsic(feats(F_inv, F_sp), "rbf", 1.3).item()) < 1e-12


@pytest.mark.parametrize("kernel", ["linear", "rbf"])
def test_hsic_matches_bruteforce(kernel):
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    sigma = 1.7
    got = hsic(feats(a, b), kernel, sigma).item()
    assert abs(got - hsic_bruteforce(a, b, kernel, sigma)) < 1e-10


def test_hsic_rbf_median_default_and_bad_sigma():
    rng = np.random.default_rng(12)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    f = feats(a, b)
    # the median heuristic is applied to each feature set separately
    want = hsic_bruteforce(a, b, "rbf", (median_sigma(a), median_sigma(b)))
    assert abs(hsic(f, "rbf").item() - want) < 1e-10
    with pytest.raises(ValueError):
        hsic(f, "rbf", 0.0)
    with pytest.raises(ValueError):
        hsic(feats([[1.0, 2.0]], [[1.0, 2.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 10_000), st.floats(-3, 3))
def test_hsic_symmetric_and_offset_invariant(n, d, seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    h = hsic(feats(a, b)).item()
    assert hsic(feats(b, a)).item() == pytest.approx(h, abs=1e-10)
    assert hsic(feats(a + c, b)).item() == pytest.approx(h, abs=1e-9)
    assert hsic(feats(a, b - c)).item() == pytest.approx(h, abs=1e-9)


# -- adapter_loss ---------------------------------------------------------------------

def test_adapter_loss_composition():
    f = feats([[1, 0], [0, 0]], [[1, 0], [0, 0]])
    assert adapter_loss(f, 0.0, 0.0).item() == 0.0
    assert adapter_loss(f, 1.0, 0.0).item() == orth_loss(f).item() == 1.0
    assert adapter_loss(f, 0.5, 2.0).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        adapter_loss(f, -0.1, 1.0)


# -- gradients ----------------------------------------------------------------------

def test_adapter_loss_gradient_fd():
    rng = np.random.default_rng(13)
    site = random_site(rng, d=5, r1=2, r2=2)
    x = Tensor(rng.normal(size=(4, 5)))

    def f():
        y, fe = adapter_forward(x, site)
        return nx.reduce_sum(nx.tanh(y)) + adapter_loss(fe, 0.5, 0.5, "rbf", 2.0)

    assert nx.gradient_check(f, site.factors()) < 1e-4


def test_base_weight_receives_no_gradient():
    rng = np.random.default_rng(14)
    site = random_site(rng)
    y, fe = adapter_forward(rng.normal(size=(3, 6)), site)
    (nx.reduce_sum(y) + orth_loss(fe)).backward()
    assert site.W_b.grad is None
    assert all(p.grad is not None for p in site.factors())
