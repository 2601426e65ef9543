import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rise_flock.errors import ValidationError
from rise_flock.graph import (
    GraphTopology,
    adjacency,
    check_pinned_connectivity,
    directed_edges,
    interaction_matrix,
    laplacian,
    spectral_summary,
)

ALTERNATE_PINNING = [1, 0, 1, 0, 1, 0, 1, 0]


@st.composite
def weighted_graphs(draw, max_n=6, max_dim=3):
    N = draw(st.integers(1, max_n))
    pairs = list(itertools.combinations(range(1, N + 1), 2))
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    weights = draw(st.lists(st.floats(0.1, 10.0), min_size=len(chosen), max_size=len(chosen)))
    pinning = draw(st.lists(st.integers(0, 1), min_size=N, max_size=N))
    n = draw(st.integers(1, max_dim))
    edges = [(i, j, w) for (i, j), w in zip(chosen, weights)]
    return GraphTopology.from_edges(N, edges, pinning, n)


def test_two_node_laplacian():
    topo = GraphTopology.from_edges(2, [(1, 2)], [0, 0], n=1)
    assert np.array_equal(laplacian(topo), [[1.0, -1.0], [-1.0, 1.0]])


def test_single_node_laplacian_is_zero():
    topo = GraphTopology.from_edges(1, [], [0], n=1)
    assert np.array_equal(laplacian(topo), [[0.0]])


def test_four_cycle_spectrum():
    topo = GraphTopology.cycle(4, [0, 0, 0, 0], n=1)
    # circulant closed form 2 - 2 cos(2 pi k / N)
    expected = np.sort(2 - 2 * np.cos(2 * np.pi * np.arange(4) / 4))
    assert np.allclose(np.sort(np.linalg.eigvalsh(laplacian(topo))), expected, atol=1e-12)
    assert np.allclose(expected, [0, 2, 2, 4], atol=1e-12)


@pytest.mark.parametrize(
    "edges, message",
    [([(1, 4)], "outside"), ([(2, 2)], "self-loop"), ([(1, 2, 0.0)], "nonpositive"), ([(1, 2), (2, 1)], "twice")],
)
def test_malformed_edges_rejected(edges, message):
    with pytest.raises(ValidationError, match=message):
        GraphTopology.from_edges(3, edges, [1, 0, 0])


def test_bad_pinning_rejected():
    with pytest.raises(ValidationError):
        GraphTopology.from_edges(2, [(1, 2)], [2, 0])
    with pytest.raises(ValidationError):
        GraphTopology.from_edges(2, [(1, 2)], [1])


def test_weights_default_to_one_and_roundtrip():
    topo = GraphTopology.from_edges(3, [(1, 2), (2, 3, 2.5)], [1, 0, 0])
    assert topo.weights == (1.0, 2.5)
    assert GraphTopology.from_dict(topo.to_dict()) == topo


def test_interaction_matrix_small_cases():
    one = interaction_matrix(GraphTopology.from_edges(1, [], [1], n=3))
    assert np.array_equal(one.H, np.eye(3))
    two = interaction_matrix(GraphTopology.from_edges(2, [(1, 2)], [1, 0], n=1))
    assert np.array_equal(two.H, [[2.0, -1.0], [-1.0, 1.0]])
    assert np.array_equal(two.B_kron, [[1.0, 0.0], [0.0, 0.0]])


def test_spectral_summary_identity():
    spec = spectral_summary(interaction_matrix(GraphTopology.from_edges(1, [], [1], n=3)))
    assert spec.lambda_min_H == spec.lambda_max_H == 1.0
    assert spec.lambda_min_Q == spec.lambda_max_Q == 1.0


def test_spectral_summary_two_node_closed_form():
    spec = spectral_summary(interaction_matrix(GraphTopology.from_edges(2, [(1, 2)], [1, 0], n=1)))
    # roots of x^2 - 3x + 1
    assert spec.lambda_min_H == pytest.approx((3 - np.sqrt(5)) / 2, abs=1e-14)
    assert spec.lambda_max_H == pytest.approx((3 + np.sqrt(5)) / 2, abs=1e-14)


def test_scenario_scenario_spectrum_matches_full_kronecker_solver():
    topo = GraphTopology.cycle(8, ALTERNATE_PINNING, n=3)
    inter = interaction_matrix(topo)
    assert inter.H.shape == (24, 24)
    spec = spectral_summary(inter)
    # independent route: general (non-symmetric) solver on the full 24 x 24 matrices
    full_h = np.sort(np.linalg.eigvals(inter.H).real)
    assert spec.lambda_min_H == pytest.approx(full_h[0], abs=1e-10)
    assert spec.lambda_max_H == pytest.approx(full_h[-1], abs=1e-10)
    full_imh2 = np.linalg.eigvals(np.eye(24) - inter.H @ inter.H).real
    assert spec.lambda_max_ImH2 == pytest.approx(full_imh2.max(), abs=1e-10)
    full_bmi = np.linalg.eigvals(inter.B_kron - np.eye(24)).real
    assert (spec.lambda_min_BmI, spec.lambda_max_BmI) == (full_bmi.min(), full_bmi.max())
    assert spec.lambda_min_H > 0
    assert spec.norm1_H == pytest.approx(np.abs(inter.H).sum(axis=0).max())


def test_pinned_connectivity_examples():
    assert check_pinned_connectivity(GraphTopology.cycle(8, ALTERNATE_PINNING))
    assert not check_pinned_connectivity(GraphTopology.from_edges(2, [], [1, 1]))
    assert not check_pinned_connectivity(GraphTopology.from_edges(3, [(1, 2), (2, 3)], [0, 0, 0]))


def _all_topologies(max_n):
    for N in range(1, max_n + 1):
        pairs = list(itertools.combinations(range(1, N + 1), 2))
        for mask in range(1 << len(pairs)):
            edges = [p for k, p in enumerate(pairs) if mask >> k & 1]
            for pin in itertools.product((0, 1), repeat=N):
                yield GraphTopology.from_edges(N, edges, pin, n=1)


def _every_component_pinned(topo):
    parent = list(range(topo.N))

    def find(v):
        while parent[v] != v:
            v = parent[v]
        return v

    for i, j in topo.edges:
        parent[find(i - 1)] = find(j - 1)
    pinned_roots = {find(i) for i in range(topo.N) if topo.pinning[i]}
    return all(find(i) in pinned_roots for i in range(topo.N))


def test_exhaustive_positive_definiteness():
    # L + B is positive definite exactly when every connected component holds a
    # pinned agent; connected-and-pinned is the sufficient special case
    count = 0
    for topo in _all_topologies(5):
        lam = spectral_summary(interaction_matrix(topo)).lambda_min_H
        assert (lam > 1e-9) == _every_component_pinned(topo), topo
        if check_pinned_connectivity(topo):
            assert lam > 1e-9, topo
        count += 1
    assert count == sum((1 << (N * (N - 1) // 2)) * (1 << N) for N in range(1, 6))


def test_disconnected_but_fully_pinned_is_positive_definite():
    topo = GraphTopology.from_edges(2, [], [1, 1], n=1)
    assert not check_pinned_connectivity(topo)
    assert spectral_summary(interaction_matrix(topo)).lambda_min_H == 1.0


@settings(max_examples=60, deadline=None)
@given(weighted_graphs(max_n=4))
def test_kronecker_acts_blockwise(topo):
    inter = interaction_matrix(topo)
    rng = np.random.default_rng(topo.N * 7 + topo.n)
    x = rng.normal(size=topo.N * topo.n)
    blockwise = (inter.base @ x.reshape(topo.N, topo.n)).ravel()
    assert np.max(np.abs(inter.H @ x - blockwise)) < 1e-12


@settings(max_examples=80, deadline=None)
@given(weighted_graphs())
def test_laplacian_rows_sum_to_zero(topo):
    L = laplacian(topo)
    assert np.max(np.abs(L.sum(axis=1))) <= 1e-14 * max(1.0, np.abs(L).max())
    assert np.array_equal(L, L.T)
    A = adjacency(topo)
    assert np.array_equal(A, A.T)


@settings(max_examples=60, deadline=None)
@given(weighted_graphs())
def test_spectral_invariants(topo):
    spec = spectral_summary(interaction_matrix(topo))
    assert spec.lambda_min_Q == min(1.0, spec.lambda_min_H)
    assert spec.lambda_max_Q == max(1.0, spec.lambda_max_H)
    assert spec.lambda_min_BmI in (-1.0, 0.0)
    assert spec.lambda_max_BmI in (-1.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(weighted_graphs())
def test_directed_edges_cover_each_edge_twice(topo):
    src, dst, w = directed_edges(topo)
    assert len(src) == 2 * len(topo.edges)
    assert np.all(np.diff(src) >= 0)
    A = adjacency(topo)
    assert np.allclose(A[src, dst], w)
