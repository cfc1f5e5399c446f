import math

import numpy as np
import pytest

from voxwalk.selection import select
from voxwalk.walker import (
    CompactGraph,
    IntensityVolume,
    SolverError,
    assemble,
    build_system,
    edge_weight,
    refine,
    solve,
)

from oracles import dense_system_oracle, walker_energy_oracle


def test_edge_weight_examples():
    assert edge_weight(0.4, 0.4, 50.0) == 1.0
    assert edge_weight(0.1, 0.9, 0.0) == 1.0
    assert math.isclose(edge_weight(0.3, 0.4, 100.0), math.exp(-1.0), rel_tol=1e-12)
    assert math.isclose(edge_weight(0.3, 0.4, 100.0), 0.367879, rel_tol=1e-5)


def test_edge_weight_rejects_negative_beta():
    with pytest.raises(ValueError, match="beta"):
        edge_weight(0.1, 0.2, -1.0)


def single_candidate_graph(p=0.7):
    return CompactGraph(
        dims=(1, 1, 1),
        candidates=np.array([0]),
        edges=np.zeros((0, 2), dtype=np.int64),
        edge_weights=np.zeros(0),
        unary_fg=np.array([[p]]),
        unary_bg=np.array([[1.0 - p]]),
    )


def test_single_candidate_closed_form():
    sol = solve(single_candidate_graph(0.7), tol=1e-12)
    assert abs(sol.x[0] - 0.49 / 0.58) <= 1e-10
    assert sol.labels[0] == 1


def test_three_node_chain_matches_dense_solve():
    graph = CompactGraph(
        dims=(3, 1, 1),
        candidates=np.arange(3),
        edges=np.array([[0, 1], [1, 2]]),
        edge_weights=np.array([0.8, 0.6]),
        unary_fg=np.array([[0.9], [0.5], [0.2]]),
        unary_bg=np.array([[0.1], [0.5], [0.8]]),
    )
    a, b = dense_system_oracle(graph)
    want = np.linalg.solve(a, b)
    sol = solve(graph, tol=1e-13)
    assert np.allclose(sol.x, want, atol=1e-10)


def test_all_foreground_priors_give_ones():
    graph = CompactGraph(
        dims=(2, 2, 1),
        candidates=np.arange(4),
        edges=np.array([[0, 1], [1, 2], [2, 3]]),
        edge_weights=np.array([0.5, 0.9, 0.3]),
        unary_fg=np.ones((4, 2)),
        unary_bg=np.zeros((4, 2)),
    )
    sol = solve(graph, tol=1e-12)
    assert np.allclose(sol.x, 1.0, atol=1e-10)
    assert np.all(sol.labels == 1)


def test_strong_edge_pulls_values_together():
    graph = CompactGraph(
        dims=(2, 1, 1),
        candidates=np.arange(2),
        edges=np.array([[0, 1]]),
        edge_weights=np.array([1.0]),
        unary_fg=np.array([[0.9], [0.1]]),
        unary_bg=np.array([[0.1], [0.9]]),
    )
    strong = solve(graph, tol=1e-12)
    graph.edge_weights = np.array([0.01])
    weak = solve(graph, tol=1e-12)
    assert abs(strong.x[0] - strong.x[1]) < abs(weak.x[0] - weak.x[1])


def random_graph(rng, max_candidates=50):
    """Random selection over a small random scene via the real assembly path."""
    dims = tuple(rng.integers(2, 5, size=3))
    k = int(rng.integers(1, 4))
    maps = rng.random((k,) + dims)
    intensity = rng.random(dims)
    n_vox = int(np.prod(dims))
    theta = 1.0 - min(max_candidates, n_vox - 1) / n_vox
    sel = select(maps, theta)
    return assemble(sel, maps, intensity, beta=float(rng.uniform(0, 150)),
                    include_dirichlet=bool(rng.integers(0, 2)))


def test_solve_agrees_with_dense_direct_solver():
    rng = np.random.default_rng(0)
    for _ in range(100):
        graph = random_graph(rng)
        if graph.n_candidates == 0:
            continue
        a, b = dense_system_oracle(graph)
        want = np.linalg.solve(a, b)
        sol = solve(graph, tol=1e-12)
        assert np.max(np.abs(sol.x - want)) <= 1e-8
        assert sol.x.min() >= 0.0 and sol.x.max() <= 1.0


def test_sparse_system_matches_dense_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        graph = random_graph(rng)
        a, b = build_system(graph)
        a0, b0 = dense_system_oracle(graph)
        assert np.allclose(a.toarray(), a0, atol=1e-12)
        assert np.allclose(b, b0, atol=1e-12)


def test_system_is_m_matrix():
    rng = np.random.default_rng(2)
    for _ in range(20):
        graph = random_graph(rng)
        a, _ = build_system(graph)
        dense = a.toarray()
        assert np.allclose(dense, dense.T)
        off = dense - np.diag(np.diag(dense))
        assert np.all(off <= 0)
        assert np.all(np.diag(dense) - np.abs(off).sum(axis=1) > 0)


def test_solution_is_local_minimum_of_energy():
    rng = np.random.default_rng(3)
    graph = random_graph(rng)
    sol = solve(graph, tol=1e-12)
    base = walker_energy_oracle(graph, sol.x)
    for _ in range(100):
        delta = rng.normal(scale=1e-3, size=len(sol.x))
        assert walker_energy_oracle(graph, sol.x + delta) >= base - 1e-15


def test_solver_error_carries_residual():
    graph = single_candidate_graph(0.7)
    with pytest.raises(SolverError, match="residual"):
        solve(graph, tol=1e-16, max_iters=0)


def test_empty_candidate_set_is_noop():
    sol = solve(CompactGraph(
        dims=(1, 1, 2),
        candidates=np.zeros(0, dtype=np.int64),
        edges=np.zeros((0, 2), dtype=np.int64),
        edge_weights=np.zeros(0),
        unary_fg=np.zeros((0, 1)),
        unary_bg=np.zeros((0, 1)),
    ))
    assert len(sol.x) == 0 and sol.iterations == 0


def test_assemble_dimension_mismatch_rejected():
    rng = np.random.default_rng(4)
    maps = rng.random((1, 2, 2, 2))
    sel = select(maps, 0.5)
    with pytest.raises(ValueError, match="dims"):
        assemble(sel, maps, rng.random((3, 3, 3)), beta=100.0)
    with pytest.raises(ValueError, match="dims"):
        assemble(sel, rng.random((1, 3, 3, 3)), rng.random((2, 2, 2)), beta=100.0)


def test_assemble_normalizes_intensity():
    rng = np.random.default_rng(5)
    maps = rng.random((1, 2, 2, 2))
    sel = select(maps, 0.0)
    raw = rng.normal(100.0, 25.0, size=(2, 2, 2))
    g1 = assemble(sel, maps, raw, beta=100.0)
    g2 = assemble(sel, maps, IntensityVolume.from_raw(raw), beta=100.0)
    assert np.allclose(g1.edge_weights, g2.edge_weights)
    assert g1.edge_weights.min() > 0.0 and g1.edge_weights.max() <= 1.0


def test_intensity_normalization_record():
    vol = IntensityVolume.from_raw(np.array([[[2.0, 6.0]]]))
    assert vol.normalization == {"method": "min-max", "min": 2.0, "max": 6.0}
    assert np.allclose(vol.data, [[[0.0, 1.0]]])
    flat = IntensityVolume.from_raw(np.full((2, 2, 2), 3.0))
    assert np.all(flat.data == 0.0)


def test_dirichlet_terms_pull_toward_confident_labels():
    # one candidate voxel surrounded by confident foreground in a 3x1x1 line
    maps = np.array([[[[0.95]], [[0.5]], [[0.95]]]])  # middle voxel ambiguous
    sel = select(maps, 2.0 / 3.0)
    assert np.array_equal(sel.candidate_idx, [1])
    intensity = np.full((3, 1, 1), 0.5)
    with_d = refine(maps, intensity, 2.0 / 3.0, beta=100.0)
    assert with_d.labels[1, 0, 0] == 1  # neighbors vote foreground
    without = refine(maps, intensity, 2.0 / 3.0, beta=100.0, include_dirichlet=False)
    # with the boundary terms removed only the 0.5 unary remains: x = 0.5 -> 1
    assert without.x[1, 0, 0] == pytest.approx(0.5, abs=1e-9)
    assert without.labels[1, 0, 0] == 1


def test_refine_theta_one_is_thresholded_mean():
    rng = np.random.default_rng(6)
    maps = rng.random((2, 4, 4, 4))
    intensity = rng.random((4, 4, 4))
    out = refine(maps, intensity, 1.0, beta=100.0)
    want = (maps.mean(axis=0) >= 0.5).astype(np.uint8)
    assert np.array_equal(out.labels, want)


def test_refine_theta_zero_runs_full_lattice():
    rng = np.random.default_rng(7)
    maps = rng.random((1, 3, 3, 3))
    intensity = rng.random((3, 3, 3))
    out = refine(maps, intensity, 0.0, beta=0.0)
    sel = select(maps, 0.0)
    graph = assemble(sel, maps, intensity, beta=0.0)
    assert np.all(graph.edge_weights == 1.0)  # beta 0 makes every edge weight 1
    sol = solve(graph)
    assert np.allclose(out.x.reshape(-1), sol.x)


def test_refine_never_changes_confident_labels():
    rng = np.random.default_rng(8)
    maps = rng.random((2, 4, 4, 4))
    intensity = rng.random((4, 4, 4))
    theta = 0.9
    sel = select(maps, theta)
    out = refine(maps, intensity, theta, beta=100.0)
    assert np.array_equal(out.labels.reshape(-1)[sel.confident_idx],
                          sel.confident_labels)


def test_refine_invariant_to_map_order():
    rng = np.random.default_rng(9)
    maps = rng.random((3, 4, 4, 4))
    intensity = rng.random((4, 4, 4))
    a = refine(maps, intensity, 0.8, beta=100.0)
    b = refine(maps[[2, 0, 1]], intensity, 0.8, beta=100.0)
    assert np.array_equal(a.labels, b.labels)
    assert np.allclose(a.x, b.x, atol=1e-9)


def test_refine_removes_false_positive_blob():
    """An isolated low-confidence false-positive region in one map is erased
    once lattice smoothing and the second map weigh in."""
    dims = (8, 8, 8)
    truth = np.zeros(dims)
    truth[1:4, 1:4, 1:4] = 1.0
    intensity = 0.2 + 0.6 * truth
    good = np.clip(truth * 0.95 + 0.02, 0.0, 1.0)
    bad = good.copy()
    bad[5:7, 5:7, 5:7] = 0.68  # planted blob, low confidence, background intensity
    maps = np.stack([bad, good])
    fused = (maps.mean(axis=0) >= 0.5).astype(np.uint8)
    from voxwalk.metrics import dice

    out = refine(maps, intensity, 0.9, beta=100.0)
    blob = out.labels[5:7, 5:7, 5:7]
    assert blob.sum() == 0
    assert dice(out.labels, truth.astype(np.uint8)) >= dice(fused, truth.astype(np.uint8))
