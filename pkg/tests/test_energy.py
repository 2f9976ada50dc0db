import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confidence_energy.conformal import PValueTables, instance_p_tables
from confidence_energy.energy import (
    CERN1,
    CERN2,
    Assignment,
    EnergyParams,
    GraphInstance,
    InvalidStateError,
    Truth,
    accumulate,
    aggregate_vectors,
    compact_energy,
    confidence_penalty,
    load_instances,
    load_params,
    params_from_dict,
    params_to_dict,
    raw_energy,
    regularized_energy,
    save_instances,
    save_params,
)

from .helpers import random_instance, random_params, random_records, store_from_records
from .oracles import term_energy


def _random_assignment(rng, inst, n_events=4, kv=3, ke=3):
    return Assignment(
        int(rng.integers(n_events)),
        [int(rng.integers(kv)) for _ in range(inst.n_nodes)],
        [int(rng.integers(ke)) for _ in range(inst.n_edges)],
    )


def _random_tables(rng, inst, n_events=4, kv=3, ke=3):
    return PValueTables(
        rng.uniform(1e-3, 1.0, (inst.n_nodes, n_events, kv)),
        rng.uniform(1e-3, 1.0, (inst.n_edges, n_events, ke)).reshape(inst.n_edges, n_events, ke),
        rng.uniform(1e-3, 1.0, n_events),
    )


def _ones_tables(inst, n_events=4, kv=3, ke=3):
    return PValueTables(
        np.ones((inst.n_nodes, n_events, kv)), np.ones((inst.n_edges, n_events, ke)), np.ones(n_events)
    )


@pytest.fixture
def store(rng):
    return store_from_records(random_records(rng, 300, 4, 3, 3), 4, 3, 3)


class TestGraphInstance:
    def test_rows_must_be_normalized(self):
        with pytest.raises(ValueError, match="node 1 potential"):
            GraphInstance([[0.5, 0.5], [0.5, 0.6]], [], [], n_edge_labels=2)

    def test_edges_validated(self):
        with pytest.raises(ValueError, match="edge 0"):
            GraphInstance([[1.0, 0.0]] * 2, [(0, 0)], [[1.0, 0.0]])
        with pytest.raises(ValueError, match="edge 0"):
            GraphInstance([[1.0, 0.0]] * 2, [(0, 2)], [[1.0, 0.0]])
        with pytest.raises(ValueError, match="one edge potential row"):
            GraphInstance([[1.0, 0.0]] * 2, [(0, 1)], np.zeros((0, 2)), n_edge_labels=2)

    def test_truth_validated(self):
        with pytest.raises(ValueError):
            GraphInstance([[1.0, 0.0]], [], [], n_edge_labels=2, truth=Truth(0, (5,), ()))

    def test_argmax_labels_lowest_on_ties(self):
        inst = GraphInstance([[0.5, 0.5], [0.2, 0.8]], [(0, 1)], [[1 / 3, 1 / 3, 1 / 3]])
        nodes, edges = inst.argmax_labels()
        assert tuple(nodes) == (0, 1) and tuple(edges) == (0,)

    def test_round_trip(self, rng, tmp_path):
        instances = [random_instance(rng, instance_id=f"i{k}") for k in range(5)]
        instances.append(random_instance(rng, with_event=False, with_truth=False, instance_id="bare"))
        save_instances(instances, tmp_path / "x.jsonl")
        assert load_instances(tmp_path / "x.jsonl") == instances

    def test_loader_names_line(self, tmp_path):
        path = tmp_path / "x.jsonl"
        path.write_text('{"node_potentials": [[1.0, 0.0]], "n_edge_labels": 2}\n{"node_potentials": [[0.2, 0.2]], "n_edge_labels": 2}\n')
        with pytest.raises(ValueError, match=":2:"):
            load_instances(path)


class TestEnergyParams:
    def test_negative_multiplier_rejected(self):
        with pytest.raises(ValueError, match="lambda_edge"):
            EnergyParams.zeros(2, 2, 2, lambda_edge=-0.1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="disagree"):
            EnergyParams(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros(2))

    def test_round_trip(self, rng, tmp_path):
        params = random_params(rng, mode=CERN1)
        save_params(params, tmp_path / "p.json")
        assert load_params(tmp_path / "p.json") == params

    def test_loader_rejects_dimension_mismatch(self, rng):
        d = params_to_dict(random_params(rng))
        d["n_node_labels"] = 4
        with pytest.raises(ValueError, match="declared dimensions"):
            params_from_dict(d)

    def test_cern2_needs_event_row(self, rng):
        inst = random_instance(rng, with_event=False)
        params = random_params(rng)
        with pytest.raises(InvalidStateError):
            raw_energy(inst, params, _random_assignment(rng, inst))
        assert math.isfinite(raw_energy(inst, params.copy(mode=CERN1), _random_assignment(rng, inst)))


class TestRawEnergy:
    def test_zero_weights(self, rng):
        inst = random_instance(rng)
        params = EnergyParams.zeros(4, 3, 3)
        assert raw_energy(inst, params, _random_assignment(rng, inst)) == 0.0

    def test_single_term(self):
        inst = GraphInstance([[0.3, 0.7]], [], [], n_edge_labels=2)
        params = EnergyParams(np.ones((1, 2)), np.ones((1, 2)), np.ones(1), mode=CERN1)
        assert raw_energy(inst, params, Assignment(0, [1], [])) == 0.7

    def test_term_by_term(self, rng):
        for _ in range(50):
            inst = random_instance(rng, min_nodes=2, max_nodes=2, max_edges=1)
            params = random_params(rng)
            a = _random_assignment(rng, inst)
            oracle = term_energy(inst, params.w_node, params.w_edge, params.w_event, (0, 0, 0), True,
                                 a.event_class, a.node_labels, a.edge_labels, _ones_tables(inst))
            assert raw_energy(inst, params, a) == pytest.approx(oracle, abs=1e-12)

    def test_assignment_validated(self, rng):
        inst = random_instance(rng, min_nodes=2)
        params = random_params(rng)
        with pytest.raises(ValueError, match="one label per node"):
            raw_energy(inst, params, Assignment(0, [0], [0] * inst.n_edges))
        with pytest.raises(ValueError, match="out of range"):
            raw_energy(inst, params, Assignment(7, [0] * inst.n_nodes, [0] * inst.n_edges))


class TestRegularizedEnergy:
    def test_zero_multipliers(self, rng, store):
        inst = random_instance(rng)
        params = random_params(rng, lambdas=(0, 0, 0))
        a = _random_assignment(rng, inst)
        tables = instance_p_tables(store, inst)
        assert regularized_energy(inst, params, a, tables) == raw_energy(inst, params, a)

    def test_unit_p_values(self, rng):
        inst = random_instance(rng)
        params = random_params(rng)
        a = _random_assignment(rng, inst)
        assert regularized_energy(inst, params, a, _ones_tables(inst)) == raw_energy(inst, params, a)

    def test_tabulated_oracle(self, rng):
        for _ in range(50):
            inst = random_instance(rng, min_nodes=3, max_nodes=3)
            params = random_params(rng)
            a = _random_assignment(rng, inst)
            tables = _random_tables(rng, inst)
            oracle = term_energy(inst, params.w_node, params.w_edge, params.w_event, params.lambdas, True,
                                 a.event_class, a.node_labels, a.edge_labels, tables)
            assert regularized_energy(inst, params, a, tables) == pytest.approx(oracle, abs=1e-12)

    def test_nonpositive_p_rejected(self, rng):
        inst = random_instance(rng)
        tables = _ones_tables(inst)
        tables.node[0, :, :] = 0.0
        a = _random_assignment(rng, inst)
        with pytest.raises(ValueError, match="not positive"):
            regularized_energy(inst, random_params(rng), a, tables)

    def test_cern1_ignores_event_terms(self, rng, store):
        inst = random_instance(rng)
        params = random_params(rng, mode=CERN1)
        a = _random_assignment(rng, inst)
        tables = instance_p_tables(store, inst)
        other = params.copy(w_event=params.w_event + 5.0, lambda_event=3.0)
        assert regularized_energy(inst, params, a, tables) == regularized_energy(inst, other, a, tables)

    def test_cern2_with_zero_event_terms_equals_cern1(self, rng, store):
        for _ in range(50):
            inst = random_instance(rng)
            p2 = random_params(rng).copy(lambda_event=0.0)
            p2.w_event[:] = 0.0
            p1 = p2.copy(mode=CERN1)
            a = _random_assignment(rng, inst)
            tables = instance_p_tables(store, inst)
            assert abs(regularized_energy(inst, p2, a, tables) - regularized_energy(inst, p1, a, tables)) <= 1e-12

    def test_penalty_is_half_fisher(self, rng, store):
        from confidence_energy.conformal import fisher_statistic

        inst = random_instance(rng)
        a = _random_assignment(rng, inst)
        t = instance_p_tables(store, inst)
        ps = [t.node[i, a.event_class, y] for i, y in enumerate(a.node_labels)]
        ps += [t.edge[k, a.event_class, y] for k, y in enumerate(a.edge_labels)]
        ps.append(t.event[a.event_class])
        penalty = confidence_penalty(inst, random_params(rng), a, t)
        assert penalty == pytest.approx(fisher_statistic(ps) / 2.0, rel=1e-12)


class TestAggregates:
    def test_single_label_group(self, rng):
        inst = random_instance(rng, min_nodes=3)
        a = Assignment(0, [0] * inst.n_nodes, [0] * inst.n_edges)
        agg = aggregate_vectors(inst, a, _ones_tables(inst))
        assert np.count_nonzero(agg.node_psi) == 1
        assert agg.node_psi[0] == pytest.approx(inst.node_potentials[:, 0].sum(), abs=1e-15)

    def test_empty_edge_set(self, rng):
        inst = random_instance(rng, max_edges=0)
        agg = aggregate_vectors(inst, _random_assignment(rng, inst), _random_tables(rng, inst))
        assert np.all(agg.edge_psi == 0) and np.all(agg.edge_logp == 0)
        assert agg.edge_psi.shape == (3,)

    def test_logp_is_sum_of_logs(self, rng):
        inst = random_instance(rng, min_nodes=3)
        a = Assignment(1, [2] * inst.n_nodes, [0] * inst.n_edges)
        tables = _random_tables(rng, inst)
        agg = aggregate_vectors(inst, a, tables)
        expect = math.fsum(math.log(tables.node[i, 1, 2]) for i in range(inst.n_nodes))
        assert agg.node_logp[2] == pytest.approx(expect, abs=1e-12)

    @pytest.mark.parametrize("mode", [CERN1, CERN2])
    def test_reconstruction(self, rng, mode):
        for _ in range(50):
            inst = random_instance(rng)
            params = random_params(rng, mode=mode)
            a = _random_assignment(rng, inst)
            tables = _random_tables(rng, inst)
            agg = aggregate_vectors(inst, a, tables)
            assert compact_energy(params, a.event_class, agg) == pytest.approx(
                regularized_energy(inst, params, a, tables), abs=1e-12
            )


class TestEnergyProperties:
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
    def test_uniform_scaling(self, seed, factor):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng)
        params = random_params(rng)
        a = _random_assignment(rng, inst)
        tables = _random_tables(rng, inst)
        e = regularized_energy(inst, params, a, tables)
        scaled = regularized_energy(inst, params.scaled(factor), a, tables)
        assert scaled == pytest.approx(factor * e, rel=1e-12, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_linear_in_each_weight(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng)
        params = random_params(rng)
        a = _random_assignment(rng, inst)
        tables = _random_tables(rng, inst)
        c, y = a.event_class, a.node_labels[0]
        energies = []
        for delta in (0.0, 1.0, 2.0):
            p = params.copy()
            p.w_node[c, y] += delta
            energies.append(regularized_energy(inst, p, a, tables))
        assert energies[2] - energies[1] == pytest.approx(energies[1] - energies[0], abs=1e-9)
        lam = [regularized_energy(inst, params.copy(lambda_node=v), a, tables) for v in (0.0, 1.0, 2.0)]
        assert lam[2] - lam[1] == pytest.approx(lam[1] - lam[0], abs=1e-9)

    @given(st.integers(0, 2**32 - 1))
    def test_single_node_change_is_local(self, seed):
        rng = np.random.default_rng(seed)
        inst = random_instance(rng)
        params = random_params(rng)
        a = _random_assignment(rng, inst)
        tables = _random_tables(rng, inst)
        i = int(rng.integers(inst.n_nodes))
        y_new = int(rng.integers(3))
        labels = list(a.node_labels)
        y_old, labels[i] = labels[i], y_new
        b = Assignment(a.event_class, labels, a.edge_labels)
        c = a.event_class

        def term(y):
            return params.w_node[c, y] * inst.node_potentials[i, y] - params.lambda_node * math.log(tables.node[i, c, y])

        delta = regularized_energy(inst, params, b, tables) - regularized_energy(inst, params, a, tables)
        assert delta == pytest.approx(term(y_new) - term(y_old), abs=1e-9)


class TestAccumulate:
    def test_small_sequential(self):
        terms = [0.1] * 10
        total = 0.0
        for t in terms:
            total += t
        assert accumulate(terms) == total

    def test_large_pairwise_accuracy(self):
        terms = [0.1] * 1000
        assert abs(accumulate(terms) - 100.0) <= abs(sum(terms) - 100.0)
        assert accumulate(terms) == pytest.approx(100.0, rel=1e-14)
