"""Random builders shared by the test modules."""

import itertools

import numpy as np

from confidence_energy.conformal import CalibrationRecord, CalibrationStore, instance_p_tables
from confidence_energy.energy import CERN2, Assignment, EnergyParams, GraphInstance, Truth, regularized_energy
from confidence_energy.learning import loss, loss_subgradient


def simplex_row(rng, k, peak=None, strength=0.0):
    row = rng.dirichlet(np.ones(k))
    if peak is not None:
        row = strength * np.eye(k)[peak] + (1.0 - strength) * row
    return row / row.sum()


def random_instance(rng, n_events=4, n_node_labels=3, n_edge_labels=3, max_nodes=4, max_edges=3,
                    with_event=True, with_truth=True, instance_id="x", min_nodes=1):
    n_nodes = int(rng.integers(min_nodes, max_nodes + 1))
    pairs = list(itertools.combinations(range(n_nodes), 2))
    n_edges = int(rng.integers(0, min(max_edges, len(pairs)) + 1))
    chosen = [pairs[k] for k in rng.permutation(len(pairs))[:n_edges]]
    c = int(rng.integers(n_events))
    ys = [int(rng.integers(n_node_labels)) for _ in range(n_nodes)]
    ye = [int(rng.integers(n_edge_labels)) for _ in range(n_edges)]
    strength = float(rng.uniform(0.0, 0.8))
    return GraphInstance(
        node_potentials=[simplex_row(rng, n_node_labels, y, strength) for y in ys],
        edges=np.array(chosen, dtype=np.int64).reshape(-1, 2),
        edge_potentials=np.array([simplex_row(rng, n_edge_labels, y, strength) for y in ye]).reshape(
            -1, n_edge_labels
        ),
        event_potential=simplex_row(rng, n_events, c, strength) if with_event else None,
        truth=Truth(c, tuple(ys), tuple(ye)) if with_truth else None,
        instance_id=instance_id,
        n_edge_labels=n_edge_labels,
        n_events=n_events,
    )


def random_records(rng, n_records, n_events, n_node_labels, n_edge_labels, n_sources=10, discrete=False):
    """Plain record tuples ``(level, c, y, alpha, source)``; ``discrete`` forces ties."""
    levels = rng.choice(["node", "edge", "event"], size=n_records)
    out = []
    for level in levels:
        c = int(rng.integers(n_events))
        if level == "node":
            y = int(rng.integers(n_node_labels))
        elif level == "edge":
            y = int(rng.integers(n_edge_labels))
        else:
            y = c
        a = float(rng.integers(0, 11)) / 10.0 if discrete else float(rng.random())
        out.append((str(level), c, y, a, f"s{int(rng.integers(n_sources))}"))
    return out


def store_from_records(records, n_events, n_node_labels, n_edge_labels, epsilon=None):
    store = CalibrationStore(n_node_labels, n_edge_labels, n_events, epsilon)
    store.extend(CalibrationRecord(*r) for r in records)
    return store.seal()


def random_params(rng, n_events=4, n_node_labels=3, n_edge_labels=3, lambdas=None, mode=CERN2, scale=2.0):
    if lambdas is None:
        lambdas = rng.uniform(0.0, 2.0, size=3)
    return EnergyParams(
        rng.normal(0, scale, (n_events, n_node_labels)),
        rng.normal(0, scale, (n_events, n_edge_labels)),
        rng.normal(0, scale, n_events),
        *[float(v) for v in lambdas],
        mode=mode,
    )


def separable_set(n=20, seed=0, n_events=3):
    """Scenes whose labels and event rows all point at their event class."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        c = k % n_events
        n_nodes = int(rng.integers(2, 5))
        nodes = [0.8 * np.eye(n_events)[c] + 0.2 * rng.dirichlet(np.ones(n_events)) for _ in range(n_nodes)]
        event = 0.8 * np.eye(n_events)[c] + 0.2 * rng.dirichlet(np.ones(n_events))
        out.append(GraphInstance(nodes, [], [], event_potential=event, truth=Truth(c, (c,) * n_nodes, ()),
                                 instance_id=f"toy-{k}", n_edge_labels=2, n_events=n_events))
    return out


def fd_check(inst, params, store, step=1e-5, guard=1e-3):
    """Max relative error between the subgradient and central differences, or None near a kink."""
    tables = instance_p_tables(store, inst, exclude_source=inst.instance_id)
    truth = inst.truth
    nodes, edges = inst.argmax_labels()
    good = Assignment(truth.event_class, truth.node_labels, truth.edge_labels)
    e_good = regularized_energy(inst, params, good, tables)
    others = sorted(regularized_energy(inst, params, Assignment(c, nodes, edges), tables)
                    for c in range(params.n_events) if c != truth.event_class)
    if abs(e_good - others[0] + 1.0) < guard or (len(others) > 1 and others[1] - others[0] < guard):
        return None
    grad = loss_subgradient(inst, params, store, train_lambdas=True, p_tables=tables)
    worst = 0.0
    coords = [("w_node", idx) for idx in np.ndindex(params.w_node.shape)]
    coords += [("w_edge", idx) for idx in np.ndindex(params.w_edge.shape)]
    coords += [("w_event", idx) for idx in np.ndindex(params.w_event.shape)]
    coords += [(name, None) for name in ("lambda_node", "lambda_edge", "lambda_event")]
    for name, idx in coords:
        sides = []
        for sign in (1.0, -1.0):
            p = params.copy()
            if idx is None:
                setattr(p, name, getattr(p, name) + sign * step)
            else:
                getattr(p, name)[idx] += sign * step
            sides.append(loss(inst, p, store, p_tables=tables))
        fd = (sides[0] - sides[1]) / (2.0 * step)
        g = getattr(grad, name) if idx is None else getattr(grad, name)[idx]
        if g == 0.0:
            assert abs(fd) < 1e-8, (name, idx, fd)
            continue
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd)))
    return worst
