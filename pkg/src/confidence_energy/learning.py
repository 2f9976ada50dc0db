"""Margin training of the energy-layer weights.

The loss for a labelled instance is the hinge

    max(0, E~(truth) - E~(most violated) + 1)

where the most violated configuration keeps the argmax node/edge labels and
takes the best wrong event class. Training p-values are leave-one-out: the
instance's own calibration records are excluded.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .conformal import instance_p_tables
from .energy import CERN2, Assignment, EnergyParams, InvalidStateError, aggregate_vectors, regularized_energy
from .inference import most_violated

_RMS_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 0.9
    batch_size: int = 32
    max_iterations: int = 1000
    train_lambdas: bool = False
    seed: int = 0
    lambda_floor: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.batch_size < 1 or self.max_iterations < 1:
            raise ValueError("batch_size and max_iterations must be positive")
        if self.lambda_floor < 0:
            raise ValueError("lambda_floor must be nonnegative")


def _require_truth(instance):
    if instance.truth is None:
        raise InvalidStateError(f"instance {instance.instance_id!r} has no truth block")
    return instance.truth


def _truth_assignment(instance, argmax_nodes, argmax_edges):
    """Annotated labels when present, else the argmax labels (latent labels)."""
    t = instance.truth
    nodes = t.node_labels if t.node_labels is not None else argmax_nodes
    edges = t.edge_labels if t.edge_labels is not None else argmax_edges
    return Assignment(t.event_class, nodes, edges)


def _sides(instance, params, store, p_tables):
    truth = _require_truth(instance)
    if p_tables is None:
        p_tables = instance_p_tables(store, instance, exclude_source=instance.instance_id)
    violated = most_violated(instance, params, store, truth.event_class, p_tables=p_tables)
    nodes, edges = instance.argmax_labels()
    good = _truth_assignment(instance, nodes, edges)
    return good, violated.assignment, p_tables


def loss(instance, params, store, p_tables=None):
    """Hinge loss of one instance with leave-one-out p-values."""
    good, bad, tables = _sides(instance, params, store, p_tables)
    e_good = regularized_energy(instance, params, good, tables)
    e_bad = regularized_energy(instance, params, bad, tables)
    return max(0.0, e_good - e_bad + 1.0)


def _zero_like(params):
    return EnergyParams.zeros(
        params.n_events, params.n_node_labels, params.n_edge_labels,
        lambda_node=0.0, lambda_edge=0.0, lambda_event=0.0, mode=params.mode,
    )


def loss_subgradient(instance, params, store, train_lambdas=False, p_tables=None):
    """Subgradient of :func:`loss` with respect to every weight and multiplier.

    Returned as an :class:`EnergyParams` of the same shape. Multiplier entries
    may be negative here; they are zero unless ``train_lambdas`` is set.
    """
    good, bad, tables = _sides(instance, params, store, p_tables)
    grad = _zero_like(params)
    e_good = regularized_energy(instance, params, good, tables)
    e_bad = regularized_energy(instance, params, bad, tables)
    if e_good - e_bad + 1.0 <= 0.0:
        return grad
    ag = aggregate_vectors(instance, good, tables)
    ab = aggregate_vectors(instance, bad, tables)
    cg, cb = good.event_class, bad.event_class
    grad.w_node[cg] += ag.node_psi
    grad.w_node[cb] -= ab.node_psi
    grad.w_edge[cg] += ag.edge_psi
    grad.w_edge[cb] -= ab.edge_psi
    lam = [0.0, 0.0, 0.0]
    if train_lambdas:
        lam[0] = -ag.node_logp.sum() + ab.node_logp.sum()
        lam[1] = -ag.edge_logp.sum() + ab.edge_logp.sum()
    if params.mode == CERN2:
        grad.w_event[cg] += ag.event_psi
        grad.w_event[cb] -= ab.event_psi
        if train_lambdas:
            lam[2] = -ag.event_logp + ab.event_logp
    # bypass the nonnegativity check: gradients of multipliers can be negative
    grad.lambda_node, grad.lambda_edge, grad.lambda_event = (float(v) for v in lam)
    return grad


class _Features:
    """Per-instance linear coefficients of the two hinge sides.

    With the violated labels frozen and p-values fixed, the energy of every
    candidate class is linear in the parameters, so training works on these
    precomputed arrays.
    """

    def __init__(self, instances, store, n_events):
        n = len(instances)
        self.n = n
        first = instances[0]
        kv, ke = first.n_node_labels, first.n_edge_labels
        self.truth_c = np.empty(n, dtype=np.int64)
        self.good_node = np.zeros((n, kv))
        self.good_edge = np.zeros((n, ke))
        self.good_event = np.zeros(n)
        self.good_logp = np.zeros((n, 3))
        self.bad_node = np.zeros((n, kv))
        self.bad_edge = np.zeros((n, ke))
        self.bad_event = np.zeros((n, n_events))
        self.bad_logp = np.zeros((n, n_events, 3))
        for k, inst in enumerate(instances):
            _require_truth(inst)
            tables = instance_p_tables(store, inst, exclude_source=inst.instance_id)
            nodes, edges = inst.argmax_labels()
            good = _truth_assignment(inst, nodes, edges)
            ag = aggregate_vectors(inst, good, tables)
            self.truth_c[k] = good.event_class
            self.good_node[k], self.good_edge[k] = ag.node_psi, ag.edge_psi
            self.good_event[k] = ag.event_psi
            self.good_logp[k] = (ag.node_logp.sum(), ag.edge_logp.sum(), ag.event_logp)
            for c in range(n_events):
                ab = aggregate_vectors(inst, Assignment(c, nodes, edges), tables)
                if c == 0:
                    self.bad_node[k], self.bad_edge[k] = ab.node_psi, ab.edge_psi
                self.bad_event[k, c] = ab.event_psi
                self.bad_logp[k, c] = (ab.node_logp.sum(), ab.edge_logp.sum(), ab.event_logp)

    def batch(self, idx, params, train_lambdas):
        """Mean hinge loss and mean gradient over ``idx``.

        Gradient is returned as flat arrays (w_node, w_edge, w_event, lambdas).
        """
        cern2 = params.mode == CERN2
        lam = np.array(params.lambdas) * np.array([1.0, 1.0, 1.0 if cern2 else 0.0])
        ev_on = 1.0 if cern2 else 0.0
        tc = self.truth_c[idx]
        e_good = (
            np.einsum("nk,nk->n", params.w_node[tc], self.good_node[idx])
            + np.einsum("nk,nk->n", params.w_edge[tc], self.good_edge[idx])
            + ev_on * params.w_event[tc] * self.good_event[idx]
            - self.good_logp[idx] @ lam
        )
        e_bad_all = (
            self.bad_node[idx] @ params.w_node.T
            + self.bad_edge[idx] @ params.w_edge.T
            + ev_on * params.w_event[None, :] * self.bad_event[idx]
            - self.bad_logp[idx] @ lam
        )
        e_bad_all[np.arange(len(idx)), tc] = np.inf
        cb = np.argmin(e_bad_all, axis=1)
        margins = e_good - e_bad_all[np.arange(len(idx)), cb] + 1.0
        active = margins > 0.0
        losses = np.where(active, margins, 0.0)

        m = len(idx)
        g_node = np.zeros_like(params.w_node)
        g_edge = np.zeros_like(params.w_edge)
        g_event = np.zeros_like(params.w_event)
        g_lam = np.zeros(3)
        a = np.flatnonzero(active)
        sel = np.asarray(idx)[a]
        np.add.at(g_node, tc[a], self.good_node[sel])
        np.add.at(g_node, cb[a], -self.bad_node[sel])
        np.add.at(g_edge, tc[a], self.good_edge[sel])
        np.add.at(g_edge, cb[a], -self.bad_edge[sel])
        if cern2:
            np.add.at(g_event, tc[a], self.good_event[sel])
            np.add.at(g_event, cb[a], -self.bad_event[sel, cb[a]])
        if train_lambdas and len(a):
            g_lam = (-self.good_logp[sel] + self.bad_logp[sel, cb[a]]).sum(axis=0)
            if not cern2:
                g_lam[2] = 0.0
        return float(losses.mean()), (g_node / m, g_edge / m, g_event / m, g_lam / m)


def train(instances, params_init, store, config=None):
    """Mini-batch subgradient descent with RMS-normalized steps.

    Returns ``(params, loss_trace)`` where ``loss_trace[t]`` is the mean batch
    loss at iteration ``t`` before that iteration's update.
    """
    config = config or TrainConfig()
    instances = list(instances)
    if not instances:
        raise ValueError("no training instances")
    params = params_init.copy()
    feats = _Features(instances, store, params.n_events)
    rng = np.random.default_rng(config.seed)

    values = [params.w_node, params.w_edge, params.w_event, np.array(params.lambdas)]
    sq_avg = [np.zeros_like(v) for v in values]
    order = rng.permutation(feats.n)
    pos = 0
    trace = []
    for _ in range(config.max_iterations):
        if pos >= feats.n:
            order, pos = rng.permutation(feats.n), 0
        idx = order[pos : pos + config.batch_size]
        pos += config.batch_size
        batch_loss, grads = feats.batch(idx, params, config.train_lambdas)
        trace.append(batch_loss)
        for v, s, g in zip(values, sq_avg, grads):
            s *= config.decay
            s += (1.0 - config.decay) * g * g
            v -= config.learning_rate * g / np.sqrt(s + _RMS_EPS)
        if config.train_lambdas:
            np.maximum(values[3], config.lambda_floor, out=values[3])
            params.lambda_node, params.lambda_edge, params.lambda_event = (float(x) for x in values[3])
    return params, trace


def mean_loss(instances, params, store):
    """Mean hinge loss over ``instances`` (leave-one-out p-values)."""
    return float(np.mean([loss(inst, params, store) for inst in instances]))


def write_trace(trace, path, learning_rate):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "mean_loss", "learning_rate"])
        for i, value in enumerate(trace):
            w.writerow([i, repr(float(value)), repr(float(learning_rate))])
