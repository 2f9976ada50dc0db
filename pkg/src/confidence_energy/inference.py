"""Exact minimization of the regularized energy, plus the baseline regimes.

Given the event class, the regularized energy has no term coupling two nodes
or two edges, so each row picks its own best label and the joint minimum is
found by scanning the ``C`` event classes.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .conformal import instance_p_tables
from .energy import (
    CERN1,
    CERN2,
    Assignment,
    InvalidStateError,
    confidence_penalty,
    raw_energy,
    regularized_energy,
)

SOFTMAX = "softmax-only"
ENERGY = "energy-only"
CONFIDENCE = "confidence-energy"
REGIMES = (SOFTMAX, ENERGY, CONFIDENCE)

_REGIME_ALIASES = {"softmax": SOFTMAX, "energy": ENERGY, "confidence": CONFIDENCE}


def canonical_regime(regime):
    regime = _REGIME_ALIASES.get(regime, regime)
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    return regime


@dataclass(frozen=True)
class Prediction:
    assignment: Assignment
    raw_energy: float
    regularized_energy: float
    confidence_statistic: float
    regime: str
    instance_id: str = ""

    @property
    def event_class(self):
        return self.assignment.event_class


def _effective_params(params, regime):
    return params.without_confidence() if regime == ENERGY else params


def _decomposed_minimum(instance, params, tables):
    """Per-class optimal labels and totals; returns (event_class, node_labels, edge_labels)."""
    node_nlp = np.ascontiguousarray(-np.log(tables.node))
    node_labels, node_tot = _kernels.level_argmin(
        params.w_node, instance.node_potentials, node_nlp, params.lambda_node
    )
    totals = node_tot
    edge_labels = np.zeros((params.n_events, 0), dtype=np.int64)
    if instance.n_edges:
        edge_nlp = np.ascontiguousarray(-np.log(tables.edge))
        edge_labels, edge_tot = _kernels.level_argmin(
            params.w_edge, instance.edge_potentials, edge_nlp, params.lambda_edge
        )
        totals = totals + edge_tot
    if params.mode == CERN2:
        event_cost = params.w_event * instance.event_potential + params.lambda_event * -np.log(tables.event)
        totals = totals + event_cost
    c = int(np.argmin(totals))
    return c, node_labels[c], edge_labels[c]


def _finish(instance, params, assignment, tables, regime):
    return Prediction(
        assignment=assignment,
        raw_energy=raw_energy(instance, params, assignment),
        regularized_energy=regularized_energy(instance, params, assignment, tables),
        confidence_statistic=confidence_penalty(instance, params, assignment, tables),
        regime=regime,
        instance_id=instance.instance_id,
    )


def infer(instance, params, store, regime=CONFIDENCE, p_tables=None):
    """Predict the event class and labels of one instance.

    ``confidence-energy`` minimizes the regularized energy exactly;
    ``energy-only`` does the same with every multiplier forced to zero;
    ``softmax-only`` takes the argmax of each potential row and needs an
    event row (``cern2`` mode). Ties go to the lowest index at every level.
    """
    regime = canonical_regime(regime)
    params.check_compatible(instance)
    tables = p_tables if p_tables is not None else instance_p_tables(store, instance)
    eff = _effective_params(params, regime)
    if regime == SOFTMAX:
        if params.mode == CERN1 or instance.event_potential is None:
            raise InvalidStateError("softmax-only inference needs an event potential (cern2 mode)")
        nodes, edges = instance.argmax_labels()
        assignment = Assignment(int(np.argmax(instance.event_potential)), nodes, edges)
    else:
        c, nodes, edges = _decomposed_minimum(instance, eff, tables)
        assignment = Assignment(c, nodes, edges)
    return _finish(instance, eff, assignment, tables, regime)


def infer_many(instances, params, store, regime=CONFIDENCE, threads=1):
    """:func:`infer` over many instances; output order and values do not depend on ``threads``."""

    def run(inst):
        try:
            return infer(inst, params, store, regime)
        except (ValueError, InvalidStateError) as exc:
            raise type(exc)(f"instance {inst.instance_id!r}: {exc}") from exc

    if threads <= 1:
        return [run(inst) for inst in instances]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, instances))


def most_violated(instance, params, store, truth_event, p_tables=None, exclude_source=None):
    """Competing configuration for the margin loss.

    Node and edge labels are frozen at their per-row argmax; the event class is
    the lowest-regularized-energy class other than ``truth_event``.
    """
    if params.n_events < 2:
        raise ValueError("no violated event class exists when there is a single class")
    if not 0 <= truth_event < params.n_events:
        raise ValueError(f"truth event {truth_event} out of range")
    params.check_compatible(instance)
    tables = p_tables
    if tables is None:
        tables = instance_p_tables(store, instance, exclude_source=exclude_source)
    nodes, edges = instance.argmax_labels()
    best, best_c = math.inf, None
    for c in range(params.n_events):
        if c == truth_event:
            continue
        e = regularized_energy(instance, params, Assignment(c, nodes, edges), tables)
        if e < best:
            best, best_c = e, c
    return _finish(instance, params, Assignment(best_c, nodes, edges), tables, CONFIDENCE)


def prediction_to_dict(pred):
    a = pred.assignment
    return {
        "instance_id": pred.instance_id,
        "regime": pred.regime,
        "event_class": a.event_class,
        "node_labels": list(a.node_labels),
        "edge_labels": list(a.edge_labels),
        "raw_energy": pred.raw_energy,
        "regularized_energy": pred.regularized_energy,
        "confidence_statistic": pred.confidence_statistic,
    }


def prediction_from_dict(d):
    return Prediction(
        Assignment(d["event_class"], d["node_labels"], d["edge_labels"]),
        float(d["raw_energy"]),
        float(d["regularized_energy"]),
        float(d["confidence_statistic"]),
        canonical_regime(d["regime"]),
        str(d.get("instance_id", "")),
    )


def save_predictions(predictions, path):
    # json writes floats with repr, i.e. the shortest exact round-trip form
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pred in predictions:
            fh.write(json.dumps(prediction_to_dict(pred)) + "\n")


def load_predictions(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(prediction_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
