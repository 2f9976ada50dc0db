"""Linear label energies and their p-value-regularized form.

A scene is a graph of people (nodes) and person pairs (edges), each carrying
a class-probability row, plus an optional scene-level event row. For an event
class ``c`` and labels ``Y`` the raw energy is

    sum_i w_node[c, y_i] psi_i[y_i] + sum_ij w_edge[c, y_ij] psi_ij[y_ij]
        (+ w_event[c] psi[c] with an event row)

and the regularized energy subtracts ``lambda * log p`` for every chosen
hypothesis, using conformal p-values.
"""

import json
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .conformal import check_probability_row

CERN1 = "cern1"
CERN2 = "cern2"
MODES = (CERN1, CERN2)

_PAIRWISE_THRESHOLD = 64


class InvalidStateError(RuntimeError):
    """An operation was requested that the instance/params combination cannot support."""


def accumulate(terms):
    """Sum energy terms: sequentially up to 64 terms, pairwise above."""
    terms = [float(t) for t in terms]
    return _pairwise(terms, 0, len(terms))


def _pairwise(terms, lo, hi):
    if hi - lo <= _PAIRWISE_THRESHOLD:
        total = 0.0
        for i in range(lo, hi):
            total += terms[i]
        return total
    mid = lo + (hi - lo) // 2
    return _pairwise(terms, lo, mid) + _pairwise(terms, mid, hi)


@dataclass(frozen=True)
class Truth:
    event_class: int
    node_labels: Optional[tuple] = None
    edge_labels: Optional[tuple] = None


@dataclass(frozen=True, order=True)
class Assignment:
    """Event class plus one label per node and per edge.

    Ordering is lexicographic over ``(event_class, node_labels, edge_labels)``.
    """

    event_class: int
    node_labels: tuple
    edge_labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "event_class", int(self.event_class))
        object.__setattr__(self, "node_labels", tuple(int(y) for y in self.node_labels))
        object.__setattr__(self, "edge_labels", tuple(int(y) for y in self.edge_labels))


@dataclass(eq=False)
class GraphInstance:
    """One scene: potential rows for nodes, edges and (optionally) the event."""

    node_potentials: np.ndarray
    edges: np.ndarray
    edge_potentials: np.ndarray
    event_potential: Optional[np.ndarray] = None
    truth: Optional[Truth] = None
    instance_id: str = ""
    n_edge_labels: Optional[int] = None
    n_events: Optional[int] = None

    def __post_init__(self):
        self.node_potentials = np.array(self.node_potentials, dtype=np.float64, ndmin=2)
        if self.node_potentials.size == 0:
            raise ValueError(f"instance {self.instance_id!r} has no nodes")
        n_nodes = self.node_potentials.shape[0]
        self.edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.n_edge_labels is None:
            ep = np.asarray(self.edge_potentials, dtype=np.float64)
            if ep.size == 0:
                raise ValueError("n_edge_labels is required when there are no edges")
            self.n_edge_labels = ep.shape[-1]
        self.edge_potentials = np.array(self.edge_potentials, dtype=np.float64).reshape(
            -1, self.n_edge_labels
        )
        if self.edge_potentials.shape[0] != self.edges.shape[0]:
            raise ValueError("one edge potential row is required per edge")
        for i, row in enumerate(self.node_potentials):
            check_probability_row(row, f"node {i} potential")
        for k, row in enumerate(self.edge_potentials):
            check_probability_row(row, f"edge {k} potential")
        for k, (a, b) in enumerate(self.edges):
            if a == b or not (0 <= a < n_nodes and 0 <= b < n_nodes):
                raise ValueError(f"edge {k} ({a}, {b}) is invalid for {n_nodes} nodes")
        if self.event_potential is not None:
            self.event_potential = check_probability_row(self.event_potential, "event potential")
            if self.n_events is None:
                self.n_events = self.event_potential.size
            elif self.n_events != self.event_potential.size:
                raise ValueError("event potential length disagrees with n_events")
        if self.truth is not None:
            self._check_truth()

    def _check_truth(self):
        t = self.truth
        if self.n_events is not None and not 0 <= t.event_class < self.n_events:
            raise ValueError(f"truth event class {t.event_class} out of range")
        if t.node_labels is not None:
            if len(t.node_labels) != self.n_nodes or not all(
                0 <= y < self.n_node_labels for y in t.node_labels
            ):
                raise ValueError("truth node labels are invalid for this instance")
        if t.edge_labels is not None:
            if len(t.edge_labels) != self.n_edges or not all(
                0 <= y < self.n_edge_labels for y in t.edge_labels
            ):
                raise ValueError("truth edge labels are invalid for this instance")

    @property
    def n_nodes(self):
        return self.node_potentials.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    @property
    def n_node_labels(self):
        return self.node_potentials.shape[1]

    def argmax_labels(self):
        """Per-row argmax node and edge labels (lowest index on ties)."""
        nodes = tuple(int(y) for y in np.argmax(self.node_potentials, axis=1))
        edges = tuple(int(y) for y in np.argmax(self.edge_potentials, axis=1)) if self.n_edges else ()
        return nodes, edges

    def replace(self, **changes):
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, GraphInstance):
            return NotImplemented
        ev_equal = (self.event_potential is None and other.event_potential is None) or (
            self.event_potential is not None
            and other.event_potential is not None
            and np.array_equal(self.event_potential, other.event_potential)
        )
        return (
            self.instance_id == other.instance_id
            and self.truth == other.truth
            and self.n_edge_labels == other.n_edge_labels
            and np.array_equal(self.node_potentials, other.node_potentials)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.edge_potentials, other.edge_potentials)
            and ev_equal
        )


@dataclass
class EnergyParams:
    """Energy-layer weights and confidence multipliers.

    ``w_node`` is ``C x |Y^V|``, ``w_edge`` is ``C x |Y^E|``, ``w_event`` has
    length ``C``. In ``cern1`` mode the event weight and multiplier are
    ignored.
    """

    w_node: np.ndarray
    w_edge: np.ndarray
    w_event: np.ndarray
    lambda_node: float = 1.0
    lambda_edge: float = 1.0
    lambda_event: float = 1.0
    mode: str = CERN2

    def __post_init__(self):
        self.w_node = np.array(self.w_node, dtype=np.float64, ndmin=2)
        self.w_edge = np.array(self.w_edge, dtype=np.float64, ndmin=2)
        self.w_event = np.array(self.w_event, dtype=np.float64).reshape(-1)
        n_events = self.w_node.shape[0]
        if self.w_edge.shape[0] != n_events or self.w_event.shape[0] != n_events:
            raise ValueError(
                f"weight shapes disagree on the number of event classes: "
                f"{self.w_node.shape}, {self.w_edge.shape}, {self.w_event.shape}"
            )
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lambda_node", "lambda_edge", "lambda_event"):
            value = float(getattr(self, name))
            if not value >= 0.0:
                raise ValueError(f"{name} must be nonnegative, got {value!r}")
            setattr(self, name, value)

    @classmethod
    def zeros(cls, n_events, n_node_labels, n_edge_labels, **kwargs):
        return cls(
            np.zeros((n_events, n_node_labels)),
            np.zeros((n_events, n_edge_labels)),
            np.zeros(n_events),
            **kwargs,
        )

    @property
    def n_events(self):
        return self.w_node.shape[0]

    @property
    def n_node_labels(self):
        return self.w_node.shape[1]

    @property
    def n_edge_labels(self):
        return self.w_edge.shape[1]

    @property
    def lambdas(self):
        return (self.lambda_node, self.lambda_edge, self.lambda_event)

    def copy(self, **changes):
        out = EnergyParams(
            self.w_node.copy(),
            self.w_edge.copy(),
            self.w_event.copy(),
            self.lambda_node,
            self.lambda_edge,
            self.lambda_event,
            self.mode,
        )
        for k, v in changes.items():
            setattr(out, k, v)
        out.__post_init__()
        return out

    def without_confidence(self):
        return self.copy(lambda_node=0.0, lambda_edge=0.0, lambda_event=0.0)

    def scaled(self, factor):
        """Scale every weight and multiplier by ``factor``."""
        return self.copy(
            w_node=self.w_node * factor,
            w_edge=self.w_edge * factor,
            w_event=self.w_event * factor,
            lambda_node=self.lambda_node * factor,
            lambda_edge=self.lambda_edge * factor,
            lambda_event=self.lambda_event * factor,
        )

    def __eq__(self, other):
        if not isinstance(other, EnergyParams):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.lambdas == other.lambdas
            and np.array_equal(self.w_node, other.w_node)
            and np.array_equal(self.w_edge, other.w_edge)
            and np.array_equal(self.w_event, other.w_event)
        )

    def check_compatible(self, instance):
        if instance.n_node_labels != self.n_node_labels or instance.n_edge_labels != self.n_edge_labels:
            raise ValueError(
                f"instance {instance.instance_id!r} label sizes "
                f"({instance.n_node_labels}, {instance.n_edge_labels}) do not match params "
                f"({self.n_node_labels}, {self.n_edge_labels})"
            )
        if instance.event_potential is not None and instance.event_potential.size != self.n_events:
            raise ValueError(f"instance {instance.instance_id!r} event row has wrong length")
        if self.mode == CERN2 and instance.event_potential is None:
            raise InvalidStateError(
                f"cern2 mode requires an event potential (instance {instance.instance_id!r})"
            )


def check_assignment(instance, params, assignment):
    if not 0 <= assignment.event_class < params.n_events:
        raise ValueError(f"event class {assignment.event_class} out of range")
    if len(assignment.node_labels) != instance.n_nodes:
        raise ValueError("assignment needs one label per node")
    if len(assignment.edge_labels) != instance.n_edges:
        raise ValueError("assignment needs one label per edge")
    if any(not 0 <= y < instance.n_node_labels for y in assignment.node_labels):
        raise ValueError("node label out of range")
    if any(not 0 <= y < instance.n_edge_labels for y in assignment.edge_labels):
        raise ValueError("edge label out of range")


def _raw_terms(instance, params, assignment):
    c = assignment.event_class
    terms = [params.w_node[c, y] * instance.node_potentials[i, y] for i, y in enumerate(assignment.node_labels)]
    terms += [params.w_edge[c, y] * instance.edge_potentials[k, y] for k, y in enumerate(assignment.edge_labels)]
    if params.mode == CERN2:
        terms.append(params.w_event[c] * instance.event_potential[c])
    return terms


def raw_energy(instance, params, assignment):
    params.check_compatible(instance)
    check_assignment(instance, params, assignment)
    return accumulate(_raw_terms(instance, params, assignment))


def _log_sums(instance, params, assignment, p_tables):
    """Sum of log p over node hypotheses, over edge hypotheses, and the event log p."""
    c = assignment.event_class
    node_p = [p_tables.node[i, c, y] for i, y in enumerate(assignment.node_labels)]
    edge_p = [p_tables.edge[k, c, y] for k, y in enumerate(assignment.edge_labels)]
    event_p = []
    if params.mode == CERN2:
        if p_tables.event is None:
            raise InvalidStateError("cern2 mode requires event p-values")
        event_p = [p_tables.event[c]]
    for p in node_p + edge_p + event_p:
        if not p > 0.0:
            raise ValueError(f"p-value {p!r} is not positive")
    node_log = accumulate(math.log(p) for p in node_p)
    edge_log = accumulate(math.log(p) for p in edge_p)
    event_log = math.log(event_p[0]) if event_p else 0.0
    return node_log, edge_log, event_log


def regularized_energy(instance, params, assignment, p_tables):
    """Raw energy minus the multiplier-weighted log p-values of the chosen labels."""
    energy = raw_energy(instance, params, assignment)
    node_log, edge_log, event_log = _log_sums(instance, params, assignment, p_tables)
    energy = energy - params.lambda_node * node_log
    energy = energy - params.lambda_edge * edge_log
    if params.mode == CERN2:
        energy = energy - params.lambda_event * event_log
    return energy


def confidence_penalty(instance, params, assignment, p_tables):
    """``-sum(log p)`` over every chosen hypothesis (half the Fisher statistic)."""
    node_log, edge_log, event_log = _log_sums(instance, params, assignment, p_tables)
    return -(node_log + edge_log + event_log)


class Aggregates(NamedTuple):
    """Per-label sums feeding the compact energy form.

    ``node_logp`` / ``edge_logp`` hold sums of *log* p-values per label (not
    sums of p-values), so that dotting with the multipliers reproduces
    :func:`regularized_energy`.
    """

    node_psi: np.ndarray
    edge_psi: np.ndarray
    node_logp: np.ndarray
    edge_logp: np.ndarray
    event_psi: float
    event_logp: float


def aggregate_vectors(instance, assignment, p_tables):
    c = assignment.event_class
    ny = np.asarray(assignment.node_labels, dtype=np.int64)
    ey = np.asarray(assignment.edge_labels, dtype=np.int64)
    node_idx = np.arange(instance.n_nodes)
    edge_idx = np.arange(instance.n_edges)
    node_psi = np.bincount(ny, weights=instance.node_potentials[node_idx, ny], minlength=instance.n_node_labels)
    edge_psi = np.bincount(ey, weights=instance.edge_potentials[edge_idx, ey], minlength=instance.n_edge_labels)
    node_p = p_tables.node[node_idx, c, ny]
    edge_p = p_tables.edge[edge_idx, c, ey]
    if np.any(node_p <= 0) or np.any(edge_p <= 0):
        raise ValueError("p-values must be positive")
    node_logp = np.bincount(ny, weights=np.log(node_p), minlength=instance.n_node_labels)
    edge_logp = np.bincount(ey, weights=np.log(edge_p), minlength=instance.n_edge_labels)
    event_psi = event_logp = 0.0
    if instance.event_potential is not None:
        event_psi = float(instance.event_potential[c])
        if p_tables.event is not None:
            event_logp = math.log(p_tables.event[c])
    return Aggregates(node_psi, edge_psi, node_logp, edge_logp, event_psi, event_logp)


def compact_energy(params, event_class, agg):
    """Regularized energy rebuilt from :func:`aggregate_vectors`."""
    c = event_class
    energy = float(params.w_node[c] @ agg.node_psi) - params.lambda_node * float(agg.node_logp.sum())
    energy += float(params.w_edge[c] @ agg.edge_psi) - params.lambda_edge * float(agg.edge_logp.sum())
    if params.mode == CERN2:
        energy += params.w_event[c] * agg.event_psi - params.lambda_event * agg.event_logp
    return energy


# -- serialization -----------------------------------------------------------


def instance_to_dict(instance):
    d = {
        "instance_id": instance.instance_id,
        "n_node_labels": instance.n_node_labels,
        "n_edge_labels": instance.n_edge_labels,
        "node_potentials": instance.node_potentials.tolist(),
        "edges": instance.edges.tolist(),
        "edge_potentials": instance.edge_potentials.tolist(),
    }
    if instance.event_potential is not None:
        d["event_potential"] = instance.event_potential.tolist()
    if instance.n_events is not None:
        d["n_events"] = instance.n_events
    if instance.truth is not None:
        t = instance.truth
        d["truth"] = {
            "event_class": t.event_class,
            "node_labels": None if t.node_labels is None else list(t.node_labels),
            "edge_labels": None if t.edge_labels is None else list(t.edge_labels),
        }
    return d


def instance_from_dict(d):
    truth = None
    if d.get("truth") is not None:
        t = d["truth"]
        truth = Truth(
            int(t["event_class"]),
            None if t.get("node_labels") is None else tuple(int(y) for y in t["node_labels"]),
            None if t.get("edge_labels") is None else tuple(int(y) for y in t["edge_labels"]),
        )
    node_pot = np.asarray(d["node_potentials"], dtype=np.float64)
    if node_pot.ndim != 2 or node_pot.shape[1] != d.get("n_node_labels", node_pot.shape[-1]):
        raise ValueError("node_potentials do not match n_node_labels")
    return GraphInstance(
        node_potentials=node_pot,
        edges=d.get("edges", []),
        edge_potentials=d.get("edge_potentials", []),
        event_potential=d.get("event_potential"),
        truth=truth,
        instance_id=str(d.get("instance_id", "")),
        n_edge_labels=int(d["n_edge_labels"]),
        n_events=d.get("n_events"),
    )


def save_instances(instances, path):
    """Write instances as JSON lines, one instance per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_dict(inst)) + "\n")


def load_instances(path):
    """Read JSON-lines instances; errors name the offending line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(instance_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def params_to_dict(params):
    return {
        "mode": params.mode,
        "n_events": params.n_events,
        "n_node_labels": params.n_node_labels,
        "n_edge_labels": params.n_edge_labels,
        "w_node": params.w_node.tolist(),
        "w_edge": params.w_edge.tolist(),
        "w_event": params.w_event.tolist(),
        "lambda_node": params.lambda_node,
        "lambda_edge": params.lambda_edge,
        "lambda_event": params.lambda_event,
    }


def params_from_dict(d):
    dims = (int(d["n_events"]), int(d["n_node_labels"]), int(d["n_edge_labels"]))
    w_node = np.asarray(d["w_node"], dtype=np.float64)
    w_edge = np.asarray(d["w_edge"], dtype=np.float64)
    w_event = np.asarray(d["w_event"], dtype=np.float64)
    if w_node.shape != dims[:2] or w_edge.shape != (dims[0], dims[2]) or w_event.shape != dims[:1]:
        raise ValueError(
            f"weight matrices {w_node.shape}, {w_edge.shape}, {w_event.shape} "
            f"do not match declared dimensions {dims}"
        )
    return EnergyParams(
        w_node, w_edge, w_event,
        float(d["lambda_node"]), float(d["lambda_edge"]), float(d["lambda_event"]),
        d.get("mode", CERN2),
    )


def save_params(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh, indent=1)
        fh.write("\n")


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
