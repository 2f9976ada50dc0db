"""Class-conditional conformal p-values over node, edge and event labels.

Calibration records are partitioned into Mondrian categories keyed by
``(level, event_class, label)``. A query's p-value is the fraction of its
category whose nonconformity is at least the query's, clamped from below by
a floor so that logarithms stay finite.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

import numpy as np

from . import _kernels

LEVELS = ("node", "edge", "event")

#: floor used for categories with no calibration records
EMPTY_GROUP_FLOOR = 1e-4

#: tolerance on the sum of a probability row
ROW_SUM_TOL = 1e-6

_HEADER_TAG = "#calibration-store"


class EmptyCalibrationWarning(UserWarning):
    """A p-value was requested for a category with no calibration records."""


def check_probability_row(row, what="softmax row"):
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ValueError(f"{what} must be a non-empty 1-d vector, got shape {row.shape}")
    if not np.all(np.isfinite(row)) or np.any(row < 0):
        raise ValueError(f"{what} has negative or non-finite entries: {row.tolist()}")
    total = float(row.sum())
    if abs(total - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"{what} is not normalized: entries sum to {total!r}")
    return row


def nonconformity(softmax_row, label):
    """Return ``1 - softmax_row[label]``.

    >>> nonconformity([0.7, 0.2, 0.1], 1)
    0.8
    """
    row = check_probability_row(softmax_row)
    label = int(label)
    if not 0 <= label < row.size:
        raise ValueError(f"label {label} out of range for {row.size} classes")
    return min(1.0, max(0.0, 1.0 - float(row[label])))


@dataclass(frozen=True)
class CalibrationRecord:
    level: str
    event_class: int
    label: int
    nonconformity: float
    source_id: str

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")
        if not 0.0 <= self.nonconformity <= 1.0:
            raise ValueError(f"nonconformity {self.nonconformity!r} outside [0, 1]")
        if self.level == "event" and self.label != self.event_class:
            raise ValueError("event-level records must have label == event_class")


class _LevelIndex(NamedTuple):
    n_labels: int
    values: np.ndarray  # concatenated per-group sorted nonconformities
    offsets: np.ndarray  # group g occupies values[offsets[g]:offsets[g + 1]]
    by_source: dict  # source_id -> (group indices, nonconformities)


class CalibrationStore:
    """Nonconformity records of ground-truth labels, grouped by category.

    Records are added while the store is open; :meth:`seal` builds the sorted
    per-group index and freezes the store. All queries require a sealed store
    and are read-only.

    Parameters
    ----------
    n_node_labels, n_edge_labels, n_events : int
        Label-set sizes of the node, edge and event levels.
    epsilon : float or None
        Fixed p-value floor. ``None`` selects the per-category floor
        ``1 / (n + 1)`` where ``n`` is the category size, or
        :data:`EMPTY_GROUP_FLOOR` when the category is empty.
    """

    def __init__(self, n_node_labels, n_edge_labels, n_events, epsilon=None):
        if min(n_node_labels, n_edge_labels, n_events) < 1:
            raise ValueError("label-set sizes must be positive")
        if epsilon is not None and not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {epsilon!r}")
        self.n_node_labels = int(n_node_labels)
        self.n_edge_labels = int(n_edge_labels)
        self.n_events = int(n_events)
        self.epsilon = None if epsilon is None else float(epsilon)
        self._records = []
        self._index = None

    def __len__(self):
        return len(self._records)

    def __eq__(self, other):
        if not isinstance(other, CalibrationStore):
            return NotImplemented
        return (
            self.label_sizes == other.label_sizes
            and self.epsilon == other.epsilon
            and self._records == other._records
        )

    def __repr__(self):
        return (
            f"CalibrationStore(records={len(self)}, sizes={self.label_sizes}, "
            f"epsilon={self.epsilon}, sealed={self.sealed})"
        )

    @property
    def label_sizes(self):
        return (self.n_node_labels, self.n_edge_labels, self.n_events)

    @property
    def sealed(self):
        return self._index is not None

    @property
    def records(self):
        return tuple(self._records)

    def n_labels(self, level):
        if level == "node":
            return self.n_node_labels
        if level == "edge":
            return self.n_edge_labels
        if level == "event":
            return self.n_events
        raise ValueError(f"unknown level {level!r}")

    def _group_index(self, level, event_class, label):
        if level == "event":
            return event_class
        return event_class * self.n_labels(level) + label

    def add(self, record):
        if self.sealed:
            raise RuntimeError("calibration store is sealed")
        n_labels = self.n_labels(record.level)
        if not 0 <= record.event_class < self.n_events:
            raise ValueError(f"event class {record.event_class} out of range")
        if not 0 <= record.label < n_labels:
            raise ValueError(f"{record.level} label {record.label} out of range")
        if "\t" in record.source_id or "\n" in record.source_id:
            raise ValueError("source_id may not contain tabs or newlines")
        self._records.append(record)

    def extend(self, records):
        for record in records:
            self.add(record)
        return self

    def seal(self):
        if self.sealed:
            return self
        index = {}
        for level in LEVELS:
            n_groups = self.n_events if level == "event" else self.n_events * self.n_labels(level)
            recs = [r for r in self._records if r.level == level]
            groups = np.array(
                [self._group_index(level, r.event_class, r.label) for r in recs], dtype=np.int64
            )
            vals = np.array([r.nonconformity for r in recs], dtype=np.float64)
            order = np.lexsort((vals, groups))
            counts = np.bincount(groups, minlength=n_groups)
            offsets = np.zeros(n_groups + 1, dtype=np.int64)
            np.cumsum(counts, out=offsets[1:])
            by_source = {}
            for r, g, v in zip(recs, groups, vals):
                by_source.setdefault(r.source_id, ([], []))
                by_source[r.source_id][0].append(g)
                by_source[r.source_id][1].append(v)
            by_source = {
                k: (np.array(gs, dtype=np.int64), np.array(vs)) for k, (gs, vs) in by_source.items()
            }
            index[level] = _LevelIndex(
                self.n_labels(level), np.ascontiguousarray(vals[order]), offsets, by_source
            )
        self._index = index
        return self

    def _require_sealed(self):
        if not self.sealed:
            raise RuntimeError("calibration store must be sealed before querying")

    def group(self, level, event_class, label=None):
        """Sorted nonconformities of one category."""
        self._require_sealed()
        if level == "event":
            label = event_class
        idx = self._index[level]
        g = self._group_index(level, event_class, label)
        return idx.values[idx.offsets[g] : idx.offsets[g + 1]].copy()

    def group_counts(self):
        """Mapping ``(level, event_class, label) -> record count`` for all categories."""
        self._require_sealed()
        counts = {}
        for level in LEVELS:
            offsets = self._index[level].offsets
            sizes = np.diff(offsets)
            for c in range(self.n_events):
                labels = [c] if level == "event" else range(self.n_labels(level))
                for y in labels:
                    counts[(level, c, y)] = int(sizes[self._group_index(level, c, y)])
        return counts

    def floor(self, group_size):
        if self.epsilon is not None:
            return self.epsilon
        if group_size == 0:
            return EMPTY_GROUP_FLOOR
        return 1.0 / (group_size + 1)

    def _counts(self, level, groups, queries, exclude_source):
        """Return (numerator counts, category sizes) after leave-one-out exclusion."""
        idx = self._index[level]
        groups = np.ascontiguousarray(groups, dtype=np.int64)
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        num = _kernels.count_geq(idx.values, idx.offsets, groups, queries)
        den = (idx.offsets[groups + 1] - idx.offsets[groups]).astype(np.int64)
        if exclude_source is not None and exclude_source in idx.by_source:
            ex_groups, ex_vals = idx.by_source[exclude_source]
            same = groups[:, None] == ex_groups[None, :]
            den = den - same.sum(axis=1)
            num = num - (same & (ex_vals[None, :] >= queries[:, None])).sum(axis=1)
        return num, den

    def _finish(self, num, den):
        """Turn counts into floored p-values; report empty categories."""
        p = np.empty(num.shape, dtype=np.float64)
        empty = den == 0
        nonempty = ~empty
        p[nonempty] = num[nonempty] / den[nonempty]
        if self.epsilon is None:
            floors = np.where(empty, EMPTY_GROUP_FLOOR, 1.0 / (den + 1.0))
        else:
            floors = np.full(num.shape, self.epsilon)
        p[empty] = floors[empty]
        low = nonempty & (p < floors)
        p[low] = floors[low]
        return p, int(empty.sum())


def _warn_empty(n_empty, level):
    if n_empty:
        warnings.warn(
            f"{n_empty} {level}-level p-value(s) drawn from empty calibration categories",
            EmptyCalibrationWarning,
            stacklevel=3,
        )


def p_value(store, level, event_class, label, nonconformity, exclude_source=None):
    """Conformal p-value of one label hypothesis within its category.

    Counts the records of category ``(level, event_class, label)``, minus
    those whose ``source_id`` equals ``exclude_source``, with nonconformity
    ``>=`` the query (ties included). Values below the store's floor are
    clamped to it. An empty category yields the floor and emits
    :class:`EmptyCalibrationWarning`.
    """
    store._require_sealed()
    n_labels = store.n_labels(level)
    if level == "event":
        label = event_class if label is None else label
        if label != event_class:
            raise ValueError("event-level p-values require label == event_class")
    if not 0 <= event_class < store.n_events or not 0 <= label < n_labels:
        raise ValueError(f"({event_class}, {label}) out of range for level {level!r}")
    if not 0.0 <= nonconformity <= 1.0:
        raise ValueError(f"nonconformity {nonconformity!r} outside [0, 1]")
    g = np.array([store._group_index(level, event_class, label)])
    num, den = store._counts(level, g, [nonconformity], exclude_source)
    p, n_empty = store._finish(num, den)
    _warn_empty(n_empty, level)
    return float(p[0])


def p_value_rows(store, level, rows, exclude_source=None):
    """Batch p-values for a stack of potential rows.

    Returns shape ``(N, C, K)`` for node/edge levels, entry ``[i, c, y]`` being
    the p-value of label ``y`` for row ``i`` under event class ``c``, and shape
    ``(N, C)`` for the event level.
    """
    store._require_sealed()
    n_labels = store.n_labels(level)
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, n_labels)
    alphas = np.clip(1.0 - rows, 0.0, 1.0)
    n_rows, n_events = rows.shape[0], store.n_events
    if level == "event":
        groups = np.broadcast_to(np.arange(n_events), (n_rows, n_events))
        queries = alphas
        shape = (n_rows, n_events)
    else:
        groups = np.arange(n_events * n_labels).reshape(n_events, n_labels)
        groups = np.broadcast_to(groups, (n_rows, n_events, n_labels))
        queries = np.broadcast_to(alphas[:, None, :], (n_rows, n_events, n_labels))
        shape = (n_rows, n_events, n_labels)
    num, den = store._counts(level, groups.ravel(), queries.ravel(), exclude_source)
    p, n_empty = store._finish(num, den)
    _warn_empty(n_empty, level)
    return p.reshape(shape)


def p_value_table(store, level, softmax_row, exclude_source=None):
    """p-values of every ``(event_class, label)`` pair for one potential row.

    Node and edge levels give a ``C x K`` matrix. The event level, where class
    and label coincide, gives a length-``C`` vector.
    """
    row = check_probability_row(softmax_row)
    if row.size != store.n_labels(level):
        raise ValueError(
            f"{level} row has {row.size} entries, store expects {store.n_labels(level)}"
        )
    return p_value_rows(store, level, row[None, :], exclude_source)[0]


def fisher_statistic(p_values):
    """Fisher's combined statistic ``-2 * sum(log p)``."""
    p_values = [float(p) for p in p_values]
    if any(not p > 0.0 for p in p_values):
        raise ValueError("p-values must be strictly positive; was the floor applied?")
    if any(p > 1.0 for p in p_values):
        raise ValueError("p-values must not exceed 1")
    return -2.0 * math.fsum(math.log(p) for p in p_values)


def fisher_combined_pvalue(p_values):
    """Right-tail chi-square probability of :func:`fisher_statistic` with 2N dof."""
    from scipy.stats import chi2

    p_values = list(p_values)
    if not p_values:
        return 1.0
    return float(chi2.sf(fisher_statistic(p_values), 2 * len(p_values)))


class PValueTables(NamedTuple):
    """p-values of every hypothesis of one instance.

    ``node`` is ``(|V|, C, |Y^V|)``, ``edge`` is ``(|E|, C, |Y^E|)`` and
    ``event`` is ``(C,)`` or ``None`` when the instance has no event row.
    """

    node: np.ndarray
    edge: np.ndarray
    event: Optional[np.ndarray]


def instance_p_tables(store, instance, exclude_source=None):
    node = p_value_rows(store, "node", instance.node_potentials, exclude_source)
    edge = p_value_rows(store, "edge", instance.edge_potentials, exclude_source)
    event = None
    if instance.event_potential is not None:
        event = p_value_rows(store, "event", instance.event_potential, exclude_source)[0]
    return PValueTables(node, edge, event)


def records_from_instance(instance):
    """Calibration records of an instance's ground-truth labels."""
    truth = instance.truth
    if truth is None:
        raise ValueError(f"instance {instance.instance_id!r} has no truth block")
    if truth.node_labels is None or truth.edge_labels is None:
        raise ValueError(f"instance {instance.instance_id!r} lacks node/edge truth labels")
    c, sid = truth.event_class, instance.instance_id
    out = []
    for row, y in zip(instance.node_potentials, truth.node_labels):
        out.append(CalibrationRecord("node", c, int(y), nonconformity(row, y), sid))
    for row, y in zip(instance.edge_potentials, truth.edge_labels):
        out.append(CalibrationRecord("edge", c, int(y), nonconformity(row, y), sid))
    if instance.event_potential is not None:
        out.append(CalibrationRecord("event", c, c, nonconformity(instance.event_potential, c), sid))
    return out


def build_store(instances: Iterable, n_node_labels, n_edge_labels, n_events, epsilon=None):
    """Build and seal a store from ground-truth-labelled instances."""
    store = CalibrationStore(n_node_labels, n_edge_labels, n_events, epsilon)
    for inst in instances:
        store.extend(records_from_instance(inst))
    return store.seal()


def save_store(store, path):
    eps = "auto" if store.epsilon is None else f"{store.epsilon!r}"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            f"{_HEADER_TAG}\tnode_labels={store.n_node_labels}\tedge_labels={store.n_edge_labels}"
            f"\tevent_classes={store.n_events}\tepsilon={eps}\n"
        )
        for r in store.records:
            fh.write(f"{r.level}\t{r.event_class}\t{r.label}\t{r.nonconformity:#.17g}\t{r.source_id}\n")


def load_store(path):
    """Read a store written by :func:`save_store` and seal it.

    Malformed lines raise ``ValueError`` naming the line number.
    """
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if not header or header[0] != _HEADER_TAG:
            raise ValueError(f"{path}:1: missing calibration-store header")
        try:
            meta = dict(field.split("=", 1) for field in header[1:])
            eps = None if meta["epsilon"] == "auto" else float(meta["epsilon"])
            store = CalibrationStore(
                int(meta["node_labels"]), int(meta["edge_labels"]), int(meta["event_classes"]), eps
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:1: bad header: {exc}") from None
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            try:
                if len(parts) != 5:
                    raise ValueError(f"expected 5 tab-separated fields, got {len(parts)}")
                level, c, y, a, sid = parts
                store.add(CalibrationRecord(level, int(c), int(y), float(a), sid))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return store.seal()
