"""Synthetic scenes, potential-space corruption, accuracy metrics and sweeps."""

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .conformal import EmptyCalibrationWarning, build_store
from .energy import EnergyParams, GraphInstance, Truth
from .inference import REGIMES, infer
from .learning import TrainConfig, train

DEFAULT_Q_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)


def default_confusion_map(n_events, n_node_labels):
    """Event-to-action distributions with overlapping support.

    Event ``c`` puts most mass on action ``c`` and shares its secondary
    actions with the neighbouring events, so no single action identifies an
    event on its own.
    """
    m = np.zeros((n_events, n_node_labels))
    for c in range(n_events):
        m[c, c % n_node_labels] += 0.5
        m[c, (c + 1) % n_node_labels] += 0.3
        m[c, (c + n_events) % n_node_labels] += 0.2
    return m / m.sum(axis=1, keepdims=True)


def default_edge_map(n_node_labels, n_edge_labels):
    """Symmetric interaction label for every pair of action labels."""
    a = np.arange(n_node_labels)
    return (a[:, None] + a[None, :]) % n_edge_labels


@dataclass
class GeneratorConfig:
    n_events: int = 4
    n_node_labels: int = 6
    n_edge_labels: int = 4
    nodes_range: tuple = (3, 8)
    edge_density: float = 0.3
    signal_strength: float = 0.7
    confusion_map: Optional[np.ndarray] = None
    edge_map: Optional[np.ndarray] = None
    with_event: bool = True
    n_calibration: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if min(self.n_events, self.n_node_labels, self.n_edge_labels) < 1:
            raise ValueError("label-set sizes must be positive")
        lo, hi = self.nodes_range
        self.nodes_range = (int(lo), int(hi))
        if lo < 1 or hi < lo:
            raise ValueError(f"infeasible nodes_range {self.nodes_range}")
        if not 0.0 <= self.edge_density <= 1.0:
            raise ValueError("edge_density must lie in [0, 1]")
        if not 0.0 < self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in (0, 1]")
        if self.confusion_map is None:
            self.confusion_map = default_confusion_map(self.n_events, self.n_node_labels)
        self.confusion_map = np.asarray(self.confusion_map, dtype=np.float64)
        if self.confusion_map.shape != (self.n_events, self.n_node_labels):
            raise ValueError("confusion_map must be n_events x n_node_labels")
        if np.any(self.confusion_map < 0) or not np.allclose(self.confusion_map.sum(axis=1), 1.0):
            raise ValueError("confusion_map rows must be probability vectors")
        if self.edge_map is None:
            self.edge_map = default_edge_map(self.n_node_labels, self.n_edge_labels)
        self.edge_map = np.asarray(self.edge_map, dtype=np.int64)
        if self.edge_map.shape != (self.n_node_labels, self.n_node_labels):
            raise ValueError("edge_map must be n_node_labels x n_node_labels")
        if self.edge_map.min() < 0 or self.edge_map.max() >= self.n_edge_labels:
            raise ValueError("edge_map entries out of range")

    def to_dict(self):
        d = asdict(self)
        d["confusion_map"] = self.confusion_map.tolist()
        d["edge_map"] = self.edge_map.tolist()
        d["nodes_range"] = list(self.nodes_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["nodes_range"] = tuple(d["nodes_range"])
        return cls(**d)


def _noisy_row(rng, label, size, strength):
    row = strength * np.eye(size)[label] + (1.0 - strength) * rng.dirichlet(np.ones(size))
    return row / row.sum()


def _draw_instance(rng, config, instance_id):
    c = int(rng.integers(config.n_events))
    n_nodes = int(rng.integers(config.nodes_range[0], config.nodes_range[1] + 1))
    ys = rng.choice(config.n_node_labels, size=n_nodes, p=config.confusion_map[c])
    pairs = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)]
    keep = rng.random(len(pairs)) < config.edge_density
    edges = [p for p, k in zip(pairs, keep) if k]
    ye = [int(config.edge_map[ys[i], ys[j]]) for i, j in edges]
    s = config.signal_strength
    node_pot = np.array([_noisy_row(rng, y, config.n_node_labels, s) for y in ys])
    edge_pot = np.array([_noisy_row(rng, y, config.n_edge_labels, s) for y in ye])
    event_pot = _noisy_row(rng, c, config.n_events, s) if config.with_event else None
    return GraphInstance(
        node_potentials=node_pot,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        edge_potentials=edge_pot.reshape(-1, config.n_edge_labels),
        event_potential=event_pot,
        truth=Truth(c, tuple(int(y) for y in ys), tuple(ye)),
        instance_id=instance_id,
        n_edge_labels=config.n_edge_labels,
        n_events=config.n_events,
    )


def generate_split(config, n_eval, n_calibration):
    """Draw disjoint evaluation and calibration scenes and the calibration store.

    Returns ``(eval_instances, calibration_instances, store)``. The store is
    built only from the calibration scenes.
    """
    if n_eval < 0 or n_calibration < 0:
        raise ValueError("instance counts must be nonnegative")
    eval_seq, cal_seq = np.random.SeedSequence(config.seed).spawn(2)
    eval_rng, cal_rng = np.random.default_rng(eval_seq), np.random.default_rng(cal_seq)
    evals = [_draw_instance(eval_rng, config, f"eval-{k}") for k in range(n_eval)]
    cals = [_draw_instance(cal_rng, config, f"cal-{k}") for k in range(n_calibration)]
    store = build_store(cals, config.n_node_labels, config.n_edge_labels, config.n_events)
    return evals, cals, store


def generate(config, n_instances):
    """``n_instances`` evaluation scenes plus a store from a disjoint calibration split.

    The calibration split has ``config.n_calibration`` scenes, defaulting to
    ``n_instances``.
    """
    n_cal = n_instances if config.n_calibration is None else config.n_calibration
    evals, _, store = generate_split(config, n_instances, n_cal)
    return evals, store


def label_posterior(confusion_map):
    """``P(event | action)`` under a uniform event prior; unseen actions map uniformly."""
    m = np.asarray(confusion_map, dtype=np.float64)
    col = m.sum(axis=0, keepdims=True)
    uniform = np.full_like(m, 1.0 / m.shape[0])
    return np.where(col > 0, m / np.where(col > 0, col, 1.0), uniform)


def event_evidence(node_potentials, confusion_map):
    """Mean of node rows mapped through the confusion map onto event classes."""
    mapped = np.asarray(node_potentials) @ label_posterior(confusion_map).T
    ev = mapped.mean(axis=0)
    return ev / ev.sum()


@dataclass
class CorruptionConfig:
    """Row-level corruption of potentials.

    Each node and edge row is, with probability ``q``, mixed with weight
    ``severity`` toward a one-hot row at a uniformly drawn wrong label. When a
    ``confusion_map`` is given and the instance has an event row, that row is
    replaced by the event evidence of the corrupted node rows as soon as any
    node row was altered. Without a confusion map the event row is kept.
    """

    q: float = 0.0
    severity: float = 0.5
    seed: int = 0
    confusion_map: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must lie in [0, 1]")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")
        if self.confusion_map is not None:
            self.confusion_map = np.asarray(self.confusion_map, dtype=np.float64)


def _corrupt_rows(rows, labels, q, severity, rng):
    rows = rows.copy()
    n, k = rows.shape
    hit = rng.random(n) < q
    # an offset in [1, k) from the reference label always lands on a wrong label
    offsets = rng.integers(1, k, size=n) if k > 1 else np.zeros(n, dtype=np.int64)
    altered = hit & (severity > 0.0) & (k > 1)
    for i in np.flatnonzero(altered):
        target = (labels[i] + offsets[i]) % k
        mixed = (1.0 - severity) * rows[i]
        mixed[target] += severity
        rows[i] = mixed / mixed.sum()
    return rows, altered


def corrupt(instance, config, rng=None):
    """Return a corrupted copy of ``instance``; the truth block is preserved.

    Wrong labels are drawn relative to the annotated labels when the instance
    has them, otherwise relative to each row's argmax. The random stream is
    consumed identically for every ``q``: one uniform and one label offset per
    row, nodes first.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    t = instance.truth
    node_ref, edge_ref = instance.argmax_labels()
    if t is not None and t.node_labels is not None:
        node_ref = t.node_labels
    if t is not None and t.edge_labels is not None:
        edge_ref = t.edge_labels
    node_pot, node_alt = _corrupt_rows(instance.node_potentials, node_ref, config.q, config.severity, rng)
    edge_pot = instance.edge_potentials
    if instance.n_edges:
        edge_pot, _ = _corrupt_rows(instance.edge_potentials, edge_ref, config.q, config.severity, rng)
    event_pot = instance.event_potential
    if event_pot is not None and config.confusion_map is not None and node_alt.any():
        event_pot = event_evidence(node_pot, config.confusion_map)
    return GraphInstance(
        node_potentials=node_pot,
        edges=instance.edges.copy(),
        edge_potentials=edge_pot.copy(),
        event_potential=None if event_pot is None else np.array(event_pot),
        truth=instance.truth,
        instance_id=instance.instance_id,
        n_edge_labels=instance.n_edge_labels,
        n_events=instance.n_events,
    )


def evaluate(predictions, truths, score_labels=False):
    """Multi-class accuracy and mean per-class accuracy over event classes.

    ``predictions`` may be :class:`~confidence_energy.inference.Prediction`
    objects or bare class indices; ``truths`` may be instances, ``Truth``
    objects or class indices. Classes absent from ``truths`` do not enter the
    per-class mean. With ``score_labels`` a prediction also needs its node and
    edge labels to match the annotated ones.
    """
    predictions, truths = list(predictions), list(truths)
    if not predictions or len(predictions) != len(truths):
        raise ValueError("predictions and truths must be non-empty and of equal length")
    correct, classes = [], []
    for pred, truth in zip(predictions, truths):
        if isinstance(truth, GraphInstance):
            truth = truth.truth
        c_true = truth.event_class if isinstance(truth, Truth) else int(truth)
        c_pred = pred.assignment.event_class if hasattr(pred, "assignment") else int(pred)
        ok = c_pred == c_true
        if score_labels and isinstance(truth, Truth) and hasattr(pred, "assignment"):
            if truth.node_labels is not None:
                ok = ok and tuple(pred.assignment.node_labels) == tuple(truth.node_labels)
            if truth.edge_labels is not None:
                ok = ok and tuple(pred.assignment.edge_labels) == tuple(truth.edge_labels)
        correct.append(ok)
        classes.append(c_true)
    correct, classes = np.array(correct, dtype=float), np.array(classes)
    mca = float(correct.mean())
    per_class = [correct[classes == c].mean() for c in np.unique(classes)]
    return mca, float(np.mean(per_class))


@dataclass
class SweepRow:
    q: float
    regime: str
    mca: float
    mpca: float
    drop_mca: float
    drop_mpca: float


@dataclass
class SweepReport:
    rows: list
    config: dict = field(default_factory=dict)

    def get(self, q, regime):
        for r in self.rows:
            if r.q == q and r.regime == regime:
                return r
        raise KeyError((q, regime))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["q", "regime", "MCA", "MPCA", "drop_MCA", "drop_MPCA"])
            for r in self.rows:
                w.writerow([repr(r.q), r.regime, repr(r.mca), repr(r.mpca), repr(r.drop_mca), repr(r.drop_mpca)])

    def write_summary(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"config": self.config, "rows": [asdict(r) for r in self.rows]}, fh, indent=1)
            fh.write("\n")


def _item_rng(seed, q, instance_index):
    # keyed by the q value (in millionths), so a point does not depend on the rest of the grid
    return np.random.default_rng(np.random.SeedSequence([seed, int(round(q * 1_000_000)), instance_index]))


def fit_shared_params(calibration, store, n_events, n_node_labels, n_edge_labels, lam=1.0,
                      config=None, mode="cern2"):
    """Energy-layer weights shared by the energy-only and confidence-energy regimes.

    Weights are trained with every multiplier at zero, so they fit the raw
    energy alone; the returned parameters then switch the multipliers on at
    ``lam``. Energy-only inference with them is the plain trained model and
    confidence-energy adds the p-value regularizer on top of it.
    """
    config = config or TrainConfig(learning_rate=1e-2, batch_size=100, max_iterations=1000)
    init = EnergyParams.zeros(
        n_events, n_node_labels, n_edge_labels,
        lambda_node=0.0, lambda_edge=0.0, lambda_event=0.0, mode=mode,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyCalibrationWarning)
        fitted, _ = train(calibration, init, store, config)
    return fitted.copy(lambda_node=lam, lambda_edge=lam, lambda_event=lam)


def _params_for(params):
    if isinstance(params, EnergyParams):
        return {regime: params for regime in REGIMES}
    missing = [r for r in REGIMES if r not in params]
    if missing:
        raise ValueError(f"params lack regimes {missing}")
    return params


def robustness_sweep(instances, params, store, q_grid=DEFAULT_Q_GRID, config=None, threads=1):
    """Accuracy of every regime as corruption probability grows.

    Parameters
    ----------
    instances : list of GraphInstance
        Labelled evaluation scenes.
    params : EnergyParams or dict
        One parameter set shared by all regimes (energy-only zeroes its
        multipliers, softmax-only ignores it) or a mapping regime -> params.
    store : CalibrationStore
    q_grid : sequence of float
    config : CorruptionConfig, optional
        Severity, seed and confusion map; its ``q`` is ignored.
    threads : int

    Returns
    -------
    SweepReport
        Drops are measured against the uncorrupted instances. Each
        ``(q, instance)`` pair has its own seeded stream, so results do not
        depend on ``threads``, on evaluation order or on the other grid points.
    """
    config = config or CorruptionConfig()
    instances = list(instances)
    by_regime = _params_for(params)
    for inst in instances:
        if inst.truth is None:
            raise ValueError(f"instance {inst.instance_id!r} has no truth block")

    def run_all(batch):
        scores = {}
        for regime in REGIMES:
            preds = []
            for inst in batch:
                try:
                    preds.append(infer(inst, by_regime[regime], store, regime))
                except (ValueError, RuntimeError) as exc:
                    raise type(exc)(f"instance {inst.instance_id!r}: {exc}") from exc
            scores[regime] = evaluate(preds, batch)
        return scores

    def job(q):
        if q == 0.0:
            return run_all(instances)
        cfg = CorruptionConfig(q, config.severity, config.seed, config.confusion_map)
        return run_all([corrupt(inst, cfg, _item_rng(config.seed, q, k)) for k, inst in enumerate(instances)])

    qs = [float(q) for q in q_grid]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyCalibrationWarning)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(job, qs))
        else:
            results = [job(q) for q in qs]
        base = results[qs.index(0.0)] if 0.0 in qs else job(0.0)
    n_empty = sum(issubclass(w.category, EmptyCalibrationWarning) for w in caught)
    for w in caught:
        if not issubclass(w.category, EmptyCalibrationWarning):
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    if n_empty:
        warnings.warn(
            f"{n_empty} p-value batch(es) in the sweep touched empty calibration categories",
            EmptyCalibrationWarning,
            stacklevel=2,
        )

    rows = []
    for q, scores in zip(qs, results):
        for regime in REGIMES:
            mca, mpca = scores[regime]
            rows.append(SweepRow(q, regime, mca, mpca, base[regime][0] - mca, base[regime][1] - mpca))
    echo = {
        "q_grid": qs,
        "severity": config.severity,
        "seed": config.seed,
        "n_instances": len(instances),
        "confusion_map": None if config.confusion_map is None else config.confusion_map.tolist(),
    }
    return SweepReport(rows, echo)


__all__ = [
    "DEFAULT_Q_GRID", "CorruptionConfig", "GeneratorConfig", "SweepReport", "SweepRow",
    "corrupt", "default_confusion_map", "default_edge_map", "evaluate", "event_evidence", "fit_shared_params",
    "generate", "generate_split", "label_posterior", "robustness_sweep",
]
