"""Pattern fusion into the user embedding, attention, and prediction heads.

The plain model concatenates the four pattern vectors. The attention
variant instead pools each kind's time-unit embeddings under a location
query and the location-unit embeddings under that kind's temporal query
(bilinear tanh scores, softmax weights), concatenating the two pooled
vectors per kind and the three kinds into the user embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .aggregation import BatchForward, PatternSet, TIME_KINDS

ATTENTION_KIND_KEYS = {"hour": "T_h", "week": "T_w", "weekday": "T_y"}


def fuse_concat(patterns: PatternSet) -> Tensor:
    """User embedding: concatenation of the present pattern vectors."""
    present = patterns.present()
    if not present:
        raise ValueError("no patterns to fuse")
    if len(present) == 1:
        return present[0]
    return ad.concat(present)


def mean_query(units) -> Tensor:
    """Arithmetic mean of a user's unit embeddings (their own unit count)."""
    if isinstance(units, Tensor):
        return ad.mean_rows(units)
    if len(units) == 0:
        raise ValueError("mean_query of zero units")
    return ad.mean_rows(ad.stack_rows(list(units)))


def bilinear_score(e: Tensor, q: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """tanh(e . W . q + b) for one unit embedding against one query."""
    return ad.tanh(ad.add(ad.dot(e, ad.matvec(w, q)), b))


def attend(units: Tensor, query: Tensor, w: Tensor, b: Tensor):
    """Softmax-pooled units under bilinear tanh scores against a query.

    ``units`` is (n, K_u); returns (weights ndarray, pooled (K_u,) tensor).
    Fused op with a hand-derived backward through both the pooling and the
    score path.
    """
    uv, qv, wv = units.value, query.value, w.value
    if uv.ndim != 2 or uv.shape[0] == 0:
        raise ad.ShapeError(f"attend expects non-empty unit rows, got {uv.shape}")
    if wv.shape != (uv.shape[1], qv.shape[0]):
        raise ad.ShapeError(f"attend: W shape {wv.shape} vs units {uv.shape} and query {qv.shape}")
    if b.value.shape != ():
        raise ad.ShapeError("attend: bias must be a scalar")
    v = wv @ qv
    s = np.tanh(uv @ v + b.value)
    z = s - s.max()
    e = np.exp(z)
    alpha = e / e.sum()
    pooled = alpha @ uv

    def bwd(g):
        dalpha = uv @ g
        ds = alpha * (dalpha - float(alpha @ dalpha))
        da = ds * (1.0 - s * s)
        d_units = np.outer(alpha, g) + np.outer(da, v)
        dv = uv.T @ da
        dw = np.outer(dv, qv)
        dq = wv.T @ dv
        db = np.asarray(da.sum())
        return (d_units, dq, dw, db)

    out = Tensor(pooled, (units, query, w, b), bwd)
    return alpha, out


@dataclass
class AttentionEntry:
    """One attention application: which units were pooled and their weights."""

    kind: str        # hour | week | weekday
    direction: str   # "time_under_location" | "location_under_time"
    unit_labels: list[str]
    weights: np.ndarray
    query: np.ndarray


@dataclass
class AttentionTrace:
    entries: list[AttentionEntry] = field(default_factory=list)

    def csv_rows(self):
        for entry in self.entries:
            for label, weight in zip(entry.unit_labels, entry.weights):
                yield [entry.kind, entry.direction, label, repr(float(weight))]


def interactive_pattern(time_units: Tensor, location_units: Tensor, kind: str,
                        params: dict[str, Tensor],
                        trace: AttentionTrace | None = None,
                        time_labels=None, location_labels=None) -> Tensor:
    """concat(time units pooled under the location query,
    location units pooled under the temporal query) for one time kind."""
    key = ATTENTION_KIND_KEYS[kind]
    loc_query = mean_query(location_units)
    time_query = mean_query(time_units)
    a_time, pooled_time = attend(time_units, loc_query,
                                 params[f"W_(L,{key})"], params[f"b_(L,{key})"])
    a_loc, pooled_loc = attend(location_units, time_query,
                               params[f"W_({key},L)"], params[f"b_({key},L)"])
    if trace is not None:
        trace.entries.append(AttentionEntry(
            kind, "time_under_location",
            list(time_labels) if time_labels is not None else
            [str(i) for i in range(time_units.value.shape[0])],
            a_time, loc_query.value.copy()))
        trace.entries.append(AttentionEntry(
            kind, "location_under_time",
            list(location_labels) if location_labels is not None else
            [str(i) for i in range(location_units.value.shape[0])],
            a_loc, time_query.value.copy()))
    return ad.concat([pooled_time, pooled_loc])


def fuse_interactive(interactive_patterns: list[Tensor]) -> Tensor:
    """User embedding for the attention variant: the three interactive
    patterns (hour, week, weekday order) concatenated."""
    if len(interactive_patterns) != 3:
        raise ValueError(f"expected 3 interactive patterns, got {len(interactive_patterns)}")
    return ad.concat(interactive_patterns)


def attention_user_rows(fwd: BatchForward, params: dict[str, Tensor],
                        traces: list[AttentionTrace] | None = None) -> Tensor:
    """(B, 3 * (K_time + K_loc)) user embeddings from batched unit rows."""
    n_users = len(fwd.location_slices)
    rows = []
    for b in range(n_users):
        ls, le = fwd.location_slices[b]
        loc_units = ad.gather_rows(fwd.location_rows, list(range(ls, le)))
        loc_labels = [f"loc:{lid}" for lid in fwd.location_ids[b]]
        trace = None
        if traces is not None:
            trace = AttentionTrace()
            traces.append(trace)
        parts = []
        for kind in TIME_KINDS:
            us, ue = fwd.unit_slices[kind][b]
            time_units = ad.gather_rows(fwd.unit_rows[kind], list(range(us, ue)))
            time_labels = [f"{kind}:{v}" for v in fwd.unit_values[kind][b]]
            parts.append(interactive_pattern(time_units, loc_units, kind, params,
                                             trace, time_labels, loc_labels))
        rows.append(fuse_interactive(parts))
    return ad.stack_rows(rows)


# ---------------------------------------------------------------------------
# prediction heads and objectives


def predict_logits(u: Tensor, w_classes: Tensor) -> Tensor:
    """Per-class scores W_a . u for one user embedding."""
    return ad.matvec(w_classes, u)


def predict_value(u: Tensor, w: Tensor) -> Tensor:
    """Scalar regression output W . u."""
    return ad.dot(w, u)


def classification_loss(logit_rows: Tensor, targets) -> Tensor:
    """Batch-mean cross entropy over per-user logits."""
    return ad.softmax_cross_entropy_rows(logit_rows, targets)


def regression_loss(pred_rows: Tensor, targets) -> Tensor:
    """Batch-mean squared error over per-user scalar predictions."""
    return ad.mean_squared_error_rows(pred_rows, targets)


def loss(predictions: list[Tensor], labels, task: str) -> Tensor:
    """Spec-level objective over per-user predictions.

    Classification predictions are logit vectors and labels class indices;
    regression predictions are scalars. Averaged over the batch.
    """
    if len(predictions) == 0:
        raise ValueError("empty batch")
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels misaligned")
    if task in ("gender", "income", "classification"):
        terms = [ad.softmax_cross_entropy(p, int(a)) for p, a in zip(predictions, labels)]
    elif task in ("age", "regression"):
        terms = [ad.squared_error(p, float(a)) for p, a in zip(predictions, labels)]
    else:
        raise ValueError(f"unknown task {task!r}")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))
