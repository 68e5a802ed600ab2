"""The aggregation hierarchy: items -> sessions -> calendar/location units
-> pattern vectors.

Sessions are bucketed by the calendar unit of their leading timestamp
(hour of day, ISO week, weekday) and by location. Each bucket is
aggregated with a GRU over its chronologically ordered members followed
by an affine map and nonlinearity; unit embeddings are then aggregated
the same way, in canonical unit order, into one pattern vector per kind.
Units with no sessions are omitted rather than zero-filled.

Everything here operates on row matrices so that a batch of users can be
pushed through each layer with a handful of fused tensor ops; the
single-user entry points are one-row specializations of the same code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GruParams, Tensor
from .data import BehaviorGraph, Dataset, ItemRecord, LocationRecord, UNIT_MAPPERS

TIME_KINDS = ("hour", "week", "weekday")


def gru_params(rng: np.random.Generator, input_size: int, hidden: int,
               prefix: str) -> dict[str, Tensor]:
    """Freshly initialized GRU weights under checkpoint-ready names."""
    out: dict[str, Tensor] = {}
    for gate in ("z", "r", "c"):
        out[f"{prefix}.W_{gate}"] = ad.tensor(ad.uniform_init(rng, (hidden, input_size), input_size))
        out[f"{prefix}.U_{gate}"] = ad.tensor(ad.uniform_init(rng, (hidden, hidden), hidden))
        out[f"{prefix}.b_{gate}"] = ad.tensor(np.zeros(hidden))
    return out


def gru_view(params: dict[str, Tensor], prefix: str) -> GruParams:
    return GruParams(
        w_z=params[f"{prefix}.W_z"], w_r=params[f"{prefix}.W_r"], w_c=params[f"{prefix}.W_c"],
        u_z=params[f"{prefix}.U_z"], u_r=params[f"{prefix}.U_r"], u_c=params[f"{prefix}.U_c"],
        b_z=params[f"{prefix}.b_z"], b_r=params[f"{prefix}.b_r"], b_c=params[f"{prefix}.b_c"],
    )


def aggregate_rows(source: Tensor, seqs, gru: GruParams, w: Tensor, b: Tensor,
                   act: str) -> Tensor:
    """act(W . GRU(sequence) + b) for many row-index sequences at once."""
    hidden = ad.gru_gather_batch(source, seqs, gru)
    return ad.dense_rows(hidden, w, b, act)


def aggregate_sequence(inputs, gru: GruParams, w: Tensor, b: Tensor, act: str = "relu") -> Tensor:
    """Single-sequence aggregation: act(W . GRU(inputs) + b) as a vector."""
    hidden = ad.gru_sequence(inputs, gru)
    return ad.affine_vec(w, hidden, b, act)


# The spec-level aggregation operations are all instances of the same
# sequence aggregation with site-specific parameters.

def aggregate_session(item_embeddings, gru, w, b, act: str = "relu") -> Tensor:
    """Session embedding from its chronologically ordered item embeddings."""
    return aggregate_sequence(item_embeddings, gru, w, b, act)


def aggregate_time_unit(session_embeddings, gru, w, b, act: str = "relu") -> Tensor:
    """Time-unit embedding from the bucket's ordered session embeddings."""
    return aggregate_sequence(session_embeddings, gru, w, b, act)


def aggregate_temporal_pattern(unit_embeddings, gru, w, b, act: str = "relu") -> Tensor:
    """Pattern vector from one kind's unit embeddings in canonical order."""
    return aggregate_sequence(unit_embeddings, gru, w, b, act)


def aggregate_location_unit(session_location_rows, gru, w, b, act: str = "relu") -> Tensor:
    """Location-unit embedding from ordered concat(session, location) rows."""
    return aggregate_sequence(session_location_rows, gru, w, b, act)


def aggregate_spatial_pattern(location_unit_embeddings, gru, w, b, act: str = "relu") -> Tensor:
    """Spatial pattern from location units ordered by first visit."""
    return aggregate_sequence(location_unit_embeddings, gru, w, b, act)


# ---------------------------------------------------------------------------
# bucketing


def bucket_sessions(sessions, mapper_kind: str, tz_offset_minutes: int = 0):
    """Group session positions by the time unit of their leading timestamp.

    Returns (unit_values, buckets): unit values in canonical order (hours
    0..23, weeks ascending, weekdays Sunday..Saturday; absent units
    skipped) and, parallel to them, the member session positions in
    ascending (timestamp, session_id) order.
    """
    mapper = UNIT_MAPPERS[mapper_kind]
    order = sorted(range(len(sessions)),
                   key=lambda i: (sessions[i].leading_timestamp, sessions[i].session_id))
    by_unit: dict[int, list[int]] = {}
    for pos in order:
        unit = mapper(sessions[pos].leading_timestamp, tz_offset_minutes)
        by_unit.setdefault(unit.value, []).append(pos)
    values = sorted(by_unit)
    return values, [by_unit[v] for v in values]


def bucket_locations(sessions):
    """Group session positions by location, ordered by first visit.

    Returns (location_ids, buckets) with bucket members in ascending
    (timestamp, session_id) order.
    """
    order = sorted(range(len(sessions)),
                   key=lambda i: (sessions[i].leading_timestamp, sessions[i].session_id))
    ids: list[str] = []
    buckets: dict[str, list[int]] = {}
    for pos in order:
        lid = sessions[pos].location_id
        if lid not in buckets:
            buckets[lid] = []
            ids.append(lid)
        buckets[lid].append(pos)
    return ids, [buckets[lid] for lid in ids]


# ---------------------------------------------------------------------------
# compiled users and the batched forward


@dataclass
class CompiledUser:
    """Index structures for one user's graph, ready for batched forwards."""

    user_id: str
    item_records: list[list[ItemRecord]]    # per session, ordered by event time
    location_records: list[LocationRecord]  # per session
    unit_values: dict[str, list[int]]       # canonical unit order per kind
    unit_buckets: dict[str, list[list[int]]]
    location_ids: list[str]                 # first-visit order
    location_buckets: list[list[int]]
    labels: object


def compile_user(graph: BehaviorGraph, dataset: Dataset,
                 tz_offset_minutes: int = 0) -> CompiledUser:
    sessions = graph.sessions
    unit_values = {}
    unit_buckets = {}
    for kind in TIME_KINDS:
        values, buckets = bucket_sessions(sessions, kind, tz_offset_minutes)
        unit_values[kind] = values
        unit_buckets[kind] = buckets
    loc_ids, loc_buckets = bucket_locations(sessions)
    return CompiledUser(
        user_id=graph.user_id,
        item_records=[[dataset.items[iid] for iid, _ in s.events] for s in sessions],
        location_records=[dataset.locations[s.location_id] for s in sessions],
        unit_values=unit_values,
        unit_buckets=unit_buckets,
        location_ids=loc_ids,
        location_buckets=loc_buckets,
        labels=graph.labels,
    )


@dataclass
class PatternSet:
    """The four per-user pattern vectors; ablated slots are None."""

    hourly: Tensor | None
    weekly: Tensor | None
    weekday: Tensor | None
    spatial: Tensor | None

    def present(self) -> list[Tensor]:
        return [p for p in (self.hourly, self.weekly, self.weekday, self.spatial)
                if p is not None]


@dataclass
class BatchForward:
    """Intermediate row matrices for a batch of users.

    ``session_rows`` is (total sessions, K_S) with users contiguous;
    ``unit_rows[kind]`` stacks every user's unit embeddings of that kind,
    users contiguous in canonical unit order; ``unit_slices[kind][b]`` is
    the (start, end) row range of user b. Patterns are (B, K) matrices.
    """

    session_rows: Tensor
    session_slices: list[tuple[int, int]]
    unit_rows: dict[str, Tensor]
    unit_slices: dict[str, list[tuple[int, int]]]
    unit_values: dict[str, list[list[int]]]
    location_rows: Tensor | None
    location_slices: list[tuple[int, int]]
    location_ids: list[list[str]]
    patterns: dict[str, Tensor]


def batch_session_rows(users: list[CompiledUser], item_embedder, params,
                       act: str) -> tuple[Tensor, list[tuple[int, int]]]:
    """Embed all items once per distinct id and aggregate every session."""
    distinct: dict[str, int] = {}
    records: list[ItemRecord] = []
    session_seqs: list[list[int]] = []
    slices: list[tuple[int, int]] = []
    for user in users:
        start = len(session_seqs)
        for items in user.item_records:
            seq = []
            for rec in items:
                pos = distinct.get(rec.item_id)
                if pos is None:
                    pos = len(records)
                    distinct[rec.item_id] = pos
                    records.append(rec)
                seq.append(pos)
            session_seqs.append(seq)
        slices.append((start, len(session_seqs)))
    item_rows = item_embedder.embed_batch(records)
    rows = aggregate_rows(item_rows, session_seqs, gru_view(params, "gru_sess"),
                          params["W_S"], params["b_S"], act)
    return rows, slices


def batch_unit_rows(users, session_rows, session_slices, kind, params, act):
    """Aggregate one kind's buckets for every user into unit rows."""
    seqs: list[list[int]] = []
    slices: list[tuple[int, int]] = []
    values: list[list[int]] = []
    for b, user in enumerate(users):
        offset = session_slices[b][0]
        start = len(seqs)
        for bucket in user.unit_buckets[kind]:
            seqs.append([offset + pos for pos in bucket])
        slices.append((start, len(seqs)))
        values.append(list(user.unit_values[kind]))
    suffix = {"hour": "h", "week": "w", "weekday": "y"}[kind]
    rows = aggregate_rows(session_rows, seqs, gru_view(params, f"gru_{suffix}"),
                          params[f"W_{suffix}"], params[f"b_{suffix}"], act)
    return rows, slices, values


def batch_location_rows(users, session_rows, session_slices, location_embedder,
                        params, act):
    """Location-unit rows: GRU over concat(session, location) per location."""
    distinct: dict[str, int] = {}
    records: list[LocationRecord] = []
    per_session_loc: list[int] = []
    for user in users:
        for rec in user.location_records:
            pos = distinct.get(rec.location_id)
            if pos is None:
                pos = len(records)
                distinct[rec.location_id] = pos
                records.append(rec)
            per_session_loc.append(pos)
    loc_rows = location_embedder.embed_batch(records)
    session_loc = ad.gather_rows(loc_rows, per_session_loc)
    combined = ad.concat([session_rows, session_loc], axis=1)

    seqs: list[list[int]] = []
    slices: list[tuple[int, int]] = []
    ids: list[list[str]] = []
    for b, user in enumerate(users):
        offset = session_slices[b][0]
        start = len(seqs)
        for bucket in user.location_buckets:
            seqs.append([offset + pos for pos in bucket])
        slices.append((start, len(seqs)))
        ids.append(list(user.location_ids))
    rows = aggregate_rows(combined, seqs, gru_view(params, "gru_l"),
                          params["W_SxL"], params["b_SxL"], act)
    return rows, slices, ids


def batch_pattern_rows(unit_rows, unit_slices, pattern_key, params, act):
    """One pattern row per user: GRU over their canonical unit sequence."""
    seqs = [list(range(start, end)) for start, end in unit_slices]
    return aggregate_rows(unit_rows, seqs, gru_view(params, f"gru_{pattern_key}"),
                          params[f"W_{pattern_key}"], params[f"b_{pattern_key}"], act)


PATTERN_KEYS = {"hour": "T_h", "week": "T_w", "weekday": "T_y", "spatial": "L"}


def forward_patterns(users: list[CompiledUser], item_embedder, location_embedder,
                     params, act: str, kinds: tuple[str, ...]) -> BatchForward:
    """Run the hierarchy for a batch; ``kinds`` selects which of the four
    pattern paths (hour/week/weekday/spatial) to compute."""
    session_rows, session_slices = batch_session_rows(users, item_embedder, params, act)
    unit_rows: dict[str, Tensor] = {}
    unit_slices: dict[str, list[tuple[int, int]]] = {}
    unit_values: dict[str, list[list[int]]] = {}
    patterns: dict[str, Tensor] = {}
    for kind in TIME_KINDS:
        if kind not in kinds:
            continue
        rows, slices, values = batch_unit_rows(users, session_rows, session_slices,
                                               kind, params, act)
        unit_rows[kind] = rows
        unit_slices[kind] = slices
        unit_values[kind] = values
        if f"W_{PATTERN_KEYS[kind]}" in params:
            patterns[kind] = batch_pattern_rows(rows, slices, PATTERN_KEYS[kind], params, act)
    location_rows = None
    location_slices: list[tuple[int, int]] = []
    location_ids: list[list[str]] = []
    if "spatial" in kinds:
        location_rows, location_slices, location_ids = batch_location_rows(
            users, session_rows, session_slices, location_embedder, params, act)
        if "W_L" in params:
            patterns["spatial"] = batch_pattern_rows(location_rows, location_slices,
                                                     "L", params, act)
    return BatchForward(session_rows, session_slices, unit_rows, unit_slices,
                        unit_values, location_rows, location_slices, location_ids,
                        patterns)


def forward_user(user: CompiledUser, item_embedder, location_embedder, params,
                 act: str = "relu") -> PatternSet:
    """All four pattern vectors for a single user."""
    fwd = forward_patterns([user], item_embedder, location_embedder, params, act,
                           kinds=("hour", "week", "weekday", "spatial"))
    def row(kind):
        p = fwd.patterns.get(kind)
        return None if p is None else ad.reshape(p, (p.value.shape[1],))
    return PatternSet(row("hour"), row("week"), row("weekday"), row("spatial"))
