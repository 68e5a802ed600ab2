"""Behavior-log ingestion: CSV parsing, per-user tripartite graphs,
calendar unit mapping, and dataset splits.

A log is four CSV files (items, locations, sessions one row per event,
users). Each user's sessions become a tripartite graph of session,
location, and item nodes; a session's own timestamp is the minimum of its
event timestamps and drives all calendar bucketing.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

from .seeding import substream

ITEM_FIELDS = ["item_id", "category", "title"]
LOCATION_FIELDS = ["location_id", "country", "region", "city", "lon", "lat"]
SESSION_FIELDS = ["session_id", "user_id", "location_id", "item_id", "timestamp"]
USER_FIELDS = ["user_id", "gender", "income", "age"]


class LoadError(ValueError):
    """Raised for malformed or dangling log rows; message cites the line."""


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    category: str | None = None
    title: tuple[str, ...] | None = None


@dataclass(frozen=True)
class LocationRecord:
    location_id: str
    country: str | None
    region: str | None
    city: str | None
    lon: float | None
    lat: float | None

    def __post_init__(self):
        has_admin = any(v for v in (self.country, self.region, self.city))
        has_coord = self.lon is not None and self.lat is not None
        if not has_admin and not has_coord:
            raise LoadError(f"location {self.location_id!r} has no admin level and no coordinates")
        if has_coord:
            if not -180.0 <= self.lon <= 180.0:
                raise LoadError(f"location {self.location_id!r}: longitude {self.lon} out of range")
            if not -90.0 <= self.lat <= 90.0:
                raise LoadError(f"location {self.location_id!r}: latitude {self.lat} out of range")


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    user_id: str
    location_id: str
    events: tuple[tuple[str, int], ...]  # (item_id, epoch seconds), ascending

    @property
    def leading_timestamp(self) -> int:
        """The session's own timestamp: minimum event timestamp."""
        return self.events[0][1]


@dataclass(frozen=True)
class UserLabels:
    user_id: str
    gender: int | None  # 0 = f, 1 = m, None = unlabeled
    income: int | None  # 0..9, 0 means unknown but is a predictable class
    age: float | None


@dataclass(frozen=True)
class BehaviorGraph:
    """One user's tripartite session/location/item graph.

    Sessions are chronological by leading timestamp. Location and item
    node lists are ordered by first appearance. Session-location edges
    are implicit (one per session, stamped with the leading timestamp);
    session-item edges are the per-session event lists.
    """

    user_id: str
    sessions: tuple[SessionRecord, ...]
    location_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    labels: UserLabels

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    @property
    def num_location_edges(self) -> int:
        return len(self.sessions)

    @property
    def num_item_edges(self) -> int:
        return sum(len(s.events) for s in self.sessions)


@dataclass(frozen=True)
class TimeUnit:
    """A discrete calendar bucket: hour of day, ISO week of year, or weekday."""

    kind: str  # "hour" | "week" | "weekday"
    value: int

    def __post_init__(self):
        ranges = {"hour": (0, 23), "week": (1, 53), "weekday": (0, 6)}
        if self.kind not in ranges:
            raise ValueError(f"unknown time unit kind {self.kind!r}")
        lo, hi = ranges[self.kind]
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.kind} value {self.value} outside {lo}..{hi}")


@dataclass
class Dataset:
    items: dict[str, ItemRecord]
    locations: dict[str, LocationRecord]
    users: dict[str, UserLabels]
    graphs: dict[str, BehaviorGraph]
    dropped_sessions: int = 0
    deduped_events: int = 0

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.items == other.items and self.locations == other.locations
                and self.users == other.users and self.graphs == other.graphs)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


# ---------------------------------------------------------------------------
# calendar unit mapping


def _local(t: int, tz_offset_minutes: int = 0) -> datetime:
    return datetime.fromtimestamp(int(t), tz=timezone.utc) + timedelta(minutes=tz_offset_minutes)


def hour(t: int, tz_offset_minutes: int = 0) -> TimeUnit:
    """Hour of day, 0..23."""
    return TimeUnit("hour", _local(t, tz_offset_minutes).hour)


def week(t: int, tz_offset_minutes: int = 0) -> TimeUnit:
    """ISO-8601 week of year, 1..53."""
    return TimeUnit("week", _local(t, tz_offset_minutes).isocalendar()[1])


def weekday(t: int, tz_offset_minutes: int = 0) -> TimeUnit:
    """Day of week with Sunday = 0 through Saturday = 6."""
    return TimeUnit("weekday", (_local(t, tz_offset_minutes).weekday() + 1) % 7)


UNIT_MAPPERS = {"hour": hour, "week": week, "weekday": weekday}


def normalize_coordinates(lon: float, lat: float) -> tuple[float, float]:
    """Affine map of (lon, lat) into the unit square."""
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} out of range")
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} out of range")
    return lon / 360.0 + 0.5, lat / 180.0 + 0.5


# ---------------------------------------------------------------------------
# parsing


def _reader(path: str, fields: list[str]):
    fh = open(path, newline="", encoding="utf-8")
    rd = csv.DictReader(fh)
    if rd.fieldnames != fields:
        fh.close()
        raise LoadError(f"{os.path.basename(path)}: expected header {fields}, got {rd.fieldnames}")
    return fh, rd


def _parse_items(path: str) -> dict[str, ItemRecord]:
    items: dict[str, ItemRecord] = {}
    fh, rd = _reader(path, ITEM_FIELDS)
    with fh:
        for row in rd:
            iid = row["item_id"]
            if not iid:
                raise LoadError(f"items line {rd.line_num}: empty item_id")
            if iid in items:
                raise LoadError(f"items line {rd.line_num}: duplicate item_id {iid!r}")
            title = tuple(row["title"].split()) if row["title"] else None
            items[iid] = ItemRecord(iid, row["category"] or None, title)
    return items


def _parse_locations(path: str) -> dict[str, LocationRecord]:
    locs: dict[str, LocationRecord] = {}
    fh, rd = _reader(path, LOCATION_FIELDS)
    with fh:
        for row in rd:
            lid = row["location_id"]
            if not lid:
                raise LoadError(f"locations line {rd.line_num}: empty location_id")
            if lid in locs:
                raise LoadError(f"locations line {rd.line_num}: duplicate location_id {lid!r}")
            try:
                lon = float(row["lon"]) if row["lon"] else None
                lat = float(row["lat"]) if row["lat"] else None
            except ValueError as exc:
                raise LoadError(f"locations line {rd.line_num}: bad coordinate: {exc}") from None
            if (lon is None) != (lat is None):
                raise LoadError(f"locations line {rd.line_num}: lon/lat must both be set or both empty")
            try:
                locs[lid] = LocationRecord(lid, row["country"] or None, row["region"] or None,
                                           row["city"] or None, lon, lat)
            except LoadError as exc:
                raise LoadError(f"locations line {rd.line_num}: {exc}") from None
    return locs


def _parse_users(path: str) -> dict[str, UserLabels]:
    users: dict[str, UserLabels] = {}
    fh, rd = _reader(path, USER_FIELDS)
    with fh:
        for row in rd:
            uid = row["user_id"]
            if not uid:
                raise LoadError(f"users line {rd.line_num}: empty user_id")
            if uid in users:
                raise LoadError(f"users line {rd.line_num}: duplicate user_id {uid!r}")
            g = row["gender"]
            if g not in ("f", "m", ""):
                raise LoadError(f"users line {rd.line_num}: gender must be f, m, or empty, got {g!r}")
            gender = None if g == "" else (0 if g == "f" else 1)
            try:
                income = int(row["income"])
            except ValueError:
                raise LoadError(f"users line {rd.line_num}: income must be an integer 0..9") from None
            if not 0 <= income <= 9:
                raise LoadError(f"users line {rd.line_num}: income {income} outside 0..9")
            age = None
            if row["age"]:
                try:
                    age = float(row["age"])
                except ValueError:
                    raise LoadError(f"users line {rd.line_num}: bad age {row['age']!r}") from None
            users[uid] = UserLabels(uid, gender, income, age)
    return users


def parse_log(items_path: str, locations_path: str, sessions_path: str,
              users_path: str) -> Dataset:
    """Load and cross-validate the four CSV files into a Dataset.

    Every session row must reference existing items, locations, and users;
    dangling references and malformed timestamps raise LoadError with the
    offending line number. Exact-duplicate event rows are dropped.
    """
    items = _parse_items(items_path)
    locations = _parse_locations(locations_path)
    users = _parse_users(users_path)

    # session_id -> (user_id, location_id, [(item_id, ts), ...])
    raw: dict[str, tuple[str, str, list[tuple[str, int]]]] = {}
    seen_rows: set[tuple[str, str, int]] = set()
    deduped = 0
    fh, rd = _reader(sessions_path, SESSION_FIELDS)
    with fh:
        for row in rd:
            sid = row["session_id"]
            uid = row["user_id"]
            lid = row["location_id"]
            iid = row["item_id"]
            if uid not in users:
                raise LoadError(f"sessions line {rd.line_num}: unknown user_id {uid!r}")
            if lid not in locations:
                raise LoadError(f"sessions line {rd.line_num}: unknown location_id {lid!r}")
            if iid not in items:
                raise LoadError(f"sessions line {rd.line_num}: unknown item_id {iid!r}")
            try:
                ts = int(row["timestamp"])
            except ValueError:
                raise LoadError(
                    f"sessions line {rd.line_num}: malformed timestamp {row['timestamp']!r}") from None
            key = (sid, iid, ts)
            if key in seen_rows:
                deduped += 1
                continue
            seen_rows.add(key)
            if sid in raw:
                prev_uid, prev_lid, events = raw[sid]
                if prev_uid != uid:
                    raise LoadError(f"sessions line {rd.line_num}: session {sid!r} spans users")
                if prev_lid != lid:
                    raise LoadError(f"sessions line {rd.line_num}: session {sid!r} spans locations")
                events.append((iid, ts))
            else:
                raw[sid] = (uid, lid, [(iid, ts)])

    by_user: dict[str, list[SessionRecord]] = {}
    dropped = 0
    for sid in raw:
        uid, lid, events = raw[sid]
        if not events:
            dropped += 1
            continue
        events.sort(key=lambda e: e[1])
        by_user.setdefault(uid, []).append(SessionRecord(sid, uid, lid, tuple(events)))

    graphs = {
        uid: build_graph(sessions, users[uid])
        for uid, sessions in by_user.items()
    }
    return Dataset(items, locations, users, graphs,
                   dropped_sessions=dropped, deduped_events=deduped)


def build_graph(sessions: list[SessionRecord], labels: UserLabels) -> BehaviorGraph:
    """Assemble one user's tripartite graph from their session records."""
    uids = {s.user_id for s in sessions}
    if len(uids) != 1:
        raise ValueError(f"build_graph: sessions span users {sorted(uids)}")
    ordered = tuple(sorted(sessions, key=lambda s: (s.leading_timestamp, s.session_id)))
    loc_ids: list[str] = []
    item_ids: list[str] = []
    seen_l: set[str] = set()
    seen_v: set[str] = set()
    for s in ordered:
        if s.location_id not in seen_l:
            seen_l.add(s.location_id)
            loc_ids.append(s.location_id)
        for iid, _ in s.events:
            if iid not in seen_v:
                seen_v.add(iid)
                item_ids.append(iid)
    return BehaviorGraph(labels.user_id, ordered, tuple(loc_ids), tuple(item_ids), labels)


# ---------------------------------------------------------------------------
# serialization (inverse of parse_log)


def write_log(dataset: Dataset, out_dir: str) -> None:
    """Write a dataset back to the four CSV files, deterministically."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "items.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ITEM_FIELDS)
        for iid in dataset.items:
            it = dataset.items[iid]
            w.writerow([it.item_id, it.category or "", " ".join(it.title) if it.title else ""])
    with open(os.path.join(out_dir, "locations.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOCATION_FIELDS)
        for lid in dataset.locations:
            lc = dataset.locations[lid]
            w.writerow([lc.location_id, lc.country or "", lc.region or "", lc.city or "",
                        repr(lc.lon) if lc.lon is not None else "",
                        repr(lc.lat) if lc.lat is not None else ""])
    with open(os.path.join(out_dir, "sessions.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SESSION_FIELDS)
        for uid in dataset.graphs:
            for s in dataset.graphs[uid].sessions:
                for iid, ts in s.events:
                    w.writerow([s.session_id, s.user_id, s.location_id, iid, ts])
    with open(os.path.join(out_dir, "users.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(USER_FIELDS)
        for uid in dataset.users:
            u = dataset.users[uid]
            gender = "" if u.gender is None else ("f" if u.gender == 0 else "m")
            age = "" if u.age is None else repr(u.age)
            w.writerow([u.user_id, gender, u.income if u.income is not None else 0, age])


def load_log_dir(data_dir: str) -> Dataset:
    """parse_log over the conventional file names inside one directory."""
    return parse_log(
        os.path.join(data_dir, "items.csv"),
        os.path.join(data_dir, "locations.csv"),
        os.path.join(data_dir, "sessions.csv"),
        os.path.join(data_dir, "users.csv"),
    )


# ---------------------------------------------------------------------------
# splits


def task_label(labels: UserLabels, task: str):
    """The label value a task trains on, or None when the user is unlabeled."""
    if task == "gender":
        return labels.gender
    if task == "income":
        return labels.income
    if task == "age":
        return labels.age
    raise ValueError(f"unknown task {task!r}")


def eligible_users(dataset: Dataset, task: str | None = None) -> list[str]:
    """Users with at least one session and, when a task is given, a label for it."""
    out = []
    for uid in sorted(dataset.graphs):
        if dataset.graphs[uid].num_sessions == 0:
            continue
        if task is not None and task_label(dataset.users[uid], task) is None:
            continue
        out.append(uid)
    return out


def split_dataset(dataset: Dataset, seed: int, task: str | None = None) -> DatasetSplit:
    """Deterministic 80/10/10 user split; train absorbs the remainder."""
    users = eligible_users(dataset, task)
    n = len(users)
    if n < 10:
        raise ValueError(f"need at least 10 labeled users to split, got {n}")
    rng = substream(seed, "split")
    order = rng.permutation(n)
    shuffled = [users[i] for i in order]
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
        seed=seed,
    )
