"""Synthetic behavior-log generation with planted spatiotemporal patterns.

Each user draws a binary class; the class fixes a preference on exactly
one channel (an hour-of-day band, a weekday set, or a home location
cluster) and sessions are drawn from that preference. The binary label is
recoverable from the user's modal value on the planted channel, which
makes learnability of the aggregation hierarchy testable. The other
channels are drawn uniformly so ablating them is harmless while ablating
the planted one destroys the signal.

The calendar aggregation paths are invariant to relabeling time units (a
time unit carries no exogenous identity, only its bucket of sessions), so
a planted calendar preference must also shape bucket occupancy to be
recoverable: class 1 hour bands are narrow and class 0 bands wide (both
sides of noon, so "label = 1 iff preferred hour < 12" stays literal), and
class 1 weekday sets are two days against class 0's all seven. Location
units do carry exogenous identity (the location embedding), so the
location rule is positional: label = 1 iff the home cluster index is in
the lower half.

Labels: gender carries the binary planted class ("m" for class 1),
income a 10-class projection of the planted preference, age a noisy
linear function of it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from datetime import date, timedelta

import numpy as np

from .config import parse_kv_file, parse_kv_text
from .data import (
    Dataset,
    ItemRecord,
    LocationRecord,
    SessionRecord,
    UserLabels,
    build_graph,
    write_log,
)
from .seeding import substream

SIGNALS = ("hour", "weekday", "location")

_WORDS = ("news", "update", "daily", "report", "local", "world", "sport",
          "tech", "style", "market", "review", "guide")


@dataclass
class SynthConfig:
    users: int = 100
    sessions_min: int = 20
    sessions_max: int = 20
    events_min: int = 2
    events_max: int = 2
    items: int = 100
    location_clusters: int = 10
    locations_per_cluster: int = 3
    date_start: str = "2018-01-01"
    date_end: str = "2018-06-30"
    seed: int = 0
    signal: str = "hour"
    noise: float = 0.0
    hour_band: int = 3        # class-1 band width (narrow)
    hour_band_alt: int = 12   # class-0 band width (wide)
    concentration: float = 1.0
    item_features: bool = False

    _KEYMAP = {
        "sessions_per_user.min": "sessions_min",
        "sessions_per_user.max": "sessions_max",
        "events_per_session.min": "events_min",
        "events_per_session.max": "events_max",
        "locations.clusters": "location_clusters",
        "locations.per_cluster": "locations_per_cluster",
        "date.start": "date_start",
        "date.end": "date_end",
        "planted.signal": "signal",
        "planted.noise": "noise",
        "planted.hour_band": "hour_band",
        "planted.hour_band_alt": "hour_band_alt",
        "planted.concentration": "concentration",
        "items.with_features": "item_features",
    }

    def __post_init__(self):
        if self.signal not in SIGNALS:
            raise ValueError(f"planted.signal must be one of {SIGNALS}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("planted.noise must be in [0, 1]")
        if not 0.0 <= self.concentration <= 1.0:
            raise ValueError("planted.concentration must be in [0, 1]")
        if self.users < 1 or self.items < 1:
            raise ValueError("need at least one user and one item")
        if self.sessions_min < 1 or self.sessions_min > self.sessions_max:
            raise ValueError("bad sessions_per_user range")
        if self.events_min < 1 or self.events_min > self.events_max:
            raise ValueError("bad events_per_session range")
        if not 1 <= self.hour_band <= 12 or not 1 <= self.hour_band_alt <= 12:
            raise ValueError("planted hour band widths must be 1..12")
        if self.location_clusters < 2:
            raise ValueError("need at least 2 location clusters")
        if date.fromisoformat(self.date_start) > date.fromisoformat(self.date_end):
            raise ValueError("empty date range")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "SynthConfig":
        kwargs = {}
        valid = {f.name for f in fields(cls) if not f.name.startswith("_")}
        for key, value in kv.items():
            fname = cls._KEYMAP.get(key, key)
            if fname not in valid:
                raise ValueError(f"unknown generator config key {key!r}")
            current = getattr(cls, fname)
            if isinstance(current, bool):
                kwargs[fname] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                kwargs[fname] = int(value)
            elif isinstance(current, float):
                kwargs[fname] = float(value)
            else:
                kwargs[fname] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "SynthConfig":
        return cls.from_mapping(parse_kv_file(path))

    @classmethod
    def from_text(cls, text: str) -> "SynthConfig":
        return cls.from_mapping(parse_kv_text(text))


def _make_items(cfg: SynthConfig, rng) -> dict[str, ItemRecord]:
    items = {}
    for i in range(cfg.items):
        iid = f"V{i:04d}"
        if cfg.item_features:
            category = f"cat{i % 7}"
            n_words = int(rng.integers(2, 6))
            title = tuple(_WORDS[int(w)] for w in rng.integers(0, len(_WORDS), n_words))
            items[iid] = ItemRecord(iid, category, title)
        else:
            items[iid] = ItemRecord(iid)
    return items


def _make_locations(cfg: SynthConfig, rng) -> tuple[dict[str, LocationRecord], list[list[str]]]:
    locations = {}
    clusters: list[list[str]] = []
    c = cfg.location_clusters
    for k in range(c):
        center_lon = -150.0 + (k + 0.5) * 300.0 / c
        center_lat = -70.0 + (k + 0.5) * 140.0 / c
        ids = []
        for j in range(cfg.locations_per_cluster):
            lid = f"L{k:02d}{j:02d}"
            lon = float(np.clip(center_lon + rng.uniform(-2, 2), -180, 180))
            lat = float(np.clip(center_lat + rng.uniform(-2, 2), -90, 90))
            locations[lid] = LocationRecord(lid, "US", f"region{k}", f"city{k}_{j}", lon, lat)
            ids.append(lid)
        clusters.append(ids)
    return locations, clusters


def planted_label(cfg: SynthConfig, preference: int) -> int:
    """The noise-free label implied by a user's planted preference."""
    if cfg.signal == "hour":
        return 1 if preference < 12 else 0
    if cfg.signal == "weekday":
        return 1 if preference < 7 else 0  # 7 = no preferred days (all seven)
    return 1 if preference < cfg.location_clusters // 2 else 0


def generate(cfg: SynthConfig) -> tuple[Dataset, dict]:
    """Build the dataset and the generator-side truth ledger."""
    rng = substream(cfg.seed, "synthgen")
    items = _make_items(cfg, rng)
    item_ids = list(items)
    locations, clusters = _make_locations(cfg, rng)
    all_location_ids = [lid for ids in clusters for lid in ids]

    day0 = date.fromisoformat(cfg.date_start)
    n_days = (date.fromisoformat(cfg.date_end) - day0).days + 1
    epoch0 = int((day0 - date(1970, 1, 1)).total_seconds())

    users: dict[str, UserLabels] = {}
    graphs = {}
    truth_users = {}
    total_events = 0
    session_counter = 0
    half_clusters = cfg.location_clusters // 2

    for u in range(cfg.users):
        uid = f"U{u:04d}"
        cls = int(rng.integers(0, 2))
        band_width = cfg.hour_band if cls == 1 else cfg.hour_band_alt
        if cfg.signal == "hour":
            start_lo, start_hi = (0, 12 - band_width) if cls == 1 else (12, 24 - band_width)
            preference = int(rng.integers(start_lo, start_hi + 1))
        elif cfg.signal == "weekday":
            # class 1 keeps to two consecutive days; class 0 has no preference
            preference = int(rng.integers(0, 6)) if cls == 1 else 7
        else:
            preference = (int(rng.integers(0, half_clusters)) if cls == 1
                          else int(rng.integers(half_clusters, cfg.location_clusters)))

        label = planted_label(cfg, preference)
        if cfg.noise > 0 and rng.random() < cfg.noise:
            label = 1 - label

        n_sessions = int(rng.integers(cfg.sessions_min, cfg.sessions_max + 1))
        sessions = []
        for _ in range(n_sessions):
            on_plant = rng.random() < cfg.concentration
            if cfg.signal == "weekday" and on_plant and preference < 7:
                # resample the day until it lands in the preferred two-day set
                wanted = {preference, preference + 1}
                for _ in range(max(64, n_days)):
                    day = int(rng.integers(0, n_days))
                    actual = ((day0 + timedelta(days=day)).weekday() + 1) % 7
                    if actual in wanted:
                        break
            else:
                day = int(rng.integers(0, n_days))
            if cfg.signal == "hour" and on_plant:
                hour_val = preference + int(rng.integers(0, band_width))
            else:
                hour_val = int(rng.integers(0, 24))
            t0 = (epoch0 + day * 86400 + hour_val * 3600
                  + int(rng.integers(0, 60)) * 60 + int(rng.integers(0, 60)))

            if cfg.signal == "location" and on_plant:
                cluster = clusters[preference]
                lid = cluster[int(rng.integers(0, len(cluster)))]
            else:
                lid = all_location_ids[int(rng.integers(0, len(all_location_ids)))]

            n_events = int(rng.integers(cfg.events_min, cfg.events_max + 1))
            t = t0
            events = []
            for _ in range(n_events):
                events.append((item_ids[int(rng.integers(0, len(item_ids)))], t))
                t += int(rng.integers(30, 600))
            sid = f"S{session_counter:07d}"
            session_counter += 1
            sessions.append(SessionRecord(sid, uid, lid, tuple(events)))
            total_events += n_events

        income = preference % 10
        age = float(18 + 3 * preference) + float(rng.uniform(-1.0, 1.0))
        labels = UserLabels(uid, gender=label, income=income, age=round(age, 2))
        users[uid] = labels
        graphs[uid] = build_graph(sessions, labels)
        truth_users[uid] = {
            "class": cls,
            "label": label,
            "signal": cfg.signal,
            "preference": preference,
        }

    dataset = Dataset(items, locations, users, graphs)
    truth = {
        "signal": cfg.signal,
        "noise": cfg.noise,
        "users": truth_users,
        "totals": {
            "users": cfg.users,
            "sessions": session_counter,
            "events": total_events,
        },
    }
    return dataset, truth


def generate_files(cfg: SynthConfig, out_dir: str) -> dict:
    """Generate and write the four CSV files plus the truth ledger."""
    dataset, truth = generate(cfg)
    os.makedirs(out_dir, exist_ok=True)
    write_log(dataset, out_dir)
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return truth
