"""Variant assembly: parameters, forward passes, and checkpoints.

A model owns the embedders, the aggregation-site weights its variant
needs, and the prediction head. Ablated variants never allocate the
parameters of their removed path. Checkpoints are a flat name -> tensor
map in a small binary container with a leading magic string; vocabularies
are persisted alongside as token/index text files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fusion
from .aggregation import (
    PATTERN_KEYS,
    TIME_KINDS,
    CompiledUser,
    compile_user,
    forward_patterns,
    forward_user,
    gru_params,
    gru_view,
)
from .autodiff import Tensor
from .config import TrainConfig
from .data import Dataset, task_label
from .embeddings import (
    ItemEmbedder,
    LocationEmbedder,
    Vocab,
    build_item_vocabs,
    build_location_vocabs,
)
from .seeding import substream

CHECKPOINT_MAGIC = b"CALGNN1\n"
CHECKPOINT_FILE = "checkpoint.calgnn"
VOCAB_FILES = {
    "item_id": "vocab_item_id.tsv",
    "item_category": "vocab_item_category.tsv",
    "item_title": "vocab_item_title.tsv",
    "loc_country": "vocab_loc_country.tsv",
    "loc_region": "vocab_loc_region.tsv",
    "loc_city": "vocab_loc_city.tsv",
}

PATTERN_ORDER = ("hour", "week", "weekday", "spatial")


class CalendarModel:
    """One variant's parameters plus its forward/loss machinery."""

    def __init__(self, config: TrainConfig, vocabs: dict[str, Vocab],
                 rng: np.random.Generator | None = None):
        self.config = config
        self.vocabs = vocabs
        if rng is None:
            rng = substream(config.seed, "init")
        act = config.activation
        variant = config.variant
        k_v = config.dims_item
        k_e = config.dims_location
        k_s = config.dims_session
        k_u = config.unit_dim
        k_p = config.dims_pattern

        self.item_embedder = ItemEmbedder(vocabs["item_id"], vocabs["item_category"],
                                          vocabs["item_title"], k_v, rng)
        params: dict[str, Tensor] = dict(self.item_embedder.params)

        self.location_embedder = None
        if variant != "s-only":
            self.location_embedder = LocationEmbedder(
                vocabs["loc_country"], vocabs["loc_region"], vocabs["loc_city"], k_e, rng)
            params.update(self.location_embedder.params)

        # session aggregation (all variants)
        params.update(gru_params(rng, k_v, k_v, "gru_sess"))
        params["W_S"] = ad.tensor(ad.uniform_init(rng, (k_s, k_v), k_v))
        params["b_S"] = ad.tensor(np.zeros(k_s))

        self.kinds: tuple[str, ...] = ()
        if variant == "s-only":
            params.update(gru_params(rng, k_s, config.user_dim, "gru_user"))
        else:
            kinds = ["hour", "week", "weekday", "spatial"]
            if variant.startswith("minus-"):
                kinds.remove(variant.removeprefix("minus-"))
            self.kinds = tuple(kinds)
            for kind in self.kinds:
                if kind == "spatial":
                    params.update(gru_params(rng, k_s + k_e, k_s + k_e, "gru_l"))
                    params["W_SxL"] = ad.tensor(ad.uniform_init(rng, (k_u, k_s + k_e), k_s + k_e))
                    params["b_SxL"] = ad.tensor(np.zeros(k_u))
                else:
                    suffix = {"hour": "h", "week": "w", "weekday": "y"}[kind]
                    params.update(gru_params(rng, k_s, k_s, f"gru_{suffix}"))
                    params[f"W_{suffix}"] = ad.tensor(ad.uniform_init(rng, (k_u, k_s), k_s))
                    params[f"b_{suffix}"] = ad.tensor(np.zeros(k_u))
            if variant == "attn":
                for kind in TIME_KINDS:
                    key = fusion.ATTENTION_KIND_KEYS[kind]
                    params[f"W_(L,{key})"] = ad.tensor(ad.uniform_init(rng, (k_u, k_u), k_u))
                    params[f"b_(L,{key})"] = ad.tensor(np.zeros(()))
                    params[f"W_({key},L)"] = ad.tensor(ad.uniform_init(rng, (k_u, k_u), k_u))
                    params[f"b_({key},L)"] = ad.tensor(np.zeros(()))
            else:
                for kind in self.kinds:
                    pk = PATTERN_KEYS[kind]
                    params.update(gru_params(rng, k_u, k_u, f"gru_{pk}"))
                    params[f"W_{pk}"] = ad.tensor(ad.uniform_init(rng, (k_p, k_u), k_u))
                    params[f"b_{pk}"] = ad.tensor(np.zeros(k_p))

        if config.num_classes is None:
            params["W"] = ad.tensor(ad.uniform_init(rng, (config.user_dim,), config.user_dim))
        else:
            params["W_A"] = ad.tensor(
                ad.uniform_init(rng, (config.num_classes, config.user_dim), config.user_dim))

        self.params = params
        self.act = act

    # -- forward ----------------------------------------------------------

    @property
    def user_dim(self) -> int:
        return self.config.user_dim

    def compile(self, dataset: Dataset, user_ids) -> list[CompiledUser]:
        return [compile_user(dataset.graphs[uid], dataset, self.config.tz_offset_minutes)
                for uid in user_ids]

    def user_rows(self, users: list[CompiledUser],
                  traces: list[fusion.AttentionTrace] | None = None) -> Tensor:
        """(B, user_dim) embeddings for a batch of compiled users."""
        variant = self.config.variant
        if variant == "s-only":
            from .aggregation import batch_session_rows
            session_rows, slices = batch_session_rows(users, self.item_embedder,
                                                      self.params, self.act)
            seqs = [list(range(s, e)) for s, e in slices]
            return ad.gru_gather_batch(session_rows, seqs, gru_view(self.params, "gru_user"))
        fwd = forward_patterns(users, self.item_embedder, self.location_embedder,
                               self.params, self.act, self.kinds)
        if variant == "attn":
            return fusion.attention_user_rows(fwd, self.params, traces)
        parts = [fwd.patterns[k] for k in PATTERN_ORDER if k in fwd.patterns]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def patterns_for_user(self, user: CompiledUser):
        """Single-user PatternSet (concat variants only)."""
        if self.config.variant in ("attn", "s-only"):
            raise ValueError(f"variant {self.config.variant} has no plain PatternSet")
        return forward_user(user, self.item_embedder, self.location_embedder,
                            self.params, self.act)

    def loss(self, users: list[CompiledUser], labels) -> Tensor:
        rows = self.user_rows(users)
        if self.config.num_classes is None:
            preds = ad.matvec(rows, self.params["W"])
            return fusion.regression_loss(preds, [float(a) for a in labels])
        logits = ad.dense_rows(rows, self.params["W_A"], None, "identity")
        return fusion.classification_loss(logits, [int(a) for a in labels])

    def predict(self, users: list[CompiledUser],
                traces: list[fusion.AttentionTrace] | None = None) -> np.ndarray:
        """Classification: (B, C) softmax probabilities. Regression: (B,)."""
        rows = self.user_rows(users, traces)
        if self.config.num_classes is None:
            return ad.matvec(rows, self.params["W"]).value.copy()
        logits = ad.dense_rows(rows, self.params["W_A"], None, "identity").value
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def labels_for(self, users: list[CompiledUser]):
        return [task_label(u.labels, self.config.task) for u in users]

    # -- parameter snapshots ----------------------------------------------

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            np.copyto(t.value, snap[name])

    # -- persistence --------------------------------------------------------

    @classmethod
    def build(cls, config: TrainConfig, dataset: Dataset) -> "CalendarModel":
        ids, cats, toks = build_item_vocabs(dataset.items)
        country, region, city = build_location_vocabs(dataset.locations)
        vocabs = {"item_id": ids, "item_category": cats, "item_title": toks,
                  "loc_country": country, "loc_region": region, "loc_city": city}
        return cls(config, vocabs)

    def save(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        for key, fname in VOCAB_FILES.items():
            self.vocabs[key].save(os.path.join(out_dir, fname))
        path = os.path.join(out_dir, CHECKPOINT_FILE)
        write_checkpoint(path, self.config, self.params)
        return path

    @classmethod
    def load(cls, checkpoint_path: str,
             expect_config: TrainConfig | None = None) -> "CalendarModel":
        if os.path.isdir(checkpoint_path):
            ckpt_dir = checkpoint_path
            checkpoint_path = os.path.join(checkpoint_path, CHECKPOINT_FILE)
        else:
            ckpt_dir = os.path.dirname(checkpoint_path) or "."
        config, values = read_checkpoint(checkpoint_path)
        if expect_config is not None and expect_config.config_hash() != config.config_hash():
            raise ValueError("checkpoint config hash does not match the supplied config")
        vocabs = {key: Vocab.load(os.path.join(ckpt_dir, fname))
                  for key, fname in VOCAB_FILES.items()}
        model = cls(config, vocabs)
        for name, t in model.params.items():
            if name not in values:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if values[name].shape != t.value.shape:
                raise ValueError(f"checkpoint parameter {name!r} has shape "
                                 f"{values[name].shape}, expected {t.value.shape}")
            np.copyto(t.value, values[name])
        return model


def write_checkpoint(path: str, config: TrainConfig, params: dict[str, Tensor]) -> None:
    header = {
        "config": config.to_mapping(),
        "config_hash": config.config_hash(),
        "params": [[name, list(t.value.shape)] for name, t in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def read_checkpoint(path: str) -> tuple[TrainConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a CALGNN1 checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        config = TrainConfig.from_mapping(header["config"])
        if config.config_hash() != header["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch inside checkpoint")
        values: dict[str, np.ndarray] = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint at {name!r}")
            values[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return config, values
