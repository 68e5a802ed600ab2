"""Initial item and location embeddings from raw heterogeneous features.

Items combine an ID channel, a category channel, and a title channel
(BiLSTM over tokens); locations combine three admin-level channels and
two raw normalized-coordinate slots. Channels a record lacks fall back to
a learned "absent" vector (items) or the level's "<empty>" vocabulary
entry (locations), so output width never depends on feature coverage.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ItemRecord, LocationRecord, normalize_coordinates

UNK = "<unk>"
EMPTY = "<empty>"


class Vocab:
    """Token-to-row mapping with reserved special rows at the front."""

    def __init__(self, tokens, specials=(UNK,)):
        self.index: dict[str, int] = {}
        for sp in specials:
            self.index[sp] = len(self.index)
        for tok in tokens:
            if tok not in self.index:
                self.index[tok] = len(self.index)

    def __len__(self):
        return len(self.index)

    def row(self, token: str | None) -> int:
        if token is None:
            return self.index[EMPTY] if EMPTY in self.index else self.index[UNK]
        return self.index.get(token, self.index[UNK])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, i in self.index.items():
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        v = cls.__new__(cls)
        v.index = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, i = line.rsplit("\t", 1)
                v.index[tok] = int(i)
        return v


def split_channels(total: int, parts: int) -> list[int]:
    """Near-equal channel widths; the remainder goes to the earlier channels."""
    base = total // parts
    rem = total - base * parts
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _mlp_params(rng, vocab_size: int, width: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.table": ad.tensor(ad.uniform_init(rng, (vocab_size, width), vocab_size)),
        f"{prefix}.W": ad.tensor(ad.uniform_init(rng, (width, width), width)),
        f"{prefix}.b": ad.tensor(np.zeros(width)),
    }


def _lstm_params(rng, input_size: int, hidden: int, prefix: str) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for gate in ("i", "f", "o", "g"):
        out[f"{prefix}.W_{gate}"] = ad.tensor(ad.uniform_init(rng, (hidden, input_size), input_size))
        out[f"{prefix}.U_{gate}"] = ad.tensor(ad.uniform_init(rng, (hidden, hidden), hidden))
        out[f"{prefix}.b_{gate}"] = ad.tensor(np.zeros(hidden))
    return out


def lstm_view(params: dict[str, Tensor], prefix: str) -> ad.LstmParams:
    return ad.LstmParams(
        w_i=params[f"{prefix}.W_i"], w_f=params[f"{prefix}.W_f"],
        w_o=params[f"{prefix}.W_o"], w_g=params[f"{prefix}.W_g"],
        u_i=params[f"{prefix}.U_i"], u_f=params[f"{prefix}.U_f"],
        u_o=params[f"{prefix}.U_o"], u_g=params[f"{prefix}.U_g"],
        b_i=params[f"{prefix}.b_i"], b_f=params[f"{prefix}.b_f"],
        b_o=params[f"{prefix}.b_o"], b_g=params[f"{prefix}.b_g"],
    )


def _mlp_rows(params: dict[str, Tensor], prefix: str, rows) -> Tensor:
    gathered = ad.gather_rows(params[f"{prefix}.table"], rows)
    return ad.dense_rows(gathered, params[f"{prefix}.W"], params[f"{prefix}.b"], "relu")


class ItemEmbedder:
    """Embeds items as concat(MLP(id), MLP(category), BiLSTM(title))."""

    def __init__(self, id_vocab: Vocab, category_vocab: Vocab, token_vocab: Vocab,
                 output_size: int, rng: np.random.Generator):
        c_id, c_cat, c_tit = split_channels(output_size, 3)
        if c_tit % 2 == 1:  # BiLSTM output is twice one direction
            c_tit -= 1
            c_id += 1
        self.channel_sizes = (c_id, c_cat, c_tit)
        self.output_size = output_size
        self.id_vocab = id_vocab
        self.category_vocab = category_vocab
        self.token_vocab = token_vocab

        hidden = c_tit // 2
        tok_dim = hidden
        p: dict[str, Tensor] = {}
        p.update(_mlp_params(rng, len(id_vocab), c_id, "item_id"))
        p.update(_mlp_params(rng, len(category_vocab), c_cat, "item_category"))
        p["item_category.absent"] = ad.tensor(ad.uniform_init(rng, (c_cat,), c_cat))
        p["item_title.table"] = ad.tensor(
            ad.uniform_init(rng, (len(token_vocab), tok_dim), len(token_vocab)))
        p.update(_lstm_params(rng, tok_dim, hidden, "item_title.fwd"))
        p.update(_lstm_params(rng, tok_dim, hidden, "item_title.bwd"))
        p["item_title.absent"] = ad.tensor(ad.uniform_init(rng, (c_tit,), c_tit))
        self.params = p

    def bilstm(self) -> ad.BiLstmParams:
        return ad.BiLstmParams(lstm_view(self.params, "item_title.fwd"),
                               lstm_view(self.params, "item_title.bwd"))

    def embed_batch(self, records: list[ItemRecord]) -> Tensor:
        """(n, output_size) embeddings, one row per record."""
        n = len(records)
        p = self.params
        id_rows = [self.id_vocab.row(r.item_id) for r in records]
        id_part = _mlp_rows(p, "item_id", id_rows)

        cat_part = self._channel_with_absent(
            [r.category for r in records],
            lambda toks: _mlp_rows(p, "item_category",
                                   [self.category_vocab.row(t) for t in toks]),
            p["item_category.absent"], n)

        tit_part = self._channel_with_absent(
            [r.title for r in records],
            lambda titles: ad.bilstm_encode_batch(
                p["item_title.table"],
                [[self.token_vocab.row(t) for t in title] for title in titles],
                self.bilstm()),
            p["item_title.absent"], n)

        return ad.concat([id_part, cat_part, tit_part], axis=1)

    def embed(self, record: ItemRecord) -> Tensor:
        return ad.reshape(self.embed_batch([record]), (self.output_size,))

    @staticmethod
    def _channel_with_absent(features, present_fn, absent_vec: Tensor, n: int) -> Tensor:
        present_idx = [i for i, f in enumerate(features) if f]
        if not present_idx:
            return ad.broadcast_rows(absent_vec, n)
        present_rows = present_fn([features[i] for i in present_idx])
        if len(present_idx) == n:
            return present_rows
        absent_rows = ad.broadcast_rows(absent_vec, n - len(present_idx))
        combined = ad.concat([present_rows, absent_rows], axis=0)
        perm = np.empty(n, dtype=np.intp)
        perm[present_idx] = np.arange(len(present_idx))
        perm[[i for i in range(n) if i not in set(present_idx)]] = (
            len(present_idx) + np.arange(n - len(present_idx)))
        return ad.gather_rows(combined, perm)


class LocationEmbedder:
    """Embeds locations as concat(three admin-level MLPs, normalized coordinates)."""

    def __init__(self, country_vocab: Vocab, region_vocab: Vocab, city_vocab: Vocab,
                 output_size: int, rng: np.random.Generator):
        if output_size < 5:
            raise ValueError("location embedding needs at least 5 slots")
        widths = split_channels(output_size - 2, 3)
        self.channel_sizes = (*widths, 2)
        self.output_size = output_size
        self.vocabs = {"country": country_vocab, "region": region_vocab, "city": city_vocab}

        p: dict[str, Tensor] = {}
        for level, width in zip(("country", "region", "city"), widths):
            p.update(_mlp_params(rng, len(self.vocabs[level]), width, f"loc_{level}"))
        self.params = p

    def embed_batch(self, records: list[LocationRecord]) -> Tensor:
        p = self.params
        parts = []
        for level in ("country", "region", "city"):
            rows = [self.vocabs[level].row(getattr(r, level)) for r in records]
            parts.append(_mlp_rows(p, f"loc_{level}", rows))
        coords = np.array([
            normalize_coordinates(r.lon, r.lat) if r.lon is not None else (0.5, 0.5)
            for r in records
        ])
        parts.append(ad.tensor(coords))
        return ad.concat(parts, axis=1)

    def embed(self, record: LocationRecord) -> Tensor:
        return ad.reshape(self.embed_batch([record]), (self.output_size,))


def build_item_vocabs(items: dict[str, ItemRecord]):
    """Vocabularies over the dataset's item ids, categories, and title tokens."""
    ids = Vocab(items.keys())
    cats = Vocab((r.category for r in items.values() if r.category))
    toks = Vocab((t for r in items.values() if r.title for t in r.title))
    return ids, cats, toks


def build_location_vocabs(locations: dict[str, LocationRecord]):
    """Per-admin-level vocabularies, each with an explicit empty entry."""
    out = []
    for level in ("country", "region", "city"):
        toks = (getattr(r, level) for r in locations.values() if getattr(r, level))
        out.append(Vocab(toks, specials=(EMPTY, UNK)))
    return tuple(out)
