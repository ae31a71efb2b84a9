"""Integer grids to model-ready numeric grids: dense vocab indices plus a log1p frequency channel."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .domain import NUM_CATEGORIES, InteractionSample, LabeledSample, MiniAppCatalog

FREQUENCY_TRANSFORM = "log1p"
INPUT_MODES = ("fused", "mini_h", "op_h")

MINIAPP_COL, CATEGORY_COL, FREQ_COL, BUTTON_COL = 0, 1, 2, 3


class UnknownIdError(KeyError):
    def __init__(self, column: str, value: int):
        super().__init__(f"unknown {column} id {value}")
        self.column = column
        self.value = value

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class FeatureEncoding:
    miniapp_vocab: Mapping[int, int]
    button_vocab: Mapping[int, int]
    num_categories: int = NUM_CATEGORIES
    frequency_transform: str = FREQUENCY_TRANSFORM
    embedding_dims: tuple[int, int, int] = (16, 8, 16)
    freq_mean: float = 0.0
    freq_std: float = 1.0

    def __post_init__(self):
        for name, vocab in (("mini-app", self.miniapp_vocab), ("button", self.button_vocab)):
            if vocab.get(0) != 0 or sorted(vocab.values()) != list(range(len(vocab))):
                raise ValueError(f"{name} vocab must be contiguous from 0 with 0 -> 0")
        ids = np.array(sorted(self.miniapp_vocab), dtype=np.int64)
        bids = np.array(sorted(self.button_vocab), dtype=np.int64)
        object.__setattr__(self, "_mids", ids)
        object.__setattr__(self, "_midx", np.array([self.miniapp_vocab[i] for i in ids], dtype=np.int64))
        object.__setattr__(self, "_bids", bids)
        object.__setattr__(self, "_bidx", np.array([self.button_vocab[i] for i in bids], dtype=np.int64))

    @property
    def miniapp_vocab_size(self) -> int:
        return len(self.miniapp_vocab)

    @property
    def button_vocab_size(self) -> int:
        return len(self.button_vocab)

    def to_dict(self) -> dict:
        return {
            "miniapp_ids": sorted(int(i) for i in self.miniapp_vocab if i),
            "button_ids": sorted(int(i) for i in self.button_vocab if i),
            "num_categories": self.num_categories,
            "frequency_transform": self.frequency_transform,
            "embedding_dims": list(self.embedding_dims),
            "freq_mean": self.freq_mean,
            "freq_std": self.freq_std,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureEncoding":
        return cls(
            miniapp_vocab=_vocab(d["miniapp_ids"]),
            button_vocab=_vocab(d["button_ids"]),
            num_categories=int(d["num_categories"]),
            frequency_transform=str(d["frequency_transform"]),
            embedding_dims=tuple(int(x) for x in d["embedding_dims"]),
            freq_mean=float(d["freq_mean"]),
            freq_std=float(d["freq_std"]),
        )


def _vocab(ids) -> dict[int, int]:
    vocab = {0: 0}
    for k, i in enumerate(sorted(int(x) for x in ids if int(x) != 0), start=1):
        vocab[i] = k
    return vocab


def build_encoding(catalog: MiniAppCatalog, embedding_dims: Sequence[int] = (16, 8, 16)) -> FeatureEncoding:
    """Ascending-id vocabularies over the catalog; index 0 is the padding / no-click sentinel."""
    return FeatureEncoding(
        miniapp_vocab=_vocab(m.miniapp_id for m in catalog.miniapps),
        button_vocab=_vocab(b.button_id for b in catalog.buttons),
        embedding_dims=tuple(int(x) for x in embedding_dims),
    )


def _lookup(values: np.ndarray, ids: np.ndarray, idx: np.ndarray, column: str) -> np.ndarray:
    pos = np.clip(np.searchsorted(ids, values), 0, len(ids) - 1)
    bad = ids[pos] != values
    if bad.any():
        raise UnknownIdError(column, int(values[bad].flat[0]))
    return idx[pos]


def encode_grids(grids: np.ndarray, enc: FeatureEncoding, dtype=np.float32) -> np.ndarray:
    """Encode a stack of fused integer grids (..., N, 4)."""
    grids = np.asarray(grids, dtype=np.int64)
    out = np.empty(grids.shape, dtype=dtype)
    out[..., MINIAPP_COL] = _lookup(grids[..., 0], enc._mids, enc._midx, "mini-app")
    cats = grids[..., 1]
    if ((cats < 0) | (cats > enc.num_categories)).any():
        raise UnknownIdError("category", int(cats[(cats < 0) | (cats > enc.num_categories)].flat[0]))
    out[..., CATEGORY_COL] = cats
    out[..., FREQ_COL] = np.log1p(grids[..., 2])
    out[..., BUTTON_COL] = _lookup(grids[..., 3], enc._bids, enc._bidx, "button")
    return out


def encode_sample(sample: InteractionSample, enc: FeatureEncoding) -> np.ndarray:
    return encode_grids(sample.fused, enc, dtype=np.float64)


def encode_batch(samples: Sequence[LabeledSample | InteractionSample], enc: FeatureEncoding) -> np.ndarray:
    grids = np.stack([getattr(s, "sample", s).fused for s in samples])
    return encode_grids(grids, enc)


def fit_frequency_stats(enc: FeatureEncoding, train: Sequence[LabeledSample]) -> FeatureEncoding:
    """Mean/std of log1p(access) over real Mini-H rows of the training split only."""
    grids = np.stack([s.sample.fused for s in train])
    counts = grids[..., 2][grids[..., 0] > 0]
    if counts.size == 0:
        return replace(enc, freq_mean=0.0, freq_std=1.0)
    f = np.log1p(counts.astype(float))
    std = float(f.std())
    return replace(enc, freq_mean=float(f.mean()), freq_std=std if std > 0 else 1.0)


def padding_mask(encoded: np.ndarray) -> np.ndarray:
    """True on padding rows: no mini-app and no click."""
    return (encoded[..., MINIAPP_COL] == 0) & (encoded[..., BUTTON_COL] == 0)


def mask_modality(encoded: np.ndarray, mode: str) -> np.ndarray:
    """Drop one modality while keeping the grid shape: Mini-H only zeroes the
    button column, Op-H only zeroes the three Mini-H columns."""
    if mode not in INPUT_MODES:
        raise ValueError(f"input mode must be one of {INPUT_MODES}, got {mode!r}")
    if mode == "fused":
        return encoded
    out = np.array(encoded, copy=True)
    if mode == "mini_h":
        out[..., BUTTON_COL] = 0
    else:
        out[..., :BUTTON_COL] = 0
    return out
