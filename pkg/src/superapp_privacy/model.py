"""Toy-scale sequence classifiers over encoded interaction grids, training loop and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .domain import AttributeKind, DatasetSplit, LabeledSample, build_catalog, labels_array
from .encoder import (
    BUTTON_COL,
    CATEGORY_COL,
    FREQ_COL,
    INPUT_MODES,
    MINIAPP_COL,
    FeatureEncoding,
    build_encoding,
    encode_batch,
    fit_frequency_stats,
    mask_modality,
)

log = logging.getLogger(__name__)

FAMILIES = ("transformer", "cnn", "rnn", "linear")
CHECKPOINT_MAGIC = b"SAPCKPT\n"
CHECKPOINT_VERSION = 1


class ShapeMismatchError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str = "transformer"
    depth: int = 2
    width: int = 64
    heads: int = 4
    output_classes: int = 2
    max_len: int = 200
    dropout: float = 0.3
    id_dropout: float = 0.8
    kernel_size: int = 5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.depth < 1 or self.width < 1 or self.max_len < 1:
            raise ValueError("depth, width and max_len must be positive")
        if self.family == "transformer" and (self.heads < 1 or self.width % self.heads):
            raise ValueError(f"heads ({self.heads}) must divide width ({self.width})")
        if self.output_classes < 2:
            raise ValueError("output_classes must be at least 2")

    def for_attribute(self, kind: AttributeKind, max_len: int | None = None) -> "ArchitectureSpec":
        return replace(self, output_classes=kind.num_classes, max_len=max_len or self.max_len)


def default_architecture(family: str = "transformer") -> ArchitectureSpec:
    if family == "cnn":
        return ArchitectureSpec(family="cnn", depth=4, width=64)
    if family == "rnn":
        return ArchitectureSpec(family="rnn", depth=2, width=64)
    if family == "linear":
        return ArchitectureSpec(family="linear", depth=1, width=32)
    return ArchitectureSpec()


class RowEmbedding(nn.Module):
    """Per-row concat of mini-app / category / button embeddings and the
    standardised frequency scalar, projected to the model width."""

    def __init__(self, spec: ArchitectureSpec, enc: FeatureEncoding):
        super().__init__()
        dm, dc, db = enc.embedding_dims
        self.miniapp = nn.Embedding(enc.miniapp_vocab_size, dm, padding_idx=0)
        self.category = nn.Embedding(enc.num_categories + 1, dc, padding_idx=0)
        self.button = nn.Embedding(enc.button_vocab_size, db, padding_idx=0)
        self.proj = nn.Linear(dm + dc + 1 + db, spec.width)
        self.id_dropout = spec.id_dropout
        self.register_buffer("freq_mean", torch.tensor(enc.freq_mean))
        self.register_buffer("freq_std", torch.tensor(enc.freq_std))

    def forward(self, x: torch.Tensor):
        mid = x[..., MINIAPP_COL].long()
        bid = x[..., BUTTON_COL].long()
        has_app = mid > 0
        freq = torch.where(has_app, (x[..., FREQ_COL] - self.freq_mean) / self.freq_std, torch.zeros_like(x[..., FREQ_COL]))
        app = self.miniapp(mid)
        if self.training and self.id_dropout > 0:
            keep = torch.rand(mid.shape, dtype=app.dtype) >= self.id_dropout
            app = app * keep.unsqueeze(-1)
        feats = torch.cat(
            [app, self.category(x[..., CATEGORY_COL].long()), freq.unsqueeze(-1), self.button(bid)],
            dim=-1,
        )
        return self.proj(feats), has_app | (bid > 0)


def masked_pool(h: torch.Tensor, mask: torch.Tensor, max_len: int) -> torch.Tensor:
    """Masked mean and length-normalised masked sum; the sum half keeps count information."""
    m = mask.unsqueeze(-1).to(h.dtype)
    total = (h * m).sum(dim=1)
    count = m.sum(dim=1).clamp(min=1.0)
    return torch.cat([total / count, total / max_len], dim=-1)


def compact(h: torch.Tensor, mask: torch.Tensor):
    """Move valid rows to the front (stable) and trim trailing padding.

    Returns the gathered rows, their original positions and the new mask.
    Attention and recurrence over valid rows only are unchanged by this.
    """
    order = torch.argsort((~mask).to(torch.int8), dim=1, stable=True)
    length = max(int(mask.sum(dim=1).max()), 1)
    idx = order[:, :length]
    rows = torch.gather(h, 1, idx.unsqueeze(-1).expand(-1, -1, h.shape[-1]))
    return rows, idx, torch.gather(mask, 1, idx)


class SelfAttention(nn.Module):
    """Multi-head self-attention; dropout is applied on the block output, not on attention weights."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        h = F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask[:, None, None, :])
        return self.out(h.transpose(1, 2).reshape(b, n, w))


class EncoderBlock(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Dropout(dropout), nn.Linear(2 * width, width))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask):
        x = x + self.drop(self.attn(self.norm1(x), key_mask))
        return x + self.drop(self.ffn(self.norm2(x)))


class _Classifier(nn.Module):
    def __init__(self, spec: ArchitectureSpec, enc: FeatureEncoding, pooled_width: int, norm: bool = True):
        super().__init__()
        self.spec = spec
        self.embed = RowEmbedding(spec, enc)
        self.head_norm = nn.LayerNorm(2 * pooled_width) if norm else nn.Identity()
        self.head = nn.Linear(2 * pooled_width, spec.output_classes)

    def encode(self, h, mask):
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, mask = self.embed(x)
        h, mask = self.encode(h, mask)
        return self.head(self.head_norm(masked_pool(h, mask, self.spec.max_len)))


class TransformerClassifier(_Classifier):
    def __init__(self, spec, enc):
        super().__init__(spec, enc, spec.width)
        self.pos = nn.Embedding(spec.max_len, spec.width)
        self.blocks = nn.ModuleList(EncoderBlock(spec.width, spec.heads, spec.dropout) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.width)
        self.drop = nn.Dropout(spec.dropout)

    def encode(self, h, mask):
        h, pos, mask = compact(h, mask)
        h = self.drop(h + self.pos(pos))
        key_mask = mask.clone()
        key_mask[:, 0] |= ~mask.any(dim=1)  # an all-padding sample still needs one key
        for block in self.blocks:
            h = block(h, key_mask)
        return self.norm(h), mask


class ConvBlock(nn.Module):
    def __init__(self, width: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.conv1 = nn.Conv1d(width, width, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(width, width, kernel, padding=kernel // 2)
        self.drop = nn.Dropout(dropout)

    def forward(self, h, m):
        z = self.norm(h) * m
        z = F.gelu(self.conv1(z.transpose(1, 2)).transpose(1, 2)) * m
        z = self.conv2(self.drop(z).transpose(1, 2)).transpose(1, 2)
        return h + self.drop(z) * m


class CNNClassifier(_Classifier):
    """Residual 1-D convolutions; padding rows are zeroed before every conv."""

    def __init__(self, spec, enc):
        super().__init__(spec, enc, spec.width)
        self.blocks = nn.ModuleList(ConvBlock(spec.width, spec.kernel_size, spec.dropout) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.width)

    def encode(self, h, mask):
        m = mask.unsqueeze(-1).to(h.dtype)
        h = h * m
        for block in self.blocks:
            h = block(h, m)
        return self.norm(h) * m, mask


class RNNClassifier(_Classifier):
    """Bidirectional LSTM over the valid rows only, in their original order."""

    def __init__(self, spec, enc):
        super().__init__(spec, enc, 2 * spec.width)
        self.lstm = nn.LSTM(
            spec.width, spec.width, num_layers=spec.depth, batch_first=True, bidirectional=True,
            dropout=spec.dropout if spec.depth > 1 else 0.0,
        )

    def encode(self, h, mask):
        h, _, mask = compact(h, mask)
        lengths = mask.sum(dim=1).clamp(min=1).cpu()
        packed = nn.utils.rnn.pack_padded_sequence(h, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=h.shape[1])
        return out, mask


class LinearClassifier(_Classifier):
    """Pooled row embeddings into a linear head; no nonlinearity anywhere."""

    def __init__(self, spec, enc):
        super().__init__(spec, enc, spec.width, norm=False)

    def encode(self, h, mask):
        return h, mask


_NETWORKS = {
    "transformer": TransformerClassifier,
    "cnn": CNNClassifier,
    "rnn": RNNClassifier,
    "linear": LinearClassifier,
}


def build_network(spec: ArchitectureSpec, enc: FeatureEncoding) -> _Classifier:
    return _NETWORKS[spec.family](spec, enc)


@dataclass
class TrainedModel:
    architecture: ArchitectureSpec
    network: nn.Module
    attribute: AttributeKind
    encoding: FeatureEncoding
    input_mode: str = "fused"
    training_log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def logits(self, encoded: np.ndarray, batch_size: int = 128) -> np.ndarray:
        return forward(self, encoded, batch_size)


def _check_batch(model: TrainedModel, encoded: np.ndarray) -> np.ndarray:
    encoded = np.asarray(encoded)
    if encoded.ndim == 2:
        encoded = encoded[None]
    spec = model.architecture
    if encoded.ndim != 3 or encoded.shape[1:] != (spec.max_len, 4):
        raise ShapeMismatchError(f"expected grids of shape (B, {spec.max_len}, 4), got {encoded.shape}")
    enc = model.encoding
    limits = (enc.miniapp_vocab_size, enc.num_categories + 1, None, enc.button_vocab_size)
    for col, limit in enumerate(limits):
        if limit is not None and encoded.size and (encoded[..., col].max() >= limit or encoded[..., col].min() < 0):
            raise ShapeMismatchError(f"column {col} holds indices outside the model's vocabulary ({limit})")
    return encoded


@torch.no_grad()
def forward(model: TrainedModel, encoded: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Logits (B x K) as float64 for encoded grids (B x N x 4)."""
    encoded = mask_modality(_check_batch(model, encoded), model.input_mode)
    net = model.network
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    for start in range(0, len(encoded), batch_size):
        x = torch.as_tensor(encoded[start:start + batch_size], dtype=dtype)
        out.append(net(x).double().numpy())
    net.train(was_training)
    if not out:
        return np.zeros((0, model.architecture.output_classes))
    logits = np.concatenate(out)
    if not np.isfinite(logits).all():
        raise DivergenceError("model produced non-finite logits")
    return logits


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    patience: int | None = None
    select: str = "best_val"
    input_mode: str = "fused"

    def __post_init__(self):
        if self.select not in ("best_val", "last"):
            raise ValueError("select must be 'best_val' or 'last'")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def _seeds(seed: int) -> dict[str, int]:
    init, shuffle, dropout = np.random.SeedSequence(seed).spawn(3)
    return {
        "init": int(init.generate_state(1)[0]),
        "shuffle": int(shuffle.generate_state(1)[0]),
        "dropout": int(dropout.generate_state(1)[0]),
    }


def _mean_loss(net: nn.Module, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    net.eval()
    total, correct = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            logits = net(torch.as_tensor(x[start:start + batch_size]))
            target = torch.as_tensor(y[start:start + batch_size])
            total += float(F.cross_entropy(logits, target, reduction="sum"))
            correct += int((logits.argmax(dim=1) == target).sum())
    net.train()
    return total / len(x), correct / len(x)


def train(
    arch: ArchitectureSpec,
    split: DatasetSplit,
    attribute: AttributeKind,
    hyper: TrainConfig = TrainConfig(),
    encoding: FeatureEncoding | None = None,
) -> TrainedModel:
    """Adam + cross-entropy; keeps the epoch with the lowest validation loss.

    ``hyper.patience`` stops once validation loss has not improved for that
    many epochs (``None`` runs every epoch).
    """
    if not split.train or not split.validation:
        raise ValueError("training needs non-empty train and validation splits")
    if encoding is None:
        raise ValueError("an encoding built from the catalog is required")
    encoding = fit_frequency_stats(encoding, split.train)
    n = split.train[0].sample.n
    arch = arch.for_attribute(attribute, max_len=n)
    x_tr = mask_modality(encode_batch(split.train, encoding), hyper.input_mode)
    x_va = mask_modality(encode_batch(split.validation, encoding), hyper.input_mode)
    y_tr = labels_array(split.train, attribute)
    y_va = labels_array(split.validation, attribute)

    seeds = _seeds(hyper.seed)
    torch.manual_seed(seeds["init"])
    net = build_network(arch, encoding)
    torch.manual_seed(seeds["dropout"])
    shuffle = np.random.default_rng(seeds["shuffle"])
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)

    history: list[dict] = []
    best_loss, best_state, best_epoch, stale = math.inf, None, None, 0
    net.train()
    for epoch in range(1, hyper.epochs + 1):
        perm = shuffle.permutation(len(x_tr))
        total = 0.0
        for start in range(0, len(perm), hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            logits = net(torch.as_tensor(x_tr[idx]))
            loss = F.cross_entropy(logits, torch.as_tensor(y_tr[idx]))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        val_loss, val_acc = _mean_loss(net, x_va, y_va)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / len(x_tr), "val_loss": val_loss, "val_accuracy": val_acc})
        log.debug("%s epoch %d train %.4f val %.4f acc %.3f", attribute.value, epoch, total / len(x_tr), val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, best_epoch, stale = val_loss, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if hyper.patience is not None and stale >= hyper.patience:
                break
    if hyper.select == "best_val":
        net.load_state_dict(best_state)
    else:
        best_epoch = history[-1]["epoch"]
    net.eval()
    return TrainedModel(arch, net, attribute, encoding, hyper.input_mode, history, best_epoch)


def _random_grids(enc: FeatureEncoding, n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    grids = np.zeros((batch, n, 4))
    for b in range(batch):
        apps = rng.integers(1, n)
        grids[b, :apps, MINIAPP_COL] = rng.integers(1, enc.miniapp_vocab_size, size=apps)
        grids[b, :apps, CATEGORY_COL] = rng.integers(1, enc.num_categories + 1, size=apps)
        grids[b, :apps, FREQ_COL] = np.log1p(rng.integers(1, 20, size=apps))
        clicks = rng.random(n) < 0.4
        grids[b, clicks, BUTTON_COL] = rng.integers(1, enc.button_vocab_size, size=int(clicks.sum()))
    return grids


def gradient_check(
    arch: ArchitectureSpec, seed: int, num_params: int = 40, step: float = 1e-4, batch: int = 3
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs in float64 with dropout off. The objective is a fixed random linear
    functional of the logits, so the check exercises the network itself;
    sampled entries are restricted to those with |grad| > 1e-4, where the
    relative error is not dominated by round-off.
    """
    if arch.width > 16 or arch.depth > 2:
        raise ValueError("gradient_check expects a tiny model (width <= 16, depth <= 2)")
    rng = np.random.default_rng(seed)
    enc = build_encoding(build_catalog(28, 6, seed), embedding_dims=(4, 3, 4))
    enc = replace(enc, freq_mean=1.0, freq_std=0.7)
    torch.manual_seed(seed)
    net = build_network(arch, enc).double().eval()
    x = torch.as_tensor(_random_grids(enc, arch.max_len, batch, rng), dtype=torch.float64)
    proj = torch.as_tensor(rng.standard_normal((batch, arch.output_classes)))

    def objective() -> torch.Tensor:
        return (net(x) * proj).sum()

    net.zero_grad()
    objective().backward()
    entries = []
    for name, p in net.named_parameters():
        if p.grad is None:
            continue
        for flat in np.flatnonzero(np.abs(p.grad.numpy()).ravel() > 1e-4):
            entries.append((p, int(flat)))
    if not entries:
        raise RuntimeError("no parameter received a usable gradient")
    chosen = rng.choice(len(entries), size=min(num_params, len(entries)), replace=False)
    worst = 0.0
    with torch.no_grad():
        for i in chosen:
            p, flat = entries[i]
            view = p.data.view(-1)
            analytic = float(p.grad.view(-1)[flat])
            orig = float(view[flat])
            view[flat] = orig + step
            up = float(objective())
            view[flat] = orig - step
            down = float(objective())
            view[flat] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst


def save_checkpoint(model: TrainedModel, path: str | Path, meta: Mapping | None = None) -> None:
    """Magic line, 8-byte header length, JSON header, then raw little-endian tensors."""
    state = model.network.state_dict()
    tensors, offset, payload = [], 0, []
    for name, t in state.items():
        a = np.ascontiguousarray(t.detach().cpu().numpy())
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        tensors.append({"name": name, "shape": list(a.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": asdict(model.architecture),
        "attribute": model.attribute.value,
        "input_mode": model.input_mode,
        "encoding": model.encoding.to_dict(),
        "training_log": model.training_log,
        "best_epoch": model.best_epoch,
        "tensors": tensors,
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payload:
            fh.write(raw)


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        (size,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(size))


def load_checkpoint(path: str | Path) -> TrainedModel:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a model checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (size,) = struct.unpack("<Q", data[pos:pos + 8])
    header = json.loads(data[pos + 8:pos + 8 + size])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    body = data[pos + 8 + size:]
    arch = ArchitectureSpec(**header["architecture"])
    enc = FeatureEncoding.from_dict(header["encoding"])
    net = build_network(arch, enc)
    state = {}
    for t in header["tensors"]:
        raw = body[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    net.load_state_dict(state)
    net.eval()
    return TrainedModel(
        arch, net, AttributeKind(header["attribute"]), enc, header["input_mode"],
        header["training_log"], header["best_epoch"],
    )
