"""On-disk formats: line-delimited datasets and decision streams, canonical JSON, digests."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import ALL_KINDS, AttributeKind, InteractionSample, LabeledSample, MiniHRecord, OpHTimeline, fuse, make_labels

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path}; run the '{stage}' stage first")
        self.path = path
        self.stage = stage

    def __str__(self):
        return self.args[0]


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path, stage: str) -> dict:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None


def digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_jsonl(path: Path, header: Mapping, records: Iterable[Mapping]) -> None:
    """First line is ``{"header": ...}``; each following line is one record."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(canonical({"header": dict(header)}) + "\n")
        for r in records:
            fh.write(canonical(r) + "\n")


def read_jsonl(path: Path, stage: str) -> tuple[dict, list[dict]]:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    header, records = None, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if lineno == 1:
                if not isinstance(obj, dict) or "header" not in obj:
                    raise FormatError(f"{path}:1: missing header line")
                header = obj["header"]
            else:
                records.append((lineno, obj))
    if header is None:
        raise FormatError(f"{path}: empty file")
    return header, records


def sample_to_record(s: LabeledSample) -> dict:
    mini = s.sample.fused[s.sample.fused[:, 0] > 0][:, :3]
    return {
        "user_id": s.user_id,
        "labels": {k.value: s.label(k) for k in ALL_KINDS},
        "mini_h": mini.tolist(),
        "op_h": s.sample.fused[:, 3].tolist(),
    }


def record_to_sample(rec: Mapping) -> LabeledSample:
    """Inverse of :func:`sample_to_record`; rejects partial label maps."""
    labels = rec["labels"]
    missing = [k.value for k in ALL_KINDS if k.value not in labels]
    if missing:
        raise FormatError(f"label map is missing {missing}")
    slots = rec["op_h"]
    mini = [MiniHRecord(int(a), int(c), int(f)) for a, c, f in rec["mini_h"]]
    sample = fuse(mini, OpHTimeline(tuple(slots)), len(slots))
    return LabeledSample(str(rec["user_id"]), sample, make_labels({AttributeKind(k): int(v) for k, v in labels.items()}))


def save_dataset(path: Path, samples: Sequence[LabeledSample], header: Mapping) -> None:
    write_jsonl(path, {**header, "format_version": FORMAT_VERSION, "num_samples": len(samples)},
                (sample_to_record(s) for s in samples))


def load_dataset(path: Path, stage: str = "generate") -> tuple[dict, list[LabeledSample]]:
    header, rows = read_jsonl(path, stage)
    out = []
    for lineno, rec in rows:
        try:
            out.append(record_to_sample(rec))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}:{lineno}: {e}") from None
    return header, out


def grids_of(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.stack([s.sample.fused for s in samples])
