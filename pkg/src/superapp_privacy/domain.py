"""Core vocabulary: attributes, catalog, interaction records and labeled samples."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

SLOT_DURATION_MS = 500
DEFAULT_LENGTH = 200


class AttributeKind(str, Enum):
    GENDER = "gender"
    LOCATION = "location"
    AGE = "age"
    PROPERTY = "property"
    VEHICLE = "vehicle"
    MARITAL = "marital"
    PARENTAL = "parental"

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[self]

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES[self])

    @classmethod
    def parse(cls, value: "str | AttributeKind") -> "AttributeKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown attribute kind {value!r}") from None


CLASS_NAMES: dict[AttributeKind, tuple[str, ...]] = {
    AttributeKind.GENDER: ("male", "female"),
    AttributeKind.LOCATION: ("tier1", "tier2", "tier3"),
    AttributeKind.AGE: ("under18", "18-39", "40-65", "above65"),
    AttributeKind.PROPERTY: ("yes", "no"),
    AttributeKind.VEHICLE: ("yes", "no"),
    AttributeKind.MARITAL: ("married", "unmarried"),
    AttributeKind.PARENTAL: ("yes", "no"),
}

ALL_KINDS: tuple[AttributeKind, ...] = tuple(AttributeKind)


@dataclass(frozen=True)
class AttributeLabel:
    kind: AttributeKind
    class_index: int

    def __post_init__(self):
        if not 0 <= self.class_index < self.kind.num_classes:
            raise ValueError(
                f"class index {self.class_index} out of range for {self.kind.value} "
                f"({self.kind.num_classes} classes)"
            )

    @property
    def name(self) -> str:
        return self.kind.class_names[self.class_index]

    @classmethod
    def from_name(cls, kind: AttributeKind, name: str) -> "AttributeLabel":
        try:
            return cls(kind, kind.class_names.index(name))
        except ValueError:
            raise ValueError(f"unknown class {name!r} for {kind.value}") from None


CATEGORY_NAMES: tuple[str, ...] = (
    "Education",
    "Entertainment",
    "House and Home",
    "Lifestyle",
    "Maps, Navigation, and Taxi",
    "Music and Audio",
    "Parenting",
    "Shopping",
    "Auto and Vehicles",
    "Beauty",
    "Business",
    "Dating",
    "Social",
    "Travel and Local",
    "Finance",
    "Food and Drink",
    "Health and Fitness",
    "Art and Design",
    "Books",
    "Comics",
    "Communication",
    "Medical",
    "News",
    "Photo",
    "Productivity",
    "Sports",
    "Weather",
    "Event",
)
NUM_CATEGORIES = len(CATEGORY_NAMES)


def category_code(name: str) -> int:
    return CATEGORY_NAMES.index(name) + 1


def category_name(code: int) -> str:
    if not 1 <= code <= NUM_CATEGORIES:
        raise ValueError(f"category code {code} outside 1..{NUM_CATEGORIES}")
    return CATEGORY_NAMES[code - 1]


class ButtonRole(str, Enum):
    GENERIC = "generic"
    PAYMENT = "payment"
    BACK = "back"
    PASSWORD_FREE = "password_free_payment"


SPECIAL_ROLES = (ButtonRole.PAYMENT, ButtonRole.BACK, ButtonRole.PASSWORD_FREE)


class CatalogSizeError(ValueError):
    pass


@dataclass(frozen=True)
class MiniApp:
    miniapp_id: int
    category_code: int


@dataclass(frozen=True)
class Button:
    button_id: int
    function_name: str

    @property
    def role(self) -> ButtonRole:
        for role in SPECIAL_ROLES:
            if self.function_name == role.value:
                return role
        return ButtonRole.GENERIC


@dataclass(frozen=True)
class MiniAppCatalog:
    """Category taxonomy plus the synthetic mini-app and button vocabularies."""

    miniapps: tuple[MiniApp, ...]
    buttons: tuple[Button, ...]
    categories: tuple[tuple[int, str], ...] = tuple(
        (i + 1, name) for i, name in enumerate(CATEGORY_NAMES)
    )

    def __post_init__(self):
        if [c for c, _ in self.categories] != list(range(1, NUM_CATEGORIES + 1)):
            raise ValueError("catalog must carry the 28 category codes 1..28 in order")
        if tuple(n for _, n in self.categories) != CATEGORY_NAMES:
            raise ValueError("catalog category names do not match the taxonomy")
        ids = [m.miniapp_id for m in self.miniapps]
        if len(set(ids)) != len(ids) or min(ids, default=1) <= 0:
            raise ValueError("mini-app ids must be unique and positive")
        for m in self.miniapps:
            if not 1 <= m.category_code <= NUM_CATEGORIES:
                raise ValueError(f"mini-app {m.miniapp_id} has unknown category {m.category_code}")
        bids = [b.button_id for b in self.buttons]
        if len(set(bids)) != len(bids) or min(bids, default=1) <= 0:
            raise ValueError("button ids must be unique and positive (0 is the no-click sentinel)")
        object.__setattr__(self, "_category_of", {m.miniapp_id: m.category_code for m in self.miniapps})
        object.__setattr__(self, "_role_of", {b.button_id: b.role for b in self.buttons})

    def category_of(self, miniapp_id: int) -> int:
        try:
            return self._category_of[miniapp_id]
        except KeyError:
            raise KeyError(f"mini-app id {miniapp_id} not in catalog") from None

    def role_of(self, button_id: int) -> ButtonRole:
        return self._role_of[button_id]

    def has_button(self, button_id: int) -> bool:
        return button_id in self._role_of

    def has_miniapp(self, miniapp_id: int) -> bool:
        return miniapp_id in self._category_of

    def role_button(self, role: ButtonRole) -> int:
        for b in self.buttons:
            if b.role is role:
                return b.button_id
        raise KeyError(f"catalog has no {role.value} button")

    def generic_buttons(self) -> list[int]:
        return [b.button_id for b in self.buttons if b.role is ButtonRole.GENERIC]

    def miniapp_ids(self) -> np.ndarray:
        return np.array([m.miniapp_id for m in self.miniapps], dtype=np.int64)

    def miniapp_categories(self) -> np.ndarray:
        return np.array([m.category_code for m in self.miniapps], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "categories": [[c, n] for c, n in self.categories],
            "miniapps": [[m.miniapp_id, m.category_code] for m in self.miniapps],
            "buttons": [[b.button_id, b.function_name] for b in self.buttons],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MiniAppCatalog":
        return cls(
            miniapps=tuple(MiniApp(int(i), int(c)) for i, c in d["miniapps"]),
            buttons=tuple(Button(int(i), str(n)) for i, n in d["buttons"]),
            categories=tuple((int(c), str(n)) for c, n in d["categories"]),
        )


def build_catalog(num_miniapps: int, num_buttons: int, seed: int) -> MiniAppCatalog:
    """Draw a catalog with at least one mini-app per category.

    Ids are sampled without replacement from a range ten times larger than
    the vocabulary, so they are sparse and opaque like production ids. The
    first three buttons (by id) carry the payment, back and password-free
    payment roles; the rest are generic.
    """
    if num_miniapps < NUM_CATEGORIES:
        raise CatalogSizeError(
            f"need at least {NUM_CATEGORIES} mini-apps (one per category), got {num_miniapps}"
        )
    if num_buttons < 1:
        raise CatalogSizeError(f"need at least one button, got {num_buttons}")
    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(np.arange(1, 10 * num_miniapps + 1), size=num_miniapps, replace=False))
    cats = np.concatenate(
        [
            np.arange(1, NUM_CATEGORIES + 1),
            rng.integers(1, NUM_CATEGORIES + 1, size=num_miniapps - NUM_CATEGORIES),
        ]
    )
    rng.shuffle(cats)
    miniapps = tuple(MiniApp(int(i), int(c)) for i, c in zip(ids, cats))

    bids = np.sort(rng.choice(np.arange(1, 10 * num_buttons + 1), size=num_buttons, replace=False))
    names = [r.value for r in SPECIAL_ROLES][:num_buttons]
    names += [f"generic_{k:04d}" for k in range(num_buttons - len(names))]
    buttons = tuple(Button(int(i), n) for i, n in zip(bids, names))
    return MiniAppCatalog(miniapps=miniapps, buttons=buttons)


@dataclass(frozen=True)
class MiniHRecord:
    miniapp_id: int
    category_code: int
    access_count: int

    def __post_init__(self):
        if self.access_count < 0:
            raise ValueError("access_count must be non-negative")


@dataclass(frozen=True)
class OpHTimeline:
    slots: tuple[int, ...]
    slot_duration_ms: int = SLOT_DURATION_MS

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(int(s) for s in self.slots))
        if any(s < 0 for s in self.slots):
            raise ValueError("button ids must be non-negative")

    @property
    def window_seconds(self) -> float:
        return len(self.slots) * self.slot_duration_ms / 1000

    def __len__(self) -> int:
        return len(self.slots)


class FusionError(ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def fuse_arrays(
    ids: np.ndarray, cats: np.ndarray, counts: np.ndarray, slots: np.ndarray, n: int
) -> np.ndarray:
    """Array form of :func:`fuse`, used by the generator's hot path."""
    if len(slots) != n:
        raise FusionError(f"Op-H timeline has {len(slots)} slots, expected {n}")
    order = np.lexsort((ids, -counts))[:n]
    grid = np.zeros((n, 4), dtype=np.int64)
    k = len(order)
    grid[:k, 0] = ids[order]
    grid[:k, 1] = cats[order]
    grid[:k, 2] = counts[order]
    grid[:, 3] = slots
    return grid


@dataclass(frozen=True, eq=False)
class InteractionSample:
    """One fused N x 4 sample: (miniapp id, category, 30-day accesses, clicked button)."""

    fused: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.fused, dtype=np.int64)
        if grid.ndim != 2 or grid.shape[1] != 4:
            raise FusionError(f"fused grid must be N x 4, got {grid.shape}")
        if (grid < 0).any():
            raise FusionError("fused grid entries must be non-negative")
        object.__setattr__(self, "fused", _readonly(grid.copy()) if grid.flags.writeable else grid)

    @property
    def n(self) -> int:
        return self.fused.shape[0]

    @property
    def mini_h(self) -> tuple[MiniHRecord, ...]:
        rows = self.fused[self.fused[:, 0] > 0]
        return tuple(MiniHRecord(int(r[0]), int(r[1]), int(r[2])) for r in rows)

    @property
    def op_h(self) -> OpHTimeline:
        return OpHTimeline(tuple(self.fused[:, 3].tolist()))

    def __eq__(self, other):
        if not isinstance(other, InteractionSample):
            return NotImplemented
        return np.array_equal(self.fused, other.fused)

    __hash__ = None


def fuse(mini_h: Sequence[MiniHRecord], op_h: OpHTimeline, n: int) -> InteractionSample:
    """Concatenate Mini-H rows and Op-H slots into one N x 4 grid.

    Mini-H rows are ordered by access count (descending, ties by ascending
    id) and truncated to the n most accessed; absent rows are zero padded.
    """
    if n <= 0:
        raise FusionError("n must be positive")
    if len(op_h) != n:
        raise FusionError(f"Op-H timeline has {len(op_h)} slots, expected {n}")
    ids = np.array([r.miniapp_id for r in mini_h], dtype=np.int64)
    if (ids <= 0).any():
        raise FusionError("mini-app id 0 is reserved for padding")
    cats = np.array([r.category_code for r in mini_h], dtype=np.int64)
    counts = np.array([r.access_count for r in mini_h], dtype=np.int64)
    return InteractionSample(fuse_arrays(ids, cats, counts, np.array(op_h.slots, dtype=np.int64), n))


def validate_sample(sample: InteractionSample, catalog: MiniAppCatalog) -> None:
    """Check every id against the catalog; raises ValueError on the first mismatch."""
    for row, (mid, cat, _, bid) in enumerate(sample.fused.tolist()):
        if mid:
            if not catalog.has_miniapp(mid):
                raise ValueError(f"row {row}: unknown mini-app id {mid}")
            if catalog.category_of(mid) != cat:
                raise ValueError(f"row {row}: mini-app {mid} is not in category {cat}")
        elif cat:
            raise ValueError(f"row {row}: category {cat} on a padding row")
        if bid and not catalog.has_button(bid):
            raise ValueError(f"row {row}: unknown button id {bid}")


@dataclass(frozen=True, eq=False)
class LabeledSample:
    user_id: str
    sample: InteractionSample
    labels: Mapping[AttributeKind, AttributeLabel]

    def __post_init__(self):
        if set(self.labels) != set(ALL_KINDS):
            missing = sorted(k.value for k in set(ALL_KINDS) - set(self.labels))
            raise ValueError(f"label map must cover all seven attributes; missing {missing}")
        for k, lab in self.labels.items():
            if lab.kind is not k:
                raise ValueError(f"label for {k.value} carries kind {lab.kind.value}")

    def label(self, kind: AttributeKind) -> int:
        return self.labels[kind].class_index

    def __eq__(self, other):
        if not isinstance(other, LabeledSample):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and self.sample == other.sample
            and dict(self.labels) == dict(other.labels)
        )

    __hash__ = None


def make_labels(indices: Mapping[AttributeKind, int] | Sequence[int]) -> dict[AttributeKind, AttributeLabel]:
    if not isinstance(indices, Mapping):
        indices = dict(zip(ALL_KINDS, indices))
    return {k: AttributeLabel(k, int(indices[k])) for k in ALL_KINDS}


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[LabeledSample, ...]
    validation: tuple[LabeledSample, ...]
    test: tuple[LabeledSample, ...]
    seed: int = 0

    def __post_init__(self):
        users = [{s.user_id for s in part} for part in (self.train, self.validation, self.test)]
        if users[0] & users[1] or users[0] & users[2] or users[1] & users[2]:
            raise ValueError("user ids must be disjoint across train/validation/test")


def labels_array(samples: Iterable[LabeledSample], kind: AttributeKind) -> np.ndarray:
    return np.array([s.labels[kind].class_index for s in samples], dtype=np.int64)
