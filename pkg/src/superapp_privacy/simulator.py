"""Synthetic super-app populations with planted attribute signals, plus their exact Bayes posterior.

Generative model
----------------
Every user has one label per attribute, drawn independently from the
population marginals. Each attribute class owns a persona that pins the
mean 30-day access count of some categories, a click rate per 100 s window,
per-role button rates and a spread ("breadth") of accesses over mini-apps.
For a user, each behaviour mean is::

    base + signal_strength * sum_k (persona_k[y_k] - avg_k)

where ``avg_k`` is the prior-weighted mean of attribute ``k``'s personas and
``base`` is the population average, so a persona value is recovered exactly
as the marginal mean when only one attribute touches that behaviour. Means
are floored at ``MIN_RATE``.

Access counts are independent Poisson per mini-app with mean
``lambda_category * w_j(breadth)``, where ``w_j`` decays exponentially with
the mini-app's popularity rank inside its category. Button clicks are
independent Poisson per role, scaled by window length, placed on distinct
uniformly drawn slots. Because the seven attributes have only 384 joint
configurations, the posterior is computed exactly by enumeration.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .domain import (
    ALL_KINDS,
    DEFAULT_LENGTH,
    NUM_CATEGORIES,
    AttributeKind,
    ButtonRole,
    InteractionSample,
    LabeledSample,
    MiniAppCatalog,
    SPECIAL_ROLES,
    category_code,
    fuse_arrays,
    make_labels,
)

MIN_RATE = 0.01
MIN_BREADTH = 0.5
REFERENCE_SLOTS = DEFAULT_LENGTH  # click rates are quoted per 100 s = 200 slots

ROLE_ORDER = (ButtonRole.GENERIC,) + SPECIAL_ROLES

# Default label marginals, class order as in domain.CLASS_NAMES.
DEFAULT_MARGINALS: dict[AttributeKind, tuple[float, ...]] = {
    AttributeKind.GENDER: (0.503, 0.497),
    AttributeKind.LOCATION: (0.228, 0.434, 0.338),
    AttributeKind.AGE: (0.175, 0.380, 0.309, 0.136),
    AttributeKind.PROPERTY: (0.486, 0.514),
    AttributeKind.VEHICLE: (0.210, 0.790),
    AttributeKind.MARITAL: (0.697, 0.303),
    AttributeKind.PARENTAL: (0.536, 0.464),
}


class SignalStrengthError(ValueError):
    pass


class InsufficientCountError(ValueError):
    pass


@dataclass(frozen=True)
class Persona:
    """Behaviour parameters for one attribute class.

    ``None`` / missing keys mean the attribute does not influence that
    behaviour. Every class of one attribute must specify the same keys.
    """

    category_affinity: Mapping[int, float] = field(default_factory=dict)
    miniapp_breadth: float | None = None
    click_rate: float | None = None
    special_button_rates: Mapping[ButtonRole, float] = field(default_factory=dict)

    def __post_init__(self):
        vals = list(self.category_affinity.values()) + list(self.special_button_rates.values())
        vals += [v for v in (self.miniapp_breadth, self.click_rate) if v is not None]
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError("persona means must be finite and non-negative")
        if any(not 1 <= c <= NUM_CATEGORIES for c in self.category_affinity):
            raise ValueError("persona references a category outside 1..28")
        if any(r not in SPECIAL_ROLES for r in self.special_button_rates):
            raise ValueError("special button rates only cover payment/back/password-free roles")


@dataclass(frozen=True)
class PersonaSet:
    personas: Mapping[tuple[AttributeKind, int], Persona]
    background_affinity: Mapping[int, float]
    background_breadth: float = 6.0
    background_click_rate: float = 26.0
    background_button_rates: Mapping[ButtonRole, float] = field(
        default_factory=lambda: {ButtonRole.PAYMENT: 1.2, ButtonRole.BACK: 2.5, ButtonRole.PASSWORD_FREE: 0.6}
    )

    def __post_init__(self):
        for kind in ALL_KINDS:
            ps = [self.personas.get((kind, i)) for i in range(kind.num_classes)]
            if any(p is None for p in ps):
                raise ValueError(f"missing persona for some class of {kind.value}")
            keys = {
                (frozenset(p.category_affinity), p.miniapp_breadth is None, p.click_rate is None,
                 frozenset(p.special_button_rates))
                for p in ps
            }
            if len(keys) != 1:
                raise ValueError(f"personas of {kind.value} must specify the same behaviours")
        if set(self.background_affinity) != set(range(1, NUM_CATEGORIES + 1)):
            raise ValueError("background affinity must cover all 28 categories")

    def persona(self, kind: AttributeKind, class_index: int) -> Persona:
        return self.personas[(kind, class_index)]


def _cats(**named: float) -> dict[int, float]:
    return {category_code(k.replace("_", " ")): v for k, v in named.items()}


def default_personas() -> PersonaSet:
    """Personas encoding the published per-attribute behaviour statistics."""
    G, L, A = AttributeKind.GENDER, AttributeKind.LOCATION, AttributeKind.AGE
    P, V, M, C = AttributeKind.PROPERTY, AttributeKind.VEHICLE, AttributeKind.MARITAL, AttributeKind.PARENTAL
    pay, back, pwf = ButtonRole.PAYMENT, ButtonRole.BACK, ButtonRole.PASSWORD_FREE
    news, sports = category_code("News"), category_code("Sports")
    shopping, beauty = category_code("Shopping"), category_code("Beauty")
    personas = {
        (G, 0): Persona({shopping: 2.4, beauty: 0.3, news: 9.8, sports: 10.6}, click_rate=15.0),
        (G, 1): Persona({shopping: 14.2, beauty: 10.9, news: 0.4, sports: 0.4}, click_rate=27.5),
        # Tier-1/2/3: overall access 36.3 / 20.9 / 13.1 spread over everyday-service
        # categories; wider app usage; password-free payment 1.1 / 0.7 / 0.1.
        (L, 0): Persona(
            _cats(Food_and_Drink=10.0, Travel_and_Local=8.0, Entertainment=6.0, Event=4.0),
            miniapp_breadth=7.5, special_button_rates={pwf: 1.1},
        ),
        (L, 1): Persona(
            _cats(Food_and_Drink=5.5, Travel_and_Local=4.5, Entertainment=3.5, Event=2.0),
            miniapp_breadth=6.0, special_button_rates={pwf: 0.7},
        ),
        (L, 2): Persona(
            _cats(Food_and_Drink=3.0, Travel_and_Local=2.5, Entertainment=2.0, Event=1.0),
            miniapp_breadth=4.5, special_button_rates={pwf: 0.1},
        ),
        # Minors avoid Finance, elderly avoid Dating and Comics; elderly click
        # less (17.8 vs 31.5) and press Back more (3.5 vs 2.3); minors rarely pay.
        (A, 0): Persona(_cats(Finance=0.1, Dating=1.0, Comics=6.0), click_rate=31.5,
                        special_button_rates={pay: 0.2, back: 2.3}),
        (A, 1): Persona(_cats(Finance=6.0, Dating=3.0, Comics=3.0), click_rate=31.5,
                        special_button_rates={pay: 1.4, back: 2.3}),
        (A, 2): Persona(_cats(Finance=6.0, Dating=1.5, Comics=1.0), click_rate=31.5,
                        special_button_rates={pay: 1.4, back: 2.3}),
        (A, 3): Persona(_cats(Finance=4.0, Dating=0.0, Comics=0.0), click_rate=17.8,
                        special_button_rates={pay: 1.4, back: 3.5}),
        # Household-bill apps (2.6 + 1.3 + 1.1) vs rental apps (1.2 + 1.1 + 1.6).
        (P, 0): Persona(_cats(Lifestyle=5.0, House_and_Home=0.0)),
        (P, 1): Persona(_cats(Lifestyle=0.1, House_and_Home=3.9)),
        # Fueling/vehicle apps 2.5 vs 0.0; transit 2.5 vs 11.5; owners press
        # Back and password-free payment ~38.55% more.
        (V, 0): Persona(_cats(Auto_and_Vehicles=2.5, **{"Maps,_Navigation,_and_Taxi": 2.5}),
                        special_button_rates={back: 2.9, pwf: 0.9}),
        (V, 1): Persona(_cats(Auto_and_Vehicles=0.0, **{"Maps,_Navigation,_and_Taxi": 11.5}),
                        special_button_rates={back: 2.1, pwf: 0.65}),
        # Married: family categories ~6.3x; unmarried: Dating/Social ~82x.
        (M, 0): Persona(_cats(Medical=3.8, Finance=3.8, Dating=0.1, Social=0.1)),
        (M, 1): Persona(_cats(Medical=0.6, Finance=0.6, Dating=8.2, Social=8.2)),
        # Parents: Education/Parenting/Books ~10x and 18% fewer clicks.
        (C, 0): Persona(_cats(Education=4.0, Parenting=5.0, Books=3.0), click_rate=24.6),
        (C, 1): Persona(_cats(Education=0.4, Parenting=0.5, Books=0.3), click_rate=30.0),
    }
    background = {c: 9.0 for c in range(1, NUM_CATEGORIES + 1)}
    return PersonaSet(personas=personas, background_affinity=background)


@dataclass(frozen=True)
class PopulationSpec:
    num_users: int
    samples_per_user: int = 5
    signal_strength: float = 1.0
    seed: int = 0
    marginals: Mapping[AttributeKind, Sequence[float]] = field(default_factory=lambda: dict(DEFAULT_MARGINALS))
    length: int = DEFAULT_LENGTH
    independent_mini_h: bool = False

    def __post_init__(self):
        if not 0.0 <= self.signal_strength <= 1.0:
            raise SignalStrengthError(f"signal_strength must lie in [0, 1], got {self.signal_strength}")
        if self.num_users <= 0 or self.samples_per_user <= 0 or self.length <= 0:
            raise ValueError("num_users, samples_per_user and length must be positive")
        validate_marginals(self.marginals)

    def marginal(self, kind: AttributeKind) -> np.ndarray:
        return np.asarray(self.marginals[kind], dtype=float)


def validate_marginals(marginals: Mapping[AttributeKind, Sequence[float]]) -> None:
    for kind in ALL_KINDS:
        if kind not in marginals:
            raise ValueError(f"marginal for {kind.value} is missing")
        p = np.asarray(marginals[kind], dtype=float)
        if p.shape != (kind.num_classes,):
            raise ValueError(f"marginal for {kind.value} needs {kind.num_classes} entries")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"marginal for {kind.value} must be non-negative and sum to 1 (sums to {p.sum():.6g})")


@dataclass(frozen=True)
class BehaviorTable:
    """Blended behaviour means for every joint label configuration."""

    configs: np.ndarray  # (C, 7) class index per attribute
    log_prior: np.ndarray  # (C,)
    access: np.ndarray  # (C, 28) category means
    breadth: np.ndarray  # (C,)
    rates: np.ndarray  # (C, 4) per-role clicks per 100 s, ROLE_ORDER

    def index_of(self, labels: Sequence[int]) -> int:
        idx = 0
        for kind, y in zip(ALL_KINDS, labels):
            idx = idx * kind.num_classes + int(y)
        return idx


def _attribute_deviation(values: np.ndarray, prior: np.ndarray) -> tuple[np.ndarray, float]:
    avg = float(prior @ values)
    return values - avg, avg


def behavior_table(pop: PopulationSpec, personas: PersonaSet) -> BehaviorTable:
    s = pop.signal_strength
    configs = np.array(list(itertools.product(*(range(k.num_classes) for k in ALL_KINDS))), dtype=np.int64)
    n_cfg = len(configs)
    log_prior = np.zeros(n_cfg)
    for j, kind in enumerate(ALL_KINDS):
        with np.errstate(divide="ignore"):
            log_prior += np.log(pop.marginal(kind))[configs[:, j]]

    def blend(getter, background: float) -> np.ndarray:
        devs, avgs = np.zeros(n_cfg), []
        for j, kind in enumerate(ALL_KINDS):
            vals = [getter(personas.persona(kind, i)) for i in range(kind.num_classes)]
            if vals[0] is None:
                continue
            dev, avg = _attribute_deviation(np.asarray(vals, dtype=float), pop.marginal(kind))
            devs += dev[configs[:, j]]
            avgs.append(avg)
        base = float(np.mean(avgs)) if avgs else background
        return base + s * devs

    access = np.stack(
        [blend(lambda p, c=c: p.category_affinity.get(c), personas.background_affinity[c])
         for c in range(1, NUM_CATEGORIES + 1)],
        axis=1,
    )
    breadth = np.maximum(blend(lambda p: p.miniapp_breadth, personas.background_breadth), MIN_BREADTH)
    special = np.stack(
        [blend(lambda p, r=r: p.special_button_rates.get(r), personas.background_button_rates[r])
         for r in SPECIAL_ROLES],
        axis=1,
    )
    special = np.maximum(special, MIN_RATE)
    clicks = blend(lambda p: p.click_rate, personas.background_click_rate)
    generic = np.maximum(clicks - special.sum(axis=1), MIN_RATE)
    rates = np.column_stack([generic, special])
    return BehaviorTable(configs, log_prior, np.maximum(access, MIN_RATE), breadth, rates)


def _category_ranks(catalog: MiniAppCatalog) -> np.ndarray:
    """Popularity rank of each mini-app inside its category (ascending id order)."""
    cats = catalog.miniapp_categories()
    ranks = np.zeros(len(cats), dtype=np.int64)
    for c in range(1, NUM_CATEGORIES + 1):
        idx = np.flatnonzero(cats == c)
        ranks[idx] = np.arange(len(idx))
    return ranks


def log_popularity(catalog: MiniAppCatalog, breadth: np.ndarray) -> np.ndarray:
    """log w_j(b) for each breadth value (rows) and catalog mini-app (columns)."""
    cats = catalog.miniapp_categories()
    ranks = _category_ranks(catalog)
    logits = -ranks[None, :] / np.asarray(breadth, dtype=float)[:, None]
    out = np.empty_like(logits)
    for c in range(1, NUM_CATEGORIES + 1):
        idx = cats == c
        out[:, idx] = logits[:, idx] - logsumexp(logits[:, idx], axis=1, keepdims=True)
    return out


class _Generator:
    def __init__(self, pop: PopulationSpec, personas: PersonaSet, catalog: MiniAppCatalog):
        self.pop = pop
        self.catalog = catalog
        self.table = behavior_table(pop, personas)
        self.ids = catalog.miniapp_ids()
        self.cats = catalog.miniapp_categories()
        self.breadths, self.breadth_index = np.unique(self.table.breadth, return_inverse=True)
        self.popularity = np.exp(log_popularity(catalog, self.breadths))
        self.role_ids = [catalog.role_button(r) for r in SPECIAL_ROLES]
        self.generic_ids = np.array(catalog.generic_buttons(), dtype=np.int64)
        if len(self.generic_ids) == 0:
            raise ValueError("catalog needs at least one generic button")

    def mini_h(self, rng: np.random.Generator, cfg: int):
        mu = self.table.access[cfg][self.cats - 1] * self.popularity[self.breadth_index[cfg]]
        counts = rng.poisson(mu)
        used = counts > 0
        return self.ids[used], self.cats[used], counts[used]

    def op_h(self, rng: np.random.Generator, cfg: int) -> np.ndarray:
        n = self.pop.length
        role_counts = rng.poisson(self.table.rates[cfg] * n / REFERENCE_SLOTS)
        total = int(role_counts.sum())
        if total > n:  # cannot click more than once per slot
            role_counts = np.floor(role_counts * n / total).astype(np.int64)
            total = int(role_counts.sum())
        buttons = np.concatenate(
            [rng.choice(self.generic_ids, size=role_counts[0])]
            + [np.full(c, b, dtype=np.int64) for c, b in zip(role_counts[1:], self.role_ids)]
        )
        slots = np.zeros(n, dtype=np.int64)
        slots[rng.choice(n, size=total, replace=False)] = rng.permutation(buttons)
        return slots

    def user(self, index: int, prefix: str) -> list[LabeledSample]:
        pop = self.pop
        rng = np.random.default_rng([pop.seed, index])
        y = [int(rng.choice(k.num_classes, p=pop.marginal(k))) for k in ALL_KINDS]
        cfg = self.table.index_of(y)
        labels = make_labels(y)
        user_id = f"{prefix}{index:06d}"
        history = self.mini_h(rng, cfg)
        out = []
        for _ in range(pop.samples_per_user):
            if pop.independent_mini_h:
                history = self.mini_h(rng, cfg)
            grid = fuse_arrays(*history, self.op_h(rng, cfg), pop.length)
            out.append(LabeledSample(user_id, InteractionSample(grid), labels))
        return out


def generate_population(
    pop: PopulationSpec,
    personas: PersonaSet,
    catalog: MiniAppCatalog,
    user_offset: int = 0,
    prefix: str = "u",
) -> list[LabeledSample]:
    """Draw ``pop.num_users`` users with ``pop.samples_per_user`` samples each.

    Each user's stream is seeded by ``(pop.seed, user index)``, so a user's
    labels and Mini-H do not depend on the population size or the window
    length, and populations can be generated in independent chunks.
    """
    gen = _Generator(pop, personas, catalog)
    out: list[LabeledSample] = []
    for i in range(user_offset, user_offset + pop.num_users):
        out.extend(gen.user(i, prefix))
    return out


def _unique_users(samples: Sequence[LabeledSample]) -> list[LabeledSample]:
    seen, users = set(), []
    for s in samples:
        if s.user_id not in seen:
            seen.add(s.user_id)
            users.append(s)
    return users


def chi_square_marginals(
    samples: Sequence[LabeledSample], pop: PopulationSpec
) -> dict[AttributeKind, tuple[float, float]]:
    """Pearson goodness of fit of per-user label counts against the marginals."""
    users = _unique_users(samples)
    out = {}
    for kind in ALL_KINDS:
        counts = np.bincount([u.label(kind) for u in users], minlength=kind.num_classes)
        expected = pop.marginal(kind) * len(users)
        if (expected < 5).any():
            raise InsufficientCountError(
                f"{kind.value}: expected counts {np.round(expected, 2).tolist()} fall below 5"
            )
        stat, p = stats.chisquare(counts, expected)
        out[kind] = (float(stat), float(p))
    return out


class BayesOracle:
    """Exact posterior over attribute classes under the generative model.

    The oracle sees only what a sample shows: the fused grid. Rows dropped
    by truncation are treated as unused mini-apps, which is exact whenever
    the user used fewer than N mini-apps.
    """

    def __init__(self, pop: PopulationSpec, personas: PersonaSet, catalog: MiniAppCatalog):
        self.table = behavior_table(pop, personas)
        self.catalog = catalog
        ids = catalog.miniapp_ids()
        self._sorted_ids = ids
        self.breadths, self.breadth_index = np.unique(self.table.breadth, return_inverse=True)
        self._log_w = log_popularity(catalog, self.breadths)
        self._log_access = np.log(self.table.access)
        self._role_ids = np.array([catalog.role_button(r) for r in SPECIAL_ROLES], dtype=np.int64)

    def _features(self, grids: np.ndarray):
        grids = np.asarray(grids, dtype=np.int64)
        mids, cats, counts, buttons = grids[..., 0], grids[..., 1], grids[..., 2], grids[..., 3]
        s = grids.shape[0]
        cat_totals = np.zeros((s, NUM_CATEGORIES))
        valid = mids > 0
        rows = np.broadcast_to(np.arange(s)[:, None], mids.shape)
        np.add.at(cat_totals, (rows[valid], cats[valid] - 1), counts[valid])
        pos = np.searchsorted(self._sorted_ids, mids)
        pos = np.clip(pos, 0, len(self._sorted_ids) - 1)
        if (self._sorted_ids[pos][valid] != mids[valid]).any():
            raise KeyError("sample references a mini-app outside the catalog")
        weighted = np.where(valid, counts, 0).astype(float)
        pop_term = np.einsum("sn,usn->su", weighted, self._log_w[:, pos])
        clicks = buttons > 0
        special = (buttons[..., None] == self._role_ids).sum(axis=1)
        role_counts = np.column_stack([clicks.sum(axis=1) - special.sum(axis=1), special])
        return cat_totals, pop_term, role_counts, grids.shape[1]

    def log_joint(self, grids: np.ndarray) -> np.ndarray:
        """Unnormalised log P(config, sample) for each sample (rows) and config (columns)."""
        t = self.table
        cat_totals, pop_term, role_counts, n = self._features(grids)
        rates = t.rates * n / REFERENCE_SLOTS
        ll = cat_totals @ self._log_access.T - t.access.sum(axis=1)
        ll += pop_term[:, self.breadth_index]
        ll += role_counts @ np.log(rates).T - rates.sum(axis=1)
        return ll + t.log_prior

    def posterior(self, grids: np.ndarray, kind: AttributeKind, chunk: int = 2048) -> np.ndarray:
        grids = np.asarray(grids)
        if grids.ndim == 2:
            return self.posterior(grids[None], kind, chunk)[0]
        j = ALL_KINDS.index(kind)
        out = []
        for start in range(0, len(grids), chunk):
            lj = self.log_joint(grids[start:start + chunk])
            per_class = np.stack(
                [logsumexp(lj[:, self.table.configs[:, j] == c], axis=1) for c in range(kind.num_classes)],
                axis=1,
            )
            out.append(np.exp(per_class - logsumexp(per_class, axis=1, keepdims=True)))
        return np.concatenate(out) if out else np.zeros((0, kind.num_classes))


def bayes_posterior(
    sample: InteractionSample,
    kind: AttributeKind,
    pop: PopulationSpec,
    personas: PersonaSet,
    catalog: MiniAppCatalog,
) -> np.ndarray:
    return BayesOracle(pop, personas, catalog).posterior(sample.fused, kind)


def with_strength(pop: PopulationSpec, strength: float) -> PopulationSpec:
    return replace(pop, signal_strength=strength)


def expected_category_means(pop: PopulationSpec, personas: PersonaSet, kind: AttributeKind) -> np.ndarray:
    """Generative mean Mini-H access count per category, conditioned on each class of ``kind``.

    Shape (num_classes, 28). Other attributes are marginalised under the population
    priors, so categories shared by several attributes differ from any single persona value.
    """
    table = behavior_table(pop, personas)
    j = ALL_KINDS.index(kind)
    prior = np.exp(table.log_prior)
    out = np.zeros((kind.num_classes, NUM_CATEGORIES))
    for c in range(kind.num_classes):
        sel = table.configs[:, j] == c
        out[c] = prior[sel] @ table.access[sel] / prior[sel].sum()
    return out
