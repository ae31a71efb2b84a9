import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superapp_privacy.domain import (
    ALL_KINDS,
    CATEGORY_NAMES,
    AttributeKind,
    AttributeLabel,
    CatalogSizeError,
    DatasetSplit,
    FusionError,
    InteractionSample,
    LabeledSample,
    MiniHRecord,
    OpHTimeline,
    build_catalog,
    category_name,
    fuse,
    make_labels,
    validate_sample,
)


class TestAttributes:
    def test_class_counts(self):
        counts = {k: k.num_classes for k in AttributeKind}
        assert counts == {
            AttributeKind.GENDER: 2,
            AttributeKind.LOCATION: 3,
            AttributeKind.AGE: 4,
            AttributeKind.PROPERTY: 2,
            AttributeKind.VEHICLE: 2,
            AttributeKind.MARITAL: 2,
            AttributeKind.PARENTAL: 2,
        }

    @pytest.mark.parametrize("kind", list(AttributeKind))
    def test_name_index_bijection(self, kind):
        names = [AttributeLabel(kind, i).name for i in range(kind.num_classes)]
        assert len(set(names)) == kind.num_classes
        for i, n in enumerate(names):
            assert AttributeLabel.from_name(kind, n).class_index == i

    def test_location_tiers(self):
        assert [AttributeLabel(AttributeKind.LOCATION, i).name for i in range(3)] == ["tier1", "tier2", "tier3"]

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            AttributeLabel(AttributeKind.AGE, 4)
        with pytest.raises(ValueError):
            AttributeLabel(AttributeKind.GENDER, -1)


class TestCatalog:
    def test_minimal_catalog_one_app_per_category(self):
        cat = build_catalog(28, 10, seed=1)
        assert sorted(m.category_code for m in cat.miniapps) == list(range(1, 29))

    def test_finance_code(self):
        assert category_name(15) == "Finance"
        assert len(CATEGORY_NAMES) == 28

    def test_deterministic(self):
        a = build_catalog(500, 300, seed=7)
        b = build_catalog(500, 300, seed=7)
        assert a.to_dict() == b.to_dict()

    def test_too_small(self):
        with pytest.raises(CatalogSizeError):
            build_catalog(27, 10, seed=0)

    def test_every_category_covered(self, catalog):
        assert set(catalog.miniapp_categories().tolist()) == set(range(1, 29))
        ids = [m.miniapp_id for m in catalog.miniapps]
        assert len(set(ids)) == len(ids) and min(ids) > 0

    def test_dict_round_trip(self, catalog):
        assert type(catalog).from_dict(catalog.to_dict()).to_dict() == catalog.to_dict()


def _timeline(n, clicks=()):
    slots = [0] * n
    for i, b in clicks:
        slots[i] = b
    return OpHTimeline(tuple(slots))


class TestFuse:
    def test_padding(self):
        recs = [MiniHRecord(5, 2, 3), MiniHRecord(9, 4, 1), MiniHRecord(2, 1, 7)]
        s = fuse(recs, _timeline(200, [(0, 4)]), 200)
        assert s.fused.shape == (200, 4)
        assert (s.fused[3:, :3] == 0).all()
        assert s.fused[:3, 0].tolist() == [2, 5, 9]

    def test_truncation_keeps_most_accessed(self):
        recs = [MiniHRecord(i + 1, 1, i) for i in range(250)]
        s = fuse(recs, _timeline(200), 200)
        assert sorted(s.fused[:, 0].tolist()) == list(range(51, 251))

    def test_tie_break_by_id(self):
        recs = [MiniHRecord(8, 1, 5), MiniHRecord(3, 1, 5)]
        s = fuse(recs, _timeline(4), 4)
        assert s.fused[:2, 0].tolist() == [3, 8]

    def test_rejects_length_mismatch(self):
        with pytest.raises(FusionError):
            fuse([], _timeline(199), 200)

    def test_rejects_reserved_id(self):
        with pytest.raises(FusionError):
            fuse([MiniHRecord(0, 1, 1)], _timeline(4), 4)

    def test_timeline_window(self):
        assert _timeline(200).window_seconds == 100

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.tuples(st.integers(1, 60), st.integers(1, 28), st.integers(0, 40)), max_size=30,
                 unique_by=lambda t: t[0]),
        st.lists(st.integers(0, 9), min_size=16, max_size=16),
    )
    def test_refusion_idempotent(self, rows, slots):
        s = fuse([MiniHRecord(*r) for r in rows], OpHTimeline(tuple(slots)), 16)
        again = fuse(s.mini_h, s.op_h, 16)
        assert again == s


class TestSamples:
    def test_partial_labels_rejected(self, population):
        _, samples = population
        labels = dict(samples[0].labels)
        labels.pop(AttributeKind.AGE)
        with pytest.raises(ValueError, match="age"):
            LabeledSample("x", samples[0].sample, labels)

    def test_fused_is_read_only(self, population):
        _, samples = population
        with pytest.raises(ValueError):
            samples[0].sample.fused[0, 0] = 1

    def test_generated_samples_valid(self, population, catalog):
        _, samples = population
        for s in samples:
            validate_sample(s.sample, catalog)
            assert len(s.labels) == 7

    def test_validate_rejects_unknown_button(self, catalog):
        bad = np.zeros((4, 4), dtype=np.int64)
        bad[0, 3] = 10 ** 6
        with pytest.raises(ValueError, match="button"):
            validate_sample(InteractionSample(bad), catalog)

    def test_split_disjoint_users(self, population):
        _, samples = population
        with pytest.raises(ValueError):
            DatasetSplit(tuple(samples[:4]), tuple(samples[2:6]), ())
        DatasetSplit(tuple(samples[:4]), tuple(samples[4:8]), tuple(samples[8:10]))

    def test_make_labels_complete(self):
        labels = make_labels([0] * 7)
        assert set(labels) == set(ALL_KINDS)
