import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superapp_privacy.domain import Button, MiniApp, MiniAppCatalog, MiniHRecord, OpHTimeline, fuse
from superapp_privacy.encoder import (
    FeatureEncoding,
    UnknownIdError,
    build_encoding,
    encode_batch,
    encode_sample,
    fit_frequency_stats,
    mask_modality,
    padding_mask,
)


def tiny_catalog(app_ids=(5, 9), button_ids=(3, 7, 11, 20)):
    apps = tuple(MiniApp(i, 1 + k % 28) for k, i in enumerate(app_ids))
    names = ["payment", "back", "password_free_payment"] + [f"generic_{k}" for k in range(len(button_ids) - 3)]
    buttons = tuple(Button(b, n) for b, n in zip(button_ids, names))
    return MiniAppCatalog(miniapps=apps, buttons=buttons)


class TestBuildEncoding:
    def test_ascending_assignment(self):
        enc = build_encoding(tiny_catalog())
        assert enc.miniapp_vocab == {0: 0, 5: 1, 9: 2}
        assert enc.button_vocab == {0: 0, 3: 1, 7: 2, 11: 3, 20: 4}

    def test_deterministic(self, catalog):
        assert build_encoding(catalog).to_dict() == build_encoding(catalog).to_dict()

    def test_round_trip(self, catalog):
        enc = build_encoding(catalog)
        assert FeatureEncoding.from_dict(enc.to_dict()) == enc

    def test_rejects_gappy_vocab(self):
        with pytest.raises(ValueError):
            FeatureEncoding({0: 0, 5: 2}, {0: 0})


class TestEncodeSample:
    def test_transform_and_padding(self):
        enc = build_encoding(tiny_catalog())
        s = fuse([MiniHRecord(9, 2, 2), MiniHRecord(5, 1, 0)], OpHTimeline((7, 0, 0, 20)), 4)
        x = encode_sample(s, enc)
        assert x[0].tolist() == [2, 2, pytest.approx(math.log1p(2)), 2]
        assert x[1].tolist() == [1, 1, 0.0, 0]
        assert x[2].tolist() == [0, 0, 0.0, 0]
        assert x[3].tolist() == [0, 0, 0.0, 4]
        assert x[0, 2] == pytest.approx(1.0986, abs=1e-4)

    def test_unknown_id_names_column(self):
        enc = build_encoding(tiny_catalog())
        s = fuse([MiniHRecord(6, 1, 1)], OpHTimeline((0, 0)), 2)
        with pytest.raises(UnknownIdError) as e:
            encode_sample(s, enc)
        assert e.value.column == "mini-app" and e.value.value == 6
        s = fuse([], OpHTimeline((0, 8)), 2)
        with pytest.raises(UnknownIdError, match="button id 8"):
            encode_sample(s, enc)

    def test_padding_mask(self, population, catalog):
        _, samples = population
        enc = build_encoding(catalog)
        x = encode_batch(samples, enc)
        grids = np.stack([s.sample.fused for s in samples])
        expected = (grids[..., 0] == 0) & (grids[..., 3] == 0)
        assert np.array_equal(padding_mask(x), expected)
        assert np.isfinite(x).all()

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.tuples(st.sampled_from([5, 9]), st.integers(0, 1000)), max_size=2, unique_by=lambda t: t[0]),
        st.lists(st.sampled_from([0, 3, 7, 11, 20]), min_size=6, max_size=6),
        st.lists(st.tuples(st.sampled_from([5, 9]), st.integers(0, 1000)), max_size=2, unique_by=lambda t: t[0]),
        st.lists(st.sampled_from([0, 3, 7, 11, 20]), min_size=6, max_size=6),
    )
    def test_injective(self, rows_a, slots_a, rows_b, slots_b):
        cat = tiny_catalog()
        enc = build_encoding(cat)
        a = fuse([MiniHRecord(i, cat.category_of(i), c) for i, c in rows_a], OpHTimeline(tuple(slots_a)), 6)
        b = fuse([MiniHRecord(i, cat.category_of(i), c) for i, c in rows_b], OpHTimeline(tuple(slots_b)), 6)
        same_code = np.array_equal(encode_sample(a, enc), encode_sample(b, enc))
        assert same_code == (a == b)


class TestFrequencyStats:
    def test_train_only_real_rows(self, population, catalog):
        _, samples = population
        enc = fit_frequency_stats(build_encoding(catalog), samples[:10])
        grids = np.stack([s.sample.fused for s in samples[:10]])
        f = np.log1p(grids[..., 2][grids[..., 0] > 0])
        assert enc.freq_mean == pytest.approx(f.mean())
        assert enc.freq_std == pytest.approx(f.std())


class TestModality:
    def test_masks(self, rng):
        x = rng.integers(1, 5, size=(2, 6, 4)).astype(float)
        m = mask_modality(x, "mini_h")
        assert (m[..., 3] == 0).all() and np.array_equal(m[..., :3], x[..., :3])
        o = mask_modality(x, "op_h")
        assert (o[..., :3] == 0).all() and np.array_equal(o[..., 3], x[..., 3])
        assert mask_modality(x, "fused") is x
        with pytest.raises(ValueError):
            mask_modality(x, "both")
