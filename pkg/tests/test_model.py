from dataclasses import replace

import numpy as np
import pytest
import torch

from superapp_privacy.domain import AttributeKind, DatasetSplit
from superapp_privacy.encoder import build_encoding, encode_batch
from superapp_privacy.model import (
    ArchitectureSpec,
    DivergenceError,
    ShapeMismatchError,
    TrainConfig,
    TrainedModel,
    build_network,
    default_architecture,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train,
)
from superapp_privacy.simulator import BayesOracle, PopulationSpec, generate_population

FAMILIES = ["transformer", "cnn", "rnn", "linear"]


def tiny(family, **kw):
    return replace(default_architecture(family), width=8, depth=1, heads=2, **kw)


@pytest.fixture(scope="module")
def split(population):
    _, samples = population
    return DatasetSplit(tuple(samples[:40]), tuple(samples[40:60]), tuple(samples[60:]))


@pytest.fixture(scope="module")
def encoded(population, catalog):
    _, samples = population
    return encode_batch(samples[:8], build_encoding(catalog))


def untrained(family, catalog, kind=AttributeKind.AGE):
    arch = tiny(family).for_attribute(kind)
    enc = build_encoding(catalog)
    torch.manual_seed(0)
    return TrainedModel(arch, build_network(arch, enc).eval(), kind, enc)


class TestArchitecture:
    def test_heads_divide_width(self):
        with pytest.raises(ValueError):
            ArchitectureSpec(width=10, heads=4)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            ArchitectureSpec(family="mlp")

    def test_output_classes_follow_attribute(self):
        assert ArchitectureSpec().for_attribute(AttributeKind.AGE).output_classes == 4

    def test_defaults(self):
        assert (ArchitectureSpec().depth, ArchitectureSpec().width, ArchitectureSpec().heads) == (2, 64, 4)
        assert default_architecture("cnn").depth == 4
        assert default_architecture("rnn").depth == 2


@pytest.mark.parametrize("family", FAMILIES)
class TestForward:
    def test_shape_and_finite(self, family, catalog, encoded):
        m = untrained(family, catalog)
        logits = m.logits(encoded)
        assert logits.shape == (8, 4) and np.isfinite(logits).all()
        p = torch.softmax(torch.as_tensor(logits), dim=1).numpy()
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_head_is_uniform(self, family, catalog, encoded):
        m = untrained(family, catalog)
        with torch.no_grad():
            m.network.head.weight.zero_()
            m.network.head.bias.zero_()
        logits = m.logits(encoded)
        assert np.array_equal(logits, np.zeros_like(logits))

    def test_batch_independent(self, family, catalog, encoded):
        # samples of different valid lengths share a batch; padding must not leak
        m = untrained(family, catalog)
        together = m.logits(encoded)
        alone = np.concatenate([m.logits(encoded[i:i + 1]) for i in range(len(encoded))])
        assert np.allclose(together, alone, atol=1e-5)

    def test_padding_permutation(self, family, catalog, encoded):
        m = untrained(family, catalog)
        x = encoded[:1].copy()
        pad = np.flatnonzero((x[0, :, 0] == 0) & (x[0, :, 3] == 0))
        x2 = x.copy()
        x2[0, pad] = x[0, np.random.default_rng(0).permutation(pad)]
        assert np.array_equal(m.logits(x), m.logits(x2))

    def test_shape_mismatch(self, family, catalog, encoded):
        m = untrained(family, catalog)
        with pytest.raises(ShapeMismatchError):
            m.logits(encoded[:, :100])
        bad = encoded.copy()
        bad[0, 0, 0] = 10 ** 6
        with pytest.raises(ShapeMismatchError):
            m.logits(bad)


class TestGradientCheck:
    def test_linear(self):
        assert gradient_check(tiny("linear"), seed=0) < 1e-7

    def test_transformer_two_layers(self):
        assert gradient_check(replace(tiny("transformer"), depth=2), seed=1) < 1e-4

    def test_rnn_one_layer(self):
        assert gradient_check(tiny("rnn"), seed=2) < 1e-4

    def test_cnn(self):
        assert gradient_check(replace(tiny("cnn"), depth=2), seed=3) < 1e-4

    def test_rejects_large_model(self):
        with pytest.raises(ValueError):
            gradient_check(ArchitectureSpec(), seed=0)


class TestTrain:
    def test_deterministic(self, split, catalog):
        enc = build_encoding(catalog)
        hyper = TrainConfig(epochs=2, seed=5)
        a = train(tiny("transformer"), split, AttributeKind.GENDER, hyper, enc)
        b = train(tiny("transformer"), split, AttributeKind.GENDER, hyper, enc)
        for (na, pa), (nb, pb) in zip(a.network.state_dict().items(), b.network.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)
        assert a.training_log == b.training_log

    def test_keeps_best_validation_epoch(self, split, catalog):
        m = train(tiny("linear"), split, AttributeKind.LOCATION, TrainConfig(epochs=6, seed=1), build_encoding(catalog))
        losses = [r["val_loss"] for r in m.training_log]
        assert len(losses) == 6
        assert m.best_epoch == int(np.argmin(losses)) + 1
        from superapp_privacy.model import _mean_loss
        from superapp_privacy.domain import labels_array
        from superapp_privacy.encoder import mask_modality

        x = mask_modality(encode_batch(split.validation, m.encoding), "fused")
        loss, _ = _mean_loss(m.network, x, labels_array(split.validation, AttributeKind.LOCATION))
        assert loss == pytest.approx(min(losses), rel=1e-5)

    def test_patience_stops_early(self, split, catalog):
        m = train(tiny("linear"), split, AttributeKind.GENDER, TrainConfig(epochs=50, patience=2, seed=1), build_encoding(catalog))
        assert len(m.training_log) < 50 or m.best_epoch == 50

    def test_train_loss_mostly_decreasing(self, split, catalog):
        arch = replace(tiny("linear"), dropout=0.0, id_dropout=0.0)
        m = train(arch, split, AttributeKind.GENDER, TrainConfig(epochs=8, seed=2, select="last"), build_encoding(catalog))
        losses = [r["train_loss"] for r in m.training_log]
        for prev, cur in zip(losses, losses[1:]):
            assert cur <= prev * 1.05

    def test_divergence(self, split, catalog):
        with pytest.raises(DivergenceError):
            train(tiny("linear"), split, AttributeKind.GENDER, TrainConfig(epochs=3, lr=float("inf")), build_encoding(catalog))

    def test_needs_data(self, split, catalog):
        with pytest.raises(ValueError):
            train(tiny("linear"), DatasetSplit((), split.validation, ()), AttributeKind.GENDER, TrainConfig(), build_encoding(catalog))


class TestCheckpoint:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_bit_exact(self, family, split, catalog, tmp_path, encoded):
        m = train(tiny(family), split, AttributeKind.AGE, TrainConfig(epochs=1), build_encoding(catalog))
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, p, meta={"note": "x"})
        back = load_checkpoint(p)
        for (na, pa), (nb, pb) in zip(m.network.state_dict().items(), back.network.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)
        assert np.array_equal(m.logits(encoded), back.logits(encoded))
        assert back.encoding == m.encoding and back.training_log == m.training_log
        save_checkpoint(back, tmp_path / "again.ckpt", meta={"note": "x"})
        assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestPaperScaleExamples:
    def test_no_signal_near_prior(self, catalog, personas):
        pop = PopulationSpec(num_users=400, signal_strength=0.0, seed=31)
        samples = generate_population(pop, personas, catalog)
        split = DatasetSplit(tuple(samples[:1000]), tuple(samples[1000:]), ())
        kind = AttributeKind.VEHICLE
        m = train(tiny("transformer"), split, kind, TrainConfig(epochs=5, seed=0), build_encoding(catalog))
        best = m.training_log[m.best_epoch - 1]
        assert abs(best["val_accuracy"] - max(pop.marginal(kind))) <= 0.05

    def test_default_transformer_gender(self, catalog, personas):
        pop = PopulationSpec(num_users=400, seed=32)
        samples = generate_population(pop, personas, catalog)
        split = DatasetSplit(tuple(samples[:1000]), tuple(samples[1000:]), ())
        kind = AttributeKind.GENDER
        oracle = BayesOracle(pop, personas, catalog)
        grids = np.stack([s.sample.fused for s in split.validation])
        truth = np.array([s.label(kind) for s in split.validation])
        assert (oracle.posterior(grids, kind).argmax(axis=1) == truth).mean() > 0.8  # attainable on this split
        m = train(ArchitectureSpec(), split, kind, TrainConfig(epochs=15, patience=3, seed=0), build_encoding(catalog))
        assert m.training_log[m.best_epoch - 1]["val_accuracy"] > 0.8
