import math

import numpy as np
import pytest

from freqsynth.errors import ArgumentError, DivergenceError, ShapeError
from freqsynth.frequency import GaussianSpec, decompose
from freqsynth.network import SynthesisModel
from freqsynth.synthetic import GeneratorSpec, generate_pair
from freqsynth.tensor import Tensor
from freqsynth.training import (CONFIG_KEYS, TrainConfig, build_and_train, loss_terms,
                                parse_config_text, prepare_pair, read_loss_curve, rotate_z,
                                sample_crop, split_pairs, total_loss, train, write_loss_curve)
from freqsynth.volume import Domain, Volume


def tiny_config(**kw):
    base = dict(epochs=2, crop=(8, 8, 8), channels=2, depth=1, refine_k=3, sigma=1.5, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pairs():
    return [generate_pair(GeneratorSpec((12, 12, 12), seed=s)) for s in range(2)]


class TestLoss:
    def test_perfect_prediction(self, rng):
        # dyadic values so y - y_h + y_h reproduces y exactly
        y = Tensor(rng.integers(-64, 64, size=(1, 4, 4, 4)) / 8.0)
        y_h = Tensor(rng.integers(-64, 64, size=(1, 4, 4, 4)) / 8.0)
        assert total_loss(y - y_h, y_h, y, y_h).item() == 0.0

    def test_zero_prediction(self, rng):
        y = rng.normal(size=(1, 4, 4, 4))
        y_h = rng.normal(size=(1, 4, 4, 4))
        z = Tensor(np.zeros_like(y))
        value = total_loss(z, z, Tensor(y), Tensor(y_h)).item()
        assert abs(value - (np.abs(y_h).mean() + np.abs(y).mean())) < 1e-12

    def test_homogeneity(self, rng):
        y = rng.normal(size=(1, 3, 3, 3))
        y_h = rng.normal(size=(1, 3, 3, 3))
        lo = rng.normal(size=(1, 3, 3, 3))
        hi = rng.normal(size=(1, 3, 3, 3))
        once = total_loss(Tensor(lo), Tensor(hi), Tensor(y), Tensor(y_h)).item()
        # doubling the deviation of each prediction from its target
        hi2 = y_h + 2 * (hi - y_h)
        lo2 = (y - hi2) + 2 * ((lo + hi) - y)
        twice = total_loss(Tensor(lo2), Tensor(hi2), Tensor(y), Tensor(y_h)).item()
        assert abs(twice - 2 * once) < 1e-12

    def test_terms_sum_and_nonnegative(self, rng):
        a, b, c, d = (Tensor(rng.normal(size=(1, 2, 2, 2))) for _ in range(4))
        high, overall = loss_terms(a, b, c, d)
        assert high.item() >= 0 and overall.item() >= 0
        assert total_loss(a, b, c, d).item() == high.item() + overall.item()

    def test_shape_mismatch(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 2, 2)))
        with pytest.raises(ShapeError):
            total_loss(a, a, a, Tensor(rng.normal(size=(1, 2, 2, 3))))


class TestRotate:
    def test_zero_angle_bitwise(self, rng):
        v = Volume(rng.normal(size=(3, 5, 5)).astype(np.float32))
        out = rotate_z(v, 0.0)
        assert out.data.tobytes() == v.data.tobytes() and out.data is not v.data

    @pytest.mark.parametrize("n", [5, 6])
    def test_ninety_degrees_is_permutation(self, rng, n):
        data = rng.normal(size=(2, n, n))
        out = rotate_z(data, 90.0)
        np.testing.assert_allclose(out, np.rot90(data, k=1, axes=(1, 2)), atol=1e-5)
        np.testing.assert_allclose(rotate_z(data, -90.0), np.rot90(data, k=-1, axes=(1, 2)),
                                   atol=1e-5)
        np.testing.assert_allclose(rotate_z(data, 180.0), np.rot90(data, k=2, axes=(1, 2)),
                                   atol=1e-5)

    def test_round_trip_loss_small(self):
        _, ct = generate_pair(GeneratorSpec((8, 24, 24), seed=1))
        back = rotate_z(rotate_z(ct, 10.0), -10.0).data
        span = float(ct.data.max() - ct.data.min())
        assert np.abs(back - ct.data).mean() < 0.02 * span

    def test_out_of_field_filled_with_minimum(self):
        data = np.ones((1, 9, 9))
        data[0, 0, 0] = -5.0
        out = rotate_z(data, 45.0)
        assert out[0, 0, 0] == -5.0

    def test_angle_range(self):
        with pytest.raises(ArgumentError):
            rotate_z(np.zeros((1, 3, 3)), 181.0)


class TestCrop:
    def test_full_size(self, rng):
        a = rng.normal(size=(4, 5, 6))
        s = sample_crop(a, a + 1, a + 2, (4, 5, 6), rng)
        assert s.origin == (0, 0, 0)
        np.testing.assert_array_equal(s.mr_crop[0], a)

    def test_same_coordinates_and_ground_truth_consistency(self, rng):
        _, ct = generate_pair(GeneratorSpec((12, 12, 12), seed=2))
        pair = decompose(ct, GaussianSpec(1.5))
        for _ in range(20):
            s = sample_crop(ct, ct, pair.high, (5, 6, 7), rng)
            sl = tuple(slice(o, o + n) for o, n in zip(s.origin, (5, 6, 7)))
            assert np.array_equal(s.ct_crop[0], ct.data[sl])
            assert np.array_equal(s.ct_crop[0] - s.ct_high_crop[0], pair.low.data[sl])

    def test_deterministic_origins(self):
        a = np.zeros((10, 10, 10))
        seq = [[sample_crop(a, a, a, 4, r).origin for _ in range(30)]
               for r in (np.random.default_rng(9), np.random.default_rng(9))]
        assert seq[0] == seq[1]

    def test_uniform_over_origins(self):
        # 2 x 2 x 1 valid origins
        a = np.zeros((3, 3, 2))
        r = np.random.default_rng(0)
        n = 10_000
        counts = {}
        for _ in range(n):
            o = sample_crop(a, a, a, (2, 2, 2), r).origin
            counts[o] = counts.get(o, 0) + 1
        assert len(counts) == 4
        sd = math.sqrt(n * 0.25 * 0.75)
        for c in counts.values():
            assert abs(c - n / 4) < 5 * sd

    def test_too_large(self, rng):
        a = np.zeros((4, 4, 4))
        with pytest.raises(ArgumentError):
            sample_crop(a, a, a, (5, 4, 4), rng)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.lr, c.beta1, c.beta2) == (200, 1e-3, 0.9, 0.999)
        assert c.crop == (16, 16, 16) and c.rotation_deg == 10.0
        assert c.adv_weight == 0.01 and not c.adversarial

    def test_parse_all_keys(self):
        text = """
        # desk run
        epochs = 5
        lr = 0.002
        beta1 = 0.8
        beta2 = 0.99
        crop = 8,8,16
        rotation_deg = 5
        sigma = 3
        seed = 11
        adversarial = true
        adv_weight = 0.05
        base_kind = fcnet
        channels = 4
        refine_k = 7
        """
        mapping = parse_config_text(text)
        assert set(mapping) == set(CONFIG_KEYS)
        c = TrainConfig.from_mapping(mapping)
        assert c.crop == (8, 8, 16) and c.adversarial is True and c.lr == 0.002
        assert c.model_config().base_kind == "FCNET" and c.model_config().refine_k == 7

    def test_unknown_key(self):
        with pytest.raises(ArgumentError, match="unknown"):
            parse_config_text("batch_size = 4")

    def test_bad_line(self):
        with pytest.raises(ArgumentError):
            parse_config_text("epochs 4")

    def test_invalid_values(self):
        with pytest.raises(ArgumentError):
            TrainConfig(rotation_deg=200)
        with pytest.raises(ArgumentError):
            TrainConfig(adversarial="maybe")
        with pytest.raises(ArgumentError):
            TrainConfig(adversarial=True, frequency=False)


class TestTrain:
    def test_zero_epochs_leaves_parameters(self, pairs):
        cfg = tiny_config(epochs=0)
        model = SynthesisModel(cfg.model_config(), seed=0)
        before = model.state_arrays()
        result = train(model, pairs, cfg)
        assert result.curve == []
        for name, arr in model.state_arrays().items():
            assert arr.tobytes() == before[name].tobytes()

    def test_deterministic(self, pairs):
        runs = [build_and_train(pairs, tiny_config()) for _ in range(2)]
        assert runs[0].curve == runs[1].curve
        for name, p in runs[0].model.params.items():
            assert p.data.tobytes() == runs[1].model.params[name].data.tobytes()

    def test_curve_records(self, pairs):
        curve = build_and_train(pairs, tiny_config(epochs=3)).curve
        assert [r.epoch for r in curve] == [0, 1, 2]
        for r in curve:
            assert abs(r.loss_total - (r.loss_high + r.loss_overall)) < 1e-6
            assert r.loss_adv == 0.0

    def test_baseline_and_adversarial_run(self, pairs):
        base = build_and_train(pairs, tiny_config(frequency=False))
        assert all(math.isnan(r.loss_high) for r in base.curve)
        assert "head.weight" in base.model.params
        adv = build_and_train(pairs, tiny_config(adversarial=True, disc_channels=2))
        assert adv.discriminator is not None
        assert all(math.isfinite(r.loss_adv) and r.loss_adv > 0 for r in adv.curve)

    def test_loss_decreases(self, pairs):
        cfg = tiny_config(epochs=25, channels=4, lr=3e-3)
        curve = build_and_train(pairs, cfg).curve
        assert np.mean([r.loss_total for r in curve[-5:]]) < np.mean([r.loss_total for r in curve[:5]])

    def test_nan_aborts_with_diagnostics(self, pairs):
        cfg = tiny_config()
        model = SynthesisModel(cfg.model_config(), seed=0)
        model.params["head_low.bias"].data[:] = np.nan
        with pytest.raises(DivergenceError) as info:
            train(model, pairs, cfg)
        err = info.value
        assert err.epoch == 0 and err.pair == 0 and "overall" in err.components
        assert "epoch 0" in str(err)

    def test_checkpoints(self, pairs, tmp_path):
        cfg = tiny_config(epochs=4, checkpoint_every=2)
        build_and_train(pairs, cfg, checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch00002.ckpt", "epoch00004.ckpt"]

    def test_crop_must_fit(self, pairs):
        with pytest.raises(ArgumentError):
            build_and_train(pairs, tiny_config(crop=(16, 8, 8)))

    def test_empty_dataset(self):
        cfg = tiny_config()
        with pytest.raises(ArgumentError):
            train(SynthesisModel(cfg.model_config()), [], cfg)


def test_prepare_pair_domains(pairs):
    p = prepare_pair(*pairs[0], sigma=2.0)
    assert p.mr.domain == Domain.MR_NORM and p.ct.domain == Domain.CT_NORM
    assert p.ct_high.domain == Domain.CT_HIGHFREQ


def test_loss_curve_csv_round_trip(tmp_path, pairs):
    curve = build_and_train(pairs, tiny_config(frequency=False)).curve
    write_loss_curve(curve, tmp_path / "loss.csv")
    text = (tmp_path / "loss.csv").read_text().splitlines()
    assert text[0] == "epoch,loss_total,loss_high,loss_overall,loss_adv"
    back = read_loss_curve(tmp_path / "loss.csv")
    for a, b in zip(curve, back):
        assert a.epoch == b.epoch and a.loss_total == b.loss_total
        assert math.isnan(b.loss_high)


def test_split_pairs():
    items = list(range(8))
    train_, test = split_pairs(items, 0.25, seed=1)
    assert len(test) == 2 and sorted(train_ + test) == items
    assert split_pairs(items, 0.25, seed=1) == (train_, test)
