import numpy as np
import pytest

from tractmil import (
    DataError,
    GatedAttentionModel,
    LossConfig,
    ShapeError,
    SynthConfig,
    attach_fusion,
    backward,
    fit_income_stats,
    forward,
    fused_logit,
    generate,
    loss,
    predict_logit,
    stratified_split,
    train,
    TrainConfig,
)

from helpers import make_bag, make_model


def bags_with_incomes(incomes, seed=0):
    rng = np.random.default_rng(seed)
    return [
        make_bag(rng, 2, 3, label=i % 2, tract_id=f"{i:011d}", income=income)
        for i, income in enumerate(incomes)
    ]


class TestIncomeStats:
    def test_two_values(self):
        stats = fit_income_stats(bags_with_incomes([40000.0, 60000.0]))
        assert stats.mean == 50000.0
        assert stats.std == 10000.0  # population std

    def test_all_equal_degenerate(self):
        with pytest.raises(DataError, match="degenerate"):
            fit_income_stats(bags_with_incomes([52000.0, 52000.0, 52000.0]))

    def test_single_known_income_rejected(self):
        with pytest.raises(DataError):
            fit_income_stats(bags_with_incomes([52000.0, None, None]))

    def test_all_missing_rejected(self):
        with pytest.raises(DataError, match="fusion unavailable"):
            fit_income_stats(bags_with_incomes([None, None]))

    def test_zscores_standardized(self):
        rng = np.random.default_rng(1)
        incomes = list(rng.normal(55000, 9000, size=40))
        bags = bags_with_incomes(incomes)
        stats = fit_income_stats(bags)
        z = (np.array(incomes) - stats.mean) / stats.std
        assert abs(z.mean()) < 1e-9
        assert abs(z.var() - 1.0) < 1e-9


class TestFusedLogit:
    def fused_model(self, rng, w_inc=0.0):
        model = make_model(rng, m=4, l=3)
        attach_fusion(model, fit_income_stats(bags_with_incomes([40000.0, 60000.0])), w_inc=w_inc)
        return model

    def test_zero_weight_matches_image_only(self):
        rng = np.random.default_rng(2)
        model = self.fused_model(rng, w_inc=0.0)
        pooled = rng.normal(size=4)
        assert fused_logit(pooled, 43000.0, model) == predict_logit(pooled, model)

    def test_income_at_mean_is_noop(self):
        rng = np.random.default_rng(3)
        model = self.fused_model(rng, w_inc=1.7)
        pooled = rng.normal(size=4)
        assert fused_logit(pooled, 50000.0, model) == predict_logit(pooled, model)

    def test_one_std_above_mean(self):
        model = GatedAttentionModel.zeros(m=4, l=2)
        attach_fusion(model, fit_income_stats(bags_with_incomes([40000.0, 60000.0])), w_inc=1.0)
        assert fused_logit(np.zeros(4), 60000.0, model) == 1.0

    def test_missing_income_imputes_zero(self):
        rng = np.random.default_rng(4)
        model = self.fused_model(rng, w_inc=3.0)
        pooled = rng.normal(size=4)
        assert fused_logit(pooled, None, model) == predict_logit(pooled, model)

    def test_without_fusion_block_raises(self):
        rng = np.random.default_rng(5)
        model = make_model(rng, m=4, l=3)
        with pytest.raises(ShapeError):
            fused_logit(rng.normal(size=4), 50000.0, model)

    def test_forward_uses_fusion_term(self):
        rng = np.random.default_rng(6)
        bag = make_bag(rng, 3, 4, label=1, income=62000.0)
        model = self.fused_model(rng, w_inc=0.5)
        res = forward(bag, model)
        expected = predict_logit(res.pooled, model) + 0.5 * (62000.0 - 50000.0) / 10000.0
        assert abs(res.logit - expected) < 1e-12


class TestFusionGradient:
    def test_w_inc_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            m = int(rng.integers(2, 8))
            bag = make_bag(rng, int(rng.integers(1, 6)), m, label=int(rng.integers(0, 2)),
                           income=float(rng.normal(55000, 9000)))
            model = make_model(rng, m=m, l=int(rng.integers(2, 6)), scale=2.0)
            attach_fusion(
                model,
                fit_income_stats(bags_with_incomes(list(rng.normal(55000, 9000, size=10)))),
                w_inc=float(rng.normal()),
            )
            cfg = LossConfig(pos_weight=2.57, label_smoothing=0.1)
            _, grads = backward(bag, bag.label, model, cfg)
            step = 1e-5
            orig = model.w_inc
            model.w_inc = orig + step
            hi = loss(forward(bag, model).logit, bag.label, cfg)
            model.w_inc = orig - step
            lo = loss(forward(bag, model).logit, bag.label, cfg)
            model.w_inc = orig
            fd = (hi - lo) / (2 * step)
            assert abs(grads.dw_inc - fd) / max(1.0, abs(grads.dw_inc), abs(fd)) < 1e-5


class TestFusionTraining:
    def dataset(self):
        return generate(SynthConfig(
            n_tracts=120, k_min=3, k_max=6, m=8, positive_rate=0.3,
            witness_rate=0.5, separation=3.0, noise_std=0.6, n_cities=3, seed=11,
        ))

    def config(self, **overrides):
        defaults = dict(
            learning_rate=1e-3, weight_decay=1e-4, dropout_rate=0.2, batch_size=32,
            label_smoothing=0.1, max_epochs=6, patience=6, seed=3, l_dim=8,
        )
        defaults.update(overrides)
        return TrainConfig(**defaults)

    def test_frozen_fusion_reproduces_image_only_run_bitwise(self):
        data = self.dataset()
        split = stratified_split(data.bags, seed=2)
        image_only = train(data.bags, split, self.config())
        frozen = train(data.bags, split, self.config(use_income=True, freeze_income_weight=True))
        np.testing.assert_array_equal(image_only.model.V, frozen.model.V)
        np.testing.assert_array_equal(image_only.model.U, frozen.model.U)
        np.testing.assert_array_equal(image_only.model.w_attn, frozen.model.w_attn)
        np.testing.assert_array_equal(image_only.model.w_clf, frozen.model.w_clf)
        assert image_only.model.b == frozen.model.b
        assert frozen.model.w_inc == 0.0
        assert [r.__dict__ for r in image_only.history] == [r.__dict__ for r in frozen.history]

    def test_trained_fusion_model_round_trips_income(self):
        data = self.dataset()
        split = stratified_split(data.bags, seed=2)
        fused = train(data.bags, split, self.config(use_income=True))
        assert fused.model.has_fusion
        assert fused.model.income_std > 0
