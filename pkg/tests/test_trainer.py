"""Loss composition, staged training invariants, fusion, and metrics."""

import numpy as np
import pytest

from u2s import autodiff as ad
from u2s import data, nets, trainer


def tiny_setup(seed=3, noise=0.6):
    spec = data.DatasetSpec(
        num_classes=4,
        confusable_pairs=((0, 1), (2, 3)),
        train_per_class=12,
        test_per_class=6,
        grid=(2, 8, 8),
        signal_scale=1.0,
        noise_scale=noise,
        patch=(4, 4),
        seed=seed,
    )
    train, test = data.generate_confusable_dataset(spec)
    mcfg = nets.ModelConfig(
        input_grid=(2, 1, 8, 8),
        embed_channels=8,
        bottom_layers=1,
        top_layers=1,
        feature_channels=8,
        num_classes=4,
        seed=seed,
    )
    tcfg = trainer.TrainConfig(
        batch_size=8,
        stage1_epochs=2,
        stage2_epochs=2,
        joint_epochs=2,
        stage_lr=0.1,
        joint_lr=0.02,
        plateau_patience=3,
        seed=seed,
    )
    return spec, train, test, mcfg, tcfg


class TestTotalLoss:
    def test_arithmetic(self):
        parts = [ad.Tensor(v, requires_grad=True) for v in (1.0, 2.0, 3.0, 0.4)]
        total = trainer.total_loss(*parts, reg_lambda=0.5)
        assert total.item() == pytest.approx(6.2, abs=1e-12)

    def test_zero_lambda_kills_regularizer_gradient(self):
        parts = [ad.Tensor(v, requires_grad=True) for v in (1.0, 2.0, 3.0, 0.4)]
        total = trainer.total_loss(*parts, reg_lambda=0.0)
        total.backward(params=parts)
        assert parts[3].grad.item() == 0.0
        assert parts[0].grad.item() == 1.0

    def test_gradient_of_sum_is_sum_of_gradients(self):
        rng = np.random.default_rng(0)
        w = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)

        def loss_fn():
            l1 = ad.tsum(ad.mul(w, w))
            l2 = ad.tsum(ad.relu(w))
            l3 = ad.tsum(ad.sigmoid(w))
            l4 = ad.tsum(w)
            return trainer.total_loss(l1, l2, l3, l4, reg_lambda=0.5)

        assert ad.check_gradients(loss_fn, [w], eps=1e-5) < 1e-6

    def test_non_finite_component_reported_by_name(self):
        parts = [ad.Tensor(1.0), ad.Tensor(np.nan), ad.Tensor(1.0), ad.Tensor(0.0)]
        with pytest.raises(trainer.NonFiniteLossError, match="L_C"):
            trainer.total_loss(*parts, reg_lambda=0.5)


class TestFusePredictions:
    def test_single_head_identity(self):
        p = np.random.default_rng(1).dirichlet(np.ones(4), size=5)
        np.testing.assert_array_equal(trainer.fuse_predictions([p]), p)

    def test_identical_heads_unchanged(self):
        p = np.random.default_rng(2).dirichlet(np.ones(4), size=5)
        np.testing.assert_allclose(trainer.fuse_predictions([p, p.copy()]), p, atol=1e-15)

    def test_three_heads_match_direct_mean(self):
        rng = np.random.default_rng(3)
        ps = [rng.dirichlet(np.ones(5), size=6) for _ in range(3)]
        fused = trainer.fuse_predictions(ps)
        np.testing.assert_allclose(fused, (ps[0] + ps[1] + ps[2]) / 3, atol=1e-12)
        np.testing.assert_allclose(fused.sum(axis=1), 1.0, atol=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            trainer.fuse_predictions([])

    def test_argmax_preserved_when_heads_agree(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            base = rng.dirichlet(np.ones(4), size=3)
            winners = base.argmax(axis=1)
            others = []
            for _ in range(2):
                q = rng.dirichlet(np.ones(4), size=3)
                # force agreement on the argmax
                for i, w in enumerate(winners):
                    j = q[i].argmax()
                    q[i, [w, j]] = q[i, [j, w]]
                others.append(q)
            fused = trainer.fuse_predictions([base] + others)
            assert (fused.argmax(axis=1) == winners).all()


class TestEvaluateMetrics:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 3])
        probs = np.eye(4)
        r = trainer.evaluate_metrics(probs, labels)
        assert r.top1 == 1.0 and r.top5 == 1.0
        np.testing.assert_array_equal(r.confusion, np.eye(4, dtype=int))
        np.testing.assert_array_equal(r.per_class_top1, np.ones(4))

    def test_uniform_probs_tie_break_to_class_zero(self):
        probs = np.full((6, 5), 0.2)
        labels = np.array([0, 1, 2, 3, 4, 0])
        r = trainer.evaluate_metrics(probs, labels)
        assert (r.confusion[:, 0].sum()) == 6  # every argmax is class 0
        assert r.top1 == pytest.approx(2 / 6)

    def test_matches_hand_scored_fixture(self):
        rng = np.random.default_rng(5)
        probs = rng.dirichlet(np.ones(4), size=20)
        labels = rng.integers(0, 4, size=20)
        r = trainer.evaluate_metrics(probs, labels)
        # hand scoring with explicit loops
        top1 = top5 = 0
        confusion = np.zeros((4, 4), dtype=int)
        k = min(5, 4)
        for i in range(20):
            order = sorted(range(4), key=lambda j: (-probs[i, j], j))
            if order[0] == labels[i]:
                top1 += 1
            if labels[i] in order[:k]:
                top5 += 1
            confusion[labels[i], order[0]] += 1
        assert r.top1 == pytest.approx(top1 / 20)
        assert r.top5 == pytest.approx(top5 / 20)
        np.testing.assert_array_equal(r.confusion, confusion)

    def test_confusion_rows_sum_to_class_counts(self):
        rng = np.random.default_rng(6)
        probs = rng.dirichlet(np.ones(3), size=30)
        labels = rng.integers(0, 3, size=30)
        r = trainer.evaluate_metrics(probs, labels)
        for m in range(3):
            assert r.confusion[m].sum() == (labels == m).sum()

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            trainer.evaluate_metrics(np.full((2, 3), 1 / 3), np.array([0, 3]))


class TestTrainStage:
    def test_stage1_freezes_specific_branch(self):
        _, train, test, mcfg, tcfg = tiny_setup()
        model = nets.init_model(mcfg)
        before = {
            name: p.data.copy()
            for name, p in model.named_parameters().items()
            if name.startswith(("csn_top.", "csn_head.", "mask_head."))
        }
        trainer.train_stage(model, train, test, tcfg, trainer.STAGE_UNIVERSAL)
        params = model.named_parameters()
        for name, old in before.items():
            assert np.array_equal(params[name].data, old), name

    def test_stage2_freezes_universal_branch(self):
        _, train, test, mcfg, tcfg = tiny_setup()
        model = nets.init_model(mcfg)
        trainer.train_stage(model, train, test, tcfg, trainer.STAGE_UNIVERSAL)
        csm = trainer.compute_csm(model, train, tcfg)
        before = {
            name: p.data.copy()
            for name, p in model.named_parameters().items()
            if name.startswith(("bottom.", "un_top.", "un_head."))
        }
        trainer.train_stage(model, train, test, tcfg, trainer.STAGE_SPECIFIC, csm=csm)
        params = model.named_parameters()
        for name, old in before.items():
            assert np.array_equal(params[name].data, old), name
        # and the specific branch did move
        assert not np.array_equal(params["mask_head.weight"].data,
                                  nets.init_model(mcfg).mask_head.weight.data)

    def test_stage2_requires_csm(self):
        _, train, test, mcfg, tcfg = tiny_setup()
        model = nets.init_model(mcfg)
        with pytest.raises(ValueError, match="CSM"):
            trainer.train_stage(model, train, test, tcfg, trainer.STAGE_SPECIFIC)

    def test_unknown_stage(self):
        _, train, test, mcfg, tcfg = tiny_setup()
        model = nets.init_model(mcfg)
        with pytest.raises(ValueError, match="unknown stage"):
            trainer.train_stage(model, train, test, tcfg, "warmup")

    def test_history_records_all_components(self):
        _, train, test, mcfg, tcfg = tiny_setup()
        result = trainer.run_pipeline(mcfg, tcfg, train, test)
        stages = [h["stage"] for h in result.history]
        assert stages == (
            [trainer.STAGE_UNIVERSAL] * 2 + [trainer.STAGE_SPECIFIC] * 2 + [trainer.STAGE_JOINT] * 2
        )
        for h in result.history:
            for key in ("epoch", "lr", "train_top1", "val_top1", "val_top5", "L_U"):
                assert key in h
            if h["stage"] == trainer.STAGE_UNIVERSAL:
                assert h["L_C"] is None and h["L_M"] is None and h["w_regular"] is None
            else:
                assert h["L_C"] is not None and h["w_regular"] is not None

    def test_determinism_bit_exact(self):
        _, train, test, mcfg, tcfg = tiny_setup()
        r1 = trainer.run_pipeline(mcfg, tcfg, train, test)
        r2 = trainer.run_pipeline(mcfg, tcfg, train, test)
        p1, p2 = r1.model.named_parameters(), r2.model.named_parameters()
        for name in p1:
            assert np.array_equal(p1[name].data, p2[name].data), name
        assert r1.history == r2.history
        assert np.array_equal(r1.csm.S, r2.csm.S)

    def test_stage1_reaches_95_percent_on_separable_set(self):
        # fully separable: no confusable pairs, clear global patterns
        spec = data.DatasetSpec(
            num_classes=4,
            confusable_pairs=(),
            train_per_class=25,
            test_per_class=10,
            grid=(2, 8, 8),
            signal_scale=1.0,
            noise_scale=0.3,
            patch=(2, 2),
            seed=1,
        )
        train, test = data.generate_confusable_dataset(spec)
        mcfg = nets.ModelConfig(
            input_grid=(2, 1, 8, 8),
            embed_channels=12,
            bottom_layers=1,
            top_layers=1,
            feature_channels=12,
            num_classes=4,
            seed=2,
        )
        tcfg = trainer.TrainConfig(
            batch_size=20,
            stage1_epochs=20,
            stage2_epochs=1,
            joint_epochs=1,
            stage_lr=0.2,
            joint_lr=0.02,
            plateau_patience=5,
            seed=2,
        )
        model = nets.init_model(mcfg)
        history = trainer.train_stage(model, train, test, tcfg, trainer.STAGE_UNIVERSAL)
        assert history[-1]["train_top1"] >= 0.95

    def test_plateau_decays_learning_rate(self):
        # a constant dataset cannot improve, so the decay must fire
        spec, train, test, mcfg, tcfg = tiny_setup(noise=0.0)
        flat = [data.Sample(frames=np.zeros_like(s.frames), label=s.label) for s in train]
        flat_test = [data.Sample(frames=np.zeros_like(s.frames), label=s.label) for s in test]
        cfg = trainer.TrainConfig(**{**tcfg.__dict__, "stage1_epochs": 6, "plateau_patience": 2})
        model = nets.init_model(mcfg)
        history = trainer.train_stage(model, flat, flat_test, cfg, trainer.STAGE_UNIVERSAL)
        assert history[-1]["lr"] < cfg.stage_lr


class TestComputeCsm:
    def test_shapes_and_invariants(self):
        _, train, test, mcfg, tcfg = tiny_setup()
        model = nets.init_model(mcfg)
        trainer.train_stage(model, train, test, tcfg, trainer.STAGE_UNIVERSAL)
        csm = trainer.compute_csm(model, train, tcfg)
        csm.validate()
        assert csm.num_classes == 4

    def test_regularizer_lowers_selected_similarity_paired_seeds(self):
        # trainer invariant: with lambda > 0 the mean selected weight
        # similarity after stage 2 is <= the lambda = 0 run's value
        from u2s.masknet import mean_selected_weight_similarity

        _, train, test, mcfg, tcfg = tiny_setup(noise=0.4)
        base = trainer.TrainConfig(**{**tcfg.__dict__, "stage2_epochs": 6})
        results = {}
        for lam in (0.5, 0.0):
            cfg = trainer.TrainConfig(**{**base.__dict__, "reg_lambda": lam})
            model = nets.init_model(mcfg)
            trainer.train_stage(model, train, test, cfg, trainer.STAGE_UNIVERSAL)
            csm = trainer.compute_csm(model, train, cfg)
            trainer.train_stage(model, train, test, cfg, trainer.STAGE_SPECIFIC, csm=csm)
            results[lam] = mean_selected_weight_similarity(
                model.mask_head.weight.data, csm, cfg.weight_similarity
            )
        assert results[0.5] <= results[0.0]
