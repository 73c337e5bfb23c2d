import unittest
from dataclasses import replace

import numpy as np
import pytest

from src.Errors import (DegenerateEncodingWarning, KTooLarge, MissingNegatives, NonFiniteLoss,
                        ShapeCompositionError, ShapeMismatch, UntrainedModel)
from src.Losses import LossConfig
from src.Models import (ArchitectureConfig, LayerSpec, ModelTrainer, NetworkSpec, Procedure, Role,
                        TrainConfig, build_architecture, build_network, initialize_model,
                        reconstruction_loss, synthesize, temporal_encode, temporal_head_spec,
                        topk_combination, topk_weights, train)
from src.Pairing import PairedInstance
from src.SignalPipeline import EEGSpectrogram, FMRIVolumeSeries
from src.TensorCore import Tensor

EEG_SHAPE = (2, 4, 3)
FMRI_SHAPE = (3, 2, 2, 1)


def make_pairs(count=6, seed=0, negatives=0):
    rng = np.random.default_rng(seed)
    positives = []
    for i in range(count):
        eeg = np.abs(rng.standard_normal(EEG_SHAPE))
        fmri = 1.0 + 0.1 * rng.standard_normal(FMRI_SHAPE)
        individual = f"sub-{i % 2}"
        positives.append(PairedInstance(eeg, fmri, 1, individual, individual, 5.4 * i, 5.4 * i + 5.4))
    pairs = list(positives)
    for i in range(negatives):
        a, b = positives[i % count], positives[(i + 1) % count]
        pairs.append(PairedInstance(a.eeg, b.fmri, 0, a.eeg_individual, b.fmri_individual, a.t_eeg, b.t_fmri))
    return pairs


def tiny_arch(**overrides):
    values = dict(latent_features=4, dropout=0.0)
    values.update(overrides)
    return ArchitectureConfig(**values)


class TestNetworkConstruction(unittest.TestCase):
    def test_dense_parameter_count(self):
        """Test one dense layer 4 -> 2 has 10 parameters"""
        spec = NetworkSpec(Role.DISCRIMINATOR, (4,), [LayerSpec("Dense", units=2)])
        self.assertEqual(build_network(spec, 0).parameter_count, 10)

    def test_same_seed_same_parameters(self):
        """Test initialization is deterministic per seed"""
        spec = build_architecture(EEG_SHAPE, FMRI_SHAPE, tiny_arch(), Procedure.LCOMB)["fmri_encoder"]
        first, second = build_network(spec, 7).arrays(), build_network(spec, 7).arrays()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
        other = build_network(spec, 8).arrays()
        self.assertFalse(all(np.array_equal(a, b) for a, b in zip(first, other)))

    def test_incompatible_shapes(self):
        """Test layers that cannot compose"""
        with self.assertRaises(ShapeCompositionError):
            NetworkSpec(Role.DECODER, (3, 4), [LayerSpec("Dense", units=4), LayerSpec("Reshape", target=(5,))])
        with self.assertRaises(ShapeCompositionError):
            NetworkSpec(Role.FMRI_ENCODER, (1, 2), [LayerSpec("Conv", units=1, kernel=(3,))])

    def test_spec_dict_round_trip(self):
        """Test a spec rebuilt from its dict has the same shapes"""
        spec = build_architecture(EEG_SHAPE, FMRI_SHAPE, tiny_arch(depth=2), Procedure.AE)["decoder"]
        self.assertEqual(NetworkSpec.from_dict(spec.to_dict()).shapes, spec.shapes)

    def test_dropout_between_trainable_layers(self):
        """Test dropout follows every trainable layer except the last"""
        spec = NetworkSpec(Role.DISCRIMINATOR, (4,), [LayerSpec("Dense", units=3), LayerSpec("Dense", units=1)])
        kinds = [step.kind for step in build_network(spec, 0).steps]
        self.assertEqual(kinds, ["Dense", "Dropout", "Dense"])


class TestArchitecture(unittest.TestCase):
    def test_component_shapes(self):
        """Test each component maps windows to the expected shapes"""
        for depth in (1, 2, 3):
            arch = tiny_arch(depth=depth)
            specs = build_architecture(EEG_SHAPE, FMRI_SHAPE, arch, Procedure.LCOMB)
            self.assertEqual(specs["eeg_encoder"].output_shape, (3, 4))
            self.assertEqual(specs["fmri_encoder"].output_shape, (3, 4))
            self.assertEqual(specs["decoder"].output_shape, FMRI_SHAPE)
            self.assertEqual(specs["eeg_encoder"].depth, depth + 1)

    def test_components_per_procedure(self):
        """Test which networks each procedure builds"""
        arch = tiny_arch()
        self.assertEqual(set(build_architecture(EEG_SHAPE, FMRI_SHAPE, arch, Procedure.AE)),
                         {"eeg_encoder", "decoder"})
        self.assertIn("discriminator", build_architecture(EEG_SHAPE, FMRI_SHAPE, arch, Procedure.WGAN))
        with_heads = build_architecture(EEG_SHAPE, FMRI_SHAPE, arch, Procedure.TOPK, temporal_encoding=True)
        self.assertTrue({"fmri_encoder", "eeg_head", "fmri_head"} <= set(with_heads))

    def test_mismatched_steps(self):
        """Test EEG and fMRI windows of different lengths"""
        with self.assertRaises(ShapeCompositionError):
            build_architecture((2, 4, 5), FMRI_SHAPE, tiny_arch(), Procedure.AE)

    def test_non_monotone_widths(self):
        """Test explicit widths must move monotonically"""
        with self.assertRaises(ShapeCompositionError):
            build_architecture(EEG_SHAPE, FMRI_SHAPE, tiny_arch(depth=2, fmri_widths=[4, 2]), Procedure.LCOMB)

    def test_shared_seeds_across_procedures(self):
        """Test one seed gives the same encoder for AE and LCOMB"""
        ae = initialize_model(TrainConfig(procedure=Procedure.AE, rng_seed=3), tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        lcomb = initialize_model(TrainConfig(procedure=Procedure.LCOMB, rng_seed=3), tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        for a, b in zip(ae.eeg_encoder.arrays(), lcomb.eeg_encoder.arrays()):
            np.testing.assert_array_equal(a, b)


class TestTemporalHead(unittest.TestCase):
    def test_zero_parameters(self):
        """Test a zeroed head gives an all-zero encoding"""
        head = build_network(temporal_head_spec(14, tiny_arch()), 0)
        for t in head.parameters():
            t.assign(np.zeros(t.shape))
        out = temporal_encode(Tensor(np.random.default_rng(0).standard_normal((14, 4))), head)
        np.testing.assert_array_equal(out.data, np.zeros((14, 4)))

    def test_time_length_preserved(self):
        """Test a 14-step activation gives a 14-step encoding"""
        head = build_network(temporal_head_spec(14, tiny_arch(temporal_hidden=3)), 1)
        out = temporal_encode(Tensor(np.ones((2, 14, 4))), head)
        self.assertEqual(out.shape, (2, 14, 3))

    def test_heads_do_not_share_weights(self):
        """Test the EEG and fMRI heads get distinct parameters"""
        cfg = TrainConfig(procedure=Procedure.LCOMB, temporal_encoding=True)
        model = initialize_model(cfg, tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        self.assertFalse(np.array_equal(model.eeg_head.arrays()[0], model.fmri_head.arrays()[0]))

    def test_rejects_other_roles(self):
        """Test a non-temporal network as head"""
        model = initialize_model(TrainConfig(procedure=Procedure.AE), tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        with self.assertRaises(ValueError):
            temporal_encode(Tensor(np.ones(EEG_SHAPE)), model.eeg_encoder)


class TestTopK(unittest.TestCase):
    def test_query_in_set(self):
        """Test k=1 returns the matching encoding exactly"""
        rng = np.random.default_rng(0)
        encodings = [rng.standard_normal(6) for _ in range(4)]
        np.testing.assert_array_equal(topk_combination(encodings[2], encodings, 1), encodings[2])

    def test_identical_encodings(self):
        """Test k equal to the set size over identical encodings"""
        common = np.array([1.0, 3.0, -2.0, 0.5])
        out = topk_combination(common, [common.copy() for _ in range(3)], 3)
        np.testing.assert_array_almost_equal(out, common)

    def test_hand_set_correlations(self):
        """Test correlations 0.9, 0.5, -0.2 with k=2"""
        u = np.array([1.0, -1.0, 1.0, -1.0])
        v1 = np.array([1.0, 1.0, -1.0, -1.0])
        v2 = np.array([1.0, -1.0, -1.0, 1.0])
        candidates = [0.9 * u + np.sqrt(0.19) * v1,
                      0.5 * u + np.sqrt(0.75) * v2,
                      -0.2 * u + np.sqrt(0.96) * v1]
        indices, weights = topk_weights(u, candidates, 2)
        np.testing.assert_array_equal(indices, [0, 1])
        np.testing.assert_array_almost_equal(weights, [0.9 / 1.4, 0.5 / 1.4])
        np.testing.assert_array_almost_equal(topk_combination(u, candidates, 2),
                                             (0.9 * candidates[0] + 0.5 * candidates[1]) / 1.4)

    def test_k_too_large(self):
        """Test k beyond the training set"""
        with self.assertRaises(KTooLarge):
            topk_combination(np.arange(3.0), [np.arange(3.0)], 2)

    def test_zero_variance_excluded(self):
        """Test a flat encoding is skipped with a warning"""
        query = np.array([1.0, 2.0, 3.0])
        with self.assertWarns(DegenerateEncodingWarning):
            indices, _ = topk_weights(query, [np.ones(3), query * 2], 1)
        np.testing.assert_array_equal(indices, [1])

    def test_shape_mismatch(self):
        """Test encodings of a different size"""
        with self.assertRaises(ShapeMismatch):
            topk_weights(np.arange(3.0), [np.arange(4.0)], 1)

    def test_cancelling_correlations(self):
        """Test top-k correlations that sum to about zero give an even blend"""
        u = np.array([1.0, -1.0, 1.0, -1.0])
        v = np.array([1.0, 1.0, -1.0, -1.0])
        candidates = [0.3 * u + np.sqrt(0.91) * v, -0.3 * u + np.sqrt(0.91) * v]
        indices, weights = topk_weights(u, candidates, 2)
        np.testing.assert_array_equal(indices, [0, 1])
        np.testing.assert_array_almost_equal(weights, [0.5, 0.5])
        self.assertAlmostEqual(weights.sum(), 1.0)


class TestTrainingSteps(unittest.TestCase):
    def test_theta_zero_matches_autoencoder(self):
        """Test LCOMB at theta=0 follows AE gradients bit for bit over consecutive steps with dropout"""
        pairs = make_pairs(4, negatives=4)
        positives = [p for p in pairs if p.label == 1]
        negatives = [p for p in pairs if p.label == 0]
        arch = ArchitectureConfig(latent_features=4, dropout=0.2)
        ae_cfg = TrainConfig(procedure=Procedure.AE, rng_seed=5)
        lcomb_cfg = TrainConfig(procedure=Procedure.LCOMB, rng_seed=5, loss=LossConfig(theta=0.0))
        ae = ModelTrainer(initialize_model(ae_cfg, arch, EEG_SHAPE, FMRI_SHAPE), ae_cfg)
        lcomb = ModelTrainer(initialize_model(lcomb_cfg, arch, EEG_SHAPE, FMRI_SHAPE), lcomb_cfg)
        for step in range(6):
            batch = positives[step % 2:step % 2 + 3]
            ae.train_step(batch)
            lcomb.train_step(batch, negatives[:3])
            for name in ("eeg_encoder", "decoder"):
                ae_params = ae.model.networks[name].parameters()
                for a, b in zip(ae_params, lcomb.model.networks[name].parameters()):
                    np.testing.assert_array_equal(a.grad, b.grad, err_msg=f"{name} step {step}")
                    np.testing.assert_array_equal(a.data, b.data, err_msg=f"{name} step {step}")

    def test_lcomb_needs_negatives(self):
        """Test LCOMB without label-0 pairs"""
        with self.assertRaises(MissingNegatives):
            train(make_pairs(4), TrainConfig(procedure=Procedure.LCOMB, epochs=1), tiny_arch())

    def test_exploding_gradient_diagnostics(self):
        """Test an unclipped GAN at a huge learning rate stops with a NonFiniteLoss naming the step"""
        cfg = TrainConfig(procedure=Procedure.GAN, epochs=5, learning_rate=1e250, batch_size=2)
        self.assertIsNone(cfg.grad_clip)
        with self.assertRaises(NonFiniteLoss) as caught:
            train(make_pairs(4), cfg, tiny_arch(activation="linear"))
        diagnostics = caught.exception.diagnostics
        for key in ("procedure", "phase", "epoch", "batch", "component"):
            self.assertIn(key, diagnostics)
        self.assertEqual(diagnostics["procedure"], "GAN")
        self.assertIsNone(diagnostics["grad_clip"])

    def test_initial_validation_loss(self):
        """Test the validation loss is recorded before the first update"""
        validation = make_pairs(2, seed=1)
        cfg = TrainConfig(procedure=Procedure.AE, epochs=0)
        untrained = initialize_model(cfg, tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        model = train(make_pairs(4), cfg, tiny_arch(), validation=validation)
        self.assertEqual(model.initial_val_epv, reconstruction_loss(untrained, validation))
        self.assertEqual(model.history, [])
        model = train(make_pairs(4), replace(cfg, epochs=2), tiny_arch(), validation=validation)
        self.assertEqual(model.initial_val_epv, reconstruction_loss(untrained, validation))
        self.assertEqual(len(model.history), 2)

    def test_wgan_critic_value_increases(self):
        """Test the critic value rises monotonically with the generator frozen"""
        cfg = TrainConfig(procedure=Procedure.WGAN, learning_rate=1e-3, loss=LossConfig(clip_value=100.0))
        model = initialize_model(cfg, tiny_arch(activation="linear"), EEG_SHAPE, FMRI_SHAPE)
        trainer = ModelTrainer(model, cfg)
        positives = make_pairs(4)
        generator = [a.copy() for a in model.eeg_encoder.arrays() + model.decoder.arrays()]
        values = [trainer.discriminator_step(positives) for _ in range(11)]
        for before, after in zip(values, values[1:]):
            self.assertGreater(after, before)
        for a, b in zip(generator, model.eeg_encoder.arrays() + model.decoder.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_wgan_weight_clipping(self):
        """Test critic weights stay inside the clip range"""
        cfg = TrainConfig(procedure=Procedure.WGAN, learning_rate=1.0)
        model = initialize_model(cfg, tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        ModelTrainer(model, cfg).discriminator_step(make_pairs(4))
        for array in model.discriminator.arrays():
            self.assertLessEqual(np.abs(array).max(), 0.01 + 1e-15)


class TestTrainingInvariants(unittest.TestCase):
    def setUp(self):
        pairs = make_pairs(4, negatives=4)
        self.positives = [p for p in pairs if p.label == 1]
        self.negatives = [p for p in pairs if p.label == 0]

    def snapshot(self, model):
        return {name: [a.copy() for a in network.arrays()] for name, network in model.networks.items()}

    def test_zero_learning_rate(self):
        """Test one step at learning rate 0 leaves every parameter unchanged for every procedure"""
        for procedure in Procedure:
            with self.subTest(procedure=procedure.value):
                cfg = TrainConfig(procedure=procedure, learning_rate=0.0, k=2,
                                  loss=LossConfig(clip_value=100.0))
                model = initialize_model(cfg, tiny_arch(dropout=0.3), EEG_SHAPE, FMRI_SHAPE)
                before = self.snapshot(model)
                trainer = ModelTrainer(model, cfg)
                if procedure in (Procedure.GAN, Procedure.WGAN):
                    trainer.discriminator_step(self.positives)
                    trainer.generator_step(self.positives)
                else:
                    trainer.train_step(self.positives, self.negatives)
                after = self.snapshot(model)
                for name in before:
                    for a, b in zip(before[name], after[name]):
                        np.testing.assert_array_equal(a, b, err_msg=name)

    def test_l1_adds_weighted_abs_sum(self):
        """Test the L1 terms add lambda * sum|w| to the training loss at fixed parameters"""
        weight = 0.01
        plain_cfg = TrainConfig(procedure=Procedure.AE, l1_eeg=0.0, l1_fmri=0.0, l1_dec=0.0, rng_seed=2)
        l1_cfg = TrainConfig(procedure=Procedure.AE, l1_eeg=weight, l1_fmri=0.0, l1_dec=weight, rng_seed=2)
        plain_model = initialize_model(plain_cfg, tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        l1_model = initialize_model(l1_cfg, tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        plain = ModelTrainer(plain_model, plain_cfg).compute_gradients(self.positives)
        regularized = ModelTrainer(l1_model, l1_cfg).compute_gradients(self.positives)
        expected = weight * sum(np.abs(t.data).sum()
                                for t in l1_model.eeg_encoder.regularized() + l1_model.decoder.regularized())
        self.assertGreater(expected, 0.0)
        self.assertEqual(plain["l_r"], regularized["l_r"])
        self.assertAlmostEqual(regularized["loss"] - plain["loss"], expected, places=10)

    def test_generator_phase_leaves_critic(self):
        """Test a generator step changes the generator and nothing else"""
        for procedure in (Procedure.GAN, Procedure.WGAN):
            with self.subTest(procedure=procedure.value):
                cfg = TrainConfig(procedure=procedure, learning_rate=1e-2, loss=LossConfig(clip_value=1.0))
                model = initialize_model(cfg, tiny_arch(activation="linear"), EEG_SHAPE, FMRI_SHAPE)
                trainer = ModelTrainer(model, cfg)
                trainer.discriminator_step(self.positives)
                before = self.snapshot(model)
                trainer.generator_step(self.positives)
                after = self.snapshot(model)
                for a, b in zip(before["discriminator"], after["discriminator"]):
                    np.testing.assert_array_equal(a, b)
                generator = before["eeg_encoder"] + before["decoder"]
                updated = after["eeg_encoder"] + after["decoder"]
                self.assertTrue(any(not np.array_equal(a, b) for a, b in zip(generator, updated)))

    def test_temporal_heads_leave_reconstruction(self):
        """Test toggling temporal encoding changes the contrastive term but not L_r"""
        records = []
        for temporal in (False, True):
            cfg = TrainConfig(procedure=Procedure.LCOMB, rng_seed=4, temporal_encoding=temporal)
            model = initialize_model(cfg, tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
            records.append(ModelTrainer(model, cfg).compute_gradients(self.positives, self.negatives))
        self.assertEqual(records[0]["l_r"], records[1]["l_r"])
        self.assertNotEqual(records[0]["l_c"], records[1]["l_c"])


@pytest.mark.slow
class TestTrainingProcedures(unittest.TestCase):
    def test_autoencoder_learns(self):
        """Test AE training lowers the reconstruction loss"""
        pairs = make_pairs(6)
        cfg = TrainConfig(procedure=Procedure.AE, epochs=60, optimizer="adam", learning_rate=0.01)
        untrained = initialize_model(cfg, tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        model = train(pairs, cfg, tiny_arch())
        self.assertTrue(model.trained)
        self.assertEqual(len(model.history), 60)
        self.assertLess(reconstruction_loss(model, pairs), 0.8 * reconstruction_loss(untrained, pairs))

    def test_lcomb_with_temporal_heads(self):
        """Test LCOMB with temporal encoding and validation tracking"""
        pairs = make_pairs(6, negatives=6)
        cfg = TrainConfig(procedure=Procedure.LCOMB, epochs=3, temporal_encoding=True, batch_size=4)
        model = train(pairs, cfg, tiny_arch(), validation=make_pairs(2, seed=1))
        self.assertEqual([h["epoch"] for h in model.history], [0, 1, 2])
        for entry in model.history:
            self.assertTrue(np.isfinite([entry["loss"], entry["l_c"], entry["val_epv"]]).all())

    def test_gan_and_wgan(self):
        """Test both adversarial procedures run and produce windows"""
        pairs = make_pairs(4)
        for procedure in (Procedure.GAN, Procedure.WGAN):
            model = train(pairs, TrainConfig(procedure=procedure, epochs=2), tiny_arch())
            self.assertTrue(model.trained)
            self.assertIn("disc", model.history[-1])
            self.assertEqual(model.synthesize(pairs[0].eeg).shape, FMRI_SHAPE)

    def test_topk(self):
        """Test TOPK pretraining then decoder fitting"""
        pairs = make_pairs(6, negatives=6)
        cfg = TrainConfig(procedure=Procedure.TOPK, epochs=2, pretrain_epochs=2, k=2)
        model = train(pairs, cfg, tiny_arch())
        phases = [h["phase"] for h in model.history]
        self.assertEqual(phases, ["TOPK-encoders"] * 2 + ["TOPK-decoder"] * 2)

    def test_topk_k_too_large(self):
        """Test k larger than the other training windows"""
        cfg = TrainConfig(procedure=Procedure.TOPK, epochs=1, pretrain_epochs=1, k=6)
        with self.assertRaises(KTooLarge):
            train(make_pairs(6, negatives=6), cfg, tiny_arch())


class TestSynthesis(unittest.TestCase):
    def setUp(self):
        self.pairs = make_pairs(4)
        self.model = train(self.pairs, TrainConfig(procedure=Procedure.AE, epochs=1), ArchitectureConfig(latent_features=4))

    def test_deterministic(self):
        """Test inference ignores dropout and repeats exactly"""
        eeg = np.stack([p.eeg for p in self.pairs])
        np.testing.assert_array_equal(self.model.synthesize(eeg), self.model.synthesize(eeg))

    def test_window_types(self):
        """Test EEGSpectrogram in, FMRIVolumeSeries out"""
        out = synthesize(self.model, EEGSpectrogram(self.pairs[0].eeg, 1.8))
        self.assertIsInstance(out, FMRIVolumeSeries)
        self.assertEqual(out.volumes.shape, FMRI_SHAPE)
        self.assertTrue(out.log_scaled)

    def test_untrained(self):
        """Test synthesis before training"""
        model = initialize_model(TrainConfig(procedure=Procedure.AE), tiny_arch(), EEG_SHAPE, FMRI_SHAPE)
        with self.assertRaises(UntrainedModel):
            model.synthesize(self.pairs[0].eeg)

    def test_wrong_window_shape(self):
        """Test EEG windows of the wrong shape"""
        with self.assertRaises(ShapeMismatch):
            self.model.synthesize(np.ones((2, 4, 5)))


class TestTrainConfig(unittest.TestCase):
    def test_invalid_values(self):
        """Test rejected training settings"""
        with self.assertRaises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with self.assertRaises(ValueError):
            TrainConfig(batch_size=0)
        with self.assertRaises(ValueError):
            TrainConfig(encoder_reconstruction="fmri_only")

    def test_adversarial_mode_follows_procedure(self):
        """Test GAN uses Entropy and WGAN uses EarthMover"""
        self.assertEqual(TrainConfig(procedure="GAN").adversarial_mode.value, "Entropy")
        self.assertEqual(TrainConfig(procedure="WGAN").adversarial_mode.value, "EarthMover")
        self.assertEqual(TrainConfig(procedure="LCOMB").to_dict()["procedure"], "LCOMB")


if __name__ == '__main__':
    unittest.main()
