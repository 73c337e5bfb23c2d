import unittest

import numpy as np

from src.Errors import DomainError, NegativeDistance, ShapeMismatch, ThetaOutOfRange
from src.Losses import (AdversarialMode, LossConfig, adversarial_losses, clip_grad_norm,
                        contrastive_loss, discriminator_loss, encoder_combined_loss, epv_loss,
                        generator_loss, l1_penalty, mean_abs_distance)
from src.TensorCore import Tensor, backward


class TestReconstructionLoss(unittest.TestCase):
    def test_identical(self):
        """Test zero residual"""
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
        self.assertEqual(epv_loss(x, x).item(), 0.0)

    def test_constant_difference(self):
        """Test one volume of 4 voxels with constant diff 2"""
        self.assertAlmostEqual(epv_loss(Tensor(np.zeros((1, 4))), Tensor(np.full((1, 4), 2.0))).item(), 1.0)

    def test_mean_over_volumes(self):
        """Test per-volume terms 1 and 3 average to 2"""
        pred = Tensor([[2.0, 2.0, 2.0, 2.0], [6.0, 6.0, 6.0, 6.0]])
        self.assertAlmostEqual(epv_loss(Tensor(np.zeros((2, 4))), pred).item(), 2.0)

    def test_window_voxel_axes(self):
        """Test [batch, T, X, Y, Z] windows with three voxel axes"""
        truth = np.zeros((2, 3, 2, 2, 1))
        self.assertAlmostEqual(epv_loss(Tensor(truth), Tensor(truth + 2.0), voxel_dims=3).item(), 1.0)

    def test_shape_mismatch(self):
        """Test differently shaped inputs"""
        with self.assertRaises(ShapeMismatch):
            epv_loss(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 3))))


class TestContrastiveLoss(unittest.TestCase):
    def test_coincident_positive(self):
        """Test y=1 at distance 0"""
        self.assertEqual(contrastive_loss(0.0, 1, 1.0).item(), 0.0)

    def test_margin_satisfied(self):
        """Test y=0 beyond the margin"""
        self.assertEqual(contrastive_loss(1.5, 0, 1.0).item(), 0.0)
        self.assertEqual(contrastive_loss(1.0, 0, 1.0).item(), 0.0)

    def test_negative_at_zero(self):
        """Test y=0, d=0, m=1 gives 1"""
        self.assertAlmostEqual(contrastive_loss(0.0, 0, 1.0).item(), 1.0)

    def test_batch_average(self):
        """Test a mixed batch averages per-pair terms"""
        loss = contrastive_loss(Tensor([0.5, 0.25]), np.array([1, 0]), 1.0)
        self.assertAlmostEqual(loss.item(), (0.25 + 0.5625) / 2)

    def test_negative_distance(self):
        """Test distances below zero"""
        with self.assertRaises(NegativeDistance):
            contrastive_loss(-0.1, 1, 1.0)

    def test_distance_is_mean_absolute(self):
        """Test D_W per batch element"""
        a = Tensor([[1.0, 2.0], [0.0, 0.0]])
        b = Tensor([[0.0, 0.0], [1.0, -3.0]])
        np.testing.assert_array_almost_equal(mean_abs_distance(a, b).data, [1.5, 2.0])


class TestCombinedLoss(unittest.TestCase):
    def test_endpoints(self):
        """Test theta=1 gives L_c and theta=0 gives L_r"""
        self.assertEqual(encoder_combined_loss(Tensor(4.0), Tensor(8.0), 1.0).item(), 4.0)
        self.assertEqual(encoder_combined_loss(Tensor(4.0), Tensor(8.0), 0.0).item(), 8.0)

    def test_quarter(self):
        """Test theta=0.25 with L_c=4, L_r=8"""
        self.assertAlmostEqual(encoder_combined_loss(Tensor(4.0), Tensor(8.0), 0.25).item(), 7.0)

    def test_theta_range(self):
        """Test theta outside [0, 1]"""
        with self.assertRaises(ThetaOutOfRange):
            encoder_combined_loss(Tensor(1.0), Tensor(1.0), 1.5)
        with self.assertRaises(ThetaOutOfRange):
            LossConfig(theta=-0.1)


class TestAdversarialLosses(unittest.TestCase):
    def test_entropy_at_half(self):
        """Test D(real) = D(fake) = 0.5"""
        d = Tensor([0.5, 0.5])
        self.assertAlmostEqual(-discriminator_loss(d, d, AdversarialMode.ENTROPY).item(), -1.3863, places=4)

    def test_earth_mover_separated(self):
        """Test D(real)=1, D(fake)=0 gives a value of 2"""
        value = -discriminator_loss(Tensor([1.0]), Tensor([0.0]), AdversarialMode.EARTH_MOVER).item()
        self.assertAlmostEqual(value, 2.0)

    def test_earth_mover_symmetric(self):
        """Test equal outputs give a value of 1 for any c"""
        for c in (-3.0, 0.2, 7.5):
            d = Tensor([c, c])
            self.assertAlmostEqual(-discriminator_loss(d, d, "EarthMover").item(), 1.0)

    def test_entropy_domain(self):
        """Test outputs outside (0, 1) in Entropy mode"""
        with self.assertRaises(DomainError):
            discriminator_loss(Tensor([1.0]), Tensor([0.5]), AdversarialMode.ENTROPY)
        with self.assertRaises(DomainError):
            generator_loss(Tensor([0.0]), AdversarialMode.ENTROPY)

    def test_pair(self):
        """Test the discriminator and generator objectives together"""
        d_loss, g_loss = adversarial_losses(Tensor([0.8]), Tensor([0.2]), AdversarialMode.ENTROPY)
        self.assertAlmostEqual(d_loss.item(), -(np.log(0.8) + np.log(0.8)))
        self.assertAlmostEqual(g_loss.item(), np.log(0.8))
        _, g_wgan = adversarial_losses(Tensor([0.8]), Tensor([0.2]), AdversarialMode.EARTH_MOVER)
        self.assertAlmostEqual(g_wgan.item(), -0.2)


class TestRegularization(unittest.TestCase):
    def test_l1_value_and_gradient(self):
        """Test lambda * sum|w| and its sign gradient"""
        w = Tensor([[1.0, -2.0], [0.5, 0.0]], requires_grad=True)
        penalty = l1_penalty([w], 0.1)
        self.assertAlmostEqual(penalty.item(), 0.35)
        backward(penalty)
        np.testing.assert_array_almost_equal(w.grad, [[0.1, -0.1], [0.1, 0.0]])

    def test_l1_zero_weight(self):
        """Test a zero weight gives a constant zero"""
        w = Tensor([1.0], requires_grad=True)
        penalty = l1_penalty([w], 0.0)
        self.assertEqual(penalty.item(), 0.0)
        self.assertFalse(penalty.requires_grad)

    def test_clip_grad_norm(self):
        """Test global-norm rescaling"""
        a, b = Tensor([0.0]), Tensor([0.0])
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        self.assertAlmostEqual(clip_grad_norm([a, b], 1.0), 5.0)
        np.testing.assert_array_almost_equal(np.concatenate([a.grad, b.grad]), [0.6, 0.8])
        clip_grad_norm([a, b], 10.0)
        np.testing.assert_array_almost_equal(np.concatenate([a.grad, b.grad]), [0.6, 0.8])


if __name__ == '__main__':
    unittest.main()
