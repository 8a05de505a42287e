import numpy as np
import pytest

from meshmotion import autodiff as ad
from meshmotion import losses
from meshmotion.nets import EncoderConfig, DiscriminatorSet
from meshmotion.optim import Adam


class ConstDisc:
    """Stand-in critic set emitting a fixed score from every head."""

    def __init__(self, value, n_scores=25):
        self.value = value
        self.n_scores = n_scores

    def __call__(self, theta_pose, beta):
        m = ad.as_tensor(theta_pose).shape[0]
        return ad.constant(np.full((m, self.n_scores), self.value))


def kp(points, vis=None):
    points = np.asarray(points, dtype=np.float64)
    if vis is None:
        vis = np.ones(len(points), dtype=bool)
    return losses.Keypoints2D(points=points, vis=np.asarray(vis, dtype=bool))


# ---------------------------------------------------------------------------
# loss_2d
# ---------------------------------------------------------------------------


def test_loss_2d_zero_at_match():
    pts = np.random.default_rng(0).standard_normal((5, 2))
    val, n_vis = losses.loss_2d(ad.constant(pts), kp(pts))
    assert val.item() == 0.0
    assert n_vis == 5


def test_loss_2d_single_point_arithmetic():
    pred = np.array([[3.0, 4.0]])
    val, _ = losses.loss_2d(ad.constant(pred), kp([[0.0, 0.0]]))
    assert val.item() == pytest.approx(25.0, abs=1e-12)


def test_loss_2d_mean_over_visible():
    pred = np.array([[3.0, 4.0], [0.0, 0.0]])
    val, _ = losses.loss_2d(ad.constant(pred), kp([[0.0, 0.0], [0.0, 0.0]]))
    assert val.item() == pytest.approx(12.5, abs=1e-12)


def test_loss_2d_invisible_point_is_ignored():
    gt = kp([[0.0, 0.0], [1.0, 1.0]], vis=[True, False])
    a = losses.loss_2d(ad.constant([[0.5, 0.0], [9.0, 9.0]]), gt)[0].item()
    b = losses.loss_2d(ad.constant([[0.5, 0.0], [-431.0, 17.0]]), gt)[0].item()
    assert a == b


def test_loss_2d_no_visible_returns_zero_flagged():
    gt = kp([[0.0, 0.0]], vis=[False])
    val, n_vis = losses.loss_2d(ad.constant([[5.0, 5.0]]), gt)
    assert val.item() == 0.0
    assert n_vis == 0


# ---------------------------------------------------------------------------
# loss_3d
# ---------------------------------------------------------------------------


def test_loss_3d_zero_at_match():
    rng = np.random.default_rng(1)
    full = rng.standard_normal(85)
    assert losses.loss_3d(ad.constant(full), full).item() == 0.0


def test_loss_3d_unit_beta_offset_beta_mask():
    gt = np.zeros(85)
    pred = gt.copy()
    pred[0] += 1.0
    val = losses.loss_3d(ad.constant(pred), gt, parts=("beta",))
    assert val.item() == pytest.approx(0.1, abs=1e-12)


def test_loss_3d_masked_components_ignored():
    rng = np.random.default_rng(2)
    gt = rng.standard_normal(85)
    pred = gt.copy()
    pred[82:] += 100.0  # camera heavily perturbed
    val = losses.loss_3d(ad.constant(pred), gt, parts=("beta", "theta"))
    assert val.item() == 0.0


# ---------------------------------------------------------------------------
# adversarial prior
# ---------------------------------------------------------------------------


def test_adv_generator_zero_when_scores_are_one():
    theta = ad.constant(np.zeros((3, 72)))
    beta = ad.constant(np.zeros((3, 10)))
    assert losses.adv_prior_generator_loss(ConstDisc(1.0), theta, beta).item() == 0.0


def test_adv_generator_25_when_scores_are_zero():
    theta = ad.constant(np.zeros((2, 72)))
    beta = ad.constant(np.zeros((2, 10)))
    assert losses.adv_prior_generator_loss(ConstDisc(0.0), theta, beta).item() == pytest.approx(25.0)


def test_adv_generator_gradient_wrt_pose():
    cfg = EncoderConfig(feature_dim=16, gn_groups=4, gn_group_size=4, ief_hidden=8, disc_hidden=8)
    disc = DiscriminatorSet(cfg, np.random.default_rng(3))
    theta = ad.parameter(np.random.default_rng(4).normal(0, 0.4, (1, 72)), name="theta")
    beta = ad.constant(np.zeros((1, 10)))

    err = ad.finite_diff_check(lambda: losses.adv_prior_generator_loss(disc, theta, beta),
                               theta, max_coords=30, rng=np.random.default_rng(5))
    assert err < 1e-4


def test_adv_discriminator_perfect_split_is_zero():
    class SplitDisc:
        n_scores = 25

        def __call__(self, theta_pose, beta):
            m = ad.as_tensor(theta_pose).shape[0]
            val = 1.0 if float(ad.as_tensor(theta_pose).data[0, 0]) > 0 else 0.0
            return ad.constant(np.full((m, 25), val))

    real = np.ones((2, 72))
    fake = -np.ones((2, 72))
    b = np.zeros((2, 10))
    val = losses.adv_prior_discriminator_loss(SplitDisc(), real, b, fake, b)
    assert val.item() == 0.0


def test_adv_discriminator_constant_half_gives_half_per_critic():
    real = np.zeros((3, 72))
    fake = np.zeros((3, 72))
    b = np.zeros((3, 10))
    val = losses.adv_prior_discriminator_loss(ConstDisc(0.5), real, b, fake, b)
    assert val.item() == pytest.approx(25 * 0.5, abs=1e-12)


def test_discriminator_training_separates_toy_clusters():
    cfg = EncoderConfig(feature_dim=16, gn_groups=4, gn_group_size=4, ief_hidden=8, disc_hidden=16)
    disc = DiscriminatorSet(cfg, np.random.default_rng(6))
    opt = Adam(disc.params(), lr=5e-3)
    rng = np.random.default_rng(7)
    base_real = rng.normal(0, 0.3, 72)
    base_fake = base_real + rng.normal(0, 1.0, 72)
    beta_real = rng.normal(0, 0.2, 10)
    beta_fake = beta_real + 2.0

    final = None
    for step in range(2000):
        srng = np.random.default_rng(np.random.SeedSequence(entropy=8, spawn_key=(step,)))
        real = base_real + srng.normal(0, 0.05, (8, 72))
        fake = base_fake + srng.normal(0, 0.05, (8, 72))
        br = beta_real + srng.normal(0, 0.05, (8, 10))
        bf = beta_fake + srng.normal(0, 0.05, (8, 10))
        opt.zero_grad()
        loss = losses.adv_prior_discriminator_loss(disc, real, br, fake, bf)
        loss.backward()
        opt.step()
        final = loss.item()
        if final < 0.1:
            break
    assert final < 0.1, f"discriminator loss stuck at {final}"


# ---------------------------------------------------------------------------
# shape priors and constancy
# ---------------------------------------------------------------------------


def test_beta_prior_values_and_gradient():
    assert losses.beta_prior(ad.constant(np.zeros(10))).item() == 0.0
    e1 = np.zeros(10)
    e1[0] = 1.0
    assert losses.beta_prior(ad.constant(e1)).item() == 1.0
    p = ad.parameter(np.random.default_rng(8).standard_normal(10))
    losses.beta_prior(p).backward()
    assert np.allclose(p.grad, 2 * p.data, atol=1e-14)


def test_const_shape_zero_for_constant_sequence():
    betas = np.tile(np.random.default_rng(9).standard_normal(10), (20, 1))
    val, has_signal = losses.const_shape_loss(ad.constant(betas))
    assert has_signal
    assert val.item() == 0.0


def test_const_shape_alternating_unit_steps():
    b = np.random.default_rng(10).standard_normal(10)
    e1 = np.zeros(10)
    e1[0] = 1.0
    seq = np.stack([b, b + e1, b])
    val, _ = losses.const_shape_loss(ad.constant(seq))
    assert val.item() == pytest.approx(2.0, abs=1e-12)


def test_const_shape_short_sequence_flagged():
    val, has_signal = losses.const_shape_loss(ad.constant(np.zeros((1, 10))))
    assert val.item() == 0.0 and not has_signal


def test_const_shape_translation_invariant():
    rng = np.random.default_rng(11)
    seq = rng.standard_normal((6, 10))
    shift = rng.standard_normal(10)
    a, _ = losses.const_shape_loss(ad.constant(seq))
    b, _ = losses.const_shape_loss(ad.constant(seq + shift))
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_const_shape_gradient_zero_at_equal_betas():
    betas = ad.parameter(np.tile(np.arange(10.0), (4, 1)), name="betas")
    val, _ = losses.const_shape_loss(betas)
    val.backward()
    assert np.all(betas.grad == 0.0)


def test_const_shape_gradient_at_generic_point():
    rng = np.random.default_rng(12)
    betas = ad.parameter(rng.standard_normal((5, 10)), name="betas")
    err = ad.finite_diff_check(lambda: losses.const_shape_loss(betas)[0], betas,
                               max_coords=20, rng=np.random.default_rng(0))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def test_frame_loss_zero_on_perfect_prediction():
    gt_full = np.zeros(85)
    gt_full[82] = 1.0  # unit camera scale
    pts = np.zeros((4, 2))
    w = losses.LossWeights(w_adv=1.0)
    total, terms = losses.frame_loss(ad.constant(gt_full), ad.constant(pts),
                                     kp(pts), ConstDisc(1.0), w, gt3d=gt_full)
    assert total.item() == 0.0
    assert terms["l2d"] == 0.0 and terms["l3d"] == 0.0 and terms["ladv"] == 0.0


def test_frame_loss_weight_zero_removes_gradient():
    rng = np.random.default_rng(13)
    pred = ad.parameter(rng.standard_normal(85), name="pred")
    pts = rng.standard_normal((4, 2))
    gt = kp(pts + 1.0)

    def grad_with(w_beta):
        pred.grad = None
        w = losses.LossWeights(w_2d=0.0, w_adv=0.0, w_beta=w_beta)
        x = ad.constant(pts)
        total, _ = losses.frame_loss(pred, x, gt, None, w)
        total.backward()
        return np.zeros(85) if pred.grad is None else pred.grad.copy()

    g0 = grad_with(0.0)
    g1 = grad_with(1.0)
    assert np.all(g0[:10] == 0.0)
    assert np.any(g1[:10] != 0.0)


def test_frame_loss_full_composite_gradient(toy_model):
    from meshmotion import body, camera

    rng = np.random.default_rng(14)
    raw = ad.parameter(rng.normal(0, 0.2, 85), name="raw")
    gt_pts = rng.normal(0, 50, (toy_model.n_keypoints, 2))
    gt2d = kp(gt_pts)
    cfg = EncoderConfig(feature_dim=16, gn_groups=4, gn_group_size=4, disc_hidden=8)
    disc = DiscriminatorSet(cfg, np.random.default_rng(15))
    w = losses.LossWeights()

    def f():
        full = losses.raw_to_full(raw)
        x3d = body.keypoints_3d(toy_model, full[0:10], full[10:82])
        x2d = camera.project(x3d, full[82:83], full[83:85])
        total, _ = losses.frame_loss(full, x2d, gt2d, disc, w)
        return total

    err = ad.finite_diff_check(f, raw, max_coords=30, rng=np.random.default_rng(16))
    assert err < 1e-4


def test_temporal_objective_single_frame_reduces_to_frame_loss():
    term = ad.constant(3.25)
    assert losses.temporal_objective([term], [], None).item() == 3.25


def test_temporal_objective_hand_summed_five_frames():
    rng = np.random.default_rng(17)
    frames = [ad.constant(x) for x in rng.random(5)]
    deltas = [ad.constant(x) for x in rng.random(2)]
    const = ad.constant(0.5)
    got = losses.temporal_objective(frames, deltas, const).item()
    want = sum(t.item() for t in frames) + sum(t.item() for t in deltas) + 0.5
    assert got == pytest.approx(want, abs=1e-12)


def test_total_objective_composition():
    t, h = ad.constant(1.0), ad.constant(2.0)
    hf = [ad.constant(3.0)]
    hd = [ad.constant(4.0), ad.constant(5.0)]
    assert losses.total_objective(t, h, hf, hd).item() == pytest.approx(15.0)
    assert losses.total_objective(t, None, [], []).item() == pytest.approx(1.0)


def test_raw_to_full_exponentiates_scale():
    raw = np.zeros(85)
    raw[82] = np.log(2.5)
    full = losses.raw_to_full(ad.constant(raw))
    assert full.data[82] == pytest.approx(2.5, abs=1e-12)
    assert np.all(full.data[:82] == raw[:82])
