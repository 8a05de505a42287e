"""Training objectives: reprojection, parameter supervision, adversarial and
shape priors, sequence-constancy, and the composite objectives.

Conventions:
  * the 85-D prediction vector is laid out [shape(10) | pose(72) | camera(3)]
    with the camera slot holding (scale, tx, ty) after ``raw_to_full``,
  * 2-D reprojection error is averaged over visible keypoints so its scale
    does not depend on the visibility pattern,
  * sequence objectives sum over frames, mirroring the written form; batch
    averaging happens in the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import BETA_SLICE, CAM_SLICE, POSE_SLICE, THETA_DIM


@dataclass
class Keypoints2D:
    """Image-space annotations: (k,2) coordinates plus per-point visibility."""

    points: np.ndarray
    vis: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.vis = np.asarray(self.vis, dtype=bool)
        if self.points.shape != (self.vis.shape[0], 2):
            raise ValueError(f"keypoints {self.points.shape} vs visibility {self.vis.shape}")
        if not np.all(np.isfinite(self.points[self.vis])):
            raise ValueError("non-finite coordinates on visible keypoints")

    @property
    def n_visible(self) -> int:
        return int(self.vis.sum())


@dataclass
class LossWeights:
    """Relative term weights. Declared configuration defaults, freely tunable."""

    w_2d: float = 60.0
    w_3d: float = 60.0
    w_adv: float = 1.0
    w_beta: float = 1e-3
    w_const: float = 1.0
    w_hal: float = 1.0
    w_delta: float = 1.0  # master switch for the shifted-frame losses

    def validate(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {val}")
        return self


def raw_to_full(raw):
    """Map raw regressor rows to prediction vectors: camera slot exp'd so scale > 0."""
    r = ad.as_tensor(raw)
    single = r.ndim == 1
    if single:
        r = ad.reshape(r, (1, THETA_DIM))
    full = ad.concat([r[:, 0:CAM_SLICE.start],
                      ad.exp(r[:, CAM_SLICE.start:CAM_SLICE.start + 1]),
                      r[:, CAM_SLICE.start + 1:]], axis=1)
    return ad.reshape(full, (THETA_DIM,)) if single else full


# ---------------------------------------------------------------------------
# per-frame terms (row-vector forms feed the trainer; scalar forms the tests)
# ---------------------------------------------------------------------------


def loss_2d_rows(pred_x, gt_points, vis):
    """Per-row mean squared reprojection error on visible keypoints.

    pred_x: (R,k,2) tensor; gt_points: (R,k,2) array; vis: (R,k) bools.
    Rows with no visible keypoints yield 0 (their weight is up to the caller).
    Returns ((R,) tensor, (R,) visible counts).
    """
    pred = ad.as_tensor(pred_x)
    r, k, _ = pred.shape
    v = np.asarray(vis, dtype=bool)
    n_vis = v.sum(axis=1)
    mask = np.repeat(v[:, :, None], 2, axis=2).astype(np.float64)
    gt = np.where(mask > 0, np.asarray(gt_points, dtype=np.float64), 0.0)
    diff = (pred * ad.constant(mask) - ad.constant(gt * mask))
    sq = ad.sum_(ad.reshape(diff * diff, (r, k * 2)), axis=1)
    denom = ad.constant(np.maximum(n_vis, 1).astype(np.float64))
    return ad.div(sq, denom), n_vis


def loss_2d(pred_x, gt: Keypoints2D):
    """Scalar form: mean squared error over visible keypoints of one frame."""
    per_row, n_vis = loss_2d_rows(ad.reshape(ad.as_tensor(pred_x), (1,) + tuple(ad.as_tensor(pred_x).shape)),
                                  gt.points[None], gt.vis[None])
    return ad.reshape(per_row, ()), int(n_vis[0])


def parts_mask(parts) -> np.ndarray:
    """0/1 vector over the 85 dims selecting supervised components."""
    mask = np.zeros(THETA_DIM)
    lookup = {"beta": BETA_SLICE, "theta": POSE_SLICE, "cam": CAM_SLICE}
    for p in parts:
        if p not in lookup:
            raise ValueError(f"unknown supervision part {p!r}; expected subset of {sorted(lookup)}")
        mask[lookup[p]] = 1.0
    return mask


def loss_3d_rows(pred_full, gt_full, parts=("beta", "theta")):
    """Per-row mean squared error over the supervised components.

    Pose is compared directly in axis-angle. Returns an (R,) tensor.
    """
    pred = ad.as_tensor(pred_full)
    r = pred.shape[0]
    mask = parts_mask(parts)
    n_sel = mask.sum()
    if n_sel == 0:
        return ad.constant(np.zeros(r))
    gt = np.asarray(gt_full, dtype=np.float64)
    diff = (pred - ad.constant(gt)) * ad.constant(np.tile(mask, (r, 1)))
    return ad.sum_(diff * diff, axis=1) * (1.0 / n_sel)


def loss_3d(pred_full, gt_full, parts=("beta", "theta")):
    p = ad.as_tensor(pred_full)
    per_row = loss_3d_rows(ad.reshape(p, (1, THETA_DIM)), np.asarray(gt_full)[None], parts)
    return ad.reshape(per_row, ())


def beta_prior(beta):
    """Squared norm of the shape coefficients (unit-Gaussian prior)."""
    b = ad.as_tensor(beta)
    if b.ndim == 1:
        return ad.sum_(b * b)
    return ad.sum_(b * b, axis=1)


def adv_prior_generator_loss(disc_set, theta_pose, beta):
    """Sum over critics of batch-mean (score - 1)^2 on predicted rows."""
    scores = disc_set(ad.as_tensor(theta_pose), ad.as_tensor(beta))
    per_disc = ad.mean_(ad.pow_const(scores - 1.0, 2.0), axis=0)
    return ad.sum_(per_disc)


def adv_prior_discriminator_loss(disc_set, real_pose, real_beta, fake_pose, fake_beta):
    """Least-squares critic objective: real scores to 1, fake scores to 0."""
    real_scores = disc_set(ad.as_tensor(real_pose), ad.as_tensor(real_beta))
    fake_scores = disc_set(ad.as_tensor(fake_pose), ad.as_tensor(fake_beta))
    real_term = ad.mean_(ad.pow_const(real_scores - 1.0, 2.0), axis=0)
    fake_term = ad.mean_(ad.pow_const(fake_scores, 2.0), axis=0)
    return ad.sum_(real_term + fake_term)


def const_shape_loss(betas):
    """Sum over consecutive frames of the unsquared shape-difference norm.

    Returns (scalar tensor, has_signal). Fewer than two frames means there is
    nothing to constrain; the derivative of the norm at zero difference is 0.
    """
    b = ad.as_tensor(betas)
    if b.ndim != 2:
        raise ad.ShapeError(f"const_shape_loss expects (T,10), got {tuple(b.shape)}")
    t = b.shape[0]
    if t < 2:
        return ad.constant(0.0), False
    diffs = b[1:, :] - b[0:t - 1, :]
    return ad.sum_(ad.l2_norm_rows(diffs)), True


def frame_loss(pred_full, pred_x, gt2d: Keypoints2D, disc_set, weights: LossWeights,
               gt3d=None, l3d_parts=("beta", "theta")):
    """Single-frame composite: reprojection + (optional) supervision + priors.

    Returns (total, breakdown dict of plain floats).
    """
    pred = ad.as_tensor(pred_full)
    l2, n_vis = loss_2d(pred_x, gt2d)
    terms = {"l2d": l2}
    total = weights.w_2d * l2
    if gt3d is not None:
        l3 = loss_3d(pred, gt3d, l3d_parts)
        total = total + weights.w_3d * l3
        terms["l3d"] = l3
    if disc_set is not None and weights.w_adv > 0:
        ladv = adv_prior_generator_loss(
            disc_set, ad.reshape(pred[POSE_SLICE], (1, POSE_SLICE.stop - POSE_SLICE.start)),
            ad.reshape(pred[BETA_SLICE], (1, BETA_SLICE.stop)))
        total = total + weights.w_adv * ladv
        terms["ladv"] = ladv
    lbeta = beta_prior(pred[BETA_SLICE])
    total = total + weights.w_beta * lbeta
    terms["lbeta"] = lbeta
    return total, {k: v.item() for k, v in terms.items()}


def temporal_objective(frame_losses, delta_losses, const_loss):
    """Sum of per-frame losses, shifted-frame losses, and the constancy term."""
    total = ad.constant(0.0)
    for term in list(frame_losses) + list(delta_losses):
        total = total + term
    if const_loss is not None:
        total = total + const_loss
    return total


def total_objective(temporal, hal, hal_frame_losses, hal_delta_losses):
    """Joint objective: temporal path + feature matching + hallucinated paths."""
    total = temporal
    if hal is not None:
        total = total + hal
    for term in list(hal_frame_losses) + list(hal_delta_losses):
        total = total + term
    return total
