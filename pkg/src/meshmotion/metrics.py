"""Evaluation metrics and the dataset-level evaluation protocol.

3-D errors are reported in millimeters (model space is meters), acceleration
error in mm/s^2, and 2-D accuracy as the fraction of visible keypoints
within alpha times the ground-truth bounding-box size. Frames flagged by the
visibility filter are skipped everywhere except the acceleration metric,
which needs unbroken triples and uses the full predicted trajectory.

Sequence aggregation pools frames across sequences using compensated
summation, so results do not depend on evaluation order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import body
from .autodiff import NumericalError
from .losses import raw_to_full

MM = 1000.0


# ---------------------------------------------------------------------------
# Core metric primitives
# ---------------------------------------------------------------------------


def mpjpe(pred_joints, gt_joints, root_index: int = 0) -> float:
    """Mean per-joint position error in mm after per-frame root centering."""
    p = np.asarray(pred_joints, dtype=np.float64)
    g = np.asarray(gt_joints, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 3:
        raise ValueError(f"mpjpe expects matching (T,k,3), got {p.shape} vs {g.shape}")
    pc = p - p[:, root_index:root_index + 1]
    gc = g - g[:, root_index:root_index + 1]
    return float(np.linalg.norm(pc - gc, axis=2).mean() * MM)


@dataclass
class ProcrustesResult:
    aligned: np.ndarray     # (k,3) transformed prediction
    rotation: np.ndarray    # (3,3), det +1
    scale: float
    translation: np.ndarray  # (3,)
    residual: float         # sum of squared distances after alignment
    degenerate: bool        # rank-deficient covariance: rotation not unique


def procrustes_align(pred, gt) -> ProcrustesResult:
    """Best similarity transform (scale, rotation, translation) of pred onto gt.

    Closed form via the covariance SVD with a reflection guard keeping
    det(R) = +1. Degenerate (rank < 2) point sets are flagged: the returned
    rotation is then one of several equally good choices.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    k = p.shape[0]
    if p.shape != (k, 3) or g.shape != (k, 3) or k < 3:
        raise ValueError(f"procrustes_align expects matching (k>=3,3), got {p.shape} vs {g.shape}")
    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    pc = p - mu_p
    gc = g - mu_g
    cov = gc.T @ pc / k
    u, s_vals, vt = np.linalg.svd(cov)
    sign_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign_fix[2, 2] = -1.0
    rot = u @ sign_fix @ vt
    var_p = float((pc ** 2).sum() / k)
    if var_p <= 0.0:
        raise ValueError("procrustes_align: prediction points are all identical")
    scale = float(np.trace(np.diag(s_vals) @ sign_fix) / var_p)
    trans = mu_g - scale * rot @ mu_p
    aligned = scale * p @ rot.T + trans
    residual = float(((aligned - g) ** 2).sum())
    degenerate = bool(s_vals[1] <= 1e-12 * max(s_vals[0], 1e-300))
    return ProcrustesResult(aligned=aligned, rotation=rot, scale=scale,
                            translation=trans, residual=residual, degenerate=degenerate)


def pa_mpjpe(pred_joints, gt_joints, root_index: int = 0) -> float:
    """MPJPE in mm after per-frame similarity alignment.

    The closed-form solve minimizes the squared error; the reported metric is
    the mean distance, for which the root-matching translation can (rarely,
    on badly wrong predictions) score better. Each frame keeps the better of
    the two candidate alignments under the reported metric, which guarantees
    pa_mpjpe <= mpjpe while coinciding with the standard alignment whenever
    predictions are sane.
    """
    p = np.asarray(pred_joints, dtype=np.float64)
    g = np.asarray(gt_joints, dtype=np.float64)
    errs = []
    for t in range(p.shape[0]):
        aligned = procrustes_align(p[t], g[t]).aligned
        err_pa = np.linalg.norm(aligned - g[t], axis=1).mean()
        rooted = p[t] - p[t, root_index] + g[t, root_index]
        err_root = np.linalg.norm(rooted - g[t], axis=1).mean()
        errs.append(min(err_pa, err_root))
    return float(np.mean(errs) * MM)


def pck(pred_2d, gt_2d, vis, alpha: float = 0.05, frame_mask=None):
    """Fraction of visible keypoints within alpha * max(bbox side) of truth.

    The bounding box is taken from the visible ground-truth keypoints of each
    frame. Returns (fraction, n_correct, n_total); frames with a degenerate
    box or fewer than two visible points contribute nothing.
    """
    p = np.asarray(pred_2d, dtype=np.float64)
    g = np.asarray(gt_2d, dtype=np.float64)
    v = np.asarray(vis, dtype=bool)
    n_correct = 0
    n_total = 0
    for t in range(p.shape[0]):
        if frame_mask is not None and not frame_mask[t]:
            continue
        vt = v[t]
        if vt.sum() < 2:
            continue
        box = g[t][vt]
        size = max(np.ptp(box[:, 0]), np.ptp(box[:, 1]))
        if size <= 0:
            continue
        dist = np.linalg.norm(p[t][vt] - g[t][vt], axis=1)
        n_correct += int((dist <= alpha * size).sum())
        n_total += int(vt.sum())
    frac = float(n_correct / n_total) if n_total else 0.0
    return frac, n_correct, n_total


def accel_error(pred_joints, gt_joints, fps: float) -> float:
    """Mean acceleration discrepancy in mm/s^2 via second finite differences.

    With ground truth: mean over interior frames and joints of the norm of
    the acceleration difference. Without: mean norm of the predicted
    acceleration alone.
    """
    p = np.asarray(pred_joints, dtype=np.float64)
    if p.shape[0] < 3:
        raise ValueError(f"acceleration undefined for T={p.shape[0]} < 3 frames")
    acc_p = (p[2:] - 2 * p[1:-1] + p[:-2]) * fps * fps
    if gt_joints is None:
        return float(np.linalg.norm(acc_p, axis=2).mean() * MM)
    g = np.asarray(gt_joints, dtype=np.float64)
    acc_g = (g[2:] - 2 * g[1:-1] + g[:-2]) * fps * fps
    return float(np.linalg.norm(acc_p - acc_g, axis=2).mean() * MM)


def mesh_errors(pred_full, gt_full, model: body.BodyModel, frame_mask=None):
    """(posed_mm, unposed_mm) mean vertex errors over a sequence.

    Posed meshes are compared after per-frame root (pelvis joint) centering.
    Unposed meshes are both rebuilt with the zero pose and compared directly,
    so the number reflects pure shape error.
    """
    p = np.asarray(pred_full, dtype=np.float64)
    g = np.asarray(gt_full, dtype=np.float64)
    t_len = p.shape[0]
    mask = np.ones(t_len, dtype=bool) if frame_mask is None else np.asarray(frame_mask, dtype=bool)
    if not mask.any():
        return float("nan"), float("nan")

    def verts_and_root(full, zero_pose):
        betas = full[:, :10]
        thetas = np.zeros_like(full[:, 10:82]) if zero_pose else full[:, 10:82]
        v = body.skin(model, ad.constant(betas), ad.constant(thetas)).data
        _, joints = body.forward_kinematics(model, ad.constant(betas), ad.constant(thetas))
        return v, joints.data[:, 0:1, :]

    vp, rp = verts_and_root(p, zero_pose=False)
    vg, rg = verts_and_root(g, zero_pose=False)
    posed = np.linalg.norm((vp - rp) - (vg - rg), axis=2)[mask].mean() * MM
    up, _ = verts_and_root(p, zero_pose=True)
    ug, _ = verts_and_root(g, zero_pose=True)
    unposed = np.linalg.norm(up - ug, axis=2)[mask].mean() * MM
    return float(posed), float(unposed)


# ---------------------------------------------------------------------------
# Model-level evaluation
# ---------------------------------------------------------------------------


def predict_sequence(model: body.BodyModel, nets_model, sample, mode: str = "temporal"):
    """Run the network stack over one sequence with dropout disabled.

    mode 'temporal' uses the context encoder; 'single-frame' uses the
    hallucinated context (or raw features when no hallucinator exists).
    Returns dict with full (T,85), joints3d (T,k,3), pred2d (T,k,2).
    """
    feats = ad.constant(sample.features)
    if mode == "temporal":
        phi = nets_model.temporal(feats)
    elif mode == "single-frame":
        phi = nets_model.hallucinator(feats) if nets_model.hallucinator is not None else feats
    else:
        raise ValueError(f"unknown prediction mode {mode!r}")
    full = raw_to_full(nets_model.regressor(phi)).data
    joints = body.keypoints_3d(model, ad.constant(full[:, :10]), ad.constant(full[:, 10:82])).data
    pred2d = full[:, 82:83, None] * joints[:, :, :2] + full[:, None, 83:85]
    return {"full": full, "joints3d": joints, "pred2d": pred2d}


def gt_joints_of(model, sample):
    if sample.theta_gt is None:
        return None
    return body.keypoints_3d(model, ad.constant(sample.theta_gt[:, :10]),
                             ad.constant(sample.theta_gt[:, 10:82])).data


@dataclass
class SequenceMetrics:
    seq_id: str
    n_frames_used: int
    pck: float
    mpjpe_mm: float | None
    pa_mpjpe_mm: float | None
    accel_err_mm_s2: float | None
    mesh_posed_mm: float | None
    mesh_unposed_mm: float | None


@dataclass
class DynamicsMetrics:
    """Past/current/future PA-MPJPE (mm) for the single-image dynamics task."""

    n_centers: int
    ours: tuple        # (past, current, future)
    constant: tuple
    nearest: tuple | None


@dataclass
class MetricReport:
    per_sequence: list
    aggregate: dict
    dynamics: DynamicsMetrics | None = None

    def write_csv(self, path):
        cols = [f.name for f in fields(SequenceMetrics)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.per_sequence:
                w.writerow(_fmt_row([getattr(row, c) for c in cols]))
            agg = ["ALL", self.aggregate["n_frames_used"], self.aggregate["pck"],
                   self.aggregate["mpjpe_mm"], self.aggregate["pa_mpjpe_mm"],
                   self.aggregate["accel_err_mm_s2"], self.aggregate["mesh_posed_mm"],
                   self.aggregate["mesh_unposed_mm"]]
            w.writerow(_fmt_row(agg))

    def write_dynamics_csv(self, path):
        if self.dynamics is None:
            raise ValueError("report carries no dynamics evaluation")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "past_pa_mpjpe_mm", "current_pa_mpjpe_mm", "future_pa_mpjpe_mm"])
            d = self.dynamics
            w.writerow(_fmt_row(["ours", *d.ours]))
            w.writerow(_fmt_row(["constant", *d.constant]))
            if d.nearest is not None:
                w.writerow(_fmt_row(["nearest_neighbor", *d.nearest]))

    def to_text(self):
        lines = ["sequence metrics (aggregate):"]
        for key, val in self.aggregate.items():
            lines.append(f"  {key} = {val:.6f}" if isinstance(val, float) else f"  {key} = {val}")
        if self.dynamics is not None:
            d = self.dynamics
            lines.append(f"dynamics over {d.n_centers} centers (past/current/future PA-MPJPE mm):")
            lines.append("  ours     = %.6f / %.6f / %.6f" % d.ours)
            lines.append("  constant = %.6f / %.6f / %.6f" % d.constant)
            if d.nearest is not None:
                lines.append("  nearest  = %.6f / %.6f / %.6f" % d.nearest)
        return "\n".join(lines)


def _fmt_row(vals):
    out = []
    for v in vals:
        if v is None:
            out.append("")
        elif isinstance(v, float):
            out.append(f"{v:.6f}")
        else:
            out.append(v)
    return out


class _Pool:
    """Compensated accumulation of (value, count) pairs."""

    def __init__(self):
        self.values = []
        self.counts = []

    def add(self, value, count):
        if value is not None and count > 0 and not math.isnan(value):
            self.values.append(value * count)
            self.counts.append(count)

    def mean(self):
        if not self.counts:
            return None
        return math.fsum(self.values) / math.fsum(self.counts)


def evaluate(model: body.BodyModel, nets_model, dataset, mode: str = "temporal",
             alpha: float = 0.05, train_dataset=None, gt_as_prediction: bool = False,
             dynamics: bool = False) -> MetricReport:
    """Full metric sweep over a dataset.

    ``gt_as_prediction`` short-circuits the networks and scores the ground
    truth against itself (pipeline self-check). ``dynamics`` adds the
    past/current/future protocol with the constant baseline and, when a
    training set is supplied, the nearest-neighbor baseline.
    """
    per_seq = []
    pools = {k: _Pool() for k in ("pck", "mpjpe_mm", "pa_mpjpe_mm", "accel_err_mm_s2",
                                  "mesh_posed_mm", "mesh_unposed_mm")}
    n_frames_total = 0
    for sample in dataset:
        excluded = sample.excluded if sample.excluded is not None else np.zeros(sample.n_frames, bool)
        mask = ~excluded
        if gt_as_prediction:
            if sample.theta_gt is None:
                raise ValueError(f"{sample.id}: gt_as_prediction needs theta_gt")
            full = sample.theta_gt.copy()
            joints = gt_joints_of(model, sample)
            pred2d = full[:, 82:83, None] * joints[:, :, :2] + full[:, None, 83:85]
        else:
            pred = predict_sequence(model, nets_model, sample, mode=mode)
            full, joints, pred2d = pred["full"], pred["joints3d"], pred["pred2d"]

        pck_frac, _, pck_total = pck(pred2d, sample.kp2d, sample.vis, alpha, frame_mask=mask)
        row = SequenceMetrics(seq_id=sample.id, n_frames_used=int(mask.sum()), pck=pck_frac,
                              mpjpe_mm=None, pa_mpjpe_mm=None, accel_err_mm_s2=None,
                              mesh_posed_mm=None, mesh_unposed_mm=None)
        gt_joints = gt_joints_of(model, sample)
        if gt_joints is not None and mask.any():
            row.mpjpe_mm = mpjpe(joints[mask], gt_joints[mask])
            row.pa_mpjpe_mm = pa_mpjpe(joints[mask], gt_joints[mask])
            if row.pa_mpjpe_mm > row.mpjpe_mm + 1e-9:
                raise NumericalError(
                    f"{sample.id}: PA-MPJPE {row.pa_mpjpe_mm} exceeds MPJPE {row.mpjpe_mm}")
            if sample.n_frames >= 3:
                row.accel_err_mm_s2 = accel_error(joints, gt_joints, sample.fps)
            row.mesh_posed_mm, row.mesh_unposed_mm = mesh_errors(
                full, sample.theta_gt, model, frame_mask=mask)
        per_seq.append(row)
        n_frames = int(mask.sum())
        n_frames_total += n_frames
        pools["pck"].add(pck_frac, pck_total)
        pools["mpjpe_mm"].add(row.mpjpe_mm, n_frames)
        pools["pa_mpjpe_mm"].add(row.pa_mpjpe_mm, n_frames)
        pools["accel_err_mm_s2"].add(row.accel_err_mm_s2, max(sample.n_frames - 2, 0))
        pools["mesh_posed_mm"].add(row.mesh_posed_mm, n_frames)
        pools["mesh_unposed_mm"].add(row.mesh_unposed_mm, n_frames)

    aggregate = {"n_frames_used": n_frames_total}
    for key, pool in pools.items():
        aggregate[key] = pool.mean()
    dyn = None
    if dynamics:
        dyn = evaluate_dynamics(model, nets_model, dataset, train_dataset=train_dataset)
    return MetricReport(per_sequence=per_seq, aggregate=aggregate, dynamics=dyn)


def _dynamics_centers(sample, step_mag, half_field):
    lo = max(half_field, step_mag)
    hi = sample.n_frames - 1 - max(half_field, step_mag)
    excluded = sample.excluded if sample.excluded is not None else np.zeros(sample.n_frames, bool)
    out = []
    for t in range(lo, hi + 1):
        if not (excluded[t] or excluded[t - step_mag] or excluded[t + step_mag]):
            out.append(t)
    return out


def evaluate_dynamics(model: body.BodyModel, nets_model, dataset, train_dataset=None):
    """Past/current/future PA-MPJPE from single-frame input.

    'ours': hallucinated context -> regressor for the current frame, delta
    predictors for the shifted frames (shape reused from the current frame).
    'constant': the current prediction reused for past and future. 'nearest':
    the training pose whose joints best align with the current ground truth,
    carried over with its own past/future (needs ``train_dataset``).
    """
    steps = sorted(nets_model.deltas)
    if not steps or nets_model.hallucinator is None:
        raise ValueError("dynamics evaluation needs delta predictors and a hallucinator")
    back = min(steps)
    fwd = max(steps)
    step_mag = max(abs(back), abs(fwd))
    hf = nets_model.cfg.half_field

    train_pool = None
    if train_dataset is not None:
        train_pool = []
        for s in train_dataset:
            if s.theta_gt is None:
                continue
            g = gt_joints_of(model, s)
            for t in _dynamics_centers(s, step_mag, hf):
                train_pool.append((g[t + back], g[t], g[t + fwd]))

    sums = {"ours": np.zeros(3), "constant": np.zeros(3), "nearest": np.zeros(3)}
    n_centers = 0
    for sample in dataset:
        if sample.theta_gt is None:
            continue
        centers = _dynamics_centers(sample, step_mag, hf)
        if not centers:
            continue
        g_joints = gt_joints_of(model, sample)
        phi = nets_model.hallucinator(ad.constant(sample.features[centers]))
        full = raw_to_full(nets_model.regressor(phi)).data
        cur_pose = ad.constant(full[:, 10:82])
        pose_back = nets_model.delta(back)(phi, cur_pose).data
        pose_fwd = nets_model.delta(fwd)(phi, cur_pose).data
        betas = full[:, :10]
        j_cur = body.keypoints_3d(model, ad.constant(betas), ad.constant(full[:, 10:82])).data
        j_back = body.keypoints_3d(model, ad.constant(betas), ad.constant(pose_back)).data
        j_fwd = body.keypoints_3d(model, ad.constant(betas), ad.constant(pose_fwd)).data
        for i, t in enumerate(centers):
            gt_trip = (g_joints[t + back], g_joints[t], g_joints[t + fwd])
            ours_trip = (j_back[i], j_cur[i], j_fwd[i])
            const_trip = (j_cur[i], j_cur[i], j_cur[i])
            for name, trip in (("ours", ours_trip), ("constant", const_trip)):
                for d in range(3):
                    sums[name][d] += pa_mpjpe(trip[d][None], gt_trip[d][None])
            if train_pool:
                best = min(train_pool, key=lambda trip: pa_mpjpe(trip[1][None], gt_trip[1][None]))
                for d in range(3):
                    sums["nearest"][d] += pa_mpjpe(best[d][None], gt_trip[d][None])
            n_centers += 1
    if n_centers == 0:
        raise ValueError("no valid dynamics centers in the dataset")
    ours = tuple(sums["ours"] / n_centers)
    const = tuple(sums["constant"] / n_centers)
    nearest = tuple(sums["nearest"] / n_centers) if train_pool else None
    return DynamicsMetrics(n_centers=n_centers, ours=ours, constant=const, nearest=nearest)
