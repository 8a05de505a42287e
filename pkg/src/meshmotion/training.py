"""End-to-end training: the temporal path, shifted-frame predictions with
closed-form cameras, the hallucinated path, priors, and the adversarial
alternation.

Determinism contract: every source of randomness in a step (batch choice,
frame windows, jitter, dropout masks, discriminator sampling) derives from
(config seed, step index) alone, so training resumed from a checkpoint is
bit-identical to an uninterrupted run.

Per step, all frame evaluations from every path (current frames, shifted
frames, hallucinated variants) are concatenated into one batched mesh/
projection graph, which keeps graph size independent of batch and sequence
length.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body, camera
from .container import ValidationError
from .losses import (LossWeights, adv_prior_discriminator_loss, adv_prior_generator_loss,
                     beta_prior, const_shape_loss, loss_2d_rows, loss_3d_rows, raw_to_full)
from .nets import ModelNets, hallucination_loss
from .optim import Adam

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("l2d", "l3d", "ladv", "lbeta", "lconst", "ldelta", "lhal",
                "lhal_frame", "ldisc", "total")


def rng_for(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key)))


@dataclass
class TrainConfig:
    seq_len: int = 20
    batch_size: int = 8
    steps: int = 1000
    lr: float = 1e-4
    lr_disc: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    jitter_scale: tuple = (0.9, 1.1)
    jitter_trans: float = 11.2     # pixels: 0.05 of a 224-unit frame
    use_jitter: bool = True
    delta_centers_per_seq: int = 2
    l3d_parts: tuple = ("beta", "theta")
    cam_grad_flow: bool = True
    hal_detach_target: bool = True
    checkpoint_every: int = 500

    def validate(self, enc_cfg):
        self.weights.validate()
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seq_len < enc_cfg.receptive_field:
            raise ValidationError(
                f"seq_len {self.seq_len} shorter than the receptive field {enc_cfg.receptive_field}")
        if enc_cfg.delta_steps:
            margin = max(enc_cfg.half_field, max(abs(s) for s in enc_cfg.delta_steps))
            if self.seq_len < 2 * margin + 1:
                raise ValidationError(
                    f"seq_len {self.seq_len} cannot host delta centers (need {2 * margin + 1})")
        return self


@dataclass
class TrainState:
    nets: ModelNets
    adam_gen: Adam
    adam_disc: Adam
    step: int = 0
    history: list = field(default_factory=list)


def init_state(nets_model: ModelNets, cfg: TrainConfig) -> TrainState:
    return TrainState(
        nets=nets_model,
        adam_gen=Adam(nets_model.generator_params(), lr=cfg.lr,
                      beta1=cfg.adam_beta1, beta2=cfg.adam_beta2),
        adam_disc=Adam(nets_model.discriminator_params(), lr=cfg.lr_disc,
                       beta1=cfg.adam_beta1, beta2=cfg.adam_beta2),
    )


# ---------------------------------------------------------------------------
# Batch mixing
# ---------------------------------------------------------------------------


class BatchMixer:
    """Deterministic ratio round-robin over datasets with shuffled epochs.

    Dataset choice for a step follows a fixed ratio pattern; sequences within
    a dataset are drawn from per-epoch permutations. Everything is a pure
    function of (seed, step), so resuming never desynchronizes the stream.
    """

    def __init__(self, datasets, seq_len: int, batch_size: int, seed: int):
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        self.pools = []
        pattern = []
        for d_idx, (bundle, ratio) in enumerate(datasets):
            usable = [s for s in bundle if s.n_frames >= seq_len]
            if ratio < 0:
                raise ValidationError(f"dataset ratio must be >= 0, got {ratio}")
            if usable and ratio > 0:
                pattern.extend([len(self.pools)] * int(ratio))
                self.pools.append(usable)
            elif not usable:
                log.warning("dataset %d has no sequences of length >= %d; skipped", d_idx, seq_len)
        if not pattern:
            raise ValidationError("no usable datasets to mix")
        self.pattern = pattern

    def dataset_for_step(self, step: int) -> int:
        return self.pattern[step % len(self.pattern)]

    def _draws_before(self, step: int, d: int) -> int:
        full, rem = divmod(step, len(self.pattern))
        in_pattern = self.pattern.count(d)
        return (full * in_pattern + self.pattern[:rem].count(d)) * self.batch_size

    def batch(self, step: int):
        """Samples (sequence, window_start) pairs for one step."""
        d = self.dataset_for_step(step)
        pool = self.pools[d]
        n = len(pool)
        start = self._draws_before(step, d)
        out = []
        for j in range(self.batch_size):
            global_idx = start + j
            epoch, offset = divmod(global_idx, n)
            perm = rng_for(self.seed, 11, d, epoch).permutation(n)
            sample = pool[perm[offset]]
            wmax = sample.n_frames - self.seq_len
            w0 = int(rng_for(self.seed, 12, step, j).integers(0, wmax + 1)) if wmax > 0 else 0
            out.append((sample, w0))
        return out


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def jitter_window(kp, vis, theta_gt, features, feature_meta, rng, cfg: TrainConfig):
    """Per-frame scale/translation noise on 2-D targets and feature encoding.

    Keypoints move as a detector's crop would: kp' = a * kp + b. For synthetic
    features the camera components of the encoding are updated through the
    stored feature-space directions (s' = a s, t' = a t + b); 3-D targets are
    untouched. Returns (kp', features').
    """
    t_len = kp.shape[0]
    lo, hi = cfg.jitter_scale
    scale = rng.uniform(lo, hi, t_len)
    trans = rng.uniform(-cfg.jitter_trans, cfg.jitter_trans, (t_len, 2))
    kp_out = kp * scale[:, None, None] + trans[:, None, :]
    feats_out = features
    if feature_meta is not None and theta_gt is not None:
        s_old = theta_gt[:, 82]
        t_old = theta_gt[:, 83:85]
        dz = np.column_stack([
            np.log(scale),
            ((scale - 1.0) * t_old[:, 0] + trans[:, 0]) / feature_meta.t_norm,
            ((scale - 1.0) * t_old[:, 1] + trans[:, 1]) / feature_meta.t_norm,
        ])
        feats_out = features + dz @ feature_meta.qcam.T
    return kp_out, feats_out


# ---------------------------------------------------------------------------
# The training step
# ---------------------------------------------------------------------------


def build_real_pose_pool(datasets):
    """Rows of [beta | pose] drawn from every ground-truth-carrying sequence."""
    rows = []
    for bundle, _ratio in datasets:
        for s in bundle:
            if s.theta_gt is not None:
                rows.append(s.theta_gt[:, :82])
    if not rows:
        return None
    return np.concatenate(rows, axis=0)


def _delta_centers(cfg_enc, seq_len: int, count: int, rng) -> list:
    margin = max(cfg_enc.half_field, max(abs(s) for s in cfg_enc.delta_steps))
    lo, hi = margin, seq_len - 1 - margin
    return [int(t) for t in rng.integers(lo, hi + 1, size=count)]


def train_step(model: body.BodyModel, state: TrainState, batch, cfg: TrainConfig,
               feature_meta=None, real_pool=None):
    """One generator update followed by one discriminator update.

    ``batch`` is a list of (SequenceSample, window_start). Returns the loss
    breakdown dict (plain floats); parameters and moments update in place.
    """
    nets_model = state.nets
    enc = nets_model.cfg
    w = cfg.weights
    step = state.step
    n_batch = len(batch)
    t_len = cfg.seq_len
    k = model.n_keypoints
    use_hal = nets_model.hallucinator is not None
    use_deltas = bool(nets_model.deltas) and w.w_delta > 0

    # -- deterministic per-step randomness ------------------------------------
    jit_rng = rng_for(cfg.seed, 20, step)
    drop_rng = rng_for(cfg.seed, 21, step)
    center_rng = rng_for(cfg.seed, 22, step)
    disc_rng = rng_for(cfg.seed, 23, step)

    # -- assemble window arrays ----------------------------------------------
    kp_all = np.empty((n_batch, t_len, k, 2))
    vis_all = np.empty((n_batch, t_len, k), dtype=bool)
    feats_all = np.empty((n_batch, t_len, enc.feature_dim))
    gt_full = np.full((n_batch, t_len, 85), np.nan)
    has_3d = np.zeros(n_batch, dtype=bool)
    for b, (sample, w0) in enumerate(batch):
        sl = slice(w0, w0 + t_len)
        kp_w = sample.kp2d[sl]
        vis_all[b] = sample.vis[sl]
        feats_w = sample.features[sl]
        theta_w = sample.theta_gt[sl] if sample.theta_gt is not None else None
        if cfg.use_jitter:
            kp_w, feats_w = jitter_window(kp_w, vis_all[b], theta_w, feats_w,
                                          feature_meta, jit_rng, cfg)
        kp_all[b] = kp_w
        feats_all[b] = feats_w
        if theta_w is not None:
            gt_full[b] = theta_w
        has_3d[b] = sample.tier == "full3d" and theta_w is not None
    excluded = vis_all.sum(axis=2) < 6
    frame_ok = ~excluded
    if not frame_ok.any():
        log.warning("step %d: every frame in the batch is below the visibility floor; skipped", step)
        state.step += 1
        row = {name: 0.0 for name in LOSS_COLUMNS}
        row["skipped"] = 1.0
        row["step"] = float(step)
        state.history.append(row)
        return row

    bt = n_batch * t_len
    frame_w = frame_ok.reshape(bt).astype(np.float64)
    n_frames_used = frame_w.sum()

    # -- encoder paths ---------------------------------------------------------
    phi_temporal = ad.concat([nets_model.temporal(ad.constant(feats_all[b]))
                              for b in range(n_batch)], axis=0)        # (BT, D)
    feats_flat = ad.constant(feats_all.reshape(bt, enc.feature_dim))
    paths = [("t", phi_temporal)]
    if use_hal:
        phi_hal = nets_model.hallucinator(feats_flat)
        paths.append(("h", phi_hal))

    phi_joint = ad.concat([p for _, p in paths], axis=0)
    n_rows_reg = phi_joint.shape[0]
    masks = [(ad.dropout_mask(drop_rng, (n_rows_reg, enc.ief_hidden), enc.dropout_rate),
              ad.dropout_mask(drop_rng, (n_rows_reg, enc.ief_hidden), enc.dropout_rate))
             for _ in range(enc.ief_iters)]
    theta_raw = nets_model.regressor(phi_joint, masks=masks)            # (P*BT, 85)
    full_rows = raw_to_full(theta_raw)

    path_full = {name: full_rows[i * bt:(i + 1) * bt, :] for i, (name, _) in enumerate(paths)}
    path_phi = dict(paths)

    # -- delta predictions -----------------------------------------------------
    centers = []
    if use_deltas:
        per_seq = [_delta_centers(enc, t_len, cfg.delta_centers_per_seq, center_rng)
                   for _ in range(n_batch)]
        centers = [(b, t) for b in range(n_batch) for t in per_seq[b]]

    delta_specs = []   # (path, step_size, batch_idx, center_t) aligned with delta_rows order
    delta_betas, delta_poses = [], []
    for pname, _ in paths:
        if not use_deltas:
            break
        full_p = path_full[pname]
        phi_p = path_phi[pname]
        rows = [b * t_len + t for b, t in centers]
        phi_c = ad.gather_rows(phi_p, rows)
        full_c = ad.gather_rows(full_p, rows)
        for step_size in sorted(nets_model.deltas):
            dmask = (ad.dropout_mask(drop_rng, (len(rows), enc.ief_hidden), enc.dropout_rate),
                     ad.dropout_mask(drop_rng, (len(rows), enc.ief_hidden), enc.dropout_rate))
            pose_shift = nets_model.delta(step_size)(phi_c, full_c[:, 10:82], masks=dmask)
            delta_betas.append(full_c[:, 0:10])
            delta_poses.append(pose_shift)
            delta_specs.extend((pname, step_size, b, t) for b, t in centers)

    # -- one batched mesh evaluation for every path ----------------------------
    beta_blocks = [path_full[p][:, 0:10] for p, _ in paths]
    pose_blocks = [path_full[p][:, 10:82] for p, _ in paths]
    all_beta = ad.concat(beta_blocks + delta_betas, axis=0)
    all_pose = ad.concat(pose_blocks + delta_poses, axis=0)
    joints = body.keypoints_3d(model, all_beta, all_pose)               # (R, k, 3)

    kp_flat = kp_all.reshape(bt, k, 2)
    vis_flat = vis_all.reshape(bt, k)
    breakdown = {name: 0.0 for name in LOSS_COLUMNS}
    total = ad.constant(0.0)

    # frame paths: predicted camera projection + 2d/3d losses
    for i, (pname, _) in enumerate(paths):
        rows = slice(i * bt, (i + 1) * bt)
        raw_p = theta_raw[i * bt:(i + 1) * bt, :]
        s_col = ad.exp(raw_p[:, 82:83])
        t_col = raw_p[:, 83:85]
        pred2d = camera.project(joints[rows.start:rows.stop, :, :], s_col, t_col)
        l2d_vec, _ = loss_2d_rows(pred2d, kp_flat, vis_flat)
        l2d = ad.sum_(l2d_vec * ad.constant(frame_w)) * (1.0 / n_batch)
        total = total + w.w_2d * l2d
        breakdown["l2d" if pname == "t" else "lhal_frame"] += l2d.item()

        if has_3d.any():
            w3d = (frame_ok & has_3d[:, None]).reshape(bt).astype(np.float64)
            if w3d.any():
                gt_rows = np.nan_to_num(gt_full.reshape(bt, 85))
                l3d_vec = loss_3d_rows(path_full[pname], gt_rows, cfg.l3d_parts)
                l3d = ad.sum_(l3d_vec * ad.constant(w3d)) * (1.0 / n_batch)
                total = total + w.w_3d * l3d
                breakdown["l3d"] += l3d.item()

        lbeta_vec = beta_prior(path_full[pname][:, 0:10])
        lbeta = ad.sum_(lbeta_vec * ad.constant(frame_w)) * (1.0 / n_batch)
        total = total + w.w_beta * lbeta
        breakdown["lbeta"] += lbeta.item()

    # delta paths: closed-form camera then reprojection at the shifted frame
    if delta_specs:
        n_frame_rows = len(paths) * bt
        nd = len(delta_specs)
        tgt = [(b, t_c + step_size) for (_, step_size, b, t_c) in delta_specs]
        kp_tgt = np.stack([kp_all[b, t] for b, t in tgt])
        vis_tgt = np.stack([vis_all[b, t] for b, t in tgt])
        row_ok = np.array([not excluded[b, t] for b, t in tgt])
        x_orth = joints[n_frame_rows:n_frame_rows + nd, :, 0:2]
        fits = camera.optimal_camera_rows(x_orth, kp_tgt, vis_tgt, grad_flow=cfg.cam_grad_flow)
        dweight = (row_ok & fits["valid"]).astype(np.float64)
        per_vis = dweight / np.maximum(fits["n_visible"], 1)
        ldelta = ad.sum_(fits["residual"] * ad.constant(per_vis)) * w.w_2d
        if has_3d.any():
            gt_pose = np.stack([np.nan_to_num(gt_full[b, t, 10:82]) for b, t in tgt])
            w3d_rows = dweight * np.array([has_3d[b] for b, _ in tgt], dtype=np.float64)
            pose_rows = all_pose[n_frame_rows:n_frame_rows + nd, :]
            diff = pose_rows - ad.constant(gt_pose)
            l3d_vec = ad.sum_(diff * diff, axis=1) * (1.0 / body.POSE_DIM)
            ldelta = ldelta + w.w_3d * ad.sum_(l3d_vec * ad.constant(w3d_rows))
        ldelta = ldelta * (1.0 / n_batch)
        total = total + w.w_delta * ldelta
        breakdown["ldelta"] = ldelta.item()

    # adversarial prior over every predicted pose/shape row
    if w.w_adv > 0:
        ladv = adv_prior_generator_loss(nets_model.discriminators, all_pose, all_beta)
        total = total + w.w_adv * ladv
        breakdown["ladv"] = ladv.item()

    # shape constancy per sequence along the temporal path
    if w.w_const > 0:
        lconst = ad.constant(0.0)
        betas_t = path_full["t"][:, 0:10]
        for b in range(n_batch):
            seq_betas = betas_t[b * t_len:(b + 1) * t_len, :]
            term, has_signal = const_shape_loss(seq_betas)
            if has_signal:
                lconst = lconst + term
        lconst = lconst * (1.0 / n_batch)
        total = total + w.w_const * lconst
        breakdown["lconst"] = lconst.item()

    # feature matching for the hallucinator
    if use_hal and w.w_hal > 0:
        lhal = hallucination_loss(phi_temporal, path_phi["h"], detach_target=cfg.hal_detach_target)
        total = total + w.w_hal * lhal
        breakdown["lhal"] = lhal.item()

    breakdown["total"] = total.item()

    # -- generator update -------------------------------------------------------
    state.adam_gen.zero_grad()
    state.adam_disc.zero_grad()
    total.backward()
    state.adam_gen.step()

    # -- discriminator update ----------------------------------------------------
    if w.w_adv > 0:
        if real_pool is None:
            raise ValidationError("adversarial prior enabled but no ground-truth poses "
                                  "are available for the discriminator")
        fake_pose = all_pose.data.copy()
        fake_beta = all_beta.data.copy()
        idx = disc_rng.integers(0, real_pool.shape[0], fake_pose.shape[0])
        real_rows = real_pool[idx]
        state.adam_disc.zero_grad()
        dloss = adv_prior_discriminator_loss(
            nets_model.discriminators, real_rows[:, 10:82], real_rows[:, 0:10],
            fake_pose, fake_beta)
        dloss.backward()
        state.adam_disc.step()
        breakdown["ldisc"] = dloss.item()

    breakdown["skipped"] = 0.0
    breakdown["frames_used"] = float(n_frames_used)
    breakdown["step"] = float(step)
    state.step += 1
    state.history.append(breakdown)
    return breakdown


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


def train(model: body.BodyModel, state: TrainState, datasets, cfg: TrainConfig,
          feature_meta=None, checkpoint_fn=None):
    """Run training up to cfg.steps (absolute step count; resumable).

    ``datasets`` is a list of (DatasetBundle, ratio). ``checkpoint_fn`` is
    called as checkpoint_fn(state) every cfg.checkpoint_every steps and at
    the end.
    """
    cfg.validate(state.nets.cfg)
    mixer = BatchMixer(datasets, cfg.seq_len, cfg.batch_size, cfg.seed)
    real_pool = build_real_pose_pool(datasets)
    if feature_meta is None:
        for bundle, _ in datasets:
            if bundle.feature_meta is not None:
                feature_meta = bundle.feature_meta
                break
    while state.step < cfg.steps:
        batch = mixer.batch(state.step)
        train_step(model, state, batch, cfg, feature_meta=feature_meta, real_pool=real_pool)
        if checkpoint_fn is not None and (state.step % cfg.checkpoint_every == 0
                                          or state.step >= cfg.steps):
            checkpoint_fn(state)
    return state


def write_history_csv(path, history):
    cols = ("step",) + LOSS_COLUMNS + ("skipped",)
    with open(path, "w", newline="") as fh:
        wtr = csv.writer(fh)
        wtr.writerow(cols)
        for i, row in enumerate(history):
            step = int(row.get("step", i))
            wtr.writerow([step] + [f"{row.get(c, 0.0):.6f}" for c in cols[1:]])
