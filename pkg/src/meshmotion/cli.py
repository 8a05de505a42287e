"""Command-line entry point: data generation, training, evaluation, dynamics
prediction, and the gradient verification harness.

Exit codes: 0 success, 1 usage error, 2 validation error (bad files, bad
config, unmet preconditions), 3 numerical failure (gradient check above
tolerance, non-finite values).

Configuration is a flat key=value text file ('#' comments allowed); any key
can be overridden on the command line with --set key=value. Keys cover the
architecture (feature_dim, n_blocks, kernel, gn_groups, gn_group_size,
ief_iters, ief_hidden, dropout_rate, delta_steps, use_hal, disc_hidden), the
trainer (seq_len, batch_size, steps, lr, lr_disc, adam_beta1, adam_beta2,
seed, jitter_scale_lo, jitter_scale_hi, jitter_trans, use_jitter,
delta_centers_per_seq, l3d_parts, cam_grad_flow, hal_detach_target,
checkpoint_every), and the loss weights (w_2d, w_3d, w_adv, w_beta, w_const,
w_hal, w_delta).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import body, camera, data, losses, metrics, nets, training
from .container import ValidationError

USAGE_EXIT, VALIDATION_EXIT, NUMERICAL_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------

_ENCODER_KEYS = {
    "feature_dim": int, "n_blocks": int, "kernel": int, "gn_groups": int,
    "gn_group_size": int, "ief_iters": int, "ief_hidden": int, "disc_hidden": int,
    "dropout_rate": float, "delta_steps": "int_tuple", "use_hal": "bool",
}
_TRAIN_KEYS = {
    "seq_len": int, "batch_size": int, "steps": int, "lr": float, "lr_disc": float,
    "adam_beta1": float, "adam_beta2": float, "seed": int, "jitter_scale_lo": float,
    "jitter_scale_hi": float, "jitter_trans": float, "use_jitter": "bool",
    "delta_centers_per_seq": int, "l3d_parts": "str_tuple", "cam_grad_flow": "bool",
    "hal_detach_target": "bool", "checkpoint_every": int,
}
_WEIGHT_KEYS = {"w_2d", "w_3d", "w_adv", "w_beta", "w_const", "w_hal", "w_delta"}


def _convert(key, kind, raw):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "bool":
            lower = raw.strip().lower()
            if lower in ("1", "true", "yes", "on"):
                return True
            if lower in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int_tuple":
            return tuple(int(x) for x in raw.split(",") if x.strip() != "")
        if kind == "str_tuple":
            return tuple(x.strip() for x in raw.split(",") if x.strip() != "")
    except ValueError as exc:
        raise ValidationError(f"config key {key}={raw!r}: cannot parse") from exc
    raise ValidationError(f"config key {key}: unknown kind {kind}")


def parse_config_file(path) -> dict:
    out = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def build_configs(raw: dict):
    """Flat key/value dict -> (EncoderConfig, TrainConfig)."""
    enc_kwargs, train_kwargs, weight_kwargs = {}, {}, {}
    for key, val in raw.items():
        if key in _ENCODER_KEYS:
            enc_kwargs[key] = _convert(key, _ENCODER_KEYS[key], val)
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _convert(key, _TRAIN_KEYS[key], val)
        elif key in _WEIGHT_KEYS:
            weight_kwargs[key] = _convert(key, float, val)
        else:
            raise ValidationError(f"unknown config key {key!r}")
    scale_lo = train_kwargs.pop("jitter_scale_lo", None)
    scale_hi = train_kwargs.pop("jitter_scale_hi", None)
    tcfg = training.TrainConfig(**train_kwargs)
    if scale_lo is not None or scale_hi is not None:
        lo = scale_lo if scale_lo is not None else tcfg.jitter_scale[0]
        hi = scale_hi if scale_hi is not None else tcfg.jitter_scale[1]
        tcfg.jitter_scale = (lo, hi)
    if weight_kwargs:
        tcfg.weights = losses.LossWeights(**weight_kwargs)
    enc = nets.EncoderConfig(**enc_kwargs).validate()
    return enc, tcfg


def _gather_config(args) -> dict:
    raw = {}
    if getattr(args, "config", None):
        raw.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        raw[key.strip()] = val.strip()
    if getattr(args, "steps", None) is not None:
        raw["steps"] = str(args.steps)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = str(args.seed)
    if getattr(args, "delta_steps", None) is not None:
        raw["delta_steps"] = args.delta_steps
    return raw


def _load_datasets(specs):
    out = []
    for spec in specs:
        path, _, ratio = spec.partition("::")
        out.append((data.load_dataset(path), int(ratio) if ratio else 1))
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_model(args) -> int:
    model = body.make_toy_model(seed=args.seed, n_vertices=args.vertices,
                                k_keypoints=args.keypoints)
    body.save_model(model, args.out)
    print(f"model: {model.n_vertices} vertices, {body.N_JOINTS} joints, "
          f"{model.n_keypoints} keypoints -> {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    model = body.load_model(args.model)
    if args.holdout and not args.holdout_out:
        raise ValidationError("--holdout needs --holdout-out")
    bundle = data.gen_synthetic_dataset(
        model, n_seqs=args.seqs + args.holdout, n_frames=args.frames, fps=args.fps,
        seed=args.seed, motion_kind=args.motion, feature_dim=args.feature_dim,
        tier=args.tier, vis_dropout=args.vis_dropout, feature_noise=args.feature_noise,
        kp_noise=args.kp_noise)
    main_bundle = data.DatasetBundle(bundle.sequences[:args.seqs], bundle.feature_meta)
    data.save_dataset(main_bundle, args.out)
    t = bundle.sequences[0].n_frames
    print(f"dataset: {args.seqs} sequences x {t} frames, k={model.n_keypoints}, "
          f"D={args.feature_dim}, tier={args.tier} -> {args.out}")
    if args.holdout:
        held = data.DatasetBundle(bundle.sequences[args.seqs:], bundle.feature_meta)
        data.save_dataset(held, args.holdout_out)
        print(f"held-out split: {args.holdout} sequences from the same generative family "
              f"-> {args.holdout_out}")
    return 0


def cmd_train(args) -> int:
    model = body.load_model(args.model)
    datasets = _load_datasets(args.data)
    enc, tcfg = build_configs(_gather_config(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        nets_model, step, adam_m, adam_v, adam_steps = nets.load_checkpoint(args.resume)
        state = training.init_state(nets_model, tcfg)
        state.step = step
        if adam_steps is not None:
            state.adam_gen.load_state(adam_m, adam_v, adam_steps["gen"])
            state.adam_disc.load_state(adam_m, adam_v, adam_steps["disc"])
    else:
        state = training.init_state(nets.ModelNets.create(enc, seed=tcfg.seed), tcfg)

    def save(state_now, tag=None):
        name = f"ckpt_{state_now.step:06d}.bin" if tag is None else tag
        nets.save_checkpoint(
            out_dir / name, state_now.nets, state_now.step,
            adam_m=state_now.adam_gen.m | state_now.adam_disc.m,
            adam_v=state_now.adam_gen.v | state_now.adam_disc.v,
            adam_steps={"gen": state_now.adam_gen.t, "disc": state_now.adam_disc.t})

    training.train(model, state, datasets, tcfg, checkpoint_fn=save)
    save(state, tag="checkpoint.bin")
    training.write_history_csv(out_dir / "losses.csv", state.history)
    if state.history:
        last = state.history[-1]
        print(f"trained to step {state.step}: total={last['total']:.6f} "
              f"l2d={last['l2d']:.6f} -> {out_dir / 'checkpoint.bin'}")
    else:
        print(f"checkpoint written at step {state.step} (no steps run)")
    return 0


def cmd_eval(args) -> int:
    model = body.load_model(args.model)
    bundle = data.load_dataset(args.data)
    nets_model, step, _, _, _ = nets.load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_bundle = data.load_dataset(args.train_data) if args.train_data else None
    want_dynamics = args.mode == "hallucinated-dynamics"
    mode = "single-frame" if want_dynamics else args.mode
    report = metrics.evaluate(model, nets_model, bundle, mode=mode, alpha=args.alpha,
                              train_dataset=train_bundle, gt_as_prediction=args.oracle_gt,
                              dynamics=want_dynamics)
    report.write_csv(out_dir / "metrics.csv")
    if want_dynamics:
        report.write_dynamics_csv(out_dir / "dynamics.csv")
    print(f"checkpoint step {step}, mode {args.mode}")
    print(report.to_text())
    return 0


def cmd_predict(args) -> int:
    model = body.load_model(args.model)
    bundle = data.load_dataset(args.data)
    nets_model, _, _, _, _ = nets.load_checkpoint(args.ckpt)
    if not nets_model.deltas or nets_model.hallucinator is None:
        raise ValidationError("prediction needs a checkpoint with delta predictors "
                              "and a hallucinator")
    if not 0 <= args.seq < len(bundle.sequences):
        raise ValidationError(f"sequence index {args.seq} out of range")
    sample = bundle.sequences[args.seq]
    if not 0 <= args.frame < sample.n_frames:
        raise ValidationError(f"frame {args.frame} out of range for {sample.n_frames} frames")

    phi = nets_model.hallucinator(ad.constant(sample.features[args.frame][None, :]))
    full = losses.raw_to_full(nets_model.regressor(phi)).data[0]
    back, fwd = min(nets_model.deltas), max(nets_model.deltas)
    pose_cur = ad.constant(full[None, 10:82])
    pose_back = nets_model.delta(back)(phi, pose_cur).data[0]
    pose_fwd = nets_model.delta(fwd)(phi, pose_cur).data[0]

    sections = []
    for tag, pose in (("past", pose_back), ("current", full[10:82]), ("future", pose_fwd)):
        theta_full = np.concatenate([full[:10], pose, full[82:]])
        verts = body.skin(model, full[:10], pose).data
        joints = body.regress_joints(model, ad.constant(verts)).data
        sections.extend([(f"theta_{tag}", theta_full), (f"joints_{tag}", joints),
                         (f"vertices_{tag}", verts)])

    with open(args.out, "w") as fh:
        fh.write(f"# dynamics dump: sequence {args.seq} frame {args.frame} "
                 f"steps {back:+d}/{fwd:+d}\n")
        for name, arr in sections:
            arr = np.asarray(arr)
            fh.write(f"section {name} {arr.size}\n")
            for row in arr.reshape(-1, arr.shape[-1] if arr.ndim > 1 else 1):
                fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")
    print(f"wrote past/current/future dump -> {args.out}")
    return 0


def parse_prediction_dump(path):
    """Read a cmd_predict dump back into {section: array} (flat arrays)."""
    out = {}
    name, want, buf = None, 0, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        if line.startswith("section "):
            if name is not None and sum(len(b) for b in buf) != want:
                raise ValidationError(f"{path}: section {name} is incomplete")
            if name is not None:
                out[name] = np.concatenate(buf) if buf else np.empty(0)
            _, name, count = line.split()
            want, buf = int(count), []
        else:
            buf.append(np.array([float(x) for x in line.split()]))
    if name is not None:
        arr = np.concatenate(buf) if buf else np.empty(0)
        if arr.size != want:
            raise ValidationError(f"{path}: section {name} is incomplete")
        out[name] = arr
    return out


# ---------------------------------------------------------------------------
# Gradient verification harness
# ---------------------------------------------------------------------------


def _gradcheck_cases(seed):
    """Named gradient checks: primitive ops first, then full network paths."""
    rng = np.random.default_rng(seed)
    model = body.make_toy_model(seed=seed, n_vertices=48, k_keypoints=8)
    enc = nets.EncoderConfig(feature_dim=16, n_blocks=1, gn_groups=4, gn_group_size=4,
                             ief_hidden=12, disc_hidden=8, dropout_rate=0.0)
    nm = nets.ModelNets.create(enc, seed=seed)
    k = model.n_keypoints

    def p(shape, shift=0.0):
        return ad.parameter(rng.standard_normal(shape) + shift, name="p")

    op_exprs = {
        "add_mul": (lambda t, u: ad.sum_((t + u) * (t - u) * (t * u)), [(3, 4), (3, 4)], 0.0),
        "div": (lambda t, u: ad.sum_(t / u), [(5,), (5,)], 3.0),
        "matmul": (lambda t, u: ad.sum_(ad.matmul(t, u) * ad.matmul(t, u)), [(3, 4), (4, 2)], 0.0),
        "batched_matmul": (lambda t, u: ad.sum_(ad.matmul(t, u)), [(3, 2, 4), (3, 4, 2)], 0.0),
        "reshape_transpose": (lambda t: ad.sum_(ad.transpose(ad.reshape(t, (3, 4))) *
                                                ad.transpose(ad.reshape(t, (3, 4)))), [(12,)], 0.0),
        "concat_slice": (lambda t, u: ad.sum_(ad.concat([t, u], axis=1)[:, 2:5] *
                                              ad.concat([t, u], axis=1)[:, 2:5]), [(2, 4), (2, 3)], 0.0),
        "gather_rows": (lambda t: ad.sum_(ad.gather_rows(t, [0, 2, 2, 5]) * 1.5), [(6, 3)], 0.0),
        "relu": (lambda t: ad.sum_(ad.relu(t)), [(4, 4)], 0.2),
        "exp_log_sqrt": (lambda t: ad.sum_(ad.log(ad.exp(t) + 2.0) + ad.sqrt(ad.exp(t))), [(4,)], 0.0),
        "sin_cos": (lambda t: ad.sum_(ad.sin(t) * ad.cos(t)), [(5,)], 0.0),
        "reduce_mean": (lambda t: ad.sum_(ad.mean_(t, axis=1, keepdims=True) *
                                          ad.mean_(t, axis=1, keepdims=True)), [(3, 5)], 0.0),
        "conv1d": (lambda x, w, b: ad.sum_(ad.conv1d(x, w, b) * ad.conv1d(x, w, b)),
                   [(3, 9), (2, 3, 3), (2,)], 0.0),
        "group_norm": (lambda x, g, b: ad.sum_(ad.group_norm(x, g, b, 2) *
                                               ad.group_norm(x, g, b, 2)), [(4, 6), (4,), (4,)], 0.5),
        "l2_norm": (lambda t: ad.l2_norm(t), [(6,)], 2.0),
        "l2_norm_rows": (lambda t: ad.sum_(ad.l2_norm_rows(t)), [(4, 3)], 1.5),
        "dropout_apply": (lambda t: ad.sum_(t * ad.dropout_mask(
            np.random.default_rng(seed + 3), (4, 4), 0.4)), [(4, 4)], 0.0),
    }

    cases = []
    for op_name, (expr, shapes, shift) in op_exprs.items():
        def build(expr=expr, shapes=shapes, shift=shift):
            params = [p(s, shift) for s in shapes]
            return (lambda: expr(*params)), params

        cases.append((f"op:{op_name}", build))

    # full paths through the body model, camera, and every network
    def case_rodrigues():
        v = ad.parameter(rng.normal(0, 0.7, (4, 3)), name="aa")
        probe = ad.constant(rng.standard_normal((4, 3, 3)))
        return (lambda: ad.sum_(body.rodrigues(v) * probe)), [v]

    def case_skin():
        beta = ad.parameter(rng.normal(0, 0.4, 10), name="beta")
        theta = ad.parameter(rng.normal(0, 0.3, 72), name="theta")
        probe = ad.constant(rng.standard_normal((model.n_vertices, 3)))
        return (lambda: ad.sum_(body.skin(model, beta, theta) * probe)), [beta, theta]

    def case_camera():
        x = ad.parameter(rng.standard_normal((k, 2)), name="x_orth")
        y = 1.3 * x.data + np.array([0.4, -0.2]) + 0.1 * rng.standard_normal((k, 2))
        vis = np.ones(k, dtype=bool)
        return (lambda: camera.optimal_camera(x, y, vis).residual), [x]

    def case_temporal_frame_losses():
        feats = ad.constant(rng.standard_normal((enc.receptive_field, enc.feature_dim)))
        gt_pts = rng.normal(0, 40, (k, 2))
        gt2d = losses.Keypoints2D(points=gt_pts, vis=np.ones(k, dtype=bool))
        gt_full = rng.normal(0, 0.3, 85)
        wts = losses.LossWeights()
        wrt = [nm.temporal.blocks[0][1][0], nm.temporal.blocks[0][2][2],
               nm.regressor.fc1.w, nm.regressor.out.b, nm.regressor.theta_mean]

        def f():
            phi = nm.temporal(feats)
            full = losses.raw_to_full(nm.regressor(phi))
            mid = enc.half_field
            row = full[mid]
            x3d = body.keypoints_3d(model, full[mid:mid + 1, 0:10], full[mid:mid + 1, 10:82])
            x2d = camera.project(x3d, ad.reshape(row[82:83], (1, 1)),
                                 ad.reshape(row[83:85], (1, 2)))[0]
            total, _ = losses.frame_loss(row, x2d, gt2d, nm.discriminators, wts, gt3d=gt_full)
            cs, _ = losses.const_shape_loss(full[:, 0:10])
            return total + cs

        return f, wrt

    def case_delta_camera_path():
        phi = ad.constant(rng.standard_normal((2, enc.feature_dim)))
        theta0 = ad.constant(rng.normal(0, 0.3, (2, 72)))
        beta0 = ad.constant(rng.normal(0, 0.3, (2, 10)))
        kp = rng.normal(0, 40, (2, k, 2))
        vis = np.ones((2, k), dtype=bool)
        dp = nm.delta(max(nm.deltas))
        wrt = [dp.fc1.w, dp.out.w, dp.out.b]

        def f():
            pose = dp(phi, theta0)
            joints = body.keypoints_3d(model, beta0, pose)
            fits = camera.optimal_camera_rows(joints[:, :, 0:2], kp, vis)
            return ad.sum_(fits["residual"])

        return f, wrt

    def case_hallucinator_path():
        feats = ad.constant(rng.standard_normal((4, enc.feature_dim)))
        target = ad.constant(rng.standard_normal((4, enc.feature_dim)))
        wrt = [nm.hallucinator.fc1.w, nm.hallucinator.fc2.b]

        def f():
            phi = nm.hallucinator(feats)
            full = losses.raw_to_full(nm.regressor(phi))
            return nets.hallucination_loss(target, phi) + ad.mean_(losses.beta_prior(full[:, 0:10]))

        return f, wrt

    def case_discriminators():
        real = rng.normal(0, 0.3, (3, 72))
        fake_pose = ad.parameter(rng.normal(0, 0.4, (3, 72)), name="fake_pose")
        rb = rng.normal(0, 0.3, (3, 10))
        fb = rng.normal(0, 0.4, (3, 10))
        wrt = [nm.discriminators.joint_fc_w, nm.discriminators.all_fc1.w,
               nm.discriminators.shape_fc.w, fake_pose]

        def f():
            return losses.adv_prior_discriminator_loss(
                nm.discriminators, real, rb, fake_pose, fb)

        return f, wrt

    for name, builder in (("path:rodrigues", case_rodrigues),
                          ("path:body_skin", case_skin),
                          ("path:camera_fit_residual", case_camera),
                          ("path:f_movie+f_3d+frame_losses", case_temporal_frame_losses),
                          ("path:f_delta+optimal_camera", case_delta_camera_path),
                          ("path:hallucinator+losses", case_hallucinator_path),
                          ("path:discriminators", case_discriminators)):
        cases.append((name, builder))
    return cases


def run_gradcheck(seed: int = 0, tol: float = 1e-4, out_path=None):
    """Run every named check; returns (all_passed, rows)."""
    rows = []
    ok_all = True
    for name, builder in _gradcheck_cases(seed):
        f, wrt = builder()
        err = ad.finite_diff_check(f, wrt, max_coords=24, rng=np.random.default_rng(seed + 1))
        passed = err < tol
        ok_all &= passed
        rows.append((name, err, passed))
    if out_path is not None:
        with open(out_path, "w") as fh:
            fh.write("check,max_rel_err,pass\n")
            for name, err, passed in rows:
                fh.write(f"{name},{err:.3e},{int(passed)}\n")
    return ok_all, rows


def cmd_gradcheck(args) -> int:
    ok, rows = run_gradcheck(seed=args.seed, out_path=args.out)
    width = max(len(name) for name, _, _ in rows)
    for name, err, passed in rows:
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {'PASS' if passed else 'FAIL'}")
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return NUMERICAL_EXIT
    print(f"all {len(rows)} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="meshmotion",
                description="desk-scale 3D body mesh and motion recovery")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="write a procedural body model")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vertices", type=int, default=120)
    g.add_argument("--keypoints", type=int, default=14)
    g.set_defaults(fn=cmd_gen_model)

    d = sub.add_parser("gen-data", help="write a synthetic sequence dataset")
    d.add_argument("--model", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seqs", type=int, default=8)
    d.add_argument("--frames", type=int, default=40)
    d.add_argument("--fps", type=float, default=25.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--motion", default="mixed", choices=data.MOTION_KINDS)
    d.add_argument("--tier", default="full3d", choices=data.TIERS)
    d.add_argument("--feature-dim", type=int, default=64)
    d.add_argument("--vis-dropout", type=float, default=0.05)
    d.add_argument("--feature-noise", type=float, default=0.02)
    d.add_argument("--kp-noise", type=float, default=0.0)
    d.add_argument("--holdout", type=int, default=0,
                   help="extra sequences written to --holdout-out; same encoding family")
    d.add_argument("--holdout-out")
    d.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train networks on datasets")
    t.add_argument("--model", required=True)
    t.add_argument("--data", required=True, action="append",
                   help="dataset path, optionally with ::ratio suffix; repeatable")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--delta-steps", help="comma list of frame offsets, e.g. -5,5")
    t.add_argument("--resume")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", default="temporal",
                   choices=["temporal", "single-frame", "hallucinated-dynamics"])
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--train-data", help="training dataset for the nearest-neighbor baseline")
    e.add_argument("--oracle-gt", action="store_true",
                   help="score the ground truth against itself (pipeline self-check)")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("predict", help="dump past/current/future prediction for one frame")
    r.add_argument("--model", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--seq", type=int, default=0)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference verification of every path")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="optional CSV report path")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ValidationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT
    except ad.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_EXIT


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
