"""Learnable components: temporal encoder, parameter regressors, hallucinator,
and the pose/shape discriminator set.

Structural counts (three residual blocks, kernel 3, three feedback
iterations, delta steps of +/-5 frames) follow the reference architecture;
widths are scaled down so full gradient checks run in seconds. With kernel 3
and three blocks of two convolutions each, one output frame sees
1 + 3*2*(3-1) = 13 input frames.

Parameter counts per component (D = feature dim, H = hidden, K = kernel,
h = discriminator hidden, J = number of body joints minus the root):
  temporal encoder:  n_blocks * 2 * (D*D*K + D + 2D)
  pose regressor:    (D+85)*H + H + H*H + H + H*85 + 85   plus the 85-D mean
  delta predictor:   (D+72)*H + H + H*H + H + H*72 + 72   per step
  hallucinator:      2 * (D*D + D)
  discriminators:    J*(9h + 2h + 1) + (9J*h + h + h*h + h + h + 1) + (10h + 2h + 1)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body
from .container import ValidationError, read_container, require, write_container

CKPT_MAGIC = "HMMRCKPT1"

THETA_DIM = body.THETA_DIM   # 85
POSE_DIM = body.POSE_DIM     # 72
SHAPE_DIM = body.SHAPE_DIM   # 10
N_BODY_JOINTS = body.N_JOINTS - 1  # discriminated joints, global rotation excluded

# raw regressor output layout: [beta | pose | camera(log s, tx, ty)]
BETA_SLICE = slice(0, SHAPE_DIM)
POSE_SLICE = slice(SHAPE_DIM, SHAPE_DIM + POSE_DIM)
CAM_SLICE = slice(SHAPE_DIM + POSE_DIM, THETA_DIM)


@dataclass
class EncoderConfig:
    """Architecture knobs; defaults are the desk-scale widths."""

    feature_dim: int = 64
    n_blocks: int = 3
    kernel: int = 3
    gn_groups: int = 8
    gn_group_size: int = 8
    ief_iters: int = 3
    ief_hidden: int = 128
    dropout_rate: float = 0.1
    delta_steps: tuple = (-5, 5)
    use_hal: bool = True
    disc_hidden: int = 32

    @property
    def receptive_field(self) -> int:
        return 1 + self.n_blocks * 2 * (self.kernel - 1)

    @property
    def half_field(self) -> int:
        return self.receptive_field // 2

    def validate(self):
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ValidationError(f"kernel must be odd and positive, got {self.kernel}")
        if self.n_blocks > 0 and self.gn_groups * self.gn_group_size != self.feature_dim:
            raise ValidationError(
                f"group norm layout {self.gn_groups}x{self.gn_group_size} != feature dim {self.feature_dim}")
        if len(set(self.delta_steps)) != len(self.delta_steps):
            raise ValidationError(f"duplicate delta steps: {self.delta_steps}")
        if any(d == 0 for d in self.delta_steps):
            raise ValidationError("delta step 0 is the current frame")
        return self


def _glorot(rng, fan_in, fan_out, scale=1.0):
    limit = np.sqrt(6.0 / (fan_in + fan_out)) * scale
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, rng, n_in, n_out, name, out_scale=1.0):
        self.w = ad.parameter(_glorot(rng, n_in, n_out, out_scale), name=f"{name}.w")
        self.b = ad.parameter(np.zeros(n_out), name=f"{name}.b")
        self.name = name

    def __call__(self, x):
        rows = x.shape[0]
        bias = ad.matmul(ad.constant(np.ones((rows, 1))), ad.reshape(self.b, (1, self.b.shape[0])))
        return ad.matmul(x, self.w) + bias

    def params(self):
        return [self.w, self.b]


class TemporalEncoder:
    """Residual 1-D conv stack mapping per-frame features to context features.

    Input and output are (T, D). Each block is two kernel-K convolutions,
    each followed by group norm and a relu, added back onto the block input.
    With zero blocks the encoder is the identity (context-free ablation).
    """

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        d, k = cfg.feature_dim, cfg.kernel
        self.blocks = []
        for i in range(cfg.n_blocks):
            blk = {}
            for half in (1, 2):
                fan = d * k
                w = ad.parameter(rng.uniform(-1, 1, (d, d, k)) * np.sqrt(6.0 / (2 * fan)),
                                 name=f"f_movie.block{i}.conv{half}.w")
                b = ad.parameter(np.zeros(d), name=f"f_movie.block{i}.conv{half}.b")
                gamma = ad.parameter(np.ones(d), name=f"f_movie.block{i}.gn{half}.gamma")
                beta = ad.parameter(np.zeros(d), name=f"f_movie.block{i}.gn{half}.beta")
                blk[half] = (w, b, gamma, beta)
            self.blocks.append(blk)

    def __call__(self, features):
        x = ad.transpose(ad.as_tensor(features))  # (D, T)
        for blk in self.blocks:
            h = x
            for half in (1, 2):
                w, b, gamma, beta = blk[half]
                h = ad.conv1d(h, w, b)
                h = ad.group_norm(h, gamma, beta, self.cfg.gn_groups)
                h = ad.relu(h)
            x = x + h
        return ad.transpose(x)  # (T, D)

    def params(self):
        out = []
        for blk in self.blocks:
            for half in (1, 2):
                out.extend(blk[half])
        return out


class IefRegressor:
    """Iterative-feedback regressor from context features to the 85-D vector.

    Starts every row at the learned mean and applies ``iters`` shared-weight
    correction steps: theta <- theta + mlp(concat(phi, theta)). Dropout masks
    are pre-sampled by the caller (two per iteration) or omitted entirely.
    """

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        d, h = cfg.feature_dim, cfg.ief_hidden
        self.fc1 = Linear(rng, d + THETA_DIM, h, "f_3d.fc1")
        self.fc2 = Linear(rng, h, h, "f_3d.fc2")
        self.out = Linear(rng, h, THETA_DIM, "f_3d.out", out_scale=0.01)
        self.theta_mean = ad.parameter(np.zeros(THETA_DIM), name="f_3d.theta_mean")

    def __call__(self, phi, masks=None, iters=None):
        iters = self.cfg.ief_iters if iters is None else iters
        rows = phi.shape[0]
        theta = ad.matmul(ad.constant(np.ones((rows, 1))),
                          ad.reshape(self.theta_mean, (1, THETA_DIM)))
        for i in range(iters):
            inp = ad.concat([phi, theta], axis=1)
            h1 = ad.relu(self.fc1(inp))
            if masks is not None:
                h1 = h1 * masks[i][0]
            h2 = ad.relu(self.fc2(h1))
            if masks is not None:
                h2 = h2 * masks[i][1]
            theta = theta + self.out(h2)
        return theta

    def params(self):
        return self.fc1.params() + self.fc2.params() + self.out.params() + [self.theta_mean]


class DeltaPredictor:
    """Predicts the pose at t + step from (context feature, current pose).

    One correction on top of the current pose: theta_out = theta + mlp(...).
    Only the 72 pose values move; shape is reused and the camera for the
    shifted frame is solved in closed form downstream.
    """

    def __init__(self, cfg: EncoderConfig, step: int, rng):
        d, h = cfg.feature_dim, cfg.ief_hidden
        tag = f"f_delta[{step:+d}]"
        self.step = step
        self.fc1 = Linear(rng, d + POSE_DIM, h, f"{tag}.fc1")
        self.fc2 = Linear(rng, h, h, f"{tag}.fc2")
        self.out = Linear(rng, h, POSE_DIM, f"{tag}.out", out_scale=0.01)

    def __call__(self, phi, theta_pose, masks=None):
        inp = ad.concat([phi, theta_pose], axis=1)
        h1 = ad.relu(self.fc1(inp))
        if masks is not None:
            h1 = h1 * masks[0]
        h2 = ad.relu(self.fc2(h1))
        if masks is not None:
            h2 = h2 * masks[1]
        return theta_pose + self.out(h2)

    def params(self):
        return self.fc1.params() + self.fc2.params() + self.out.params()


class Hallucinator:
    """Single-frame feature to context feature, as a residual correction."""

    def __init__(self, cfg: EncoderConfig, rng):
        d = cfg.feature_dim
        self.fc1 = Linear(rng, d, d, "hal.fc1")
        self.fc2 = Linear(rng, d, d, "hal.fc2")

    def __call__(self, phi):
        return phi + self.fc2(ad.relu(self.fc1(phi)))

    def params(self):
        return self.fc1.params() + self.fc2.params()


def hallucination_loss(phi_context, phi_hal, detach_target: bool = True):
    """Euclidean distance per row between context and hallucinated features.

    Returns the mean over rows. By default the context side is detached so
    the hallucinator chases the encoder rather than dragging it around.
    """
    target = phi_context.detach() if detach_target else phi_context
    return ad.mean_(ad.l2_norm_rows(target - phi_hal))


def pose_rotation_features(theta_pose):
    """Joint rotations (global excluded) as flattened matrices: (M,72)->(M,23,9)."""
    t = ad.as_tensor(theta_pose)
    m = t.shape[0]
    rots = body.rodrigues(ad.reshape(t[:, 3:], (m * N_BODY_JOINTS, 3)))
    return ad.reshape(rots, (m, N_BODY_JOINTS, 9))


class DiscriminatorSet:
    """25 least-squares critics: one per joint rotation, one over all joint
    rotations jointly, one over the shape coefficients.

    The 23 per-joint critics have independent weights but are stored stacked
    along a leading joint axis so one batched matmul evaluates all of them.
    """

    def __init__(self, cfg: EncoderConfig, rng):
        h = cfg.disc_hidden
        j = N_BODY_JOINTS
        lim1 = np.sqrt(6.0 / (9 + h))
        lim2 = np.sqrt(6.0 / (h + 1))
        self.joint_fc_w = ad.parameter(rng.uniform(-lim1, lim1, (j, 9, h)), name="disc.joints.fc.w")
        self.joint_fc_b = ad.parameter(np.zeros((j, 1, h)), name="disc.joints.fc.b")
        self.joint_out_w = ad.parameter(rng.uniform(-lim2, lim2, (j, h, 1)), name="disc.joints.out.w")
        self.joint_out_b = ad.parameter(np.zeros((j, 1, 1)), name="disc.joints.out.b")
        self.all_fc1 = Linear(rng, 9 * j, h, "disc.all.fc1")
        self.all_fc2 = Linear(rng, h, h, "disc.all.fc2")
        self.all_out = Linear(rng, h, 1, "disc.all.out")
        self.shape_fc = Linear(rng, SHAPE_DIM, h, "disc.shape.fc")
        self.shape_out = Linear(rng, h, 1, "disc.shape.out")

    def __call__(self, theta_pose, beta):
        """Scores (M, 25) for pose rows (M,72) and shape rows (M,10)."""
        feats = pose_rotation_features(theta_pose)
        m = feats.shape[0]
        j = N_BODY_JOINTS
        fj = ad.transpose(feats, (1, 0, 2))                      # (J, M, 9)
        ones_m = ad.constant(np.ones((j, m, 1)))
        h1 = ad.relu(ad.matmul(fj, self.joint_fc_w) + ad.matmul(ones_m, self.joint_fc_b))
        sj = ad.matmul(h1, self.joint_out_w) + ad.matmul(ones_m, self.joint_out_b)
        joint_scores = ad.transpose(ad.reshape(sj, (j, m)))      # (M, J)
        flat = ad.reshape(feats, (m, 9 * j))
        all_score = self.all_out(ad.relu(self.all_fc2(ad.relu(self.all_fc1(flat)))))
        shape_score = self.shape_out(ad.relu(self.shape_fc(ad.as_tensor(beta))))
        return ad.concat([joint_scores, all_score, shape_score], axis=1)

    @property
    def n_scores(self):
        return N_BODY_JOINTS + 2

    def params(self):
        out = [self.joint_fc_w, self.joint_fc_b, self.joint_out_w, self.joint_out_b]
        out.extend(self.all_fc1.params() + self.all_fc2.params() + self.all_out.params())
        out.extend(self.shape_fc.params() + self.shape_out.params())
        return out


@dataclass
class ModelNets:
    """All learnable components plus a named-parameter registry."""

    cfg: EncoderConfig
    temporal: TemporalEncoder
    regressor: IefRegressor
    deltas: dict
    hallucinator: object
    discriminators: DiscriminatorSet
    _registry: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int = 0) -> "ModelNets":
        cfg.validate()
        rngs = [np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(i,)))
                for i in range(5)]
        nets = cls(
            cfg=cfg,
            temporal=TemporalEncoder(cfg, rngs[0]),
            regressor=IefRegressor(cfg, rngs[1]),
            deltas={int(s): DeltaPredictor(cfg, int(s), rngs[2]) for s in cfg.delta_steps},
            hallucinator=Hallucinator(cfg, rngs[3]) if cfg.use_hal else None,
            discriminators=DiscriminatorSet(cfg, rngs[4]),
        )
        nets._build_registry()
        return nets

    def _build_registry(self):
        self._registry = {}
        for p in self.all_params():
            if p.name in self._registry:
                raise ValidationError(f"duplicate parameter name {p.name}")
            self._registry[p.name] = p

    def delta(self, step: int) -> DeltaPredictor:
        if int(step) not in self.deltas:
            raise ValidationError(f"delta step {step} not configured; have {sorted(self.deltas)}")
        return self.deltas[int(step)]

    def generator_params(self):
        out = self.temporal.params() + self.regressor.params()
        for s in sorted(self.deltas):
            out.extend(self.deltas[s].params())
        if self.hallucinator is not None:
            out.extend(self.hallucinator.params())
        return out

    def discriminator_params(self):
        return self.discriminators.params()

    def all_params(self):
        return self.generator_params() + self.discriminator_params()

    def named_params(self):
        return dict(self._registry)

    def param_count(self):
        return sum(p.size for p in self.all_params())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CONFIG_INT_FIELDS = ("feature_dim", "n_blocks", "kernel", "gn_groups", "gn_group_size",
                      "ief_iters", "ief_hidden", "disc_hidden")


def save_checkpoint(path, nets: ModelNets, step: int, adam_m=None, adam_v=None,
                    adam_steps=None):
    """Write parameters, optimizer moments and the step counter."""
    sections = [("step", np.array([int(step)]))]
    cfg = nets.cfg
    for name in _CONFIG_INT_FIELDS:
        sections.append((f"config/{name}", np.array([int(getattr(cfg, name))])))
    sections.append(("config/dropout_rate", np.array([cfg.dropout_rate])))
    sections.append(("config/delta_steps", np.array(sorted(cfg.delta_steps), dtype=np.int64)))
    sections.append(("config/use_hal", np.array([int(cfg.use_hal)])))
    named = nets.named_params()
    for name in sorted(named):
        p = named[name]
        sections.append((f"param/{name}", p.data))
        sections.append((f"shape/{name}", np.array(p.data.shape, dtype=np.int64)))
        if adam_m is not None and name in adam_m:
            sections.append((f"adam_m/{name}", adam_m[name]))
            sections.append((f"adam_v/{name}", adam_v[name]))
    if adam_steps is not None:
        sections.append(("adam_steps", np.array([int(adam_steps["gen"]), int(adam_steps["disc"])])))
    write_container(path, CKPT_MAGIC, sections)


def load_checkpoint(path):
    """Rebuild nets (and optimizer moments, if present) from a checkpoint.

    Returns (nets, step, adam_m, adam_v, adam_steps); the moment dicts are
    empty when the checkpoint carries none.
    """
    sec = read_container(path, CKPT_MAGIC)
    kwargs = {name: int(require(sec, f"config/{name}", path)[0]) for name in _CONFIG_INT_FIELDS}
    cfg = EncoderConfig(
        dropout_rate=float(require(sec, "config/dropout_rate", path)[0]),
        delta_steps=tuple(int(x) for x in require(sec, "config/delta_steps", path)),
        use_hal=bool(int(require(sec, "config/use_hal", path)[0])),
        **kwargs,
    )
    nets = ModelNets.create(cfg, seed=0)
    named = nets.named_params()
    for name, p in named.items():
        data = require(sec, f"param/{name}", path)
        shape = tuple(int(x) for x in require(sec, f"shape/{name}", path))
        if int(np.prod(shape)) != data.size:
            raise ValidationError(f"{path}: parameter {name} has {data.size} values for shape {shape}")
        p.data = data.reshape(shape)
    step = int(require(sec, "step", path)[0])
    adam_m, adam_v = {}, {}
    for name in named:
        if f"adam_m/{name}" in sec:
            adam_m[name] = sec[f"adam_m/{name}"].reshape(named[name].data.shape)
            adam_v[name] = sec[f"adam_v/{name}"].reshape(named[name].data.shape)
    adam_steps = None
    if "adam_steps" in sec:
        raw = sec["adam_steps"]
        adam_steps = {"gen": int(raw[0]), "disc": int(raw[1])}
    return nets, step, adam_m, adam_v, adam_steps
