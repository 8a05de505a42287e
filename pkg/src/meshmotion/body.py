"""Differentiable articulated body: shape blendshapes, kinematics, skinning.

The mesh function takes 10 shape coefficients and 72 pose values (24 joints
in axis-angle) and produces vertex positions in meters. Joint locations are
regressed linearly from the mesh. All operations build autodiff graphs, so
gradients flow from any downstream loss back into shape and pose.

Conventions:
  * joint 0 is the pelvis and carries the global rotation; rotations act
    about the shaped rest joint locations,
  * per-joint transforms are accumulated relative to the rest skeleton, so a
    zero pose yields exact identity transforms and skinning reproduces the
    shaped template bit for bit,
  * skinning uses the residual form v + sum_j w_ij (G_j - I) [v;1], which is
    ordinary linear blend skinning up to the (tiny) deviation of each weight
    row's sum from 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .container import ValidationError, read_container, require, write_container

N_JOINTS = 24
SHAPE_DIM = 10
POSE_DIM = 3 * N_JOINTS
THETA_DIM = SHAPE_DIM + POSE_DIM + 3  # shape + pose + camera = 85

SMALL_ANGLE = 1e-8  # below this rotation angle, use the series branch

MODEL_MAGIC = "HMMRMDL1"

# Kinematic tree: pelvis root, three-segment spine with neck and head,
# collar/shoulder/elbow/wrist/hand arms, hip/knee/ankle/foot legs.
PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8,
                    9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21], dtype=np.int64)

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
]

# T-pose scaffold used to lay out toy geometry (meters, pelvis at origin,
# +x left, +y up, +z forward).
REST_SCAFFOLD = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [0.09, -0.06, 0.00],   # l_hip
    [-0.09, -0.06, 0.00],  # r_hip
    [0.00, 0.11, 0.00],    # spine1
    [0.10, -0.50, 0.00],   # l_knee
    [-0.10, -0.50, 0.00],  # r_knee
    [0.00, 0.24, 0.00],    # spine2
    [0.11, -0.92, 0.00],   # l_ankle
    [-0.11, -0.92, 0.00],  # r_ankle
    [0.00, 0.37, 0.00],    # spine3
    [0.13, -0.98, 0.12],   # l_foot
    [-0.13, -0.98, 0.12],  # r_foot
    [0.00, 0.50, 0.00],    # neck
    [0.07, 0.45, 0.00],    # l_collar
    [-0.07, 0.45, 0.00],   # r_collar
    [0.00, 0.62, 0.00],    # head
    [0.17, 0.44, 0.00],    # l_shoulder
    [-0.17, 0.44, 0.00],   # r_shoulder
    [0.43, 0.44, 0.00],    # l_elbow
    [-0.43, 0.44, 0.00],   # r_elbow
    [0.68, 0.44, 0.00],    # l_wrist
    [-0.68, 0.44, 0.00],   # r_wrist
    [0.77, 0.44, 0.00],    # l_hand
    [-0.77, 0.44, 0.00],   # r_hand
])

# Preferred joints for keypoint rows, most informative first; a model with k
# keypoints uses the first k entries. Datasets with fewer annotated points
# map onto these via an index list.
KEYPOINT_JOINTS = [0, 1, 2, 4, 5, 7, 8, 12, 16, 17, 18, 19, 20, 21,
                   15, 3, 6, 9, 13, 14, 10, 11, 22, 23]


@dataclass
class BodyModel:
    """Toy articulated body with the same parameter dimensions as the full-size one."""

    template: np.ndarray        # (N, 3) rest vertices
    shape_dirs: np.ndarray      # (N, 3, 10) blendshape basis, orthonormal columns
    joint_regressor: np.ndarray  # (k, N), nonnegative rows summing to 1
    parents: np.ndarray         # (24,), parents[0] == -1
    skin_weights: np.ndarray    # (N, 24), nonnegative rows summing to 1
    rest_regressor: np.ndarray  # (24, N), regresses skeleton joints from vertices

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.joint_regressor.shape[0]

    def validate(self, source="model"):
        n = self.template.shape[0]
        k = self.joint_regressor.shape[0]
        checks = [
            (self.template.shape == (n, 3), f"template shape {self.template.shape}"),
            (self.shape_dirs.shape == (n, 3, SHAPE_DIM), f"shape_dirs shape {self.shape_dirs.shape}"),
            (self.joint_regressor.shape == (k, n), f"joint_regressor shape {self.joint_regressor.shape}"),
            (self.parents.shape == (N_JOINTS,), f"parents shape {self.parents.shape}"),
            (self.skin_weights.shape == (n, N_JOINTS), f"skin_weights shape {self.skin_weights.shape}"),
            (self.rest_regressor.shape == (N_JOINTS, n), f"rest_regressor shape {self.rest_regressor.shape}"),
        ]
        for ok, what in checks:
            if not ok:
                raise ValidationError(f"{source}: inconsistent field, {what}")
        for name, arr in (("template", self.template), ("shape_dirs", self.shape_dirs),
                          ("joint_regressor", self.joint_regressor),
                          ("skin_weights", self.skin_weights), ("rest_regressor", self.rest_regressor)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{source}: non-finite values in {name}")
        if self.parents[0] != -1:
            raise ValidationError(f"{source}: parents[0] must be -1, got {self.parents[0]}")
        for j in range(1, N_JOINTS):
            if not 0 <= self.parents[j] < j:
                raise ValidationError(f"{source}: parents[{j}]={self.parents[j]} does not define "
                                      "a tree rooted at joint 0")
        for name, mat in (("joint_regressor", self.joint_regressor), ("skin_weights", self.skin_weights)):
            if np.any(mat < -1e-12):
                raise ValidationError(f"{source}: negative entries in {name}")
            sums = mat.sum(axis=1)
            worst = np.argmax(np.abs(sums - 1.0))
            if abs(sums[worst] - 1.0) > 1e-9:
                raise ValidationError(f"{source}: {name} row {worst} sums to {sums[worst]:.12f}, "
                                      "expected 1 within 1e-9")
        return self


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def rodrigues(axis_angle) -> ad.Tensor:
    """Axis-angle vector(s) to rotation matrix(es): (3,) -> (3,3), (M,3) -> (M,3,3).

    Differentiable everywhere including the zero vector: below an angle of
    1e-8 the sinc coefficients switch to their series, and the large-angle
    branch uses the half-angle identity so (1-cos a)/a^2 never cancels.
    """
    v = ad.as_tensor(axis_angle)
    single = v.ndim == 1
    if single:
        v = ad.reshape(v, (1, 3))
    if v.ndim != 2 or v.shape[1] != 3:
        raise ad.ShapeError(f"rodrigues expects (3,) or (M,3), got {tuple(axis_angle.shape)}")
    m = v.shape[0]

    s = ad.sum_(ad.mul(v, v), axis=1, keepdims=True)            # (M,1) angle^2
    small = ad.constant((s.data < SMALL_ANGLE ** 2).astype(float))
    big = ad.constant(1.0 - small.data)
    s_safe = s + small                                           # >= 1 on the small branch
    a = ad.sqrt(s_safe)
    half = a * 0.5
    c1_big = ad.div(ad.sin(a), a)
    half_sinc = ad.div(ad.sin(half), half)
    c2_big = half_sinc * half_sinc * 0.5
    c1_small = 1.0 - s * (1.0 / 6.0)
    c2_small = 0.5 - s * (1.0 / 24.0)
    c1 = small * c1_small + big * c1_big
    c2 = small * c2_small + big * c2_big

    x, y, z = v[:, 0:1], v[:, 1:2], v[:, 2:3]
    zero = ad.constant(np.zeros((m, 1)))
    k_flat = ad.concat([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    k = ad.reshape(k_flat, (m, 3, 3))
    k2 = ad.matmul(k, k)
    ones9 = ad.constant(np.ones((1, 9)))
    c1e = ad.reshape(ad.matmul(c1, ones9), (m, 3, 3))
    c2e = ad.reshape(ad.matmul(c2, ones9), (m, 3, 3))
    eye = ad.constant(np.broadcast_to(np.eye(3), (m, 3, 3)))
    rot = eye + c1e * k + c2e * k2
    return ad.reshape(rot, (3, 3)) if single else rot


# ---------------------------------------------------------------------------
# Kinematics and skinning
# ---------------------------------------------------------------------------


def _as_batch(t, width):
    t = ad.as_tensor(t)
    if t.ndim == 1:
        if t.shape[0] != width:
            raise ad.ShapeError(f"expected ({width},) or (B,{width}), got {tuple(t.shape)}")
        return ad.reshape(t, (1, width)), True
    if t.ndim != 2 or t.shape[1] != width:
        raise ad.ShapeError(f"expected ({width},) or (B,{width}), got {tuple(t.shape)}")
    return t, False


def shaped_template(model: BodyModel, beta) -> ad.Tensor:
    """Template plus blendshape offsets: (B,10) -> (B,N,3)."""
    beta, single = _as_batch(beta, SHAPE_DIM)
    b = beta.shape[0]
    n = model.n_vertices
    dirs_flat = ad.constant(np.transpose(model.shape_dirs, (2, 0, 1)).reshape(SHAPE_DIM, n * 3))
    offs = ad.reshape(ad.matmul(beta, dirs_flat), (b, n, 3))
    shaped = ad.tile_leading(model.template, b) + offs
    return shaped[0] if single else shaped


def _rest_relative_transforms(model: BodyModel, shaped, theta):
    """Per-joint transforms relative to the shaped rest skeleton.

    shaped: (B,N,3) tensor; theta: (B,72) tensor. Returns (G, joints_rest,
    joints_posed) with G (B,24,4,4) mapping rest-space points to posed space
    and identity at zero pose.
    """
    b = shaped.shape[0]
    joints_rest = ad.matmul(ad.tile_leading(model.rest_regressor, b), shaped)  # (B,24,3)
    rots = rodrigues(ad.reshape(theta, (b * N_JOINTS, 3)))
    rots = ad.reshape(rots, (b, N_JOINTS, 3, 3))
    bottom = ad.constant(np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0]), (b, 1, 4)))
    g_parts = []
    for j in range(N_JOINTS):
        r_j = rots[:, j]                                        # (B,3,3)
        j_j = ad.reshape(joints_rest[:, j:j + 1, :], (b, 3, 1))  # (B,3,1)
        t_j = j_j - ad.matmul(r_j, j_j)
        local = ad.concat([ad.concat([r_j, t_j], axis=2), bottom], axis=1)  # (B,4,4)
        parent = int(model.parents[j])
        g_j = local if parent < 0 else ad.matmul(g_parts[parent], local)
        g_parts.append(g_j)
    g = ad.concat([ad.reshape(p, (b, 1, 4, 4)) for p in g_parts], axis=1)
    jh = ad.concat([ad.reshape(joints_rest, (b * N_JOINTS, 3, 1)),
                    ad.constant(np.ones((b * N_JOINTS, 1, 1)))], axis=1)
    posed = ad.matmul(ad.reshape(g, (b * N_JOINTS, 4, 4)), jh)
    joints_posed = ad.reshape(posed[:, 0:3, :], (b, N_JOINTS, 3))
    return g, joints_rest, joints_posed


def forward_kinematics(model: BodyModel, beta, theta):
    """World transforms (...,24,4,4) and posed joints (...,24,3).

    Joint j's transform composes its parent's with the local rotation about
    the shaped rest joint; joint 0 carries the global rotation.
    """
    beta_b, single_b = _as_batch(beta, SHAPE_DIM)
    theta_b, single_t = _as_batch(theta, POSE_DIM)
    single = single_b and single_t
    shaped = shaped_template(model, beta_b)
    g, _, joints_posed = _rest_relative_transforms(model, shaped, theta_b)
    b = shaped.shape[0]
    rot_world = g[:, :, 0:3, 0:3]
    trans = ad.reshape(joints_posed, (b, N_JOINTS, 3, 1))
    bottom = ad.constant(np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0]), (b, N_JOINTS, 1, 4)))
    world = ad.concat([ad.concat([rot_world, trans], axis=3), bottom], axis=2)
    if single:
        return world[0], joints_posed[0]
    return world, joints_posed


def skin(model: BodyModel, beta, theta) -> ad.Tensor:
    """Mesh vertices under shape and pose: (...,N,3)."""
    beta_b, single_b = _as_batch(beta, SHAPE_DIM)
    theta_b, single_t = _as_batch(theta, POSE_DIM)
    single = single_b and single_t
    shaped = shaped_template(model, beta_b)
    g, _, _ = _rest_relative_transforms(model, shaped, theta_b)
    b, n = shaped.shape[0], model.n_vertices
    eye_flat = np.broadcast_to(np.eye(4).reshape(16), (b, N_JOINTS, 16))
    h_flat = ad.reshape(g, (b, N_JOINTS, 16)) - ad.constant(eye_flat)
    per_vertex = ad.matmul(ad.tile_leading(model.skin_weights, b), h_flat)   # (B,N,16)
    vh = ad.concat([shaped, ad.constant(np.ones((b, n, 1)))], axis=2)
    moved = ad.matmul(ad.reshape(per_vertex, (b * n, 4, 4)), ad.reshape(vh, (b * n, 4, 1)))
    verts = shaped + ad.reshape(moved[:, 0:3, :], (b, n, 3))
    return verts[0] if single else verts


def regress_joints(model: BodyModel, vertices) -> ad.Tensor:
    """Keypoint locations X = W @ vertices: (...,N,3) -> (...,k,3)."""
    v = ad.as_tensor(vertices)
    single = v.ndim == 2
    if single:
        v = ad.reshape(v, (1,) + tuple(v.shape))
    if v.shape[-2] != model.n_vertices:
        raise ad.ShapeError(f"regress_joints: {v.shape[-2]} vertices != regressor columns "
                            f"{model.n_vertices}")
    x = ad.matmul(ad.tile_leading(model.joint_regressor, v.shape[0]), v)
    return x[0] if single else x


def keypoints_3d(model: BodyModel, beta, theta) -> ad.Tensor:
    """Convenience path: skin then regress."""
    return regress_joints(model, skin(model, beta, theta))


# ---------------------------------------------------------------------------
# Toy model construction and serialization
# ---------------------------------------------------------------------------


def _soft_rows(points, anchors, sigma, top=None):
    """Rows of normalized exp(-d^2/sigma^2) weights from anchors to points."""
    d2 = ((anchors[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    w = np.exp(-d2 / (sigma * sigma))
    if top is not None:
        cut = np.sort(w, axis=1)[:, -top][:, None]
        w = np.where(w >= cut, w, 0.0)
    return w / w.sum(axis=1, keepdims=True)


def make_toy_model(seed: int = 0, n_vertices: int = 120, k_keypoints: int = 14) -> BodyModel:
    """Procedural stand-in for a full-size body asset.

    Vertices are scattered around the bone segments of a fixed humanoid
    scaffold; skin weights and both regressors are soft assignments to
    nearby joints. Deterministic in the seed.
    """
    if n_vertices < N_JOINTS:
        raise ValidationError(f"n_vertices={n_vertices} is too small, need at least {N_JOINTS}")
    if not 6 <= k_keypoints <= N_JOINTS:
        raise ValidationError(f"k_keypoints={k_keypoints} out of range [6, {N_JOINTS}]")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(77,)))

    verts = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        j = i % N_JOINTS
        parent = PARENTS[j]
        if parent < 0:
            base = REST_SCAFFOLD[j]
        else:
            alpha = rng.uniform(0.35, 1.0)
            base = alpha * REST_SCAFFOLD[j] + (1 - alpha) * REST_SCAFFOLD[parent]
        verts[i] = base + rng.normal(0.0, 0.035, size=3)

    skin_w = _soft_rows(REST_SCAFFOLD, verts, sigma=0.10, top=3)  # (N,24)
    rest_reg = _soft_rows(verts, REST_SCAFFOLD, sigma=0.07)        # (24,N)

    # center the rest pelvis at the origin so global rotation acts about it
    pelvis = rest_reg[0] @ verts
    verts = verts - pelvis

    kp_anchor = REST_SCAFFOLD[KEYPOINT_JOINTS[:k_keypoints]] - pelvis
    joint_reg = _soft_rows(verts, kp_anchor, sigma=0.07)

    dirs = rng.standard_normal((n_vertices * 3, SHAPE_DIM))
    q, _ = np.linalg.qr(dirs)
    q = q * np.sign(q[0])  # fix QR sign ambiguity for cross-run determinism
    shape_dirs = q.reshape(n_vertices, 3, SHAPE_DIM)

    model = BodyModel(
        template=verts,
        shape_dirs=shape_dirs,
        joint_regressor=joint_reg,
        parents=PARENTS.copy(),
        skin_weights=skin_w,
        rest_regressor=rest_reg,
    )
    return model.validate("make_toy_model")


def save_model(model: BodyModel, path):
    model.validate("save_model")
    write_container(path, MODEL_MAGIC, [
        ("n_vertices", np.array([model.n_vertices])),
        ("n_joints", np.array([N_JOINTS])),
        ("k_keypoints", np.array([model.n_keypoints])),
        ("template", model.template),
        ("shape_dirs", model.shape_dirs),
        ("joint_regressor", model.joint_regressor),
        ("parents", model.parents),
        ("skin_weights", model.skin_weights),
        ("rest_regressor", model.rest_regressor),
    ])


def load_model(path) -> BodyModel:
    sec = read_container(path, MODEL_MAGIC)
    n = int(require(sec, "n_vertices", path)[0])
    k = int(require(sec, "k_keypoints", path)[0])

    def field(name, shape, dtype=float):
        arr = require(sec, name, path)
        want = int(np.prod(shape))
        if arr.size != want:
            raise ValidationError(f"{path}: section '{name}' has {arr.size} elements, expected {want}")
        return arr.reshape(shape)

    model = BodyModel(
        template=field("template", (n, 3)),
        shape_dirs=field("shape_dirs", (n, 3, SHAPE_DIM)),
        joint_regressor=field("joint_regressor", (k, n)),
        parents=field("parents", (N_JOINTS,)).astype(np.int64),
        skin_weights=field("skin_weights", (n, N_JOINTS)),
        rest_regressor=field("rest_regressor", (N_JOINTS, n)),
    )
    return model.validate(str(path))
