"""Deformable-keypoint classification model.

Pipeline per scene:

    sample keypoints -> local encoder (radius group + linear/relu + max
    pool) -> edge offset features over keypoint kNN -> bounded position
    update -> set abstraction at the moved positions -> optional context
    gate -> linear head -> 4-way class scores per keypoint.

Every stage is a forward/backward pair over float64 arrays; the model
composes them by hand in reverse order, accumulating into Param.grad.
Keypoint ground truth and evaluation ranges always refer to the original
sampled positions, never the moved ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Scene, label_keypoints
from .diffkit import (
    ParamStore,
    activation_backward,
    activation_forward,
    linear_backward,
    linear_forward,
    softmax_cross_entropy,
    stable_sigmoid,
)
from .spatial import GridIndex, farthest_point_sampling, knn_query, radius_group, random_sampling

N_CLASSES = 4  # three object classes + background


class TooFewKeypointsError(ValueError):
    """Deformation needs strictly more keypoints than k_def neighbors."""


@dataclass(frozen=True)
class DeformConfig:
    k_def: int = 8  # kNN neighborhood size among keypoints
    d_feat: int = 16  # keypoint feature dim produced by the encoder
    d_off: int = 8  # offset-feature dim
    delta_max: float = 1.0  # meters; per-axis displacement bound

    def __post_init__(self):
        if self.k_def < 1 or not self.delta_max > 0.0:
            raise ValueError("need k_def >= 1 and delta_max > 0")


@dataclass(frozen=True)
class GateConfig:
    d_in: int = 32
    d_out: int = 32


@dataclass(frozen=True)
class SAConfig:
    radius: float = 0.6
    max_samples: int = 16
    mlp_dims: tuple[int, ...] = (32, 32)

    def __post_init__(self):
        if not self.radius > 0.0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class ModelConfig:
    """Dimension-consistent bundle of all stage configs."""

    deform: DeformConfig = DeformConfig()
    encoder: SAConfig = SAConfig(radius=1.0, max_samples=16, mlp_dims=(16,))
    sa: SAConfig = SAConfig()
    gate: GateConfig = GateConfig()

    def __post_init__(self):
        if self.encoder.mlp_dims != (self.deform.d_feat,):
            raise ValueError("encoder.mlp_dims must equal (deform.d_feat,)")
        d_a = self.sa.mlp_dims[-1]
        if self.gate.d_in != d_a:
            raise ValueError("gate.d_in must equal the set-abstraction output dim")
        if self.gate.d_out != d_a:
            raise ValueError("gate.d_out must equal the set-abstraction output dim")


@dataclass(frozen=True)
class AblationFlags:
    use_deform: bool = True
    use_gate: bool = True
    # verification hook: run the gate stage with g forced to 1
    gate_bypass: bool = False

    @property
    def variant(self) -> str:
        if self.use_deform and self.use_gate:
            return "deform+gate"
        if self.use_deform:
            return "deform"
        if self.use_gate:
            return "gate"
        return "baseline"


def derive_seed(*keys: int) -> int:
    """Collision-resistant child seed from an integer key path."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def build_params(seed: int, cfg: ModelConfig) -> ParamStore:
    """All learnable tensors; creation order is fixed for reproducibility.

    The alignment map starts at zero so the deformation branch is exactly
    the identity at initialization; nonzero displacements develop only
    where they reduce the loss.  Everything else uses the standard
    variance-preserving uniform init.
    """
    dc, sa, gate = cfg.deform, cfg.sa, cfg.gate
    store = ParamStore(seed=seed)
    store.add_weight("enc.w", dc.d_feat, 4)
    store.add_bias("enc.b", dc.d_feat)
    store.add_weight("offset.w", dc.d_off, dc.d_feat + 3)
    store.add_zeros("align.w", (3, dc.d_off))
    d_prev = 4
    for li, d in enumerate(sa.mlp_dims):
        store.add_weight(f"sa.w{li}", d, d_prev)
        store.add_bias(f"sa.b{li}", d)
        d_prev = d
    store.add_weight("gate.w", gate.d_out, gate.d_in)
    store.add_bias("gate.b", gate.d_out)
    store.add_weight("fc.w", gate.d_out, gate.d_in)
    store.add_weight("head.w", N_CLASSES, d_prev)
    store.add_bias("head.b", N_CLASSES)
    return store


# ---------------------------------------------------------------------------
# Keypoint sampling & scene preparation


def sample_keypoints(scene: Scene, count: int, kind: str = "fps", seed: int = 0) -> np.ndarray:
    """Keypoint indices into the scene cloud; count is clamped to cloud size."""
    xyz = scene.cloud.xyz
    k = min(count, xyz.shape[0])
    if kind == "fps":
        return farthest_point_sampling(xyz, k, seed=seed)
    if kind == "random":
        return random_sampling(xyz, k, seed=seed)
    raise ValueError(f"unknown sampler kind {kind!r}")


def keypoint_knn(positions: np.ndarray, k_def: int) -> Optional[np.ndarray]:
    """(m, k_def) neighbor indices among keypoints, self excluded.

    Returns None when there are too few keypoints to provide k_def
    non-self neighbors.
    """
    m = positions.shape[0]
    if m <= k_def:
        return None
    ns = knn_query(GridIndex.for_knn(positions), positions, k_def + 1)
    out = np.empty((m, k_def), dtype=np.int64)
    for i, idx in enumerate(ns.groups):
        trimmed = idx[idx != i]
        out[i] = trimmed[:k_def]
    return out


@dataclass
class PreparedScene:
    """Param-independent per-scene state, reusable across training steps."""

    scene: Scene
    kp_indices: np.ndarray
    kp_positions: np.ndarray
    kp_classes: np.ndarray  # ground truth at the original positions
    enc_groups: list[np.ndarray]
    knn: Optional[np.ndarray]
    sa_grid: GridIndex
    enc_seed: int
    sa_seed: int


def prepare_scene(scene: Scene, kp_indices: np.ndarray, cfg: ModelConfig, seed: int) -> PreparedScene:
    xyz = scene.cloud.xyz
    kp_positions = xyz[kp_indices]
    enc_seed = derive_seed(seed, 0)
    sa_seed = derive_seed(seed, 1)
    enc_grid = GridIndex.for_radius(xyz, cfg.encoder.radius)
    enc_groups = radius_group(
        enc_grid, kp_positions, cfg.encoder.radius, cfg.encoder.max_samples, enc_seed
    ).groups
    return PreparedScene(
        scene=scene,
        kp_indices=kp_indices,
        kp_positions=kp_positions,
        kp_classes=label_keypoints(kp_positions, scene.labels),
        enc_groups=enc_groups,
        knn=keypoint_knn(kp_positions, cfg.deform.k_def),
        sa_grid=GridIndex.for_radius(xyz, cfg.sa.radius),
        enc_seed=enc_seed,
        sa_seed=sa_seed,
    )


# ---------------------------------------------------------------------------
# Stage forward/backward pairs


def _segment_max(rows: np.ndarray, offsets: np.ndarray):
    """Componentwise max per contiguous row segment.

    Matches pool_forward("max", ...) semantics: empty segments pool to
    zero, and the argmax row index (for gradient routing) is the first
    maximizing row of the segment.  Returns (pooled, arg_rows) where
    arg_rows is -1 for empty segments.
    """
    n_seg = len(offsets) - 1
    d = rows.shape[1]
    pooled = np.zeros((n_seg, d))
    arg_rows = np.full((n_seg, d), -1, dtype=np.int64)
    sizes = np.diff(offsets)
    nonempty = np.flatnonzero(sizes > 0)
    if nonempty.size == 0:
        return pooled, arg_rows
    starts = offsets[nonempty]
    pooled[nonempty] = np.maximum.reduceat(rows, starts, axis=0)
    # first row attaining the segment max: minimize row id over maximizers
    row_ids = np.arange(rows.shape[0])
    seg_of_row = np.repeat(np.arange(n_seg), sizes)
    hit = rows == pooled[seg_of_row]
    masked = np.where(hit, row_ids[:, None], rows.shape[0])
    arg_rows[nonempty] = np.minimum.reduceat(masked, starts, axis=0)
    return pooled, arg_rows


def point_mlp_forward(
    centers: np.ndarray,
    cloud_xyz: np.ndarray,
    cloud_intensity: np.ndarray,
    groups: Sequence[np.ndarray],
    layers: Sequence[tuple[np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, tuple]:
    """Shared set-abstraction core: relative-frame points through a shared
    linear/relu stack, max-pooled per group; empty groups yield zeros.

    Per grouped point the input row is (point - center) concatenated with
    its intensity, so the output is translation invariant by construction.
    """
    sizes = np.array([len(g) for g in groups], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    flat = np.concatenate([g for g in groups if len(g)]) if total else np.empty(0, np.int64)
    owner = np.repeat(np.arange(len(groups)), sizes)
    x = np.empty((total, 4))
    x[:, :3] = cloud_xyz[flat] - centers[owner]
    x[:, 3] = cloud_intensity[flat]
    t = x
    layer_caches = []
    for w, b in layers:
        z, lin_cache = linear_forward(t, w, b)
        t, act_cache = activation_forward("relu", z)
        layer_caches.append((lin_cache, act_cache))
    pooled, arg_rows = _segment_max(t, offsets)
    cache = (groups, offsets, layer_caches, arg_rows, x.shape)
    return pooled, cache


def point_mlp_backward(grad_out: np.ndarray, cache: tuple):
    """Returns (grad_centers, [(grad_w, grad_b), ...])."""
    groups, offsets, layer_caches, arg_rows, x_shape = cache
    grad_t = np.zeros((x_shape[0], grad_out.shape[1]))
    valid = arg_rows >= 0
    np.add.at(
        grad_t,
        (arg_rows[valid], np.broadcast_to(np.arange(grad_out.shape[1]), arg_rows.shape)[valid]),
        grad_out[valid],
    )
    layer_grads = []
    for lin_cache, act_cache in reversed(layer_caches):
        grad_z = activation_backward(grad_t, act_cache)
        grad_t, grad_w, grad_b = linear_backward(grad_z, lin_cache)
        layer_grads.append((grad_w, grad_b))
    layer_grads.reverse()
    grad_centers = np.zeros((len(groups), 3))
    np.subtract.at(grad_centers, np.repeat(np.arange(len(groups)), np.diff(offsets)), grad_t[:, :3])
    return grad_centers, layer_grads


def encode_keypoints(
    scene: Scene,
    kp_indices: np.ndarray,
    params: ParamStore,
    cfg: ModelConfig,
    seed: int = 0,
) -> tuple[np.ndarray, tuple]:
    """Per-keypoint features from local geometry around the sampled position."""
    prep = prepare_scene(scene, kp_indices, cfg, seed)
    return point_mlp_forward(
        prep.kp_positions,
        scene.cloud.xyz,
        scene.cloud.intensity,
        prep.enc_groups,
        [(params["enc.w"].value, params["enc.b"].value)],
    )


def edge_offset_forward(
    features: np.ndarray,
    positions: np.ndarray,
    neighbor_idx: np.ndarray,
    w_offset: np.ndarray,
) -> tuple[np.ndarray, tuple]:
    """Offset features from neighbor differences.

    Edge input per (i, j) is [f_i - f_j ; v_i - v_j]; each edge goes
    through the shared offset map, edges are averaged per keypoint, and a
    ReLU caps the stage.  Neighbor lists are index-sorted internally so
    any listing order produces bit-identical output.
    """
    if neighbor_idx is None or features.shape[0] <= neighbor_idx.shape[1]:
        raise TooFewKeypointsError("need more keypoints than k_def neighbors")
    m, k = neighbor_idx.shape
    nbr = np.sort(neighbor_idx, axis=1)
    fd = features[:, None, :] - features[nbr]  # (m, k, d)
    pd = positions[:, None, :] - positions[nbr]  # (m, k, 3)
    u = np.concatenate([fd, pd], axis=2).reshape(m * k, -1)
    e = (u @ w_offset.T).reshape(m, k, -1)
    s = e.mean(axis=1)
    out, act_cache = activation_forward("relu", s)
    return out, (nbr, u, w_offset, act_cache, features.shape)


def edge_offset_backward(grad_out: np.ndarray, cache: tuple):
    """Returns (grad_features, grad_w_offset); positions are constants."""
    nbr, u, w_offset, act_cache, feat_shape = cache
    m, k = nbr.shape
    d = feat_shape[1]
    grad_s = activation_backward(grad_out, act_cache)
    grad_e = np.repeat(grad_s / k, k, axis=0)  # (m*k, d_off)
    grad_w = grad_e.T @ u
    grad_u = (grad_e @ w_offset).reshape(m, k, -1)
    grad_fd = grad_u[:, :, :d]
    grad_features = grad_fd.sum(axis=1)
    np.subtract.at(grad_features, nbr.ravel(), grad_fd.reshape(m * k, d))
    return grad_features, grad_w


# tanh/sigmoid saturate to exactly 1.0 in float64 once |x| exceeds ~19/~37;
# clamping just inside 1 keeps the open-interval contracts (displacement
# strictly under delta_max, gate strictly inside (0, 1)) true for every
# weight value.  The true derivative there is < 6e-17, so gradients built
# from the clamped value are indistinguishable from the exact ones.
SQUASH_CAP = 1.0 - 1e-12


def deform_forward(
    positions: np.ndarray,
    offset_features: np.ndarray,
    w_align: np.ndarray,
    delta_max: float,
) -> tuple[np.ndarray, tuple]:
    """Bounded position update: v' = v + delta_max * tanh(w_align f')."""
    z = offset_features @ w_align.T
    th = np.clip(np.tanh(z), -SQUASH_CAP, SQUASH_CAP)
    moved = positions + delta_max * th
    return moved, (offset_features, w_align, th, delta_max)


def deform_backward(grad_moved: np.ndarray, cache: tuple):
    """Returns (grad_offset_features, grad_w_align)."""
    offset_features, w_align, th, delta_max = cache
    grad_z = delta_max * grad_moved * (1.0 - th * th)
    return grad_z @ w_align, grad_z.T @ offset_features


def sa_layer_weights(params: ParamStore, cfg: ModelConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    return [
        (params[f"sa.w{li}"].value, params[f"sa.b{li}"].value)
        for li in range(len(cfg.sa.mlp_dims))
    ]


def set_abstraction(
    centers: np.ndarray,
    scene: Scene,
    cfg: ModelConfig,
    params: ParamStore,
    seed: int = 0,
    grid: Optional[GridIndex] = None,
) -> tuple[np.ndarray, tuple]:
    """Aggregated features at the (possibly moved) keypoint positions."""
    if grid is None:
        grid = GridIndex.for_radius(scene.cloud.xyz, cfg.sa.radius)
    groups = radius_group(grid, centers, cfg.sa.radius, cfg.sa.max_samples, seed).groups
    pooled, cache = point_mlp_forward(
        centers, scene.cloud.xyz, scene.cloud.intensity, groups, sa_layer_weights(params, cfg)
    )
    return pooled, cache


def gate_forward(
    agg: np.ndarray,
    w_gate: np.ndarray,
    b_gate: np.ndarray,
    w_fc: np.ndarray,
    bypass: bool = False,
) -> tuple[np.ndarray, tuple]:
    """Sigmoid self-gating: out = sigmoid(W_gate a + b_gate) * (W_fc a).

    With bypass the gate is pinned to exactly 1, which reduces the stage
    to the plain W_fc map (used to verify the gating plumbing).
    """
    wx, fc_cache = linear_forward(agg, w_fc)
    if bypass:
        return wx, (None, None, fc_cache, None, True)
    c, gate_lin_cache = linear_forward(agg, w_gate, b_gate)
    g = np.clip(stable_sigmoid(c), 1.0 - SQUASH_CAP, SQUASH_CAP)
    out = g * wx
    return out, (g, wx, fc_cache, gate_lin_cache, False)


def gate_backward(grad_out: np.ndarray, cache: tuple):
    """Returns (grad_agg, grad_w_gate, grad_b_gate, grad_w_fc)."""
    g, wx, fc_cache, gate_lin_cache, bypass = cache
    if bypass:
        grad_agg, grad_w_fc, _ = linear_backward(grad_out, fc_cache)
        return grad_agg, None, None, grad_w_fc
    grad_wx = grad_out * g
    grad_g = grad_out * wx
    grad_agg_fc, grad_w_fc, _ = linear_backward(grad_wx, fc_cache)
    grad_c = grad_g * g * (1.0 - g)
    grad_agg_gate, grad_w_gate, grad_b_gate = linear_backward(grad_c, gate_lin_cache)
    return grad_agg_fc + grad_agg_gate, grad_w_gate, grad_b_gate, grad_w_fc


# ---------------------------------------------------------------------------
# Full pipeline


@dataclass
class ForwardCache:
    flags: AblationFlags
    enc_cache: Optional[tuple]
    edge_cache: Optional[tuple]
    deform_cache: Optional[tuple]
    sa_cache: tuple
    gate_cache: Optional[tuple]
    head_cache: tuple
    moved_positions: np.ndarray
    sa_groups: list[np.ndarray]
    features: Optional[np.ndarray]
    offset_features: Optional[np.ndarray]
    agg: np.ndarray
    gated: Optional[np.ndarray]


def forward_prepared(
    prep: PreparedScene,
    params: ParamStore,
    cfg: ModelConfig,
    flags: AblationFlags = AblationFlags(),
) -> tuple[np.ndarray, ForwardCache]:
    """Class scores (m, 4) for every keypoint of a prepared scene."""
    cloud = prep.scene.cloud
    enc_cache = edge_cache = deform_cache = gate_cache = None
    features = offset_features = None

    if flags.use_deform:
        if prep.knn is None:
            raise TooFewKeypointsError(
                f"{prep.kp_positions.shape[0]} keypoints <= k_def={cfg.deform.k_def}"
            )
        features, enc_cache = point_mlp_forward(
            prep.kp_positions,
            cloud.xyz,
            cloud.intensity,
            prep.enc_groups,
            [(params["enc.w"].value, params["enc.b"].value)],
        )
        offset_features, edge_cache = edge_offset_forward(
            features, prep.kp_positions, prep.knn, params["offset.w"].value
        )
        moved, deform_cache = deform_forward(
            prep.kp_positions, offset_features, params["align.w"].value, cfg.deform.delta_max
        )
    else:
        moved = prep.kp_positions

    sa_groups = radius_group(
        prep.sa_grid, moved, cfg.sa.radius, cfg.sa.max_samples, prep.sa_seed
    ).groups
    agg, sa_cache = point_mlp_forward(
        moved, cloud.xyz, cloud.intensity, sa_groups, sa_layer_weights(params, cfg)
    )

    gated = None
    if flags.use_gate:
        gated, gate_cache = gate_forward(
            agg, params["gate.w"].value, params["gate.b"].value, params["fc.w"].value,
            bypass=flags.gate_bypass,
        )
        head_in = gated
    else:
        head_in = agg

    scores, head_cache = linear_forward(head_in, params["head.w"].value, params["head.b"].value)
    cache = ForwardCache(
        flags=flags,
        enc_cache=enc_cache,
        edge_cache=edge_cache,
        deform_cache=deform_cache,
        sa_cache=sa_cache,
        gate_cache=gate_cache,
        head_cache=head_cache,
        moved_positions=moved,
        sa_groups=sa_groups,
        features=features,
        offset_features=offset_features,
        agg=agg,
        gated=gated,
    )
    return scores, cache


def forward(
    scene: Scene,
    kp_indices: np.ndarray,
    params: ParamStore,
    cfg: ModelConfig,
    flags: AblationFlags = AblationFlags(),
    seed: int = 0,
) -> tuple[np.ndarray, ForwardCache]:
    """One-shot forward over a raw scene (prepares then runs)."""
    return forward_prepared(prepare_scene(scene, kp_indices, cfg, seed), params, cfg, flags)


def backward_prepared(
    grad_scores: np.ndarray,
    cache: ForwardCache,
    params: ParamStore,
) -> None:
    """Chain all stage backwards in reverse order; accumulates Param.grad."""
    flags = cache.flags
    grad_head_in, grad_head_w, grad_head_b = linear_backward(grad_scores, cache.head_cache)
    params["head.w"].grad += grad_head_w
    params["head.b"].grad += grad_head_b

    if flags.use_gate:
        grad_agg, grad_w_gate, grad_b_gate, grad_w_fc = gate_backward(
            grad_head_in, cache.gate_cache
        )
        params["fc.w"].grad += grad_w_fc
        if grad_w_gate is not None:
            params["gate.w"].grad += grad_w_gate
            params["gate.b"].grad += grad_b_gate
    else:
        grad_agg = grad_head_in

    grad_centers, sa_grads = point_mlp_backward(grad_agg, cache.sa_cache)
    for li, (gw, gb) in enumerate(sa_grads):
        params[f"sa.w{li}"].grad += gw
        params[f"sa.b{li}"].grad += gb

    if flags.use_deform:
        grad_offset, grad_w_align = deform_backward(grad_centers, cache.deform_cache)
        params["align.w"].grad += grad_w_align
        grad_features, grad_w_offset = edge_offset_backward(grad_offset, cache.edge_cache)
        params["offset.w"].grad += grad_w_offset
        _, enc_grads = point_mlp_backward(grad_features, cache.enc_cache)
        params["enc.w"].grad += enc_grads[0][0]
        params["enc.b"].grad += enc_grads[0][1]
    # without deformation the original positions are constants: nothing
    # upstream of set abstraction receives gradient


def loss_and_backward(
    scores: np.ndarray,
    true_classes: np.ndarray,
    params: ParamStore,
    cache: ForwardCache,
) -> float:
    """Mean softmax cross-entropy; populates grads for every used Param."""
    loss, grad_scores = softmax_cross_entropy(scores, true_classes)
    backward_prepared(grad_scores, cache, params)
    return loss


def forward_kink_margin(prep: PreparedScene, cache: ForwardCache, cfg: ModelConfig) -> float:
    """Distance of the forward pass from its nearest non-smooth point.

    Collects relu pre-activation magnitudes, max-pool top-two gaps, and the
    slack of every cloud point against the set-abstraction radius (group
    membership flips there).  Finite-difference checks demand a healthy
    margin so a perturbation of the parameters cannot cross a kink.
    """
    margins = [np.inf]

    def mlp_margins(mlp_cache):
        _, offsets, layer_caches, _, _ = mlp_cache
        for lin_cache, act_cache in layer_caches:
            z = act_cache[1]
            if z.size:
                margins.append(float(np.min(np.abs(z))))
        pooled_rows = layer_caches[-1][1][2] if layer_caches else None
        if pooled_rows is None:
            return
        for gi in range(len(offsets) - 1):
            lo, hi = offsets[gi], offsets[gi + 1]
            if hi - lo >= 2:
                top2 = np.sort(pooled_rows[lo:hi], axis=0)[-2:]
                gaps = top2[1] - top2[0]
                # exactly tied maxima come from structurally shared values
                # (e.g. all-dead rows); those co-move under perturbation and
                # are smooth, so only strictly positive near-gaps count
                gaps = gaps[gaps > 0.0]
                if gaps.size:
                    margins.append(float(np.min(gaps)))

    mlp_margins(cache.sa_cache)
    if cache.enc_cache is not None:
        mlp_margins(cache.enc_cache)
    if cache.edge_cache is not None:
        s = cache.edge_cache[3][1]
        if s.size:
            margins.append(float(np.min(np.abs(s))))
    d = np.linalg.norm(
        prep.scene.cloud.xyz[None, :, :] - cache.moved_positions[:, None, :], axis=2
    )
    margins.append(float(np.min(np.abs(d - cfg.sa.radius))))
    return min(margins)
