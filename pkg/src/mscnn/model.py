"""Dual-branch model: two parameter sets (current / reference), the gated
fusion block, and full-frame inference by patching.

Fusion points:

* "reconstruction" (default): each branch produces its residual-added
  reconstruction (one plane) and the gate blends the two planes.
* "features": the branches stop before their final layer, the gate blends
  the feature maps, and the current branch's final 1x1 layer projects the
  blend before the residual add.
"""

from dataclasses import dataclass

import numpy as np

from . import data, fusion, network, ops
from .fusion import FusionParameters, fuse_backward, fuse_forward, init_fusion
from .network import BranchParameters


@dataclass
class ModelParameters:
    cur: BranchParameters
    ref: BranchParameters
    fusion: FusionParameters

    def copy(self):
        return ModelParameters(self.cur.copy(), self.ref.copy(), self.fusion.copy())

    def zeros_like(self):
        return ModelParameters(self.cur.zeros_like(), self.ref.zeros_like(),
                               self.fusion.zeros_like())

    def astype(self, dtype):
        return ModelParameters(self.cur.astype(dtype), self.ref.astype(dtype),
                               self.fusion.astype(dtype))


def fusion_channels(config):
    return 1 if config.fusion_point == "reconstruction" else config.feature_channels


def init_model(config, seed, pool_window=3, mode="additive", dtype=np.float32):
    """Both branches and the fusion block from one seed (independent
    per-component streams)."""
    ss = np.random.SeedSequence(seed)
    s_cur, s_ref, s_fus = ss.spawn(3)
    return ModelParameters(
        network.init_parameters(config, s_cur, dtype),
        network.init_parameters(config, s_ref, dtype),
        init_fusion(fusion_channels(config), s_fus, pool_window, mode, dtype),
    )


@dataclass
class ModelActivations:
    acts_cur: network.BranchActivations
    acts_ref: network.BranchActivations
    bundle: fusion.GateBundle
    fused_input_cur: np.ndarray
    fused_input_ref: np.ndarray
    reconstruction: np.ndarray
    fused_features: np.ndarray = None  # features mode only
    final_out: np.ndarray = None  # features mode: shared-layer post-activation


def model_forward(params, config, cur_patch, ref_patch):
    """Run both branches and the fusion; returns ModelActivations."""
    if params.fusion.channels != fusion_channels(config):
        raise ValueError(
            f"fusion expects {params.fusion.channels} channels but the config "
            f"fusion point provides {fusion_channels(config)}")
    if config.fusion_point == "reconstruction":
        acts_cur = network.branch_forward(params.cur, config, cur_patch)
        acts_ref = network.branch_forward(params.ref, config, ref_patch)
        fused, bundle = fuse_forward(acts_cur.reconstruction,
                                     acts_ref.reconstruction, params.fusion)
        return ModelActivations(acts_cur, acts_ref, bundle,
                                acts_cur.reconstruction, acts_ref.reconstruction,
                                fused)
    acts_cur, feat_cur = network.branch_forward_partial(params.cur, config, cur_patch)
    acts_ref, feat_ref = network.branch_forward_partial(params.ref, config, ref_patch)
    fused_feat, bundle = fuse_forward(feat_cur, feat_ref, params.fusion)
    last = len(params.cur.weights) - 1
    layer, in_ch = network.layer_table(config)[last]
    spec = network.conv_spec_for(layer, in_ch)
    out = ops.conv2d(fused_feat, params.cur.weights[last], params.cur.biases[last], spec)
    if layer.activation == "relu":
        out = ops.relu(out)
    recon = out + cur_patch[:, :1]
    return ModelActivations(acts_cur, acts_ref, bundle, feat_cur, feat_ref,
                            recon, fused_feat, out)


def model_backward(params, config, macts, grad_reconstruction,
                   feature_grads_cur=None):
    """Gradients for all parameter groups given d loss / d reconstruction."""
    if config.fusion_point == "reconstruction":
        g_cur, g_ref, g_fus = fuse_backward(macts.bundle, macts.fused_input_cur,
                                            macts.fused_input_ref, params.fusion,
                                            grad_reconstruction)
        grads_cur, _ = network.branch_backward(params.cur, config, macts.acts_cur,
                                               g_cur, feature_grads_cur)
        grads_ref, _ = network.branch_backward(params.ref, config, macts.acts_ref, g_ref)
        return ModelParameters(grads_cur, grads_ref, g_fus)

    last = len(params.cur.weights) - 1
    layer, in_ch = network.layer_table(config)[last]
    spec = network.conv_spec_for(layer, in_ch)
    g = grad_reconstruction
    if layer.activation == "relu":
        g = ops.relu_backward(g, macts.final_out)
    g_feat, gw_last, gb_last = ops.conv2d_backward(
        macts.fused_features, params.cur.weights[last], g, spec)
    g_cur, g_ref, g_fus = fuse_backward(macts.bundle, macts.fused_input_cur,
                                        macts.fused_input_ref, params.fusion, g_feat)
    grads_cur, _ = network.branch_backward_partial(params.cur, config, macts.acts_cur,
                                                   g_cur, feature_grads_cur)
    grads_ref, _ = network.branch_backward_partial(params.ref, config, macts.acts_ref,
                                                   g_ref)
    grads_cur.weights[last] += gw_last
    grads_cur.biases[last] += gb_last
    return ModelParameters(grads_cur, grads_ref, g_fus)


def filter_plane(params, config, cur_plane, ref_plane, patch_size, overlap=False):
    """Filter one normalized luma plane against its reference plane.

    Splits into patches (stride = patch size, or half the patch size with
    overlap averaging), runs the dual-branch model on each pair, and
    reassembles. Planes are float (normalized); returns the same.
    """
    f = config.down_factor()
    if patch_size % f:
        raise ValueError(f"patch size {patch_size} not divisible by the "
                         f"network downsampling factor {f}")
    stride = patch_size // 2 if overlap else patch_size
    grid = data.PatchGrid(cur_plane.shape[0], cur_plane.shape[1], patch_size, stride)
    cur_patches = data.extract_patches(cur_plane, grid)
    ref_patches = data.extract_patches(ref_plane, grid)
    out_patches = []
    for cp, rp in zip(cur_patches, ref_patches):
        macts = model_forward(params, config, cp[None, None], rp[None, None])
        out_patches.append(macts.reconstruction[0, 0])
    return data.reassemble(out_patches, grid)


def filter_sequence(params, config, seq, patch_size, overlap=False):
    """Filter the luma channel of a YUV sequence; chroma passes through.

    Frame t uses degraded frame t-1 as its reference; frame 0 pairs with
    itself.
    """
    dtype = params.cur.weights[0].dtype
    out_frames = []
    prev_norm = None
    for y, cb, cr in seq.frames:
        cur_norm = data.normalize(y, dtype)
        ref_norm = cur_norm if prev_norm is None else prev_norm
        filtered = filter_plane(params, config, cur_norm, ref_norm, patch_size, overlap)
        out_frames.append((data.denormalize(filtered), cb.copy(), cr.copy()))
        prev_norm = cur_norm
    return data.YuvSequence(seq.width, seq.height, out_frames)
