"""Ten-layer conv/deconv branch: configuration, parameters and the
plan-driven forward/backward passes.

A branch is five convolution layers (feature extraction, denoising,
shrinking, enhancement, mapping) followed by a five-layer deconvolution
decoder, with 2x2 max pools after encoder layers and switch-driven
unpools mirroring them in the decoder. The branch output is a single
residual plane added onto the input patch's first channel.

Decoder variants swap the upsampling mechanism (nearest-neighbour or
uniform 2x2 spreading instead of switch unpooling) or truncate the
deconvolution stack to a given depth, finishing with a 1x1 projection;
every variant restores the input spatial size.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import ConvSpec

CANONICAL_KERNELS = (9, 7, 5, 3, 1, 3, 5, 7, 9, 1)
CANONICAL_FILTERS = (96, 32, 64, 32, 16, 128, 64, 32, 64, 1)

DECODER_VARIANTS = ("full", "pad_upsample", "avg_up",
                    "deconv1", "deconv2", "deconv3", "deconv4", "deconv5")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "tconv"
    filters: int
    kernel: int
    stride: int = 1
    activation: str = "relu"  # "relu" | "linear"


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple
    pool_after: tuple = (1, 2, 3)
    unpool_before: tuple = (7, 8, 9)
    input_channels: int = 1
    fusion_point: str = "reconstruction"  # "reconstruction" | "features"
    decoder_variant: str = "full"

    def __post_init__(self):
        if len(self.layers) != 10:
            raise ValueError(f"exactly 10 layers required, got {len(self.layers)}")
        for i, l in enumerate(self.layers, 1):
            if l.kind not in ("conv", "tconv"):
                raise ValueError(f"layer {i}: unknown kind {l.kind!r}")
            if i <= 5 and l.kind != "conv":
                raise ValueError(f"layer {i}: encoder layers must be convolutions")
            if l.stride not in (1, 2):
                raise ValueError(f"layer {i}: stride must be 1 or 2")
            if l.kernel < 1 or l.filters < 1:
                raise ValueError(f"layer {i}: bad kernel/filter count")
            if l.activation not in ("relu", "linear"):
                raise ValueError(f"layer {i}: unknown activation {l.activation!r}")
        if self.layers[-1].filters != 1:
            raise ValueError("final layer must produce a single residual plane")
        if self.decoder_variant not in DECODER_VARIANTS:
            raise ValueError(f"unknown decoder_variant {self.decoder_variant!r}")
        if self.fusion_point not in ("reconstruction", "features"):
            raise ValueError(f"unknown fusion_point {self.fusion_point!r}")
        if self.input_channels not in (1, 3):
            raise ValueError("input_channels must be 1 (luma) or 3 (YUV)")
        if not all(1 <= p <= 5 for p in self.pool_after):
            raise ValueError("pools must follow encoder layers (1..5)")
        if not all(6 <= u <= 10 for u in self.unpool_before):
            raise ValueError("unpools must precede decoder layers (6..10)")
        if sorted(set(self.pool_after)) != list(self.pool_after):
            raise ValueError("pool_after must be sorted and unique")
        if sorted(set(self.unpool_before)) != list(self.unpool_before):
            raise ValueError("unpool_before must be sorted and unique")
        if self.down_factor() != self._up_factor():
            raise ValueError(
                f"downsampling x{self.down_factor()} does not match "
                f"upsampling x{self._up_factor()}")

    def down_factor(self):
        f = 2 ** len(self.pool_after)
        for l in self.layers[:5]:
            if l.stride == 2:
                f *= 2
        return f

    def _up_factor(self):
        f = 2 ** len(self.unpool_before)
        for l in self.layers[5:]:
            if l.kind == "tconv" and l.stride == 2:
                f *= 2
        return f

    @property
    def feature_channels(self):
        """Channel count at the pre-final fusion point (layer 9 output)."""
        return self.layers[8].filters

    def canonical_form(self):
        """Stable text form used for checkpoint digests."""
        lay = ";".join(f"{l.kind},{l.filters},{l.kernel},{l.stride},{l.activation}"
                       for l in self.layers)
        return (f"layers={lay}|pool={','.join(map(str, self.pool_after))}"
                f"|unpool={','.join(map(str, self.unpool_before))}"
                f"|in={self.input_channels}|fuse={self.fusion_point}"
                f"|variant={self.decoder_variant}")


def canonical_config(input_channels=1, fusion_point="reconstruction",
                     decoder_variant="full"):
    """The canonical 96(9)-32(7)-64(5)-32(3)-16(1)-128[3]-64[5]-32[7]-64[9]-1[1]
    geometry: pools after layers 1-3, stride-2 conv at 4, stride-2
    deconvolution at 6, unpools before layers 7-9."""
    layers = []
    for i, (n, k) in enumerate(zip(CANONICAL_FILTERS, CANONICAL_KERNELS), 1):
        kind = "tconv" if 6 <= i <= 9 else "conv"
        stride = 2 if i in (4, 6) else 1
        act = "linear" if i == 10 else "relu"
        layers.append(LayerSpec(kind, n, k, stride, act))
    return NetworkConfig(tuple(layers), (1, 2, 3), (7, 8, 9), input_channels,
                         fusion_point, decoder_variant)


def tiny_config(input_channels=1, fusion_point="reconstruction",
                decoder_variant="full"):
    """Small geometry with a reduced pool plan (one pool/unpool pair) for
    finite-difference gradient checks on 32x32 patches."""
    filters = (3, 2, 2, 2, 2, 3, 2, 2, 3, 1)
    kernels = (3, 3, 3, 3, 1, 3, 3, 3, 3, 1)
    layers = []
    for i, (n, k) in enumerate(zip(filters, kernels), 1):
        kind = "tconv" if 6 <= i <= 9 else "conv"
        stride = 2 if i in (4, 6) else 1
        act = "linear" if i == 10 else "relu"
        layers.append(LayerSpec(kind, n, k, stride, act))
    return NetworkConfig(tuple(layers), (1,), (9,), input_channels,
                         fusion_point, decoder_variant)


def build_plan(config):
    """Execution steps: ("layer", slot) | ("pool",) | ("up", mode).

    Slots index the parameter list, which is the 10 configured layers for
    the full/upsampling variants, or encoder + truncated decoder + a 1x1
    projection for the deconvN variants.
    """
    variant = config.decoder_variant
    upmode = {"pad_upsample": "nn", "avg_up": "avg"}.get(variant, "unpool")
    if variant in ("full", "pad_upsample", "avg_up", "deconv5"):
        steps = []
        for i in range(1, 11):
            if i in config.unpool_before:
                steps.append(("up", upmode))
            steps.append(("layer", i - 1))
            if i in config.pool_after:
                steps.append(("pool",))
        return tuple(steps)

    depth = int(variant[-1])
    steps = []
    for i in range(1, 6):
        steps.append(("layer", i - 1))
        if i in config.pool_after:
            steps.append(("pool",))
    ups_done = 0
    for i in range(6, 6 + depth):
        if i in config.unpool_before:
            steps.append(("up", upmode))
            ups_done += 1
        steps.append(("layer", i - 1))
    for _ in range(len(config.unpool_before) - ups_done):
        steps.append(("up", upmode))
    steps.append(("layer", 5 + depth))  # 1x1 projection
    return tuple(steps)


def layer_slots(config):
    """LayerSpec per parameter slot (plan order)."""
    variant = config.decoder_variant
    if variant in ("full", "pad_upsample", "avg_up", "deconv5"):
        return list(config.layers)
    depth = int(variant[-1])
    return list(config.layers[: 5 + depth]) + [LayerSpec("conv", 1, 1, 1, "linear")]


def layer_table(config):
    """(LayerSpec, in_channels) per parameter slot."""
    table = []
    in_ch = config.input_channels
    for spec in layer_slots(config):
        table.append((spec, in_ch))
        in_ch = spec.filters
    return table


def conv_spec_for(layer, in_ch):
    if layer.kind == "tconv":
        return ConvSpec(in_ch, layer.filters, layer.kernel, layer.stride,
                        "same", transposed=True)
    return ConvSpec(in_ch, layer.filters, layer.kernel, layer.stride, "same")


def parameter_count(config):
    """Dense-chaining count: sum over layers of in*k^2*out + out."""
    total = 0
    for layer, in_ch in layer_table(config):
        total += in_ch * layer.kernel * layer.kernel * layer.filters + layer.filters
    return total


@dataclass
class BranchParameters:
    """Per-layer weight tensors and bias vectors for one branch."""
    weights: list
    biases: list

    def copy(self):
        return BranchParameters([w.copy() for w in self.weights],
                                [b.copy() for b in self.biases])

    def zeros_like(self):
        return BranchParameters([np.zeros_like(w) for w in self.weights],
                                [np.zeros_like(b) for b in self.biases])

    def astype(self, dtype):
        return BranchParameters([w.astype(dtype) for w in self.weights],
                                [b.astype(dtype) for b in self.biases])


def init_parameters(config, seed, dtype=np.float32):
    """Zero-mean normal weights scaled by 1/sqrt(fan-in), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer, in_ch in layer_table(config):
        k = layer.kernel
        fan_in = in_ch * k * k
        if layer.kind == "tconv":
            shape = (in_ch, layer.filters, k, k)
        else:
            shape = (layer.filters, in_ch, k, k)
        w = rng.standard_normal(shape) / np.sqrt(fan_in)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(layer.filters, dtype))
    return BranchParameters(weights, biases)


@dataclass
class BranchActivations:
    """Forward bookkeeping: inputs/outputs per step, pool switches and the
    residual-added reconstruction. features[i] is the post-activation
    output of the i-th layer slot (the input patch plays F_0)."""
    patch: np.ndarray
    records: list = field(repr=False)
    features: list = field(repr=False)
    reconstruction: np.ndarray = None


def _upsample_nn(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample_nn_backward(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _expand_switches(sw, channels):
    if sw.shape[1] == channels:
        return sw
    idx = np.arange(channels) % sw.shape[1]
    return np.ascontiguousarray(sw[:, idx])


def _run_plan(params, config, x, steps):
    table = layer_table(config)
    records = []
    features = []
    switch_stack = []
    cur = x
    for step in steps:
        if step[0] == "layer":
            slot = step[1]
            layer, in_ch = table[slot]
            spec = conv_spec_for(layer, in_ch)
            w, b = params.weights[slot], params.biases[slot]
            if layer.kind == "tconv":
                out = ops.transposed_conv2d(cur, w, b, spec)
            else:
                out = ops.conv2d(cur, w, b, spec)
            if layer.activation == "relu":
                out = ops.relu(out)
            records.append(("layer", slot, cur, out))
            features.append(out)
            cur = out
        elif step[0] == "pool":
            out, sw = ops.maxpool2x2(cur)
            switch_stack.append(sw)
            records.append(("pool", sw))
            cur = out
        else:  # ("up", mode)
            mode = step[1]
            if mode == "unpool":
                if not switch_stack:
                    raise ValueError("no pool switches left for unpool step")
                sw = _expand_switches(switch_stack.pop(), cur.shape[1])
                out = ops.unpool2x2(cur, sw)
                records.append(("up_unpool", sw))
            elif mode == "nn":
                out = _upsample_nn(cur)
                records.append(("up_nn",))
            else:
                out = _upsample_nn(cur) * cur.dtype.type(0.25)
                records.append(("up_avg",))
            cur = out
    return records, features, cur


def branch_forward(params, config, patch):
    """Run one branch on a patch; reconstruction = residual + channel 0."""
    if patch.ndim != 4 or patch.shape[1] != config.input_channels:
        raise ValueError(f"patch shape {patch.shape} does not match "
                         f"input_channels={config.input_channels}")
    f = config.down_factor()
    if patch.shape[2] % f or patch.shape[3] % f:
        raise ValueError(f"patch spatial size {patch.shape[2]}x{patch.shape[3]} "
                         f"not divisible by the downsampling factor {f}")
    records, features, out = _run_plan(params, config, patch, build_plan(config))
    if out.shape[2:] != patch.shape[2:]:
        raise ValueError(f"decoder produced {out.shape[2:]}, expected {patch.shape[2:]}")
    recon = out + patch[:, :1]
    return BranchActivations(patch, records, features, recon)


def _backward_records(params, config, records, grad_out, feature_grads):
    table = layer_table(config)
    grads = params.zeros_like()
    g = grad_out
    for rec in reversed(records):
        kind = rec[0]
        if kind == "layer":
            _, slot, x_in, out_post = rec
            if feature_grads is not None and slot in feature_grads:
                g = g + feature_grads[slot]
            layer, in_ch = table[slot]
            if layer.activation == "relu":
                g = ops.relu_backward(g, out_post)
            spec = conv_spec_for(layer, in_ch)
            if layer.kind == "tconv":
                gx, gw, gb = ops.transposed_conv2d_backward(
                    x_in, params.weights[slot], g, spec)
            else:
                gx, gw, gb = ops.conv2d_backward(x_in, params.weights[slot], g, spec)
            grads.weights[slot] += gw
            grads.biases[slot] += gb
            g = gx
        elif kind == "pool":
            g = ops.maxpool2x2_backward(g, rec[1])
        elif kind == "up_unpool":
            g = ops.unpool2x2_backward(g, rec[1])
        elif kind == "up_nn":
            g = _upsample_nn_backward(g)
        else:  # up_avg
            g = _upsample_nn_backward(g) * g.dtype.type(0.25)
    return grads, g


def branch_backward(params, config, activations, grad_reconstruction,
                    feature_grads=None):
    """Reverse-mode gradients through the branch.

    feature_grads maps a layer slot to an extra gradient added at that
    layer's post-activation (used for the feature-norm loss term).
    Returns (BranchParameters-shaped gradients, grad w.r.t. the patch).
    """
    recon = activations.reconstruction
    if recon is None or grad_reconstruction.shape != recon.shape:
        raise ValueError(
            f"grad shape {grad_reconstruction.shape} does not match "
            f"reconstruction {None if recon is None else recon.shape} (stale activations?)")
    if activations.patch.shape[1] != config.input_channels:
        raise ValueError("activations do not match this config (stale activations?)")
    grads, g_patch = _backward_records(params, config, activations.records,
                                       grad_reconstruction, feature_grads)
    # identity path of the residual add feeds channel 0
    grad_input = g_patch.copy()
    grad_input[:, :1] += grad_reconstruction
    return grads, grad_input


def branch_forward_partial(params, config, patch):
    """Run the branch up to (not including) the final layer slot.

    Used by feature-space fusion: returns (activations, pre-final features).
    """
    f = config.down_factor()
    if patch.shape[2] % f or patch.shape[3] % f:
        raise ValueError(f"patch spatial size {patch.shape[2]}x{patch.shape[3]} "
                         f"not divisible by the downsampling factor {f}")
    steps = build_plan(config)
    records, features, out = _run_plan(params, config, patch, steps[:-1])
    return BranchActivations(patch, records, features, None), out


def branch_backward_partial(params, config, activations, grad_features,
                            feature_grads=None):
    """Gradients for a partial (pre-final-layer) forward pass."""
    grads, g_patch = _backward_records(params, config, activations.records,
                                       grad_features, feature_grads)
    return grads, g_patch


def intermediate_slots(config):
    """Slots whose post-activation features enter the loss regularizer
    (every layer except the final residual projection)."""
    return tuple(range(len(layer_slots(config)) - 1))
