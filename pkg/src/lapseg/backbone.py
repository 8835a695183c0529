"""A small trainable convolutional trunk with feature taps at strides 4-32.

Layout per stage: a stride-2 max pool (stage 1 takes two, interleaved with
its convolutions) followed by 3x3 convolutions at the stage's working
resolution. Taps are taken after the last activation of each stage, so the
tap for stride s always has the configured width for that stage.
"""

from dataclasses import dataclass

import numpy as np

from .rng import Stream
from .ops import ConvSpec, conv2d, conv2d_backward, maxpool2d, maxpool2d_backward, \
    relu, relu_backward

STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (16, 32, 64, 128)
    convs_per_stage: int = 2
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError("backbone has exactly 4 stages")
        if self.convs_per_stage < 1:
            raise ValueError("need at least one convolution per stage")


@dataclass
class FeaturePyramid:
    f4: np.ndarray
    f8: np.ndarray
    f16: np.ndarray
    f32: np.ndarray

    def __getitem__(self, stride):
        return {4: self.f4, 8: self.f8, 16: self.f16, 32: self.f32}[stride]


def _layer_plan(config):
    """Ordered layer list: ("pool",) or ("conv", param_prefix, in_ch, out_ch)."""
    plan = []
    prev = config.in_channels
    for si, width in enumerate(config.widths):
        n = config.convs_per_stage
        for ci in range(n):
            if si == 0 and ci <= 1:
                plan.append(("pool",))   # stage 1 pools twice
            elif si > 0 and ci == 0:
                plan.append(("pool",))
            plan.append(("conv", f"backbone.stage{si + 1}.conv{ci}", prev, width))
            prev = width
        if si == 0 and n == 1:
            plan.insert(len(plan) - 1, ("pool",))  # second pool even with one conv
        plan.append(("tap", STRIDES[si]))
    return plan


def param_shapes(config):
    shapes = {}
    for item in _layer_plan(config):
        if item[0] == "conv":
            _, name, cin, cout = item
            shapes[name + ".weight"] = (cout, cin, 3, 3)
            shapes[name + ".bias"] = (cout,)
    return shapes


def init_params(config, dtype=np.float32):
    """Relu-corrected uniform weights (+-sqrt(6/fan_in)), zero biases.

    The relu correction keeps activation variance roughly constant through
    the eight-conv trunk; a fan-in+fan-out rule attenuates the signal by
    about half per layer here, which starves the downstream heads.
    """
    params = {}
    for name, shape in param_shapes(config).items():
        st = Stream(config.seed, name)
        if name.endswith(".weight"):
            cout, cin, kh, kw = shape
            fan_in = cin * kh * kw
            limit = np.sqrt(6.0 / fan_in)
            params[name] = ((st.uniform(shape) * 2.0 - 1.0) * limit).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def backbone_forward(image, params, config):
    """Run the trunk; returns (FeaturePyramid, cache for backward)."""
    n, c, h, w = image.shape
    if h % 32 or w % 32:
        raise ValueError(f"input extents {h}x{w} must be divisible by 32")
    x = image
    cache = {"config": config, "steps": [], "input_shape": image.shape}
    taps = {}
    for item in _layer_plan(config):
        if item[0] == "pool":
            out, argmax = maxpool2d(x, window=2, stride=2)
            cache["steps"].append(("pool", argmax, x.shape))
            x = out
        elif item[0] == "conv":
            _, name, cin, cout = item
            spec = ConvSpec(3, 3, cin, cout, stride=1, pad=1)
            out, cols = conv2d(x, params[name + ".weight"], params[name + ".bias"],
                               spec, return_cols=True)
            act, mask = relu(out)
            cache["steps"].append(("conv", name, spec, x, mask, cols))
            x = act
        else:
            stride = item[1]
            taps[stride] = x
            cache["steps"].append(("tap", stride))
    pyr = FeaturePyramid(f4=taps[4], f8=taps[8], f16=taps[16], f32=taps[32])
    for s in STRIDES:
        exp = (h // s, w // s)
        if taps[s].shape[2:] != exp:
            raise AssertionError(f"stride {s} tap is {taps[s].shape[2:]}, expected {exp}")
    return pyr, cache


def backbone_backward(cache, params, tap_grads):
    """Backpropagate tap gradients through the trunk; returns parameter grads.

    tap_grads: dict stride -> gradient (missing strides count as zero). The
    gradient wrt the image is discarded.
    """
    grads = {}
    g = None
    for step in reversed(cache["steps"]):
        if step[0] == "tap":
            tg = tap_grads.get(step[1])
            if tg is not None:
                g = tg if g is None else g + tg
        elif step[0] == "conv":
            _, name, spec, x_in, mask, cols = step
            if g is None:
                continue
            g = relu_backward(mask, g)
            first = name.endswith("stage1.conv0")   # nothing differentiates the image
            gx, gw, gb = conv2d_backward(x_in, params[name + ".weight"], spec, g,
                                         cols=cols, need_input_grad=not first)
            grads[name + ".weight"] = gw
            grads[name + ".bias"] = gb
            g = gx
        else:
            _, argmax, in_shape = step
            if g is None:
                continue
            g = maxpool2d_backward(argmax, g, in_shape)
    return grads
