"""Full segmentation model: trunk, coefficient heads, banks, auxiliary head.

Parameters live in a flat name -> array dict so the optimizer, checkpoints,
and stage gating can treat them uniformly. Heads and banks are materialized
as views over that dict before each forward.
"""

from dataclasses import dataclass

import numpy as np

from . import backbone, reconstruction, refinement
from .ops import ConvSpec, bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward
from .refinement import PyramidConfig
from .rng import Stream

DE_OUT_FACTOR = 8


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    bases_per_class: int = 10
    widths: tuple = (16, 32, 64, 128)
    convs_per_stage: int = 2
    mask_pool: int = 9
    confidence_tau: float = 0.0
    masking: bool = True
    seed: int = 0

    def pyramid(self):
        return PyramidConfig(
            num_classes=self.num_classes, mask_pool=self.mask_pool,
            confidence_tau=self.confidence_tau, bases_per_class=self.bases_per_class,
            masking=self.masking)

    def backbone(self):
        return backbone.BackboneConfig(widths=self.widths,
                                       convs_per_stage=self.convs_per_stage,
                                       seed=self.seed)


_STRIDE_TO_WIDTH = {4: 0, 8: 1, 16: 2, 32: 3}


def feature_channels(cfg: ModelConfig, stride: int) -> int:
    return cfg.widths[_STRIDE_TO_WIDTH[stride]]


def init_params(cfg: ModelConfig, bank=None, dtype=np.float32):
    """All trainable arrays; the basis bank defaults to tents when not given."""
    params = backbone.init_params(cfg.backbone(), dtype=dtype)
    pyr_cfg = cfg.pyramid()
    for stride in pyr_cfg.branch_strides:
        head = reconstruction.init_coefficient_head(
            feature_channels(cfg, stride), cfg.bases_per_class, cfg.num_classes,
            seed=cfg.seed, name=f"head.{stride}", dtype=dtype)
        params[f"head.{stride}.weight"] = head.weight
        params[f"head.{stride}.bias"] = head.bias
        if bank is None:
            b = reconstruction.build_bank(pyr_cfg.recon_stride, cfg.bases_per_class,
                                          cfg.num_classes, dtype=dtype)
            params[f"bank.{stride}"] = b.functions
        else:
            params[f"bank.{stride}"] = bank.functions.astype(dtype).copy()
    st = Stream(cfg.seed, "de_head")
    f32 = cfg.widths[-1]
    out_ch = 2 * cfg.num_classes
    limit = np.sqrt(6.0 / (f32 * 9 + out_ch * 9))
    params["de.weight"] = ((st.uniform((out_ch, f32, 3, 3)) * 2 - 1) * limit).astype(dtype)
    params["de.bias"] = np.zeros(out_ch, dtype=dtype)
    return params


def heads_and_banks(params, cfg: ModelConfig):
    heads, banks = {}, {}
    for stride in cfg.pyramid().branch_strides:
        heads[stride] = reconstruction.CoefficientHead(
            weight=params[f"head.{stride}.weight"], bias=params[f"head.{stride}.bias"],
            bases_per_class=cfg.bases_per_class, num_classes=cfg.num_classes)
        banks[stride] = reconstruction.BasisBank(
            stride=cfg.pyramid().recon_stride, functions=params[f"bank.{stride}"])
    return heads, banks


def _de_spec(cfg: ModelConfig):
    return ConvSpec(3, 3, cfg.widths[-1], 2 * cfg.num_classes, stride=1, pad=1)


def forward(params, cfg: ModelConfig, images, active_strides=None, with_de=False,
            fixed_masks=None):
    """Run trunk and branch chain. Returns (levels, cache)."""
    pyr, bb_cache = backbone.backbone_forward(images, params, cfg.backbone())
    heads, banks = heads_and_banks(params, cfg)
    levels, pyr_cache = refinement.pyramid_forward(
        pyr, heads, banks, cfg.pyramid(), active_strides=active_strides,
        fixed_masks=fixed_masks)
    cache = {"backbone": bb_cache, "pyramid": pyr_cache, "heads": heads,
             "banks": banks, "de": None}
    if with_de:
        f32 = pyr.f32
        logits, de_cols = conv2d(f32, params["de.weight"], params["de.bias"],
                                 _de_spec(cfg), return_cols=True)
        n, _, h, w = images.shape
        th, tw = h // DE_OUT_FACTOR, w // DE_OUT_FACTOR
        up = bilinear_resize(logits, th, tw)
        c = cfg.num_classes
        cache["de"] = {"f32": f32, "logits_hw": logits.shape[2:], "cols": de_cols}
        return levels, cache, (up[:, :c], up[:, c:])
    return levels, cache


def backward(params, cfg: ModelConfig, cache, level_grads, de_grads=None,
             train_bases=False):
    """Gradients for every active parameter given per-level loss gradients."""
    pyr_cfg = cfg.pyramid()
    head_grads, bank_grads, tap_grads = refinement.pyramid_backward(
        cache["pyramid"], cache["heads"], cache["banks"], level_grads,
        train_bases=train_bases)
    grads = {}
    for stride, (gw, gb) in head_grads.items():
        grads[f"head.{stride}.weight"] = gw
        grads[f"head.{stride}.bias"] = gb
    for stride, gf in bank_grads.items():
        grads[f"bank.{stride}"] = gf
    if de_grads is not None:
        de = cache["de"]
        gup = np.concatenate(de_grads, axis=1)
        glog = bilinear_resize_backward(gup, de["logits_hw"][0], de["logits_hw"][1])
        gx, gw, gb = conv2d_backward(de["f32"], params["de.weight"], _de_spec(cfg), glog,
                                     cols=de["cols"])
        grads["de.weight"] = gw
        grads["de.bias"] = gb
        tap_grads[32] = tap_grads.get(32, 0) + gx
    grads.update(backbone.backbone_backward(cache["backbone"], params, tap_grads))
    return grads


def predict_scores(params, cfg: ModelConfig, images):
    """Final fused class scores at input resolution."""
    levels, _ = forward(params, cfg, images)
    return levels[-1].fused


def predict_labels(params, cfg: ModelConfig, image):
    """Argmax label map for one (3, H, W) image."""
    scores = predict_scores(params, cfg, image[None])
    return scores[0].argmax(axis=0).astype(np.uint8)


def level_label_maps(levels, out_hw):
    """Upsample every level's fused scores to out_hw and take the argmax.

    Returns stride -> label map; used to benchmark intermediate outputs.
    """
    maps = {}
    for lv in levels:
        up = bilinear_resize(lv.fused, out_hw[0], out_hw[1])
        maps[lv.stride] = up.argmax(axis=1).astype(np.uint8)
    return maps
