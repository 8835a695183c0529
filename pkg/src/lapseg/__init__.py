"""Multi-resolution semantic segmentation with learned basis reconstruction.

Class scores are synthesized from per-class basis functions whose
coefficients are predicted from coarse feature maps, then refined coarse to
fine through a boundary-masked pyramid. Includes the synthetic shapes
benchmark, stage-wise training, and tri-map boundary evaluation.
"""

from .backbone import BackboneConfig, FeaturePyramid, backbone_backward, backbone_forward
from .data import AugmentSpec, PatchSet, Sample, augment, extract_class_patches, \
    generate_shapes
from .evaluation import ConfusionMatrix, MetricSummary, metrics, multiscale_predict, \
    trimap_band, trimap_curve
from .losses import DETargets, LossReport, assemble_losses, build_de_targets, \
    disk_dilate, disk_erode, downsample_truth, logistic_loss, softmax_xent
from .model import ModelConfig
from .ops import ConvSpec, bilinear_resize, conv2d, conv2d_backward, maxpool2d, \
    relu, sigmoid, softmax_channels
from .reconstruction import BasisBank, CoefficientHead, downsample_basis, \
    fit_basis_pca, predict_coefficients, reconstruct, reconstruct_backward, tent_basis
from .refinement import LevelOutput, PyramidConfig, boundary_mask, fuse_level, \
    pyramid_backward, pyramid_forward
from .tensor import FormatError, NumericalError, load_tensor, save_tensor
from .training import OptimState, Stage, TrainConfig, sgd_step, train

__version__ = "0.1.0"
