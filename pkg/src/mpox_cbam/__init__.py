"""CBAM-augmented CNN for binary skin-lesion image classification."""
from .cbam import AttentionMaps, ChannelAttentionParams, SpatialAttentionParams, cbam_refine, channel_attention, spatial_attention
from .estimator import CBAMClassifier
from .evaluation import ConfusionMatrix, CVReport, MetricReport, confusion, cross_validate, kfold_split, metrics, render_report
from .model import BackboneConfig, ConvBlock, ModelAssembly, build_model
from .tensor import Graph, Tensor, backward, gradient_check
from .training import TrainConfig, bce_loss, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
