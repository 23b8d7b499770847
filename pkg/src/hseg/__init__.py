"""Harmonic instance-embedding segmentation: guides, network, clustering, metrics."""

from .clustering import ClusterResult, extract_instances, mean_shift
from .data import AugmentConfig, Sample, SynthConfig, augment, load_labels, save_labels, synth
from .guides import (
    GuideFitConfig,
    GuideParams,
    GuideSet,
    PixelSet,
    collision_report,
    eval_guide,
    fit_guides,
    guided_embedding,
    hinge_gradient,
    pair_hinge,
    sweep_loss,
)
from .metrics import SegScore, best_dice, coco_ap, coco_ap_dataset, dic, sbd, score_image
from .network import (
    SinUNet,
    SinUNetConfig,
    TargetField,
    TrainConfig,
    build_targets,
    guide_maps,
    infer,
    load_checkpoint,
    save_checkpoint,
    sinconv,
    train,
)

__version__ = "0.1.0"
