"""msdet: multi-resolution anchor-based object detection on numpy.

A proposal network detects objects of different sizes from feature maps of
matching resolution (strides 8 through 64), and a region head refines and
classifies the pooled candidates using upsampled features plus surrounding
context. Every layer carries a hand-written backward pass verified by
central differences; training, evaluation, and synthetic data generation
are fully deterministic given a seed.
"""

from .boxes import BBox, GeometryError, RegressionTarget, clip, decode, encode, iou, nms
from .anchors import (
    Anchor, BranchConfig, LabeledSample, SampleSet, assign_scale_branch,
    build_anchor_grid, label_anchors, sample_negatives,
)
from .config import (
    RunConfig, build_head, build_network, config_hash, default_config,
    parse_config, serialize_config,
)
from .data import (
    DataError, SceneAnnotation, SceneSample, generate_synthetic, load_dataset,
    load_image, parse_kitti_labels, save_image, write_dataset,
)
from .detector import detect_image
from .evaluation import (
    RecallResult, RecallSpec, average_precision, dataset_recall, oracle_recall,
    recall_table, recall_vs_budget, recall_vs_iou,
)
from .gradcheck import finite_diff_check
from .layers import (
    Conv2d, Deconv2d, Linear, MaxPool2d, ReLU, RoiPool, bilinear_weights,
    softmax,
)
from .losses import (
    LossReport, balanced_cross_entropy, branch_loss, loc_loss, smooth_l1,
    total_loss,
)
from .network import (
    Detection, DetectionHead, Proposal, ProposalNetwork, TrunkSpec,
    collect_proposals, proposal_as_detector,
)
from .tensor import NumericError, Tensor, load_checkpoint, save_checkpoint
from .training import (
    SGD, JointConfig, StageConfig, TrainConfig, TrainingDiverged, augment,
    sgd_step, train_joint, train_proposal,
)

__version__ = "0.1.0"
