from mtdistill.net.spec import NetworkSpec
from mtdistill.net.network import (
    AdapterSet,
    Network,
    NetworkOutput,
    build_adapters,
    build_network,
    freeze_network,
    parameter_count,
)
from mtdistill.net.anchors import (
    AnchorAssignment,
    assign_targets,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    pairwise_iou,
)
from mtdistill.net.outputs import DetectionOutput, PyramidFeatures, SegmentationOutput
from mtdistill.net.postprocess import decode_and_nms
from mtdistill.net.checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint

__all__ = [
    "AdapterSet",
    "AnchorAssignment",
    "CheckpointMeta",
    "DetectionOutput",
    "Network",
    "NetworkOutput",
    "NetworkSpec",
    "PyramidFeatures",
    "SegmentationOutput",
    "assign_targets",
    "build_adapters",
    "build_network",
    "decode_and_nms",
    "decode_boxes",
    "encode_boxes",
    "freeze_network",
    "generate_anchors",
    "load_checkpoint",
    "pairwise_iou",
    "parameter_count",
    "save_checkpoint",
]
