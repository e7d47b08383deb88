"""CAN-bus intrusion detection: SupCon ResNet over 29x29 CAN ID frames, with transfer to new car models."""

from .can_log import CanRecord, Flag, ParseStats, encode_id_29bit, parse_hcrl_csv
from .framing import SOURCE_LABELS, TARGET_LABELS, FrameSet, LabelSpace, build_frames, split_train_test
from .model import ModelConfig, SupConResNet, count_parameters, init_weights

__version__ = "0.1.0"

__all__ = [
    "CanRecord", "Flag", "ParseStats", "encode_id_29bit", "parse_hcrl_csv",
    "SOURCE_LABELS", "TARGET_LABELS", "FrameSet", "LabelSpace", "build_frames", "split_train_test",
    "ModelConfig", "SupConResNet", "count_parameters", "init_weights",
]
