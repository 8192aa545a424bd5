"""Change detection with CAR-partitioned specialist models and multi-teacher distillation."""

from .car import PartitionSpec, compute_car, partition_dataset, partition_of
from .data import BitemporalSample, Dataset, SyntheticSpec, generate_synthetic, load_dataset
from .models import ARCHS, build_model, change_map, load_checkpoint, save_checkpoint
from .train import TrainConfig, train_model, train_student_mtkd, train_teachers

__all__ = [
    "ARCHS", "BitemporalSample", "Dataset", "PartitionSpec", "SyntheticSpec", "TrainConfig",
    "build_model", "change_map", "compute_car", "generate_synthetic", "load_checkpoint",
    "load_dataset", "partition_dataset", "partition_of", "save_checkpoint", "train_model",
    "train_student_mtkd", "train_teachers",
]
