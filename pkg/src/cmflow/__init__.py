"""Conditional matrix flows for Bayesian Gaussian graphical models with l_q priors."""
from .data import Dataset, GroundTruth, generate_sparse_precision, load_csv, sample_gaussian
from .flow import ConditionalMatrixFlow, FlowConfig, PrecisionBatch, load_checkpoint
from .target import GGMTarget
from .train import AnnealingSchedule, TrainConfig

__all__ = ["ConditionalMatrixFlow", "Dataset", "FlowConfig", "GGMTarget", "GroundTruth",
           "PrecisionBatch", "AnnealingSchedule", "TrainConfig", "generate_sparse_precision",
           "load_checkpoint", "load_csv", "sample_gaussian"]
