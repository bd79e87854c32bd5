"""Mesh-free neural surrogate for steady aerodynamic fields.

A geometry point cloud and simulation parameters are encoded once into a
sequence of latent geometries; any set of query points is then decoded
independently into pressure and velocity.
"""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluation import MetricsReport, evaluate_dataset, surface_force
from .infer import predict_chunked
from .model import ModelConfig, SmartModel
from .train import TrainConfig, fit, train

__version__ = "0.1.0"
