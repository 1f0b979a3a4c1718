"""Numpy neural components: per-subgraph encoders and the global bridging layer."""

from .train import (GlobalLayer, SubModel, TrainConfig, encode, fit_submodel, fuse,
                    init_global_layer, train_global, train_submodel)

__all__ = ["GlobalLayer", "SubModel", "TrainConfig", "encode", "fit_submodel", "fuse",
           "init_global_layer", "train_global", "train_submodel"]
