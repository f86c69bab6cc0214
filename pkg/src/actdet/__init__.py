"""Anchor-free temporal group-activity detection over precomputed feature
sequences: synthetic data generation, training, decoding, and evaluation."""

from .data import (
    CLASS_NAMES,
    DatasetManifest,
    FeatureSequence,
    Proposal,
    Segment,
    VideoEntry,
    load_manifest,
    read_feature_file,
    save_manifest,
    write_feature_file,
)
from .network import HeadOutputs, ModelConfig, ModelParams, Network, PyramidState
from .synth import SynthConfig, generate_dataset, make_split

__all__ = [
    "CLASS_NAMES",
    "DatasetManifest",
    "FeatureSequence",
    "HeadOutputs",
    "ModelConfig",
    "ModelParams",
    "Network",
    "Proposal",
    "PyramidState",
    "Segment",
    "SynthConfig",
    "VideoEntry",
    "generate_dataset",
    "load_manifest",
    "make_split",
    "read_feature_file",
    "save_manifest",
    "write_feature_file",
]

__version__ = "0.1.0"
