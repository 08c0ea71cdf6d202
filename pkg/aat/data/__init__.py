"""
The synthetic captioning task, its vocabulary and the file formats it is stored in.
"""

from .dataset import Dataset, Example, generate_dataset, load_dataset, write_dataset
from .features import FeatureSet, load_features, write_features
from .synth import SynthConfig, SynthInstance, SynthWorld, generate
from .vocab import Vocabulary, build_vocab, tokenize

__all__ = [
    "Dataset",
    "Example",
    "FeatureSet",
    "SynthConfig",
    "SynthInstance",
    "SynthWorld",
    "Vocabulary",
    "build_vocab",
    "generate",
    "generate_dataset",
    "load_dataset",
    "load_features",
    "tokenize",
    "write_dataset",
    "write_features",
]
