"""
A synthetic captioning task with a known number of regions behind every word.

Every image has `k` regions. Each region shows one *concept*, encoded as a noisy prototype vector, and
carries a mention mask telling which caption positions talk about it. A caption mixes three kinds of words:

- function words, which depend on no region (their identity depends only on the caption position);
- concept words `c<i>`, naming the concept of exactly one region;
- composite words `g<j>`, whose identity is a function of the concepts of two or three regions.

Positions past the end of the caption are marked with `-1` in every mask, so the caption length, and every
word, is a deterministic function of the features.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError
from .features import FeatureSet
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

FUNCTION_WORDS = ("a", "the", "of", "on", "with", "and", "in", "near")

MIN_CAPTION_LEN = 3
MIN_PROTOTYPE_DIM = 4


class TokenClass:
    FUNCTION = 0
    SINGLE = 1
    MULTI = 2


@dataclass
class SynthConfig:
    k: int = 8
    """Regions per image."""

    feature_dim: int = 32
    """Length of each region vector: the concept prototype plus a `max_len` mention mask."""

    max_len: int = 12
    """Longest caption, in words."""

    n_function: int = 6
    n_concepts: int = 16
    n_composites: int = 14

    rates: Tuple[float, float, float] = (0.3, 0.4, 0.3)
    """Probability of a function, concept and composite word at each position."""

    noise: float = 0.05
    """Standard deviation of the noise added to concept prototypes."""

    world_seed: int = 0
    """Seeds the concept prototypes, which are shared by every instance."""

    @property
    def vocab_size(self) -> int:
        return 4 + self.n_function + self.n_concepts + self.n_composites

    @property
    def prototype_dim(self) -> int:
        return self.feature_dim - self.max_len

    @classmethod
    def for_vocab_size(cls, vocab_size: int, **kwargs) -> "SynthConfig":
        """
        Splits a vocabulary budget into function, concept and composite words.
        """
        n_function = min(len(FUNCTION_WORDS), 6)
        content = vocab_size - 4 - n_function
        if content < 3:
            raise ConfigError(
                f"vocab_size {vocab_size} leaves no room for concept and composite words"
            )
        n_concepts = (content + 1) // 2
        return cls(
            n_function=n_function,
            n_concepts=n_concepts,
            n_composites=content - n_concepts,
            **kwargs,
        )

    def validate(self) -> "SynthConfig":
        if self.k < 2:
            raise ConfigError("composite words need at least two regions (k >= 2)")
        if self.max_len < MIN_CAPTION_LEN:
            raise ConfigError(f"max_len must be >= {MIN_CAPTION_LEN}")
        if self.prototype_dim < MIN_PROTOTYPE_DIM:
            raise ConfigError(
                f"feature_dim {self.feature_dim} is too small to encode regions: need at least "
                f"max_len + {MIN_PROTOTYPE_DIM} = {self.max_len + MIN_PROTOTYPE_DIM}"
            )
        if not 1 <= self.n_function <= len(FUNCTION_WORDS):
            raise ConfigError(f"n_function must lie in [1, {len(FUNCTION_WORDS)}]")
        if self.n_concepts < 2 or self.n_composites < 1:
            raise ConfigError("the vocabulary is too small to encode regions")
        if len(self.rates) != 3 or min(self.rates) < 0 or not np.isclose(sum(self.rates), 1.0):
            raise ConfigError(f"rates must be three probabilities summing to 1, got {self.rates}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "feature_dim": self.feature_dim,
            "max_len": self.max_len,
            "n_function": self.n_function,
            "n_concepts": self.n_concepts,
            "n_composites": self.n_composites,
            "rates": list(self.rates),
            "noise": self.noise,
            "world_seed": self.world_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        data["rates"] = tuple(data.get("rates", cls.rates))
        return cls(**data)


@dataclass
class SynthInstance:
    features: FeatureSet
    target: List[int]
    """Token ids of the caption, without BOS or EOS."""

    alignment: List[int]
    """Number of regions behind each target token."""

    classes: List[int] = field(default_factory=list)


class SynthWorld:
    """
    The vocabulary and the concept prototypes shared by every instance of a task.
    """

    def __init__(self, config: SynthConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.world_seed)
        prototypes = rng.normal(size=(config.n_concepts, config.prototype_dim))
        self.prototypes = prototypes / np.linalg.norm(prototypes, axis=1, keepdims=True)
        self.vocab = Vocabulary(
            list(FUNCTION_WORDS[: config.n_function])
            + [f"c{i}" for i in range(config.n_concepts)]
            + [f"g{j}" for j in range(config.n_composites)]
        )
        self.function_ids = [self.vocab.id_of(w) for w in FUNCTION_WORDS[: config.n_function]]
        self.concept_ids = [self.vocab.id_of(f"c{i}") for i in range(config.n_concepts)]
        self.composite_ids = [self.vocab.id_of(f"g{j}") for j in range(config.n_composites)]
        logger.debug(
            "synthetic world: %d function words, %d concepts, %d composites",
            config.n_function,
            config.n_concepts,
            config.n_composites,
        )

    def function_word(self, position: int) -> int:
        return self.function_ids[position % len(self.function_ids)]

    def concept_word(self, concept: int) -> int:
        return self.concept_ids[concept]

    def composite_word(self, concepts: Sequence[int]) -> int:
        """
        The composite word for a group of concepts; independent of their order.
        """
        return self.composite_ids[int(sum(concepts)) % len(self.composite_ids)]

    def concept_of(self, region: np.ndarray) -> int:
        """Recovers the concept of a region vector as its nearest prototype."""
        prototype = np.asarray(region)[: self.config.prototype_dim]
        return int(np.argmax(self.prototypes @ prototype))

    def mask_of(self, region: np.ndarray) -> np.ndarray:
        return np.asarray(region)[self.config.prototype_dim :]

    def caption_of(self, features: FeatureSet) -> List[int]:
        """
        Reads the caption off a feature set. This is the Bayes-optimal labeling of the task.
        """
        masks = np.stack([self.mask_of(r) for r in features.vectors])
        concepts = [self.concept_of(r) for r in features.vectors]
        caption = []
        for position in range(self.config.max_len):
            column = masks[:, position]
            if np.any(column < 0):
                break
            mentioned = [concepts[r] for r in np.flatnonzero(column > 0)]
            if not mentioned:
                caption.append(self.function_word(position))
            elif len(mentioned) == 1:
                caption.append(self.concept_word(mentioned[0]))
            else:
                caption.append(self.composite_word(mentioned))
        return caption


def generate(
    seed, config: Optional[SynthConfig] = None, world: Optional[SynthWorld] = None
) -> SynthInstance:
    """
    Draws one image and its caption. The result depends only on `seed` and the configuration.

    :param seed: Anything `numpy.random.default_rng` accepts, e.g. an int or a list of ints.
    :param config: The task configuration; defaults to `SynthConfig()`.
    :param world: A prebuilt `SynthWorld` for `config`, to avoid rebuilding it for every instance.
    """
    if world is None:
        world = SynthWorld(config or SynthConfig())
    cfg = world.config
    rng = np.random.default_rng(seed)

    concepts = rng.integers(cfg.n_concepts, size=cfg.k)
    length = int(rng.integers(MIN_CAPTION_LEN, cfg.max_len + 1))
    masks = np.zeros((cfg.k, cfg.max_len))
    masks[:, length:] = -1.0

    target, alignment, classes = [], [], []
    for position in range(length):
        kind = int(rng.choice(3, p=cfg.rates))
        if kind == TokenClass.FUNCTION:
            regions = np.array([], dtype=int)
            token = world.function_word(position)
        elif kind == TokenClass.SINGLE:
            regions = rng.choice(cfg.k, size=1, replace=False)
            token = world.concept_word(int(concepts[regions[0]]))
        else:
            size = min(int(rng.integers(2, 4)), cfg.k)
            regions = rng.choice(cfg.k, size=size, replace=False)
            token = world.composite_word(concepts[regions])
        masks[regions, position] = 1.0
        target.append(token)
        alignment.append(len(regions))
        classes.append(kind)

    prototypes = world.prototypes[concepts] + rng.normal(
        scale=cfg.noise, size=(cfg.k, cfg.prototype_dim)
    )
    features = FeatureSet(np.concatenate([prototypes, masks], axis=1))
    return SynthInstance(features, target, alignment, classes)
