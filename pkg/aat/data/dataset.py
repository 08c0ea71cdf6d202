"""
Datasets on disk.

A dataset directory holds:

- `vocab.txt`: the vocabulary, one token per line;
- `meta.json`: how the dataset was made;
- `<split>/features/<index>.aatf`: one feature file per example;
- `<split>/captions.txt`: one caption per line, tokens separated by spaces;
- `<split>/alignment.txt`: the number of regions behind each caption token.
"""

import json
import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from ..errors import ConfigError
from .features import FeatureSet, load_features, write_features
from .synth import SynthConfig, SynthWorld, generate
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

SPLITS = ("train", "val")
_SPLIT_STREAMS = {"train": 0, "val": 1}


@dataclass
class Example:
    features: FeatureSet
    target: List[int]
    alignment: List[int] = field(default_factory=list)


@dataclass
class Dataset:
    vocab: Vocabulary
    splits: Dict[str, List[Example]]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> List[Example]:
        try:
            return self.splits[split]
        except KeyError:
            raise ConfigError(f"dataset has no split {split!r}") from None

    @property
    def feature_dim(self) -> int:
        for examples in self.splits.values():
            if examples:
                return examples[0].features.d_a
        raise ConfigError("dataset is empty")


def generate_dataset(
    config: SynthConfig, seed: int, n_train: int, n_val: int
) -> Dataset:
    """
    Generates a synthetic dataset. Example `i` of a split is drawn from the seed `[seed, split, i]`, so
    every example can be regenerated on its own.
    """
    if n_train < 1 or n_val < 0:
        raise ConfigError("need n_train >= 1 and n_val >= 0")
    world = SynthWorld(config)
    splits = {}
    for name, count in zip(SPLITS, (n_train, n_val)):
        stream = _SPLIT_STREAMS[name]
        splits[name] = []
        for index in range(count):
            instance = generate([seed, stream, index], world=world)
            splits[name].append(
                Example(instance.features, instance.target, instance.alignment)
            )
    meta = {"seed": seed, "synth": config.to_dict(), "sizes": {"train": n_train, "val": n_val}}
    logger.info("generated %d train and %d val examples (seed %d)", n_train, n_val, seed)
    return Dataset(world.vocab, splits, meta)


def write_dataset(
    out_dir: Union[str, Path], dataset: Dataset, force: bool = False
) -> Path:
    """
    Writes a dataset directory. The files are first written to a temporary sibling directory which is then
    renamed, so a failed write leaves nothing behind.

    :param force: Replace `out_dir` if it already exists and is not empty.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"{out_dir} is not empty (pass force to overwrite)")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}-", dir=out_dir.parent))
    try:
        dataset.vocab.save(staging / "vocab.txt")
        (staging / "meta.json").write_text(
            json.dumps(dataset.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        for name, examples in dataset.splits.items():
            split_dir = staging / name
            (split_dir / "features").mkdir(parents=True)
            captions, alignments = [], []
            for index, example in enumerate(examples):
                write_features(split_dir / "features" / f"{index}.aatf", example.features)
                captions.append(
                    " ".join(dataset.vocab.token_of(t) for t in example.target)
                )
                alignments.append(" ".join(str(a) for a in example.alignment))
            (split_dir / "captions.txt").write_text(
                "".join(f"{c}\n" for c in captions), encoding="utf-8"
            )
            (split_dir / "alignment.txt").write_text(
                "".join(f"{a}\n" for a in alignments), encoding="utf-8"
            )
        if out_dir.exists():
            shutil.rmtree(out_dir)
        staging.rename(out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return out_dir


def load_dataset(
    data_dir: Union[str, Path], splits: Optional[List[str]] = None
) -> Dataset:
    """
    Reads a dataset directory written by `write_dataset`.

    :param splits: The splits to load; by default every split present.
    """
    data_dir = Path(data_dir)
    if not (data_dir / "vocab.txt").is_file():
        raise ConfigError(f"{data_dir} is not a dataset directory (no vocab.txt)")
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    meta_path = data_dir / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
    if splits is None:
        splits = [s for s in SPLITS if (data_dir / s).is_dir()]

    loaded = {}
    for name in splits:
        split_dir = data_dir / name
        if not split_dir.is_dir():
            raise ConfigError(f"{data_dir} has no split {name!r}")
        captions = (split_dir / "captions.txt").read_text(encoding="utf-8").splitlines()
        alignment_path = split_dir / "alignment.txt"
        alignments = (
            alignment_path.read_text(encoding="utf-8").splitlines()
            if alignment_path.is_file()
            else [""] * len(captions)
        )
        if len(alignments) != len(captions):
            raise ConfigError(f"{split_dir}: captions and alignments differ in length")
        examples = []
        for index, (caption, alignment) in enumerate(zip(captions, alignments)):
            examples.append(
                Example(
                    load_features(split_dir / "features" / f"{index}.aatf"),
                    vocab.encode(caption.split()),
                    [int(a) for a in alignment.split()],
                )
            )
        loaded[name] = examples
    return Dataset(vocab, loaded, meta)
