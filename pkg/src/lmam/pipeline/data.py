"""Dialogue data model, synthetic multimodal conversation generator, and file I/O.

On disk a dataset is a directory holding ``manifest.json`` plus one JSON-lines
file per split (``train.jsonl``, ``val.jsonl``, ``test.jsonl``). Each line is
one dialogue::

    {"id": "train-0000", "utterances": [{"text": [...], "audio": [...],
                                         "video": [...], "label": 2}, ...]}

Floats are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..tensor import make_rng

MODALITIES = ("text", "audio", "video")
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"


class ValidationError(ValueError):
    """Invalid generator or experiment parameters; ``errors`` lists each one."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class Dialogue:
    id: str
    text: np.ndarray
    audio: np.ndarray
    video: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        for name in MODALITIES:
            m = getattr(self, name)
            if m.ndim != 2 or m.shape[0] != n:
                raise ValueError(
                    f"dialogue {self.id}: {name} has shape {m.shape}, expected {n} rows"
                )

    def __len__(self):
        return len(self.labels)

    def features(self, modalities: Sequence[str] = MODALITIES) -> list[np.ndarray]:
        return [getattr(self, m) for m in modalities]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(getattr(self, m).shape[1] for m in MODALITIES)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "utterances": [
                {
                    "text": self.text[i].tolist(),
                    "audio": self.audio[i].tolist(),
                    "video": self.video[i].tolist(),
                    "label": int(self.labels[i]),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Dialogue":
        utts = rec["utterances"]
        return cls(
            id=rec["id"],
            text=np.array([u["text"] for u in utts], dtype=np.float64),
            audio=np.array([u["audio"] for u in utts], dtype=np.float64),
            video=np.array([u["video"] for u in utts], dtype=np.float64),
            labels=np.array([u["label"] for u in utts], dtype=np.int64),
        )


@dataclass
class GeneratorSpec:
    """Parameters of the synthetic conversation generator.

    Each utterance's modality vector is
    ``gamma_m * prototype_m[label] + beta * interaction_m + sigma * noise``.
    The interaction part shares one Gaussian latent across the three
    modalities, with class-specific sign flips on audio and video, so its
    marginal in any single modality carries no label information; only
    cross-modal products reveal the class. Labels follow a Markov chain that
    keeps the previous label with probability ``rho``.
    """

    num_classes: int = 3
    dims: tuple[int, int, int] = (16, 16, 16)
    n_train: int = 600
    n_val: int = 100
    n_test: int = 100
    min_utterances: int = 6
    max_utterances: int = 12
    beta: float = 1.0
    gamma: tuple[float, float, float] = (0.4, 0.3, 0.2)
    rho: float = 0.5
    sigma: float = 1.0
    interaction_dim: int = 8
    class_weights: tuple[float, ...] | None = None
    seed: int = 0

    def validate(self) -> None:
        errors = []
        if self.num_classes < 2:
            errors.append(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            errors.append(f"dims must be three positive integers, got {self.dims}")
        if self.n_train < 1:
            errors.append(f"n_train must be >= 1, got {self.n_train}")
        if self.n_val < 0 or self.n_test < 0:
            errors.append(f"n_val/n_test must be >= 0, got {self.n_val}/{self.n_test}")
        if self.min_utterances < 1 or self.max_utterances < self.min_utterances:
            errors.append(
                f"utterance range must satisfy 1 <= min <= max, got "
                f"[{self.min_utterances}, {self.max_utterances}]"
            )
        if self.beta < 0:
            errors.append(f"beta must be >= 0, got {self.beta}")
        if len(self.gamma) != 3 or any(g < 0 for g in self.gamma):
            errors.append(f"gamma must be three nonnegative values, got {self.gamma}")
        if not 0.0 <= self.rho < 1.0:
            errors.append(f"rho must lie in [0, 1), got {self.rho}")
        if self.sigma < 0:
            errors.append(f"sigma must be >= 0, got {self.sigma}")
        if len(self.dims) == 3 and not 1 <= self.interaction_dim <= min(self.dims):
            errors.append(
                f"interaction_dim must lie in [1, min(dims)={min(self.dims)}], got {self.interaction_dim}"
            )
        if self.class_weights is not None:
            if len(self.class_weights) != self.num_classes or any(w <= 0 for w in self.class_weights):
                errors.append(
                    f"class_weights must be {self.num_classes} positive values, got {self.class_weights}"
                )
        if self.seed < 0:
            errors.append(f"seed must be >= 0, got {self.seed}")
        if errors:
            raise ValidationError(errors)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["gamma"] = list(self.gamma)
        d["class_weights"] = None if self.class_weights is None else list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["gamma"] = tuple(d["gamma"])
        if d.get("class_weights") is not None:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


@dataclass
class Dataset:
    num_classes: int
    dims: tuple[int, int, int]
    splits: dict[str, list[Dialogue]] = field(default_factory=dict)
    generator: dict | None = None
    seed: int | None = None

    @property
    def train(self):
        return self.splits["train"]

    @property
    def val(self):
        return self.splits.get("val", [])

    @property
    def test(self):
        return self.splits["test"]

    def manifest(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "dims": list(self.dims),
            "generator": self.generator,
            "seed": self.seed,
            "splits": {name: len(ds) for name, ds in self.splits.items()},
        }


class _World:
    """Dataset-wide latent structure drawn once per seed."""

    def __init__(self, spec: GeneratorSpec, rng: np.random.Generator):
        c, k = spec.num_classes, spec.interaction_dim
        self.prototypes = [rng.standard_normal((c, d)) for d in spec.dims]
        self.embeddings = []
        for d in spec.dims:
            q, _ = np.linalg.qr(rng.standard_normal((d, k)))
            self.embeddings.append(q[:, :k] * np.sqrt(d / k))
        # text is the reference; audio and video flip latent coordinates per class
        signs = [np.ones((c, k))]
        for _ in range(2):
            signs.append(rng.choice([-1.0, 1.0], size=(c, k)))
        self.signs = signs
        w = np.ones(c) if spec.class_weights is None else np.asarray(spec.class_weights, float)
        self.class_probs = w / w.sum()


def markov_labels(rng: np.random.Generator, length: int, rho: float, class_probs) -> np.ndarray:
    """Label chain: keep the previous label w.p. ``rho``, else redraw from ``class_probs``."""
    c = len(class_probs)
    labels = np.empty(length, dtype=np.int64)
    labels[0] = rng.choice(c, p=class_probs)
    for i in range(1, length):
        if rng.random() < rho:
            labels[i] = labels[i - 1]
        else:
            labels[i] = rng.choice(c, p=class_probs)
    return labels


def _make_dialogue(spec, world, rng, did) -> Dialogue:
    n = int(rng.integers(spec.min_utterances, spec.max_utterances + 1))
    labels = markov_labels(rng, n, spec.rho, world.class_probs)
    z = rng.standard_normal((n, spec.interaction_dim))
    feats = []
    for m, d in enumerate(spec.dims):
        proto = world.prototypes[m][labels]
        inter = (z * world.signs[m][labels]) @ world.embeddings[m].T
        noise = rng.standard_normal((n, d))
        feats.append(spec.gamma[m] * proto + spec.beta * inter + spec.sigma * noise)
    return Dialogue(did, feats[0], feats[1], feats[2], labels)


def generate_synthetic(spec: GeneratorSpec) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed)
    world = _World(spec, rng)
    splits = {}
    for name, count in zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test)):
        splits[name] = [_make_dialogue(spec, world, rng, f"{name}-{i:04d}") for i in range(count)]
    return Dataset(spec.num_classes, tuple(spec.dims), splits, spec.to_dict(), spec.seed)


def split_heldout(dialogues: Sequence[Dialogue], ratio: float = 0.8):
    """Split a held-out set into (test, val) at ``ratio : 1 - ratio`` in file order."""
    cut = int(round(len(dialogues) * ratio))
    return list(dialogues[:cut]), list(dialogues[cut:])


def save_dataset(dataset: Dataset, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, dialogues in dataset.splits.items():
        path = directory / f"{name}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for d in dialogues:
                fh.write(json.dumps(d.to_record(), separators=(",", ":")))
                fh.write("\n")
        written.append(path)
    path = directory / MANIFEST
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written


def read_split(path) -> list[Dialogue]:
    with open(path, encoding="utf-8") as fh:
        return [Dialogue.from_record(json.loads(line)) for line in fh if line.strip()]


def load_dataset(directory) -> Dataset:
    """Load a dataset directory; a missing val split is carved from test 8:2."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.jsonl"
        if os.path.exists(path):
            splits[name] = read_split(path)
    if "train" not in splits or "test" not in splits:
        raise FileNotFoundError(f"{directory} needs at least train.jsonl and test.jsonl")
    if "val" not in splits:
        splits["test"], splits["val"] = split_heldout(splits["test"])
    return Dataset(manifest["num_classes"], tuple(manifest["dims"]), splits,
                   manifest.get("generator"), manifest.get("seed"))
