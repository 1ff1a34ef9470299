from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from ..attention import Mode, ValueSource
from ..baselines import FUSION_METHODS
from .data import MODALITIES, ValidationError

EMBED_WAYS = ("early", "early_residual", "late")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rebuild and retrain a model bit-for-bit.

    ``rank=None`` gives LMAM a dense query weight. ``hidden=None`` keeps the
    context encoder at its input width.
    """

    dims: tuple[int, int, int] = (16, 16, 16)
    num_classes: int = 3
    fusion: str = "lmam"
    rank: int | None = 45
    lfm_rank: int = 4
    fusion_out_dim: int | None = None
    mode: str = Mode.FUSED.value
    value_source: str = ValueSource.QUERY_ROWS.value
    pad_with_one: bool = True
    embed_way: str = "early"
    modalities: tuple[str, ...] = MODALITIES
    window: int = 3
    hidden: int | None = None
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.003
    optimizer: str = "adam"
    seed: int = 0

    def validate(self) -> None:
        errors = []
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            errors.append(f"dims must be three positive integers, got {self.dims}")
        if self.num_classes < 2:
            errors.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.fusion not in FUSION_METHODS:
            errors.append(f"fusion must be one of {FUSION_METHODS}, got {self.fusion!r}")
        if self.rank is not None and self.rank < 1:
            errors.append(f"rank must be positive or null (dense), got {self.rank}")
        if self.lfm_rank < 1:
            errors.append(f"lfm_rank must be positive, got {self.lfm_rank}")
        if self.mode not in {m.value for m in Mode}:
            errors.append(f"mode must be intra, cross or fused, got {self.mode!r}")
        if self.value_source not in {v.value for v in ValueSource}:
            errors.append(f"value_source must be query_rows or matched_features, got {self.value_source!r}")
        if self.embed_way not in EMBED_WAYS:
            errors.append(f"embed_way must be one of {EMBED_WAYS}, got {self.embed_way!r}")
        if not self.modalities or any(m not in MODALITIES for m in self.modalities) \
                or len(set(self.modalities)) != len(self.modalities):
            errors.append(f"modalities must be a non-empty subset of {MODALITIES}, got {self.modalities}")
        if self.window < 1 or self.window % 2 == 0:
            errors.append(f"window must be odd and >= 1, got {self.window}")
        if self.hidden is not None and self.hidden < 1:
            errors.append(f"hidden must be positive, got {self.hidden}")
        if self.epochs < 0:
            errors.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            errors.append(f"lr must be >= 0, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if errors:
            raise ValidationError(errors)

    @property
    def active_dims(self) -> tuple[int, ...]:
        return tuple(self.dims[MODALITIES.index(m)] for m in self.modalities)

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError([f"unknown config keys: {sorted(unknown)}"])
        d = dict(d)
        if "dims" in d:
            d["dims"] = tuple(d["dims"])
        if "modalities" in d:
            d["modalities"] = tuple(d["modalities"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
