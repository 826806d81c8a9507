"""Flat JSON experiment configuration.

Unknown keys are rejected so sweep configs cannot silently typo a field.
The ``dataset`` value is either a synthetic generator name (``blobs``,
``moons``) or a directory containing ``images.idx`` and optionally
``labels.idx``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import network as N
from .errors import ConfigError, DataError
from .losses import Mode, ObjectiveSpec
from .quantizers import BackwardRule
from .training import TrainPlan

SCHEMA_VERSION = 1

_METHODS = ("ce", "sqakd", "mixed")
_QUANTIZERS = ("none", "pact", "ewgs", "dorefa", "lsq")
_BACKWARDS = ("ste", "ewgs")
_MODELS = ("mlp", "cnn")
_OPTIMIZERS = ("adam", "sgd")
_INITS = ("from_teacher", "random")


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    dataset: str = "blobs"
    n_samples: int = 512
    classes: int = 2
    noise: float = 0.1
    test_fraction: float = 0.25
    unlabeled: bool = False
    model: str = "mlp"
    quantizer: str = "ewgs"
    backward: str = "ste"
    b_w: int = 2
    b_a: int = 2
    delta: float = 0.1
    method: str = "sqakd"
    lam: float = 0.5
    rho: float = 4.0
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    warmup_iters: int = 0
    grad_clip: float = 5.0
    init: str = "from_teacher"
    seed: int = 0
    quantize_first_last: bool = False
    out_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        for name, value, allowed in (
            ("method", self.method, _METHODS),
            ("quantizer", self.quantizer, _QUANTIZERS),
            ("backward", self.backward, _BACKWARDS),
            ("model", self.model, _MODELS),
            ("optimizer", self.optimizer, _OPTIMIZERS),
            ("init", self.init, _INITS),
        ):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
        if self.quantizer != "none":
            for name, bits in (("b_w", self.b_w), ("b_a", self.b_a)):
                if not isinstance(bits, int) or not 1 <= bits <= 8:
                    raise ConfigError(f"{name} must be an integer in [1, 8], got {bits!r}")
        if self.delta < 0:
            raise ConfigError(f"delta must be non-negative, got {self.delta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.rho <= 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.dataset not in ("blobs", "moons"):
            root = Path(self.dataset)
            if not (root / "images.idx").exists():
                raise DataError(f"dataset path invalid: no images.idx under {root}")
        # Constructing the objective validates the method/lambda pairing.
        self.objective()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- runtime objects -----------------------------------------------------

    def objective(self) -> ObjectiveSpec:
        if self.method == "ce":
            return ObjectiveSpec(Mode.CE_ONLY, 0.0, self.rho)
        if self.method == "sqakd":
            return ObjectiveSpec(Mode.KL_ONLY, 1.0, self.rho)
        return ObjectiveSpec(Mode.MIXED, self.lam, self.rho)

    def plan(self, objective: ObjectiveSpec | None = None) -> TrainPlan:
        return TrainPlan(
            objective=objective or self.objective(),
            optimizer=self.optimizer,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_iters=self.warmup_iters,
            grad_clip=self.grad_clip,
            seed=self.seed,
            init=self.init,
        )

    def backward_rule(self) -> BackwardRule:
        if self.backward == "ewgs":
            return BackwardRule.ewgs(self.delta)
        return BackwardRule.ste()

    def load_datasets(self):
        """(train, test) datasets; labels stripped when ``unlabeled`` is set."""
        if self.dataset in ("blobs", "moons"):
            full = D.gen_synthetic(self.dataset, self.n_samples, self.classes, self.seed, noise=self.noise)
        else:
            root = Path(self.dataset)
            labels = root / "labels.idx"
            full = D.load_idx(str(root / "images.idx"), str(labels) if labels.exists() else None)
            if full.n_classes is None:
                full = dataclasses.replace(full, n_classes=self.classes)
        if self.unlabeled:
            full = full.without_labels()
        return D.train_test_split(full, self.test_fraction, seed=self.seed + 1)

    def n_classes(self, ds) -> int:
        return ds.n_classes if ds.n_classes is not None else self.classes

    def build_teacher(self, feature_shape, classes: int) -> N.Network:
        rng = np.random.Generator(np.random.PCG64(self.seed + 2))
        return N.build_model(self.model, feature_shape, classes, rng)

    def build_student(self, feature_shape, classes: int) -> N.Network:
        rng = np.random.Generator(np.random.PCG64(self.seed + 3))
        net = N.build_model(self.model, feature_shape, classes, rng)
        N.attach_quantizers(net, self.quantizer, self.b_w, self.b_a, self.backward_rule(), self.quantize_first_last)
        return net


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config parse error in {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = ExperimentConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from e
    return cfg.validate()
