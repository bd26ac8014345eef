"""Training configuration and the flat JSON config file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..errors import ConfigError, StorageError
from ..objective import LossWeights
from ..scm import SCM_FIELDS, ScmConfig, default_config

VARIANTS = ("BAG", "BAG_VAE", "BAG_RE", "BAG_TTA", "ERM")

# which pieces of the full method each variant keeps
COMPONENTS = {
    "BAG": frozenset({"vae", "experts", "adaptation", "correction"}),
    "BAG_VAE": frozenset({"experts", "adaptation", "correction"}),
    "BAG_RE": frozenset({"vae", "experts"}),
    "BAG_TTA": frozenset({"vae", "adaptation", "correction"}),
    "ERM": frozenset(),
}


@dataclass(frozen=True)
class TrainConfig:
    lambda0: float = 0.1
    lambda1: float = 0.1
    beta: float = 1.0
    epochs: int = 300
    batch_size: int | None = None
    step_size: float = 1e-2
    n_c: int = 5
    n_b: int = 5
    seed: int = 0
    split_fractions: tuple[float, float] = (0.8, 0.2)
    variant: str = "BAG"
    lambda_env: float = 100.0
    lambda_inv: float = 1.0
    lambda_dom: float = 1.0
    embed_dim: int = 8
    decoder_hidden: int = 16
    tta_epochs: int = 10
    tta_step_size: float = 0.1
    correction_mode: str = "binary_phi"
    n_source: int = 4000
    n_target: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        for name in ("lambda0", "lambda1", "beta", "lambda_env", "lambda_inv", "lambda_dom"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("n_c", "n_b", "embed_dim", "decoder_hidden", "n_source", "n_target"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.tta_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.step_size <= 0 or self.tta_step_size <= 0:
            raise ConfigError("step sizes must be positive")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ConfigError("batch_size must be positive or null")
        fr = self.split_fractions
        if len(fr) != 2 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-12:
            raise ConfigError(f"split_fractions must be two positive numbers summing to 1, got {fr}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.correction_mode not in ("binary_phi", "multiclass_ls", "none"):
            raise ConfigError(f"unknown correction_mode {self.correction_mode!r}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            vae=self.lambda0,
            ind=self.lambda1,
            env=self.lambda_env,
            inv=self.lambda_inv,
            dom=self.lambda_dom,
            beta=self.beta,
        )

    def for_variant(self, variant: str) -> "TrainConfig":
        """This config with the switches of ``variant`` applied."""
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        keep = COMPONENTS[variant]
        changes = {"variant": variant}
        if variant != "ERM":
            if "vae" not in keep:
                changes["lambda0"] = 0.0
            if "adaptation" not in keep:
                changes["tta_epochs"] = 0
            if "correction" not in keep:
                changes["correction_mode"] = "none"
        return replace(self, **changes)

    def to_json(self) -> dict:
        out = asdict(self)
        out["split_fractions"] = list(self.split_fractions)
        return out


TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))


def uses_experts(variant: str) -> bool:
    return "experts" in COMPONENTS[variant]


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    scm_overrides: dict

    def scm_for_seed(self, seed: int) -> ScmConfig:
        base = default_config(seed, n_c=self.train.n_c, n_b=self.train.n_b)
        return base.replace(**self.scm_overrides) if self.scm_overrides else base

    def to_json(self) -> dict:
        return {**self.train.to_json(), **self.scm_overrides}


def parse_config(obj) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - set(TRAIN_FIELDS) - set(SCM_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    train = {k: v for k, v in obj.items() if k in TRAIN_FIELDS}
    scm = {k: v for k, v in obj.items() if k in SCM_FIELDS}
    try:
        cfg = TrainConfig(**train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    run = RunConfig(cfg, scm)
    run.scm_for_seed(cfg.seed)  # surface bad generator fields now
    return run


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config(obj)
