"""Run configuration: every tunable with its default, flat key=value config
file parsing, and strict validation (unknown keys are rejected).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .activation import VARIANTS
from .errors import ConfigError
from .features import SynthSpec
from .memory_bank import INIT_RANDOM, INIT_TEXT
from .objectives import LossWeights

TIER_MODES = ("both", "lev1", "lev2")
_INIT_ALIASES = {"text-seeded": INIT_TEXT, "text": INIT_TEXT, "random": INIT_RANDOM}


@dataclass
class RunConfig:
    """All tunables. Defaults follow the reference operating point:
    alpha 0.2, beta 0.8, lambdas 0.02/20/0.1, five prototypes, tau 0.01,
    30 epochs, and the 10-class/32-token synthetic episode."""

    # synthetic data
    seed: int = 7
    d: int = 64
    n_tok: int = 32
    n_classes: int = 10
    signal_tokens: int = 4
    noise_sigma: float = 0.3
    distractor_pool: int = 32
    shots: int = 16
    test_per_class: int = 20
    # activation & memory bank
    k_act: int = 16
    n_proto: int = 5
    bank_sigma: float = 0.05
    proto_renorm: bool = True
    semantic_on: bool = True
    recalc_on: bool = True
    init_mode: str = INIT_TEXT
    selection_variant: str = "top-k"
    tier_mode: str = "both"
    # fusion modules
    alpha: float = 0.2
    beta: float = 0.8
    tau: float = 0.01
    heads: int = 4
    ffn_mult: int = 2
    share_irm: bool = False
    init_scale: float = 0.05
    # objective & optimizer
    lambda1: float = 0.02
    lambda2: float = 20.0
    lambda3: float = 0.1
    epochs: int = 30
    lr: float = 0.01
    sgd_momentum: float = 0.0

    def validate(self) -> "RunConfig":
        if self.init_mode in _INIT_ALIASES:
            self.init_mode = _INIT_ALIASES[self.init_mode]
        checks = [
            (self.seed >= 0, "seed must be nonnegative"),
            (self.d >= 2, "d must be >= 2"),
            (self.heads >= 1 and self.d % self.heads == 0, "d must be divisible by heads"),
            (self.n_tok >= 1, "n_tok must be >= 1"),
            (1 <= self.signal_tokens <= self.n_tok, "signal_tokens outside [1, n_tok]"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            (self.distractor_pool >= 1, "distractor_pool must be >= 1"),
            (self.n_classes >= 2, "n_classes must be >= 2"),
            (self.shots >= 1, "shots must be >= 1"),
            (self.test_per_class >= 1, "test_per_class must be >= 1"),
            (1 <= self.k_act <= self.n_tok, "k_act outside [1, n_tok]"),
            (self.n_proto >= 1, "n_proto must be >= 1"),
            (self.bank_sigma >= 0, "bank_sigma must be >= 0"),
            (0 <= self.alpha <= 1, "alpha outside [0, 1]"),
            (0 <= self.beta <= 1, "beta outside [0, 1]"),
            (self.tau > 0, "tau must be positive"),
            (self.ffn_mult >= 1, "ffn_mult must be >= 1"),
            (self.init_scale > 0, "init_scale must be positive"),
            (min(self.lambda1, self.lambda2, self.lambda3) >= 0, "lambdas must be >= 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.lr > 0, "lr must be positive"),
            (0 <= self.sgd_momentum < 1, "sgd_momentum outside [0, 1)"),
            (self.init_mode in (INIT_TEXT, INIT_RANDOM), f"init_mode {self.init_mode!r}"),
            (self.selection_variant in VARIANTS, f"selection_variant {self.selection_variant!r}"),
            (self.tier_mode in TIER_MODES, f"tier_mode {self.tier_mode!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    # -- conversions --------------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**data)
        return cfg.validate()

    def with_overrides(self, **overrides) -> "RunConfig":
        data = self.to_dict()
        unknown = sorted(set(overrides) - set(data))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Flat key=value file; blank lines and '#' comments allowed."""
        return cls.from_dict({**cls().to_dict(), **parse_config_file(path)})

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_classes=self.n_classes, n_tok=self.n_tok, d=self.d,
            signal_tokens=self.signal_tokens, noise_sigma=self.noise_sigma,
            distractor_pool=self.distractor_pool, seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                           lambda3=self.lambda3, tau=self.tau)


def parse_config_file(path) -> dict:
    """Key/value pairs from a flat config file, coerced but not defaulted."""
    data: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        data[key] = _coerce(RunConfig, key, value, f"{path}:{lineno}")
    return data


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _coerce(cls, key: str, value: str, where: str):
    proto = {f.name: f.default for f in fields(cls)}
    if key not in proto:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    target = proto[key]
    try:
        if isinstance(target, bool):
            if value.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {value!r}")
            return _BOOL_WORDS[value.lower()]
        if isinstance(target, int):
            return int(value)
        if isinstance(target, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
