"""Flat ``key = value`` run configuration.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := '#' anything
    entry   := key '=' value [ '#' anything ]
    key     := [a-z_][a-z0-9_]*
    value   := int | float | 'true' | 'false' | bare string

Environment variables ``RDCL_<KEY>`` (upper case) override file values.
Unknown keys are rejected with the list of valid keys.
"""

from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .clm import ClmHyper
from .dse import DseHyper
from .synth import GenerativeSpec

ENV_PREFIX = "RDCL_"
_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ConfigError(ValueError):
    """Invalid configuration (exit code 2 at the command line)."""


@dataclass
class TrainConfig:
    seed: int = 0
    mode: str = "dcl"            # dcl | rdcl
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"      # adam | sgd
    n_train: int = 2000
    n_val: int = 500
    # synthetic data
    n_static_classes: int = 4
    n_dynamic_classes: int = 4
    T: int = 8
    d: int = 32
    noise_std: float = 0.05
    # disentangled sequential encoder
    d_lat: int = 16
    hidden: int = 32
    gamma: float = 1.0
    theta: float = 50.0
    tau: float = 0.5
    delta: float = 0.2
    motion_noise: float = 0.1
    contrastive: bool = True     # pairwise hinge terms (DSE+)
    # counterfactual module
    tau_clm: float = 2.0
    k: int = 5
    n_mc_train: int = 1
    n_mc_eval: int = 5
    # incomplete-modality module
    d_r: int = 0                 # 0: same as d
    zero_projection: bool = True
    alpha_audio: float = 0.0
    alpha_video: float = 0.0
    # reporting
    probe: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("dcl", "rdcl"):
            raise ConfigError(f"mode must be 'dcl' or 'rdcl', got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0 or self.n_train < self.batch_size or self.n_val < 2:
            raise ConfigError("need epochs >= 0, n_train >= batch_size and n_val >= 2")
        for name in ("alpha_audio", "alpha_video"):
            a = getattr(self, name)
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.alpha_audio + self.alpha_video > 1.0:
            raise ConfigError("alpha_audio + alpha_video > 1 would leave samples with no modality")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        try:
            self.dse_hyper()
            self.clm_hyper()
            self.spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def dse_hyper(self) -> DseHyper:
        return DseHyper(d=self.d, d_lat=self.d_lat, hidden=self.hidden, T=self.T, gamma=self.gamma,
                        theta=self.theta, tau=self.tau, delta=self.delta,
                        motion_noise=self.motion_noise)

    def clm_hyper(self) -> ClmHyper:
        return ClmHyper(tau=self.tau_clm, k=self.k, n_mc_train=self.n_mc_train,
                        n_mc_eval=self.n_mc_eval)

    def spec(self) -> GenerativeSpec:
        return GenerativeSpec(self.n_static_classes, self.n_dynamic_classes, self.T, self.d,
                              self.noise_std, self.seed)

    @property
    def repr_width(self) -> int:
        return self.d_r or self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        valid = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(valid))
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown}; valid keys: {', '.join(valid)}")
        kw = {}
        for k, v in raw.items():
            kw[k] = _coerce(k, v, valid[k].type)
        return cls(**kw)


def _coerce(key: str, value, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return s in ("true", "1", "yes")
        if typ == "int":
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        if typ == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {typ}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, env: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        raw.update(parse_config_text(p.read_text()))
    env = os.environ if env is None else env
    by_upper = {k.upper(): k for k in TrainConfig.keys()}
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            key = by_upper.get(name[len(ENV_PREFIX):].upper())
            if key is None:
                raise ConfigError(f"environment override {name}: unknown key; valid keys: {', '.join(sorted(by_upper.values()))}")
            raw[key] = value
    raw.update(overrides or {})
    return TrainConfig.from_dict(raw)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
