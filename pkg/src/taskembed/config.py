"""Experiment configuration: an INI-style file with one section per component.

Only the master seed and the output directory may be overridden from the
environment (``TASKEMBED_SEED``, ``TASKEMBED_OUTPUT_DIR``).
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .encoder import EncoderConfig
from .multitask import TrainConfig

ENV_SEED = "TASKEMBED_SEED"
ENV_OUTPUT = "TASKEMBED_OUTPUT_DIR"


@dataclass
class SuiteConfig:
    n_per_type: int = 4
    n_domains: int = 8
    size_profile: tuple = (160, 240, 400, 640)
    length_profile: tuple = ((3, 5), (6, 8), (9, 11), (12, 14))


@dataclass
class AnalysisConfig:
    k: int = 10
    quartiles: int = 4
    gmm_components: int = 8
    ridge_lambdas: tuple = (0.01, 0.1, 1.0, 10.0)
    baseline_trials: int = 1000
    random_draws: int = 10
    mlm_steps: int = 2000
    mlm_lr: float = 1e-3
    stability_seeds: int = 3


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0
    output_dir: str = "runs"

    SECTIONS = ("encoder", "train", "suite", "analysis")

    # -- serialisation ---------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {"seed": str(self.seed), "output_dir": self.output_dir}
        for name in self.SECTIONS:
            cp[name] = {k: _encode(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        unknown = set(cp.sections()) - set(cls.SECTIONS) - {"experiment"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if cp.has_section("experiment"):
            sec = cp["experiment"]
            cfg.seed = sec.getint("seed", cfg.seed)
            cfg.output_dir = sec.get("output_dir", cfg.output_dir)
        for name in cls.SECTIONS:
            if not cp.has_section(name):
                continue
            current = getattr(cfg, name)
            known = {f.name: f for f in fields(current)}
            updates = {}
            for key, raw in cp[name].items():
                if key not in known:
                    raise ValueError(f"unknown key {name}.{key}")
                updates[key] = _decode(raw, getattr(current, key))
            setattr(cfg, name, replace(current, **updates))
        return cfg

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def load(cls, path, env=None) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read()).with_env(env)

    def with_env(self, env=None) -> "ExperimentConfig":
        env = os.environ if env is None else env
        out = replace(self)
        if env.get(ENV_SEED):
            try:
                out.seed = int(env[ENV_SEED])
            except ValueError:
                raise ValueError(f"{ENV_SEED} must be an integer") from None
        if env.get(ENV_OUTPUT):
            out.output_dir = env[ENV_OUTPUT]
        return out

    def as_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in self.SECTIONS}
        d.update(seed=self.seed, output_dir=self.output_dir)
        return d

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory excluded)."""
        d = self.as_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def train_config(self, **overrides) -> TrainConfig:
        return self.train.replace(seed=self.seed, **overrides)


def _encode(v) -> str:
    return v if isinstance(v, str) else json.dumps(v)


def _decode(raw: str, default):
    if isinstance(default, str):
        return raw
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        raise ValueError(f"cannot parse config value {raw!r}") from None
    if isinstance(default, tuple):
        return _tuplify(value)
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v
