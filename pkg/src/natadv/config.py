"""Experiment configuration: one YAML document with a section per component.

Sections: ``env``, ``nn``, ``rl``, ``gan``, ``mmd``, ``scan``, ``frontier`` plus
the workflow sections ``coop``, ``robot``, ``canonical``, ``adversary`` and
``robust``.  Missing sections fall back to the chosen preset.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .adversary import METRICS, AdversaryConfig
from .env import ConfigError, CursorAssistConfig
from .naturalness import GanConfig, MmdConfig
from .rigid import ScanConfig
from .rl import PpoConfig

SECTIONS = ("env", "nn", "rl", "gan", "mmd", "scan", "frontier", "coop", "robot", "canonical", "adversary", "robust")

# published hyper-parameters; slow on a laptop
PAPER_PRESET: dict = {
    "env": {},
    "nn": {"hidden": [64, 64], "init_log_std": -0.5},
    "rl": {},
    "gan": {},
    "mmd": {},
    "scan": {"lambda_min": 1e-5, "lambda_max": 10.0, "rounds": 3, "samples_per_round": 6, "seeds": [0, 1, 2],
             "window": 3},
    "frontier": {"normalization": None},
    "coop": {"iterations": 400, "rl": {"steps_per_iter": 19200}},
    "robot": {"iterations": 240, "use_expert": True, "rl": {"steps_per_iter": 9600, "hidden": [100, 100, 100]}},
    "canonical": {"episodes": 40},
    "adversary": {"metric": "ls_gan", "iterations": 120, "discriminator_updates_per_iter": 1, "eval_episodes": 40,
                  "explore_log_std": None, "rl": {}},
    "robust": {"rate": 0.15, "n": 3, "nat_range": [0.2, 0.8], "iterations": 60, "use_expert": False},
}

# calibrated so the whole workflow runs in minutes on one core
_DESK_PPO = {"lr": 1e-3, "epochs_per_iter": 10, "minibatches": 4, "reward_scale": 0.05}
DESK_PRESET: dict = {
    "env": {},
    "nn": {"hidden": [64, 64], "init_log_std": -0.5},
    "rl": {"lr": 3e-4, "epochs_per_iter": 10, "minibatches": 4, "steps_per_iter": 2400, "reward_scale": 0.05},
    "gan": {"generator_target": -1.0, "lr": 3e-3},
    "mmd": {},
    "scan": {"lambda_min": 1e-5, "lambda_max": 1000.0, "rounds": 2, "samples_per_round": 4, "seeds": [0, 1],
             "window": 2},
    "frontier": {"normalization": None},
    "coop": {"iterations": 100},
    "robot": {"iterations": 80, "use_expert": True},
    "canonical": {"episodes": 40},
    "adversary": {"metric": "ls_gan", "iterations": 80, "discriminator_updates_per_iter": 20, "eval_episodes": 40,
                  "explore_log_std": -0.5, "rl": {**_DESK_PPO, "steps_per_iter": 1600}},
    "robust": {"rate": 0.15, "n": 3, "nat_range": [0.2, 0.8], "iterations": 300, "use_expert": False},
}

PRESETS = {"paper": PAPER_PRESET, "desk": DESK_PRESET}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _known(section: str, d: dict, keys) -> dict:
    unknown = set(d) - set(keys)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return d


@dataclass
class ExperimentConfig:
    raw: dict
    preset: str = "desk"

    @classmethod
    def from_dict(cls, d: dict | None, preset: str = "desk") -> "ExperimentConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        d = dict(d or {})
        preset = d.pop("preset", preset)
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for k, v in d.items():
            if v is not None and not isinstance(v, dict):
                raise ConfigError(f"section [{k}] must be a mapping")
        cfg = cls(_merge(PRESETS[preset], {k: v for k, v in d.items() if v is not None}), preset)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, preset: str = "desk") -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping of sections")
        return cls.from_dict(data, preset)

    def dump(self) -> str:
        return yaml.safe_dump({"preset": self.preset, **self.raw}, sort_keys=True)

    def validate(self) -> None:
        self.env
        self.ppo
        self.adversary_template()
        self.scan
        r = self.raw
        _known("nn", r["nn"], ("hidden", "init_log_std"))
        _known("coop", r["coop"], ("iterations", "rl"))
        _known("robot", r["robot"], ("iterations", "use_expert", "rl"))
        self.coop_ppo
        self.robot_ppo
        _known("canonical", r["canonical"], ("episodes",))
        _known("frontier", r["frontier"], ("normalization",))
        _known("robust", r["robust"], ("rate", "n", "nat_range", "iterations", "use_expert"))
        for name in ("coop", "robot", "robust"):
            if int(r[name]["iterations"]) < 1:
                raise ConfigError(f"[{name}] iterations must be positive")
        if int(r["canonical"]["episodes"]) < 1:
            raise ConfigError("[canonical] episodes must be positive")
        if not 0.0 <= float(r["robust"]["rate"]) <= 1.0:
            raise ConfigError("[robust] rate must lie in [0, 1]")
        norm = r["frontier"]["normalization"]
        if norm is not None and (len(norm) != 2 or not float(norm[0]) < float(norm[1])):
            raise ConfigError("[frontier] normalization must be [lo, hi] with lo < hi")

    # -- typed views --------------------------------------------------------

    @property
    def env(self) -> CursorAssistConfig:
        return CursorAssistConfig.from_dict(self.raw["env"])

    def _ppo(self, overrides: dict) -> PpoConfig:
        nn = self.raw["nn"]
        return PpoConfig.from_dict({**self.raw["rl"], "hidden": nn["hidden"], "init_log_std": nn["init_log_std"],
                                    **overrides})

    @property
    def ppo(self) -> PpoConfig:
        return self._ppo({})

    @property
    def coop_ppo(self) -> PpoConfig:
        return self._ppo(self.raw["coop"].get("rl") or {})

    @property
    def robot_ppo(self) -> PpoConfig:
        """Personalised-robot training; robust fine-tuning resumes with the same settings."""
        return self._ppo(self.raw["robot"].get("rl") or {})

    @property
    def adversary_ppo(self) -> PpoConfig:
        return self._ppo(self.raw["adversary"].get("rl") or {})

    @property
    def gan(self) -> GanConfig:
        return GanConfig.from_dict({**self.raw["gan"], "hidden": self.raw["nn"]["hidden"]})

    @property
    def mmd(self) -> MmdConfig:
        return MmdConfig.from_dict(self.raw["mmd"])

    @property
    def scan(self) -> ScanConfig:
        return ScanConfig.from_dict(self.raw["scan"])

    def adversary_template(self, lam: float = 0.0, seed: int = 0, metric: str | None = None) -> AdversaryConfig:
        a = _known("adversary", dict(self.raw["adversary"]),
                   ("metric", "iterations", "discriminator_updates_per_iter", "eval_episodes", "explore_log_std", "rl",
                    "eval_seed", "collapse_threshold"))
        kind = metric or a.get("metric", "ls_gan")
        if kind not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        d = {
            "lam": float(lam),
            "metric_kind": kind,
            "iterations": int(a["iterations"]),
            "discriminator_updates_per_iter": int(a["discriminator_updates_per_iter"]),
            "eval_episodes": int(a["eval_episodes"]),
            "explore_log_std": a.get("explore_log_std"),
            "seed": int(seed),
            "ppo": self.adversary_ppo.to_dict(),
            "gan": self.gan.to_dict(),
            "mmd": self.raw["mmd"],
        }
        for k in ("eval_seed", "collapse_threshold"):
            if k in a:
                d[k] = a[k]
        return AdversaryConfig.from_dict(d)

    @property
    def normalization(self) -> tuple[float, float] | None:
        n = self.raw["frontier"]["normalization"]
        return None if n is None else (float(n[0]), float(n[1]))

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.raw[name])
