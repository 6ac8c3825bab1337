"""Experiment configuration: JSON in, validated frozen dataclass out.

Errors carry the path of the offending field, e.g. ``knowledge[1].epsilon``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any

import jsonschema

from kgrl import grid_env as G
from kgrl import knowledge as K
from kgrl import point_env as P
from kgrl.algo.ppo import PPOConfig
from kgrl.algo.sac import SACConfig
from kgrl.policy import GridArch, PointArch

SCHEMA_PATH = Path(__file__).with_name("config.schema.json")
CONFIG_DIR = Path(__file__).with_name("configs")
DEFAULT_D_K = {"grid": 8, "point": 4}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path or "<root>"
        super().__init__(f"{self.path}: {message}")


@lru_cache(maxsize=None)
def _schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text())


def _field_path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def _json_compatible(value):
    # tuples become lists so a config round-trips through JSON unchanged
    return json.loads(json.dumps(value))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    env: dict
    actor: dict
    algo: dict
    seeds: tuple[int, ...]
    total_steps: int
    knowledge: tuple = ()
    eval_every: int = 20_000
    eval_episodes: int = 100
    threshold: float | None = None
    stop_at_threshold: bool = False
    out_dir: str = "runs"
    base_dir: str = field(default=".", compare=False)  # resolves relative pack paths

    # -- construction
    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> ExperimentConfig:
        validator = jsonschema.Draft202012Validator(_schema())
        errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            raise ConfigError(_field_path(err.absolute_path), err.message)
        d = dict(data)
        d["seeds"] = tuple(d["seeds"])
        d["knowledge"] = tuple(_json_compatible(k) for k in d.get("knowledge", []))
        cfg = cls(**d, base_dir=str(base_dir))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        if not path.exists() and (CONFIG_DIR / path).exists():
            path = CONFIG_DIR / path
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"{path} is not valid JSON ({exc})") from exc
        except FileNotFoundError as exc:
            raise ConfigError("<root>", f"no config at {path}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["seeds"] = list(self.seeds)
        d["knowledge"] = list(self.knowledge)
        return _json_compatible(d)

    def with_overrides(self, **changes) -> ExperimentConfig:
        data = {**self.to_dict(), **changes}
        return ExperimentConfig.from_dict(data, base_dir=self.base_dir)

    def hash(self) -> str:
        """Identity of the experiment; where it is written does not count."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- derived objects
    @property
    def family(self) -> str:
        return self.env["family"]

    @property
    def d_k(self) -> int:
        return int(self.actor.get("d_k", DEFAULT_D_K[self.family]))

    def env_config(self, **overrides):
        env = {**self.env, **overrides}
        if env["family"] == "grid":
            if "preset" in env:
                base = G.PRESETS[env["preset"]]
                extra = {k: env[k] for k in ("width", "height", "max_steps") if k in env}
                return replace(base, **extra) if extra else base
            kw = {k: env[k] for k in ("width", "height", "variant", "max_steps") if k in env}
            return G.GridConfig(**kw)
        kw = {k: env[k] for k in ("variant", "goal_range_scale", "max_steps") if k in env}
        return P.PointConfig(**kw)

    def arch(self):
        hidden = self.actor.get("hidden")
        if self.family == "grid":
            return GridArch() if hidden is None else GridArch(hidden=int(hidden))
        if hidden is None:
            return PointArch()
        return PointArch(hidden=tuple(hidden) if isinstance(hidden, list) else (int(hidden),) * 2)

    def algo_config(self) -> PPOConfig | SACConfig:
        kw = {k: v for k, v in self.algo.items() if k != "name"}
        cls = PPOConfig if self.algo["name"] == "ppo" else SACConfig
        return cls(**kw)

    def pack_path(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # -- semantic checks the schema cannot express
    def check(self) -> None:
        family = self.family
        try:
            self.env_config()
        except (G.GridConfigError, P.PointConfigError, TypeError) as exc:
            raise ConfigError("env", str(exc)) from exc
        except KeyError as exc:
            raise ConfigError("env.preset", f"unknown preset {exc.args[0]!r}; choose from {sorted(G.PRESETS)}") from exc
        if family == "grid" and "preset" not in self.env and "variant" not in self.env:
            raise ConfigError("env", "grid envs need a preset or a variant")
        if family == "point" and "goal_range_scale" in self.env and "variant" not in self.env:
            raise ConfigError("env.variant", "point envs need a variant")
        want_algo = "ppo" if family == "grid" else "sac"
        if self.algo["name"] != want_algo:
            raise ConfigError("algo.name", f"{family} envs train with {want_algo}")
        try:
            self.algo_config()
        except TypeError as exc:
            raise ConfigError("algo", str(exc)) from exc
        except ValueError as exc:
            raise ConfigError("algo", str(exc)) from exc
        hidden = self.actor.get("hidden")
        if family == "grid" and isinstance(hidden, list):
            raise ConfigError("actor.hidden", "grid actors take a single hidden width")
        if self.actor["kind"] == "baseline" and self.knowledge:
            raise ConfigError("knowledge", "a baseline actor takes no knowledge")
        space = "grid7" if family == "grid" else "cont4"
        names = set()
        for i, item in enumerate(self.knowledge):
            path = f"knowledge[{i}]"
            name, item_space = self._describe(item, path)
            if item_space != space:
                raise ConfigError(path, f"knowledge acts in {item_space} but the {family} env needs {space}")
            if name in names:
                raise ConfigError(path, f"duplicate knowledge name {name!r}")
            names.add(name)

    def _describe(self, item, path: str) -> tuple[str, str]:
        if isinstance(item, str):
            item = {"rule": item}
        if "rule" in item:
            rule = K.SHORT_NAMES.get(item["rule"], item["rule"])
            if rule in K.GRID_RULES:
                return item.get("name", item["rule"]), "grid7"
            if rule in K.CONT_RULES:
                return item.get("name", item["rule"]), "cont4"
            raise ConfigError(path, f"unknown rule {item['rule']!r}; choose from {sorted(K.SHORT_NAMES)}")
        manifest, _ = K.pack_files(self.pack_path(item["pack"]))
        try:
            meta = json.loads(manifest.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"{path}.pack", f"no pack manifest at {manifest}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}.pack", f"{manifest} is not valid JSON") from exc
        if meta.get("d_k") != self.d_k:
            raise ConfigError(f"{path}.pack", f"pack d_k {meta.get('d_k')} != actor d_k {self.d_k}")
        return item.get("name", meta.get("name", manifest.stem)), meta.get("action_space", "?")


def load_config(path_or_dict: str | Path | dict[str, Any]) -> ExperimentConfig:
    if isinstance(path_or_dict, dict):
        return ExperimentConfig.from_dict(path_or_dict)
    return ExperimentConfig.load(path_or_dict)
