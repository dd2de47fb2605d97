import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError

load_dotenv()

VERSION = "0.1.0"
RUNTIME_KEYS = {"workers", "output"}


@dataclass
class Config:
    """Process-level runtime defaults, overridable from the environment or .env."""
    workers: int = int(os.getenv("WASSERPATH_WORKERS", "1"))
    output_dir: str = os.getenv("WASSERPATH_OUT", "out")
    max_steps: int = int(os.getenv("WASSERPATH_MAX_STEPS", str(2 ** 24)))
    log_level: str = os.getenv("WASSERPATH_LOG_LEVEL", "INFO")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Block):
    name: str = "sin_elliptic"
    params: dict[str, float] = Field(default_factory=dict)


class ProbeBlock(_Block):
    range: tuple[float, float] | None = None
    points: int = Field(default=1001, ge=2)
    bound_threshold: float = 10.0


class GridBlock(_Block):
    T: float = Field(default=1.0, gt=0.0)
    N: list[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128, 256, 512])
    m: int | None = Field(default=None, ge=1)

    @field_validator("N", mode="before")
    @classmethod
    def _listify(cls, value):
        return [value] if isinstance(value, (int, str)) else value

    @field_validator("N")
    @classmethod
    def _increasing(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("N-list is empty")
        if any(n <= 0 for n in value):
            raise ValueError("N values must be positive")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("N-list must be strictly increasing")
        return value

    @field_validator("m", mode="before")
    @classmethod
    def _auto(cls, value):
        return None if value in ("auto", "", None) else value


class SamplesBlock(_Block):
    M: int = Field(default=10_000, ge=100)


class MeshBlock(_Block):
    nodes: int = Field(default=4096, ge=16)
    width: float = Field(default=8.0, gt=0.0)


class ProxyBlock(_Block):
    depth: int = Field(default=8, ge=0)


class BridgeBlock(_Block):
    score_mode: Literal["auto", "closed_form", "lamperti_mc", "lamperti_expansion"] = "auto"
    mg: int = Field(default=4096, ge=100)
    cache_steps: tuple[float, float, float] = (256.0, 0.05, 0.05)
    inner_steps: int = Field(default=64, ge=1)
    level: int = Field(default=4, ge=0)


class FillBlock(_Block):
    nodes: int = Field(default=48, ge=8)
    width: float = Field(default=8.0, gt=0.0)


class LookbackBlock(_Block):
    payoff: Literal[
        "lookback_identity", "lookback_call", "lookback_floating", "terminal_call"
    ] = "lookback_floating"
    strike: float = 1.0


class VerifyBlock(_Block):
    samples: int = Field(default=20_000, ge=100)
    ot_instances: int = Field(default=1000, ge=1)


class OutputBlock(_Block):
    dir: str | None = None
    dump_laws: str | None = None


class ExperimentConfig(_Block):
    """Validated experiment configuration parsed from a flat key-value file."""
    seed: int = Field(ge=0)
    workers: int = Field(default_factory=lambda: Config().workers, ge=1)
    model: ModelBlock = Field(default_factory=ModelBlock)
    probe: ProbeBlock = Field(default_factory=ProbeBlock)
    grid: GridBlock = Field(default_factory=GridBlock)
    samples: SamplesBlock = Field(default_factory=SamplesBlock)
    mesh: MeshBlock = Field(default_factory=MeshBlock)
    proxy: ProxyBlock = Field(default_factory=ProxyBlock)
    bridge: BridgeBlock = Field(default_factory=BridgeBlock)
    fill: FillBlock = Field(default_factory=FillBlock)
    lookback: LookbackBlock = Field(default_factory=LookbackBlock)
    verify: VerifyBlock = Field(default_factory=VerifyBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    def config_hash(self) -> str:
        """SHA-256 of the canonical config, leaving out the worker count and output paths."""
        canonical = json.dumps(self.model_dump(mode="json", exclude=RUNTIME_KEYS), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Apply CLI overrides; ``None`` values leave the file setting untouched."""
        data = self.model_dump()
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, field = key.partition(".")
            if field:
                data[section][field] = value
            else:
                data[section] = value
        return _validate(data)


def _validate(data: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(p) for p in first["loc"])
        raise ConfigError(first["msg"], key=key) from e


def _coerce(raw: str) -> Any:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) > 1:
        return [p for p in parts if p]
    return parts[0]


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``section.key = value`` lines into a nested dictionary.

    A bare ``model = name`` sets ``model.name``. Comma-separated values
    become lists.
    """
    data: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        path = key.split(".")
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                child = node[part] = {"name": child}
            node = child
        leaf = path[-1]
        if isinstance(node.get(leaf), dict):
            node[leaf]["name"] = _coerce(raw)
        else:
            node[leaf] = _coerce(raw)
    if isinstance(data.get("model"), str):
        data["model"] = {"name": data["model"]}
    return data


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    return build_experiment_config(parse_config_text(text))


def build_experiment_config(data: dict[str, Any]) -> ExperimentConfig:
    if "seed" not in data:
        raise ConfigError("seed is required (no wall-clock default)", key="seed")
    return _validate(data)
