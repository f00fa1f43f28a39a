"""Scenario files: TOML in, validated :class:`Scenario` out, effective TOML back.

A scenario file has optional tables ``[model]``, ``[hardware]``, ``[cost]``,
``[slo]``, ``[policy]``, ``[engine]``, ``[workload]``, ``[buckets]`` and
``[output]`` plus a top-level ``seed``. Anything left out takes its default;
:meth:`ScenarioConfig.to_dict` writes every value back so the emitted file
reproduces the run on its own.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cost_model import (HARDWARE_PRESETS, MODEL_PRESETS, CostParams, HardwareSpec, ModelSpec,
                         get_hardware, get_model)
from .engine import EngineConfig, Policy, Scenario
from .scheduler import LengthBuckets, SLOSpec
from .workload import (SHAREGPT_MAX, SHAREGPT_MIN, SHAREGPT_MU, SHAREGPT_SIGMA, Trace, TraceError,
                       generate_fixed, generate_sharegpt_like, load_trace)

WORKLOAD_KINDS = ("sharegpt", "fixed", "trace")


class ConfigError(ValueError):
    """Anything wrong with a scenario file; the CLI maps it to exit code 2."""


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "sharegpt"
    n: int = 1000
    rate: float = 1.0  # requests per second, Poisson
    prompt_tokens: int = 512  # fixed only
    output_tokens: int = 512  # fixed only
    mu: float = SHAREGPT_MU  # sharegpt only
    sigma: float = SHAREGPT_SIGMA
    path: str = ""  # trace only

    def __post_init__(self):
        if self.kind not in WORKLOAD_KINDS:
            raise ValueError(f"workload.kind must be one of {WORKLOAD_KINDS}, got {self.kind!r}")
        if self.kind == "trace":
            if not self.path:
                raise ValueError("workload.path is required for kind = 'trace'")
            return
        if self.n < 1:
            raise ValueError("workload.n must be >= 1")
        if not self.rate > 0:
            raise ValueError("workload.rate must be > 0")
        if self.kind == "fixed" and (self.prompt_tokens < 1 or self.output_tokens < 1):
            raise ValueError("workload prompt_tokens and output_tokens must be >= 1")
        if self.kind == "sharegpt" and not self.sigma > 0:
            raise ValueError("workload.sigma must be > 0")


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    transfer_log: bool = False
    decision_log: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    model: str = "llama2-7b"
    model_overrides: Dict[str, Any] = field(default_factory=dict)
    hardware: str = "l20"
    hardware_overrides: Dict[str, Any] = field(default_factory=dict)
    cost: CostParams = field(default_factory=CostParams)
    slo: SLOSpec = field(default_factory=SLOSpec)
    policy: Policy = field(default_factory=Policy)
    engine: EngineConfig = field(default_factory=EngineConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    bucket_boundaries: Optional[Tuple[int, ...]] = None  # None: deciles of the output distribution
    bucket_accuracy: float = 0.8
    seed: int = 0
    output: OutputSpec = field(default_factory=OutputSpec)

    # resolution

    def model_spec(self) -> ModelSpec:
        base = get_model(self.model)
        return replace(base, **self.model_overrides) if self.model_overrides else base

    def hardware_spec(self) -> HardwareSpec:
        return get_hardware(self.hardware, **self.hardware_overrides)

    def trace(self) -> Trace:
        w = self.workload
        if w.kind == "fixed":
            return generate_fixed(w.n, w.prompt_tokens, w.output_tokens, w.rate, self.seed)
        if w.kind == "sharegpt":
            return generate_sharegpt_like(w.n, w.rate, self.seed, w.mu, w.sigma)
        return load_trace(w.path)

    def buckets(self, trace: Trace) -> LengthBuckets:
        if self.bucket_boundaries is not None:
            return LengthBuckets(tuple(self.bucket_boundaries), self.bucket_accuracy)
        w = self.workload
        if w.kind == "sharegpt":
            return LengthBuckets.deciles_lognormal(w.mu, w.sigma, SHAREGPT_MIN, SHAREGPT_MAX,
                                                   self.bucket_accuracy)
        return LengthBuckets.deciles_of([r.output_tokens for r in trace] or [1],
                                        self.bucket_accuracy)

    def build(self) -> Scenario:
        """Materialise the scenario; every failure surfaces as :class:`ConfigError`."""
        try:
            trace = self.trace()
            return Scenario(self.model_spec(), self.hardware_spec(), trace, self.cost, self.slo,
                            self.policy, self.engine, self.buckets(trace), self.seed)
        except TraceError as e:
            raise ConfigError(f"trace {self.workload.path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read trace: {e}") from e
        except KeyError as e:
            raise ConfigError(e.args[0] if e.args else str(e)) from e
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    # serialisation

    def to_dict(self) -> Dict[str, Any]:
        model = {"preset": self.model, **_resolved(self.model_spec(), exclude=("name",))}
        hardware = {"preset": self.hardware, **_resolved(self.hardware_spec(), exclude=("name",))}
        engine = asdict(self.engine)
        if engine["max_input_tokens"] is None:
            engine["max_input_tokens"] = 0
        buckets: Dict[str, Any] = {"accuracy": self.bucket_accuracy}
        if self.bucket_boundaries is not None:
            buckets["boundaries"] = list(self.bucket_boundaries)
        return {
            "seed": self.seed,
            "model": model,
            "hardware": hardware,
            "cost": asdict(self.cost),
            "slo": asdict(self.slo),
            "policy": {"variant": self.policy.variant, "slo_scheduler": self.policy.slo_scheduler},
            "engine": engine,
            "workload": asdict(self.workload),
            "buckets": buckets,
            "output": asdict(self.output),
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], base_dir: Optional[Path] = None) -> "ScenarioConfig":
        raw = dict(raw)
        try:
            cfg = cls._from_dict(raw, base_dir)
            cfg.model_spec()
            cfg.hardware_spec()
        except ConfigError:
            raise
        except KeyError as e:
            raise ConfigError(e.args[0] if e.args else str(e)) from e
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return cfg

    @classmethod
    def _from_dict(cls, raw: Dict[str, Any], base_dir: Optional[Path]) -> "ScenarioConfig":
        known = {"seed", "model", "hardware", "cost", "slo", "policy", "engine", "workload",
                 "buckets", "output"}
        _no_extra(raw, known, "top level")
        seed = raw.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an integer in [0, 2**64)")

        model = dict(_table(raw, "model"))
        preset = model.pop("preset", "llama2-7b")
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}; known: {sorted(MODEL_PRESETS)}")
        model_over = _overrides(model, MODEL_PRESETS[preset], "model")

        hw = dict(_table(raw, "hardware"))
        hw_preset = hw.pop("preset", "l20")
        if hw_preset not in HARDWARE_PRESETS:
            raise ConfigError(
                f"unknown hardware preset {hw_preset!r}; known: {sorted(HARDWARE_PRESETS)}")
        hw_over = _overrides(hw, HARDWARE_PRESETS[hw_preset], "hardware")

        engine = dict(_table(raw, "engine"))
        if engine.get("max_input_tokens") == 0:
            engine["max_input_tokens"] = None

        workload = dict(_table(raw, "workload"))
        if workload.get("path") and base_dir is not None and not Path(workload["path"]).is_absolute():
            workload["path"] = str(base_dir / workload["path"])

        buckets = dict(_table(raw, "buckets"))
        _no_extra(buckets, {"accuracy", "boundaries"}, "buckets")
        boundaries = buckets.get("boundaries")

        return cls(
            model=preset, model_overrides=model_over,
            hardware=hw_preset, hardware_overrides=hw_over,
            cost=_make(CostParams, _table(raw, "cost"), "cost"),
            slo=_make(SLOSpec, _table(raw, "slo"), "slo"),
            policy=_make(Policy, _table(raw, "policy"), "policy"),
            engine=_make(EngineConfig, engine, "engine"),
            workload=_make(WorkloadSpec, workload, "workload"),
            bucket_boundaries=tuple(boundaries) if boundaries is not None else None,
            bucket_accuracy=buckets.get("accuracy", 0.8),
            seed=seed,
            output=_make(OutputSpec, _table(raw, "output"), "output"),
        )


def _table(raw: Dict[str, Any], key: str) -> Dict[str, Any]:
    t = raw.get(key, {})
    if not isinstance(t, dict):
        raise ConfigError(f"[{key}] must be a table")
    return t


def _no_extra(t: Dict[str, Any], allowed, where: str) -> None:
    extra = sorted(set(t) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _make(cls, t: Dict[str, Any], where: str):
    _no_extra(t, {f.name for f in fields(cls)}, f"[{where}]")
    return cls(**t)


def _overrides(t: Dict[str, Any], preset, where: str) -> Dict[str, Any]:
    """Keys that differ from the preset; ``name`` cannot be overridden."""
    names = {f.name for f in fields(preset)} - {"name"}
    _no_extra(t, names, f"[{where}]")
    return {k: v for k, v in t.items() if getattr(preset, k) != v}


def _resolved(obj, exclude=()) -> Dict[str, Any]:
    return {k: v for k, v in asdict(obj).items() if k not in exclude}


def load_config(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from e
    return ScenarioConfig.from_dict(raw, p.parent)
