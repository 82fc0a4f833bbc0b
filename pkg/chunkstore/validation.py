"""Validation of simulation config files and command-line overrides."""

import importlib.resources
import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, List, Optional

from chunkstore.lag_models import (
    CALIBRATION_DRAWS,
    DEFAULT_SPIKE_SIGMA,
    CalibrationFailed,
    LagModel,
    calibrate_lag_model,
    calibrate_read_offset,
)
from chunkstore.replication_sim import ProbePolicy, SimConfig

DEFAULT_SCENARIO = "default_scenario.json"

_INT_FIELDS = {"seed", "payload_bytes", "max_chunk_bytes"}
_FLOAT_FIELDS = {
    "duration_seconds",
    "write_rate_per_second",
    "horizon_seconds",
    "read_after_write_race_rate",
}
_OPTIONAL_FIELDS = {"horizon_seconds", "read_after_write_race_rate"}
_STR_FIELDS = {"pattern", "db_lag_draw", "rng"}
_LAG_FIELDS = {"db_lag", "object_lag"}
_LAG_KEYS = {f.name for f in fields(LagModel)}


class ValidationError(Exception):
    """Raised when a config fails validation."""

    def __init__(self, message: str, errors: List[str]):
        super().__init__(message)
        self.errors = errors


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def load_default_scenario() -> dict:
    """The packaged reproduction scenario."""
    text = (
        importlib.resources.files("chunkstore").joinpath(DEFAULT_SCENARIO).read_text()
    )
    return parse_config_text(text, DEFAULT_SCENARIO)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        location = f"{source}:{e.lineno}:{e.colno}"
        raise ValidationError(f"{location}: invalid JSON", [f"{location}: {e.msg}"])
    if not isinstance(raw, dict):
        raise ValidationError(
            f"{source}: config must be a JSON object", ["<root>: expected an object"]
        )
    return raw


def load_config_file(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as e:
        raise ValidationError(f"cannot read {path}", [f"{path}: {e}"])
    return parse_config_text(text, str(path))


def apply_overrides(raw: dict, overrides: List[str]) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into nested objects.

    Values are parsed as JSON when possible and kept as strings otherwise.
    """
    errors = []
    result = json.loads(json.dumps(raw))
    for override in overrides:
        key, sep, text = override.partition("=")
        if not sep or not key:
            errors.append(f"--set {override!r}: expected key=value")
            continue
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        target = result
        parts = key.split(".")
        for part in parts[:-1]:
            nested = target.get(part)
            if nested is None:
                nested = target[part] = {}
            if not isinstance(nested, dict):
                errors.append(f"--set {key}: {part} is not an object")
                break
            target = nested
        else:
            target[parts[-1]] = value
    if errors:
        raise ValidationError(f"{len(errors)} invalid override(s)", errors)
    return result


def _parse_lag_model(
    raw: Any, path: str, errors: List[str], seed: int, draws: int
) -> Optional[LagModel]:
    if _is_number(raw):
        if raw < 0:
            errors.append(f"{path}: constant lag must be >= 0 (got {raw})")
            return None
        return LagModel.constant(float(raw))
    if not isinstance(raw, dict):
        errors.append(f"{path}: expected a number or an object")
        return None

    cap = raw.get("cap_seconds")
    if cap is not None and (not _is_number(cap) or cap < 0):
        errors.append(f"{path}.cap_seconds: must be a non-negative number or null")
        return None

    if "calibrate" in raw:
        unknown = set(raw) - {"calibrate", "cap_seconds", "spike_sigma"}
        if unknown:
            errors.append(f"{path}: unknown key(s) {', '.join(sorted(unknown))}")
            return None
        targets = raw["calibrate"]
        if not isinstance(targets, dict) or set(targets) != {"p50", "p95", "p99"}:
            errors.append(f"{path}.calibrate: expected exactly p50, p95 and p99")
            return None
        if not all(_is_number(v) for v in targets.values()):
            errors.append(f"{path}.calibrate: targets must be numbers")
            return None
        spike_sigma = raw.get("spike_sigma", DEFAULT_SPIKE_SIGMA)
        try:
            return calibrate_lag_model(
                targets["p50"],
                targets["p95"],
                targets["p99"],
                cap_seconds=cap,
                spike_sigma=spike_sigma,
                draws=draws,
                seed=seed,
            )
        except (ValueError, CalibrationFailed) as e:
            errors.append(f"{path}.calibrate: {e}")
            return None

    unknown = set(raw) - _LAG_KEYS
    if unknown:
        errors.append(f"{path}: unknown key(s) {', '.join(sorted(unknown))}")
        return None
    try:
        return LagModel(**raw)
    except (TypeError, ValueError) as e:
        errors.append(f"{path}: {e}")
        return None


def _parse_probe_policy(raw: Any, errors: List[str]) -> Optional[ProbePolicy]:
    if raw == "immediate":
        return ProbePolicy()
    if not isinstance(raw, dict):
        errors.append('probe_policy: expected "immediate" or an object')
        return None
    unknown = set(raw) - {"kind", "attempts", "interval_seconds"}
    if unknown:
        errors.append(f"probe_policy: unknown key(s) {', '.join(sorted(unknown))}")
        return None
    try:
        return ProbePolicy(**raw)
    except (TypeError, ValueError) as e:
        errors.append(f"probe_policy: {e}")
        return None


def build_sim_config(raw: dict, draws: int = CALIBRATION_DRAWS) -> SimConfig:
    """Turn a parsed config object into a SimConfig.

    Calibration markers are resolved here, seeded by the config's seed, so
    the returned config holds only materialised values.
    """
    errors: List[str] = []
    known = {f.name for f in fields(SimConfig)}
    unknown = set(raw) - known
    if unknown:
        errors.extend(f"{key}: unknown field" for key in sorted(unknown))

    kwargs: dict[str, Any] = {}
    for key in sorted(set(raw) & known):
        value = raw[key]
        if key in _INT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{key}: must be an integer (got {value!r})")
                continue
            kwargs[key] = value
        elif key in _FLOAT_FIELDS:
            if key in _OPTIONAL_FIELDS and value is None:
                kwargs[key] = None
            elif not _is_number(value):
                errors.append(f"{key}: must be a number (got {value!r})")
            else:
                kwargs[key] = float(value)
        elif key in _STR_FIELDS:
            if not isinstance(value, str):
                errors.append(f"{key}: must be a string (got {value!r})")
            else:
                kwargs[key] = value
        elif key == "regions":
            if not isinstance(value, list) or not all(isinstance(r, str) and r for r in value):
                errors.append("regions: must be a list of region names")
            else:
                kwargs[key] = tuple(value)

    seed = kwargs.get("seed", SimConfig.seed)
    for key in sorted(_LAG_FIELDS & set(raw)):
        model = _parse_lag_model(raw[key], key, errors, seed, draws)
        if model is not None:
            kwargs[key] = model
    if "probe_policy" in raw:
        policy = _parse_probe_policy(raw["probe_policy"], errors)
        if policy is not None:
            kwargs["probe_policy"] = policy

    if "read_after_write_seconds" in raw:
        value = raw["read_after_write_seconds"]
        if _is_number(value):
            kwargs["read_after_write_seconds"] = float(value)
        elif isinstance(value, dict) and set(value) == {"race_rate"} and _is_number(value["race_rate"]):
            if not errors:
                try:
                    kwargs["read_after_write_seconds"] = calibrate_read_offset(
                        kwargs.get("db_lag", LagModel.constant(0.0)),
                        kwargs.get("object_lag", LagModel.constant(0.0)),
                        value["race_rate"],
                        draws=draws,
                        seed=seed,
                    )
                    kwargs["read_after_write_race_rate"] = float(value["race_rate"])
                except ValueError as e:
                    errors.append(f"read_after_write_seconds.race_rate: {e}")
        else:
            errors.append(
                'read_after_write_seconds: expected a number or {"race_rate": <rate>}'
            )

    if not errors:
        try:
            return SimConfig(**kwargs)
        except ValueError as e:
            errors.extend(str(e).split("; "))

    for error in errors:
        logging.error(f"Config error: {error}")
    raise ValidationError(f"config has {len(errors)} error(s)", errors)


def load_sim_config(
    path: Optional[Path],
    overrides: Optional[List[str]] = None,
    seed: Optional[int] = None,
    draws: int = CALIBRATION_DRAWS,
) -> SimConfig:
    """Load a config file (or the packaged default), apply overrides, validate."""
    raw = load_default_scenario() if path is None else load_config_file(path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    return build_sim_config(raw, draws=draws)


def validate_targets(p50: float, p95: float, p99: float) -> None:
    errors = []
    for name, value in (("p50", p50), ("p95", p95), ("p99", p99)):
        if value <= 0:
            errors.append(f"{name}: must be > 0 (got {value})")
    if not errors and not p50 < p95 < p99:
        errors.append(f"targets must increase: p50 < p95 < p99 (got {p50}, {p95}, {p99})")
    if errors:
        raise ValidationError("invalid percentile targets", errors)
