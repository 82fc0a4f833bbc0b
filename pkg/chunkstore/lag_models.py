"""Replication lag models and their calibration against latency percentiles.

A lag model is either a constant or a two-component lognormal mixture: a
base regime plus a low-probability "spike" regime for congestion tails.
Calibration fits the mixture to three target percentiles and verifies the
fit with a seeded Monte-Carlo run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from statistics import NormalDist
from typing import Literal, Optional

import numpy as np

from chunkstore.analysis import percentiles

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "PCG64"
CALIBRATION_DRAWS = 1_000_000
CALIBRATION_TOLERANCE = 0.10
DEFAULT_SPIKE_SIGMA = 1.0
TARGET_QUANTILES = (0.50, 0.95, 0.99)
MIN_SPIKE_PROBABILITY = 1e-6
MAX_SPIKE_PROBABILITY = 0.5

_WEIGHT_STEPS = 400
_WEIGHT_RATIO = (MAX_SPIKE_PROBABILITY / MIN_SPIKE_PROBABILITY) ** (1 / _WEIGHT_STEPS)
_CENTRE_STEPS = 41
_SPIKE_SIGMAS = (1.0, 0.5, 0.25, 0.1, 0.05, 0.02)
_MAX_VERIFICATIONS = 5

_STD = NormalDist()


class CalibrationFailed(Exception):
    """Targets cannot be met by the lag-model family within tolerance."""


@dataclass(frozen=True, slots=True)
class LagModel:
    kind: Literal["constant", "lognormal_mixture"] = "constant"
    constant_seconds: float = 0.0
    base_mu: float = 0.0
    base_sigma: float = 0.0
    spike_probability: float = 0.0
    spike_mu: float = 0.0
    spike_sigma: float = 0.0
    cap_seconds: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "lognormal_mixture"):
            raise ValueError(f"unknown lag model kind {self.kind!r}")
        if self.constant_seconds < 0:
            raise ValueError("constant_seconds must be non-negative")
        if self.base_sigma < 0 or self.spike_sigma < 0:
            raise ValueError("sigmas must be non-negative")
        if not 0.0 <= self.spike_probability <= 1.0:
            raise ValueError("spike_probability must lie in [0, 1]")
        if self.cap_seconds is not None and self.cap_seconds < 0:
            raise ValueError("cap_seconds must be non-negative")

    @classmethod
    def constant(cls, seconds: float, cap_seconds: Optional[float] = None) -> LagModel:
        return cls("constant", constant_seconds=seconds, cap_seconds=cap_seconds)

    @classmethod
    def lognormal(cls, mu: float, sigma: float, cap_seconds: Optional[float] = None) -> LagModel:
        return cls(
            "lognormal_mixture",
            base_mu=mu,
            base_sigma=sigma,
            spike_mu=mu,
            spike_sigma=sigma,
            cap_seconds=cap_seconds,
        )

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {
                "kind": "constant",
                "constant_seconds": self.constant_seconds,
                "cap_seconds": self.cap_seconds,
            }
        return asdict(self) | {"constant_seconds": 0.0}

    def cdf(self, seconds: float) -> float:
        """Closed-form CDF of the uncapped model."""
        if self.kind == "constant":
            return 1.0 if seconds >= self.constant_seconds else 0.0
        if seconds <= 0:
            return 0.0
        x = math.log(seconds)
        return (1 - self.spike_probability) * _lognormal_cdf(
            x, self.base_mu, self.base_sigma
        ) + self.spike_probability * _lognormal_cdf(x, self.spike_mu, self.spike_sigma)


def _lognormal_cdf(log_x: float, mu: float, sigma: float) -> float:
    if sigma == 0:
        return 1.0 if log_x >= mu else 0.0
    return _STD.cdf((log_x - mu) / sigma)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_lag(model: LagModel, rng: np.random.Generator) -> float:
    """One lag draw in seconds.

    Mixture draws always consume one uniform and one standard normal so the
    stream position does not depend on which regime was chosen.
    """
    if model.kind == "constant":
        lag = model.constant_seconds
    else:
        u = rng.random()
        z = rng.standard_normal()
        if u < model.spike_probability:
            lag = math.exp(model.spike_mu + model.spike_sigma * z)
        else:
            lag = math.exp(model.base_mu + model.base_sigma * z)
    if model.cap_seconds is not None and lag > model.cap_seconds:
        return model.cap_seconds
    return lag


def sample_lags(model: LagModel, rng: np.random.Generator, count: int) -> np.ndarray:
    """Vectorised draws; not stream-compatible with repeated sample_lag calls."""
    if model.kind == "constant":
        lags = np.full(count, model.constant_seconds, dtype=float)
    else:
        u = rng.random(count)
        z = rng.standard_normal(count)
        spike = u < model.spike_probability
        lags = np.exp(
            np.where(
                spike,
                model.spike_mu + model.spike_sigma * z,
                model.base_mu + model.base_sigma * z,
            )
        )
    if model.cap_seconds is not None:
        np.minimum(lags, model.cap_seconds, out=lags)
    return lags


def verify_lag_model(
    model: LagModel,
    targets: tuple[float, float, float],
    draws: int = CALIBRATION_DRAWS,
    seed: int = 0,
) -> dict:
    """Empirical p50/p95/p99 over ``draws`` seeded samples vs ``targets``."""
    samples = sample_lags(model, make_rng(seed), draws)
    empirical = percentiles(samples, TARGET_QUANTILES)
    report = {"draws": draws, "seed": seed, "rng": RNG_ALGORITHM}
    worst = 0.0
    for q, target, value in zip(TARGET_QUANTILES, targets, empirical):
        name = f"p{round(q * 100)}"
        error = abs(value - target) / target
        worst = max(worst, error)
        report[name] = {
            "target": target,
            "empirical": round(float(value), 6),
            "relative_error": round(error, 6),
        }
    report["max_relative_error"] = round(worst, 6)
    return report


def _check_targets(p50: float, p95: float, p99: float) -> None:
    if not 0 < p50 < p95 < p99:
        raise ValueError(
            f"percentile targets must satisfy 0 < p50 < p95 < p99, got {p50}, {p95}, {p99}"
        )


def _fit_base(
    l50: float, l95: float, p: float, spike_mu: float, spike_sigma: float
) -> Optional[tuple[float, float]]:
    """Base (mu, sigma) putting the mixture's 0.50 and 0.95 quantiles on the targets."""
    lo = (0.50 - p * _lognormal_cdf(l50, spike_mu, spike_sigma)) / (1 - p)
    hi = (0.95 - p * _lognormal_cdf(l95, spike_mu, spike_sigma)) / (1 - p)
    if not 0 < lo < hi < 1:
        return None
    a, b = _STD.inv_cdf(lo), _STD.inv_cdf(hi)
    sigma = (l95 - l50) / (b - a)
    return l50 - sigma * a, sigma


def _p99_residual(
    l50: float, l95: float, l99: float, p: float, spike_mu: float, spike_sigma: float
) -> Optional[tuple[float, float, float]]:
    base = _fit_base(l50, l95, p, spike_mu, spike_sigma)
    if base is None:
        return None
    base_mu, base_sigma = base
    mass = (1 - p) * _lognormal_cdf(l99, base_mu, base_sigma) + p * _lognormal_cdf(
        l99, spike_mu, spike_sigma
    )
    return mass - 0.99, base_mu, base_sigma


def _solve_mixture(
    l50: float, l95: float, l99: float, spike_mu: float, spike_sigma: float
) -> Optional[tuple[float, float, float]]:
    """(base_mu, base_sigma, spike_probability) for a fixed spike regime, or None.

    The base regime is pinned by the p50 and p95 conditions for every spike
    weight; the weight is then the first root of the p99 condition, found by
    a geometric scan over [MIN_SPIKE_PROBABILITY, MAX_SPIKE_PROBABILITY]
    followed by bisection.
    """
    previous = None
    for step in range(_WEIGHT_STEPS + 1):
        p = MIN_SPIKE_PROBABILITY * _WEIGHT_RATIO ** step
        current = _p99_residual(l50, l95, l99, p, spike_mu, spike_sigma)
        if current is None:
            previous = None
            continue
        if current[0] == 0:
            return current[1], current[2], p
        if previous is not None and (previous[1][0] < 0) != (current[0] < 0):
            lo, hi = previous[0], p
            lo_negative = previous[1][0] < 0
            for _ in range(80):
                mid = (lo + hi) / 2
                value = _p99_residual(l50, l95, l99, mid, spike_mu, spike_sigma)
                if value is None:
                    return None
                if (value[0] < 0) == lo_negative:
                    lo = mid
                else:
                    hi = mid
            value = _p99_residual(l50, l95, l99, hi, spike_mu, spike_sigma)
            if value is None:
                return None
            return value[1], value[2], hi
        previous = (p, current)
    return None


def _spike_candidates(l50: float, l99: float, spike_sigma: float):
    """Spike regimes to try, the conventional one (centred on p99) first."""
    yield l99, spike_sigma
    span = l99 - l50
    centres = [l50 + 2 * span * i / (_CENTRE_STEPS - 1) for i in range(_CENTRE_STEPS)]
    for sigma in (spike_sigma, *_SPIKE_SIGMAS):
        for centre in centres:
            yield centre, sigma


def calibrate_lag_model(
    p50: float,
    p95: float,
    p99: float,
    cap_seconds: Optional[float] = None,
    spike_sigma: float = DEFAULT_SPIKE_SIGMA,
    draws: int = CALIBRATION_DRAWS,
    seed: int = 0,
    tolerance: float = CALIBRATION_TOLERANCE,
) -> LagModel:
    """Fit a lag model whose p50/p95/p99 match the targets within ``tolerance``.

    Args:
        p50, p95, p99: Target percentiles in seconds, strictly increasing.
        cap_seconds: Optional clamp applied to every sampled lag.
        spike_sigma: Spread of the spike regime tried first.
        draws: Monte-Carlo draws used to verify the fit.
        seed: Seed of the verification stream.
        tolerance: Largest accepted relative error per percentile.

    Returns:
        A pure lognormal when one fits the three targets, otherwise a
        two-component mixture.

    Raises:
        ValueError: If the targets are not ordered and positive.
        CalibrationFailed: If no model in the family verifies within tolerance.
    """
    _check_targets(p50, p95, p99)
    targets = (p50, p95, p99)
    if cap_seconds is not None:
        clipped = max((t - cap_seconds) / t for t in targets)
        if clipped > tolerance:
            raise CalibrationFailed(
                f"cap of {cap_seconds}s sits {clipped:.1%} below the targets {targets}"
            )

    mu = math.log(p50)
    sigma = (math.log(p95) - mu) / _STD.inv_cdf(0.95)
    predicted_p99 = math.exp(mu + sigma * _STD.inv_cdf(0.99))
    if abs(predicted_p99 - p99) / p99 <= tolerance / 2:
        model = LagModel.lognormal(mu, sigma, cap_seconds)
        logger.info("Calibrated pure lognormal mu=%.6f sigma=%.6f", mu, sigma)
        _verify_or_fail(model, targets, draws, seed, tolerance)
        return model

    l50, l95, l99 = math.log(p50), math.log(p95), math.log(p99)
    verified = 0
    for spike_mu, candidate_sigma in _spike_candidates(l50, l99, spike_sigma):
        solved = _solve_mixture(l50, l95, l99, spike_mu, candidate_sigma)
        if solved is None:
            continue
        base_mu, base_sigma, p = solved
        model = LagModel(
            "lognormal_mixture",
            base_mu=base_mu,
            base_sigma=base_sigma,
            spike_probability=p,
            spike_mu=spike_mu,
            spike_sigma=candidate_sigma,
            cap_seconds=cap_seconds,
        )
        report = verify_lag_model(model, targets, draws, seed)
        if report["max_relative_error"] <= tolerance:
            logger.info(
                "Calibrated mixture base=(%.6f, %.6f) spike=(%.6f, %.6f) p=%.6f",
                base_mu, base_sigma, spike_mu, candidate_sigma, p,
            )
            return model
        logger.debug("Mixture candidate rejected by verification: %s", report)
        verified += 1
        if verified >= _MAX_VERIFICATIONS:
            break
    logger.error("No lag model fits targets %s", targets)
    raise CalibrationFailed(
        f"no constant, lognormal or lognormal mixture meets targets {targets} "
        f"within {tolerance:.0%}"
    )


def _verify_or_fail(
    model: LagModel, targets: tuple[float, float, float], draws: int, seed: int, tolerance: float
) -> None:
    report = verify_lag_model(model, targets, draws, seed)
    if report["max_relative_error"] > tolerance:
        logger.error("Calibration verification failed: %s", report)
        raise CalibrationFailed(
            f"empirical quantiles miss targets {targets} by "
            f"{report['max_relative_error']:.1%} (tolerance {tolerance:.0%})"
        )


def pointer_race_rate(
    db_lags: np.ndarray, object_lags: np.ndarray, read_offset: float
) -> float:
    """Share of probes that miss the object when a probe fires at max(offset, db lag)."""
    return float(np.mean(object_lags > np.maximum(db_lags, read_offset)))


def calibrate_read_offset(
    db_lag: LagModel,
    object_lag: LagModel,
    target_rate: float,
    draws: int = CALIBRATION_DRAWS,
    seed: int = 0,
) -> float:
    """Read-after-write offset (seconds) giving ``target_rate`` pointer 404s.

    Returns 0.0 when the unconstrained race rate is already at or below the
    target. The result is rounded to microseconds.
    """
    if not 0.0 <= target_rate < 1.0:
        raise ValueError("target_rate must lie in [0, 1)")
    rng = make_rng(seed)
    db = sample_lags(db_lag, rng, draws)
    obj = sample_lags(object_lag, rng, draws)

    if pointer_race_rate(db, obj, 0.0) <= target_rate:
        return 0.0
    lo, hi = 0.0, float(obj.max())
    for _ in range(60):
        mid = (lo + hi) / 2
        if pointer_race_rate(db, obj, mid) > target_rate:
            lo = mid
        else:
            hi = mid
    offset = round(hi, 6)
    logger.info(
        "Read offset %.6fs gives race rate %.4f (target %.4f)",
        offset, pointer_race_rate(db, obj, offset), target_rate,
    )
    return offset
