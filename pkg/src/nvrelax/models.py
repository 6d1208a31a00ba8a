"""Closed-form rate laws for triplet spin-lattice relaxation.

Two model families are implemented: a sum of Orbach-like terms driven by
the occupation of a small number of effective phonon modes (one, two, or
three modes; two is the proposed form), and the prior literature form with
a single Orbach-like term plus a T^5 Raman tail.  Both carry optional
temperature-independent per-sample constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import BOLTZMANN_MEV_PER_K

__all__ = [
    "Mode",
    "SampleConstants",
    "NModeParams",
    "PriorModelParams",
    "RatePair",
    "CoherenceLimit",
    "occupation",
    "orbach_factor",
    "eval_n_mode",
    "eval_prior_model",
    "coherence_limits",
    "ratio_curve",
]

# exp argument beyond which the occupation underflows to exactly zero
_EXP_ARG_MAX = 700.0


def _occupation_array(delta: float, t: np.ndarray) -> np.ndarray:
    x = delta / (BOLTZMANN_MEV_PER_K * t)
    out = np.zeros_like(x)
    live = x <= _EXP_ARG_MAX
    out[live] = 1.0 / np.expm1(x[live])
    return out


def occupation(delta: float, temperature):
    """Bose-Einstein occupation n = 1/(exp(delta/k_B T) - 1).

    Parameters
    ----------
    delta : float
        Phonon energy in meV, > 0.
    temperature : float or array_like
        Temperature in K, > 0.

    Returns
    -------
    float or ndarray
        Mean occupation number.  For delta/(k_B T) > 700 the value
        underflows and exactly 0.0 is returned.

    Notes
    -----
    Evaluated through expm1 so both the frozen-out limit (n ~ exp(-x))
    and the classical limit (n ~ 1/x) keep full relative accuracy.
    """
    if delta <= 0:
        raise ValueError(f"phonon energy must be positive, got {delta}")
    t = np.asarray(temperature, dtype=float)
    if np.any(t <= 0):
        raise ValueError("temperature must be positive")
    out = _occupation_array(delta, np.atleast_1d(t))
    return float(out[0]) if t.ndim == 0 else out.reshape(t.shape)


def orbach_factor(delta: float, temperature):
    """Occupation product n(n+1) entering every Orbach-like rate term.

    For delta/(k_B T) >~ 5 this approaches exp(-delta/k_B T), which is why
    low-temperature rate data look linear in an Arrhenius plot with slope
    set by the activation energy.
    """
    n = occupation(delta, temperature)
    return n * (n + 1.0)


def orbach_factor_ddelta(delta: float, temperature):
    """d[n(n+1)]/d(delta) = -(2n+1) n(n+1) / (k_B T); used by fit Jacobians."""
    t = np.asarray(temperature, dtype=float)
    n = occupation(delta, temperature)
    out = -(2.0 * n + 1.0) * n * (n + 1.0) / (BOLTZMANN_MEV_PER_K * t)
    return float(out) if t.ndim == 0 else out


@dataclass(frozen=True)
class Mode:
    """One effective phonon mode: energy plus its two channel coefficients."""

    delta: float      # meV
    a_coeff: float    # s^-1, single-quantum (Omega) channel
    b_coeff: float    # s^-1, double-quantum (gamma) channel

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError(f"mode energy must be positive, got {self.delta}")
        if self.a_coeff < 0 or self.b_coeff < 0:
            raise ValueError("mode coefficients must be nonnegative")


@dataclass(frozen=True)
class SampleConstants:
    """Temperature-independent rate floor of one sample (defect-defect term)."""

    a3: float = 0.0   # s^-1, Omega channel
    b3: float = 0.0   # s^-1, gamma channel

    def __post_init__(self) -> None:
        # constrained nonnegative; a pure rate floor cannot be negative
        if self.a3 < 0 or self.b3 < 0:
            raise ValueError("sample constants must be nonnegative")


# minimum spacing between mode energies; closer pairs are effectively one
# mode and make the fit rank-deficient
_MIN_MODE_SEPARATION_MEV = 1.0


@dataclass(frozen=True)
class NModeParams:
    """Parameters of the n-effective-mode rate model (1 <= n <= 3 modes).

    omega(T) = sum_i a_i * n_i(n_i+1) + a3(sample)
    gamma(T) = sum_i b_i * n_i(n_i+1) + b3(sample)

    with n_i the occupation at mode energy delta_i.  Modes are kept sorted
    ascending in energy.
    """

    modes: tuple[Mode, ...]
    sample_constants: Mapping[str, SampleConstants] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 1 <= len(self.modes) <= 3:
            raise ValueError(f"1 to 3 modes supported, got {len(self.modes)}")
        deltas = [m.delta for m in self.modes]
        if deltas != sorted(deltas):
            raise ValueError("modes must be sorted ascending by energy")
        for lo, hi in zip(deltas, deltas[1:]):
            if hi - lo <= _MIN_MODE_SEPARATION_MEV:
                raise ValueError(
                    f"mode energies {lo} and {hi} meV closer than "
                    f"{_MIN_MODE_SEPARATION_MEV} meV; degenerate model"
                )

    @property
    def n_modes(self) -> int:
        return len(self.modes)


@dataclass(frozen=True)
class PriorModelParams:
    """Prior literature form: one Orbach-like term plus a T^5 Raman tail.

    omega(T) = a1 * n(n+1) + a2 * T^5 + a3(sample), and likewise for gamma
    with b1, b2, b3.
    """

    delta: float            # meV
    a1: float               # s^-1
    b1: float               # s^-1
    a2: float               # s^-1 K^-5
    b2: float               # s^-1 K^-5
    sample_constants: Mapping[str, SampleConstants] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError(f"mode energy must be positive, got {self.delta}")
        for name in ("a1", "b1", "a2", "b2"):
            if getattr(self, name) < 0:
                raise ValueError(f"coefficient {name} must be nonnegative")


@dataclass(frozen=True)
class RatePair:
    """Model rates at one temperature (or arrays over a grid)."""

    omega: float
    gamma: float

    def __iter__(self):
        return iter((self.omega, self.gamma))


def _constants_for(params, sample: str | None) -> SampleConstants:
    # sample=None is the documented no-constant sentinel (A3 = B3 = 0),
    # used for phonon-limited curves and synthetic theory fits
    if sample is None:
        return SampleConstants(0.0, 0.0)
    try:
        return params.sample_constants[sample]
    except KeyError:
        known = ", ".join(sorted(params.sample_constants)) or "(none)"
        raise KeyError(f"unknown sample {sample!r}; known samples: {known}") from None


def eval_n_mode(params: NModeParams, sample: str | None, temperature) -> RatePair:
    """Evaluate the n-mode model at the given temperature(s).

    ``sample`` selects which constants to add; ``None`` means evaluate the
    pure phonon-limited curve (constants zero).
    """
    const = _constants_for(params, sample)
    t = np.asarray(temperature, dtype=float)
    omega = np.full(t.shape, const.a3, dtype=float)
    gamma = np.full(t.shape, const.b3, dtype=float)
    for mode in params.modes:
        f = orbach_factor(mode.delta, t)
        omega = omega + mode.a_coeff * f
        gamma = gamma + mode.b_coeff * f
    if t.ndim == 0:
        return RatePair(float(omega), float(gamma))
    return RatePair(omega, gamma)


def eval_prior_model(params: PriorModelParams, sample: str | None, temperature) -> RatePair:
    """Evaluate the prior (Orbach + T^5) model at the given temperature(s)."""
    const = _constants_for(params, sample)
    t = np.asarray(temperature, dtype=float)
    f = orbach_factor(params.delta, t)
    t5 = t**5
    omega = params.a1 * f + params.a2 * t5 + const.a3
    gamma = params.b1 * f + params.b2 * t5 + const.b3
    if t.ndim == 0:
        return RatePair(float(omega), float(gamma))
    return RatePair(omega, gamma)


@dataclass(frozen=True)
class CoherenceLimit:
    """Relaxation-imposed upper bounds on coherence times, in seconds.

    t2_sq = 2/(3 Omega + gamma) for a superposition within the
    single-quantum {|0>, |+-1>} subspace, t2_dq = 1/(Omega + gamma) for the
    {|-1>, |+1>} double-quantum subspace, and t1 = 1/(3 Omega).
    """

    t2_sq: float
    t2_dq: float
    t1: float


def coherence_limits(omega: float, gamma: float) -> CoherenceLimit:
    """Coherence bounds for given rates; infinite fields when both rates are 0.

    The infinite-limit sentinel is ``math.inf`` per field, returned whenever
    the corresponding rate combination vanishes.
    """
    if omega < 0 or gamma < 0:
        raise ValueError("rates must be nonnegative")
    sq = 3.0 * omega + gamma
    dq = omega + gamma
    return CoherenceLimit(
        t2_sq=2.0 / sq if sq > 0 else math.inf,
        t2_dq=1.0 / dq if dq > 0 else math.inf,
        t1=1.0 / (3.0 * omega) if omega > 0 else math.inf,
    )


def ratio_curve(
    params: NModeParams, sample: str | None, t_grid: Sequence[float]
) -> list[tuple[float, float]]:
    """gamma/omega evaluated pointwise over a caller-supplied grid.

    Most meaningful in the phonon-limited regime (roughly 125 K and above);
    raises if omega vanishes at any requested point.
    """
    out = []
    for t in t_grid:
        rates = eval_n_mode(params, sample, float(t))
        if rates.omega == 0:
            raise ZeroDivisionError(f"omega vanishes at T = {t} K; ratio undefined")
        out.append((float(t), rates.gamma / rates.omega))
    return out
