"""Convex integrands ``h: [0, inf) -> R ∪ {+inf}`` used in proximal steps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class ConvexIntegrand:
    """Convex, lower semicontinuous ``h`` with its derivative.

    Attributes:
        value: ``h(t)`` for ``0 <= t <= upper``.
        deriv: ``h'(t)`` on the same range (vectorised).
        upper: effective domain bound; ``h = +inf`` beyond it.
        d0: right derivative at 0 (may be ``-inf``).
        name: label used in reports.
        second: ``h''(t)`` if known; otherwise a central difference of ``deriv``.
    """

    value: Callable
    deriv: Callable
    upper: float = math.inf
    d0: float = 0.0
    name: str = "h"
    second: Optional[Callable] = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.asarray(self.value(np.clip(t, 0.0, self.upper)), dtype=float)
        return np.where(t > self.upper * (1 + 1e-12), np.inf, out)

    def curvature(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.second is not None:
            return np.asarray(self.second(t), dtype=float)
        step = 1e-6 * np.maximum(t, 1e-6)
        return (np.asarray(self.deriv(t + step)) - np.asarray(self.deriv(np.maximum(t - step, 0.0)))) / (
            t + step - np.maximum(t - step, 0.0)
        )

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def check(self, samples: int = 256, top: float | None = None) -> bool:
        """Midpoint convexity of ``h`` and monotonicity of ``h'`` on a sample ladder."""
        top = top if top is not None else (self.upper if math.isfinite(self.upper) else 4.0)
        t = np.linspace(0.0, top, samples)
        v = np.asarray(self.value(t), dtype=float)
        mid = np.asarray(self.value(0.5 * (t[:-1] + t[1:])), dtype=float)
        scale = 1e-10 * max(1.0, float(np.abs(v).max()))
        d = np.asarray(self.deriv(t[1:]), dtype=float)
        return bool(np.all(mid <= 0.5 * (v[:-1] + v[1:]) + scale) and np.all(np.diff(d) >= -scale))


def zero() -> ConvexIntegrand:
    return ConvexIntegrand(np.zeros_like, np.zeros_like, math.inf, 0.0, "zero")


def indicator(cap: float = 1.0) -> ConvexIntegrand:
    """``h = 0`` on ``[0, cap]`` and ``+inf`` beyond: the hard density constraint."""
    return ConvexIntegrand(np.zeros_like, np.zeros_like, float(cap), 0.0, f"indicator({cap:g})")


def porous(m: float) -> ConvexIntegrand:
    """``h(t) = t^m / (m - 1)``, whose gradient flow is ``∂t ρ = Δ ρ^m``."""
    if m <= 1:
        raise ValueError("porous-medium exponent must exceed 1")
    return ConvexIntegrand(
        lambda t: np.power(t, m) / (m - 1),
        lambda t: m / (m - 1) * np.power(t, m - 1),
        math.inf,
        0.0,
        f"porous({m:g})",
        lambda t: m * np.power(t, m - 2),
    )


def quadratic() -> ConvexIntegrand:
    return ConvexIntegrand(
        lambda t: 0.5 * np.square(t), lambda t: np.asarray(t, dtype=float), math.inf, 0.0, "quadratic", np.ones_like
    )


def entropy() -> ConvexIntegrand:
    """``h(t) = t log t``; its gradient flow is the heat equation."""

    def value(t):
        t = np.asarray(t, dtype=float)
        return np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)

    def deriv(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return 1.0 + np.log(t)

    return ConvexIntegrand(value, deriv, math.inf, -math.inf, "entropy", lambda t: 1.0 / np.asarray(t, dtype=float))


def eps_schedule(m: int) -> float:
    """Default quadratic weight ``2^(-m²)``, floored against underflow."""
    return max(2.0 ** (-float(m) ** 2), 1e-300)


def penalty(m: int, eps_m: float | None = None) -> ConvexIntegrand:
    """``H_m(t) = t^(m+1)/(m+1) + eps_m t²/2``."""
    e = eps_schedule(m) if eps_m is None else float(eps_m)
    return ConvexIntegrand(
        lambda t: np.power(t, m + 1) / (m + 1) + 0.5 * e * np.square(t),
        lambda t: np.power(t, m) + e * np.asarray(t, dtype=float),
        math.inf,
        0.0,
        f"penalty({m})",
        lambda t: m * np.power(t, m - 1) + e,
    )
