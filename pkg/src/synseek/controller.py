"""Minimum-seeking feedback pieces.

The model-free law drives each control channel with

    u_i = (1/eps) * sqrt(4 pi gamma / (T_i kappa)) * <exp(kappa V S^T) e1, eta_i>

where eta_i is a planar unit rotor spinning at angular rate 2 pi/(T_i eps^2),
making the input the high-frequency sinusoid cos(carrier + kappa V): its
phase is modulated by the measured potential V only, so no model
information and no knowledge of the control direction enters.  Its
Lie-bracket average is the gradient descent  -gamma <grad V, f_i> f_i per
channel, which is also provided here explicitly as the model-based
comparator and for assembling the averaged closed loop.

Input amplitude scales as 1/eps and rotor frequency as 1/eps^2; distinct
rational periods T_i keep the channels non-resonant, with a common period
equal to their rational least common multiple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class ESGains:
    """Tuning parameters of the oscillatory law: all strictly positive."""

    gamma: float
    kappa: float
    epsilon: float

    def __post_init__(self):
        if min(self.gamma, self.kappa, self.epsilon) <= 0:
            raise ValueError("gamma, kappa, epsilon must be positive")


def es_amplitude(period, g: ESGains):
    """Peak input magnitude (1/eps) sqrt(4 pi gamma / (T kappa))."""
    return math.sqrt(4.0 * math.pi * g.gamma / (float(period) * g.kappa)) / g.epsilon


def es_rotor(V, kappa):
    """Modulation rotor exp(kappa V S^T) e1 = (cos kappa V, sin kappa V).

    The carrier eta_i(t) turns as exp(rate t S) e1 = (cos, -sin), so this
    orientation makes the input cos(rate t + kappa V): the potential
    modulation must ADD to the carrier phase for the Lie-bracket average
    to be the descent -gamma <grad V, f_i> f_i rather than its negative.
    """
    a = kappa * np.asarray(V, dtype=float)
    return np.stack([np.cos(a), np.sin(a)], axis=-1)


def es_input(V, eta, period, g: ESGains):
    """The minimum-seeking input for one channel.

    Only evaluations of V enter; |u| is bounded by :func:`es_amplitude` by
    Cauchy-Schwarz on unit vectors.
    """
    rot = es_rotor(V, g.kappa)
    return es_amplitude(period, g) * np.sum(rot * eta, axis=-1)


def baseline_nonhybrid(V, eta, period, g: ESGains):
    """Non-hybrid comparison law: the same input driven by one fixed potential.

    Identical to :func:`es_input`; the difference is purely that the caller
    supplies a single (non-synergistic) V and never switches modes.
    """
    return es_input(V, eta, period, g)


def oscillator_rate(period, epsilon):
    """Angular rate 2 pi / (T eps^2) of one rotor."""
    return 2.0 * math.pi / (float(period) * epsilon * epsilon)


def phase_shift_pair(V, eta, kappa):
    """Demodulation pair from a single rotor: (signal, quarter-period shift).

    Returns <exp(kappa V S) e1, eta> and the same with eta advanced by a
    quarter period (multiplied by planar_rot(pi/2), i.e. (eta_y, -eta_x)).
    The two signals are orthogonal over one rotor period, which is what
    keeps the two inputs of the holonomic obstacle scenario non-resonant.
    """
    rot = es_rotor(V, kappa)
    eta_shift = np.stack([eta[..., 1], -eta[..., 0]], axis=-1)
    return np.sum(rot * eta, axis=-1), np.sum(rot * eta_shift, axis=-1)


def nonholonomic_inputs(V, eta, g: ESGains):
    """Input pair for the unicycle: ES forward speed plus a constant spin.

    u1 = (1/eps) sqrt(4 pi gamma / kappa) <exp(kappa V S) e1, eta> with the
    single rotor at period 1; u2 = 2 pi / eps turns the heading one full
    revolution per eps seconds, the intermediate timescale the averaging
    argument needs.
    """
    u1 = es_amplitude(1, g) * np.sum(es_rotor(V, g.kappa) * eta, axis=-1)
    u2 = 2.0 * math.pi / g.epsilon
    return u1, u2


@dataclass
class OscillatorBank:
    """Planar unit rotors with pairwise distinct rational periods.

    states: (r, 2) unit vectors; periods: positive rationals.  The flow is
    autonomous: eta_i' = 2 pi / (T_i eps^2) S eta_i, norm-preserving.
    """

    states: np.ndarray
    periods: tuple
    epsilon: float

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.periods = tuple(Fraction(p) for p in self.periods)
        if self.states.shape != (len(self.periods), 2):
            raise ValueError("need one planar state per period")
        if len(set(self.periods)) != len(self.periods):
            raise ValueError("periods must be pairwise distinct")
        if any(p <= 0 for p in self.periods):
            raise ValueError("periods must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        norms = np.linalg.norm(self.states, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("oscillator states must be unit vectors")

    def flow(self):
        """Time derivatives of all rotors, shape (r, 2)."""
        rates = np.array([oscillator_rate(p, self.epsilon) for p in self.periods])
        s_eta = np.stack([self.states[:, 1], -self.states[:, 0]], axis=-1)
        return rates[:, None] * s_eta


def oscillator_block_flow(eta_flat, rates):
    """Flow of r rotors stored flat as (..., 2r); rates is (r,)."""
    shape = eta_flat.shape[:-1] + (rates.size, 2)
    eta = eta_flat.reshape(shape)
    s_eta = np.stack([eta[..., 1], -eta[..., 0]], axis=-1)
    return (rates[:, None] * s_eta).reshape(eta_flat.shape)


def common_period(periods):
    """Least T > 0 with T / T_i integral for all rational periods T_i."""
    fracs = [Fraction(p) for p in periods]
    num = 1
    for f in fracs:
        num = num * f.numerator // math.gcd(num, f.numerator)
    den = 0
    for f in fracs:
        den = math.gcd(den, f.denominator)
    return Fraction(num, den)


# ---------------------------------------------------------------------------
# model-based comparator / averaged closed loop
# ---------------------------------------------------------------------------


def avg_feedback(grad_v, fields, gamma):
    """Model-based comparator inputs u_i = -gamma <grad V, f_i>.

    grad_v: (..., n); fields: (..., r, n).  Reads the true gradient and the
    signed fields, so it is usable only when the control direction is known;
    it exists as the object the oscillatory law approximates.
    """
    return -gamma * np.sum(fields * grad_v[..., None, :], axis=-1)


def averaged_field(f0, grad_v, fields, gamma):
    """Lie-bracket averaged flow f0 - gamma sum_i <grad V, f_i> f_i.

    Along it, with f0 = 0, dV/dt = -gamma sum_i <grad V, f_i>^2 <= 0: the
    potential is non-increasing during flow, which is the decrease the
    switching logic tops up at jumps.
    """
    proj = np.sum(fields * grad_v[..., None, :], axis=-1)
    drift = np.sum(proj[..., :, None] * fields, axis=-2)
    return f0 - gamma * drift


# ---------------------------------------------------------------------------
# adversarial perturbation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Perturbation:
    """Bounded disturbance that locally stabilizes a chosen trap point.

    d(p) = amplitude * exp(-|p - center|^2 / sigma^2) * v / max(soft_radius, |v|)

    with v the tangent projection of (center - p).  Away from the trap it
    vanishes; inside the soft radius it is linear with slope
    amplitude / soft_radius, which must exceed the averaged escape rate
    (gamma times the local potential curvature) for the trap to hold the
    non-hybrid baseline.  Magnitude saturates at ``amplitude``.
    """

    center: np.ndarray
    amplitude: float = 0.15
    sigma: float = 0.5
    soft_radius: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "center",
                           np.asarray(self.center, dtype=float))
        if self.amplitude < 0 or self.sigma <= 0 or self.soft_radius <= 0:
            raise ValueError("need amplitude >= 0, sigma > 0, soft_radius > 0")

    def field(self, P, tangent_project):
        diff = self.center - P
        v = tangent_project(P, diff)
        dist2 = np.sum(diff * diff, axis=-1)
        nv = np.linalg.norm(v, axis=-1)
        scale = self.amplitude * np.exp(-dist2 / self.sigma ** 2) \
            / np.maximum(self.soft_radius, nv)
        return scale[..., None] * v
