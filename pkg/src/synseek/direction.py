"""The unknown-control-direction hybrid automaton.

State layout: theta = (gains[0..r-1], dwell, ratio).

* gains take values in a finite alphabet (default levels {+1, 0, -1} per
  channel); they are constant during flow and switch at jumps.
* dwell grows at a constant admissible rate (at most chi1) and reaching 1
  enables a switch, after which it resets to 0.  This enforces the
  dwell-time bound  N#(t1,t2) <= chi1 (t2-t1) + 1.
* ratio is a time-ratio monitor on [0, t_ceiling]: it drains at rate
  (1 - chi2) while any switching gain is zero (the bad set E_b, i.e. lost
  controllability on that channel) and refills at rate chi2 otherwise,
  saturating at the ceiling.  This enforces the activation-time bound
  T#(t1,t2) <= chi2 (t2-t1) + t_ceiling.

Draining to zero while in E_b would leave no admissible flow, so the
default jump policy is budget-aware: it only switches into E_b when the
monitor holds at least one full dwell period of drain (plus margin), and
otherwise lands in {-1,+1}^r.  That realizes the forcing of theta out of
E_b while keeping every jump on the dwell grid, so the dwell-time and
activation-time bounds hold on every generated arc.  A raw forced jump
(ratio <= 0 while in E_b, targets {-1,+1}^r, dwell timer NOT reset) remains
implemented as a safety net for scripted or adversarial policies that
ignore the budget; arcs produced that way may deliberately violate the
dwell bound, which the verifiers then report.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigInvalid, PreconditionViolated
from .hybrid import HybridSystemDef

BUDGET_SAFETY = 1.05  # entering E_b requires this many dwell periods of drain


@dataclass(frozen=True)
class AutomatonConfig:
    """Parameters of the direction automaton.

    r: number of gain channels carried in the state.  active: mask of
    channels actually driven by the automaton (inactive channels stay
    frozen at their initial value).  policy: 'uniform' (budget-aware random
    selection), 'scripted' with ``script`` a sequence of gain tuples, or a
    callable ``policy(gains, ratio, cfg, rng, ctx, forced)`` returning the
    next gains.
    """

    r: int
    chi1: float = 0.5
    chi2: float = 0.5
    t_ceiling: float = 2.0
    levels: tuple = (1.0, 0.0, -1.0)
    active: Optional[tuple] = None
    dwell_rate: Optional[float] = None
    policy: object = "uniform"
    script: Optional[Sequence] = None

    def __post_init__(self):
        if not (self.chi1 > 0 and 0 < self.chi2 < 1 and self.t_ceiling > 0):
            raise ConfigInvalid("need chi1 > 0, chi2 in (0,1), t_ceiling > 0")
        if self.r < 1:
            raise ConfigInvalid("need at least one gain channel")
        if self.active is None:
            object.__setattr__(self, "active", tuple(True for _ in range(self.r)))
        if len(self.active) != self.r:
            raise ConfigInvalid("active mask length must equal r")
        rate = self.chi1 if self.dwell_rate is None else self.dwell_rate
        if not (0 < rate <= self.chi1):
            raise ConfigInvalid("dwell_rate must lie in (0, chi1]")
        object.__setattr__(self, "dwell_rate", rate)

    @property
    def dim(self):
        return self.r + 2

    @property
    def n_active(self):
        return int(sum(self.active))

    @property
    def drain_per_period(self):
        """Monitor drain over one dwell period spent entirely in E_b."""
        return (1.0 - self.chi2) / self.dwell_rate

    def alphabet(self):
        """All gain tuples of the active channels, as an (m, n_active) array."""
        return np.array(list(itertools.product(self.levels, repeat=self.n_active)))


@dataclass
class DirectionState:
    """Structured view of the automaton state vector."""

    gains: np.ndarray
    dwell: float
    ratio: float

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float)

    def as_vector(self):
        return np.concatenate([self.gains, [self.dwell, self.ratio]])

    @staticmethod
    def from_vector(v):
        v = np.asarray(v, dtype=float)
        return DirectionState(v[:-2], float(v[-2]), float(v[-1]))


def in_bad_set(gains, cfg: AutomatonConfig):
    """E_b membership: any active gain (numerically) zero.  Broadcasts."""
    g = np.asarray(gains, dtype=float)
    act = np.asarray(cfg.active, dtype=bool)
    return np.any((np.abs(g) < 0.5) & act, axis=-1)


def theta_flow(theta, cfg: AutomatonConfig):
    """Flow selection for the automaton block; broadcasts over (..., r+2).

    Gains are constant; dwell grows at the configured rate; the monitor
    rate is chi2 - 1_{E_b}, clamped to zero at the ceiling.
    """
    th = np.asarray(theta, dtype=float)
    out = np.zeros_like(th)
    out[..., cfg.r] = cfg.dwell_rate
    bad = in_bad_set(th[..., :cfg.r], cfg)
    rate = cfg.chi2 - bad.astype(float)
    ratio = th[..., cfg.r + 1]
    rate = np.where((ratio >= cfg.t_ceiling) & (rate > 0), 0.0, rate)
    out[..., cfg.r + 1] = rate
    return out


def _policy_targets(gains_act, ratio, cfg, forced):
    """Admissible next gains for the active channels, excluding the present one."""
    alpha = cfg.alphabet()
    differs = np.any(alpha != gains_act, axis=1)
    targets = alpha[differs]
    no_zero = ~np.any(np.abs(targets) < 0.5, axis=1)
    if forced:
        return targets[no_zero]
    if ratio < BUDGET_SAFETY * cfg.drain_per_period:
        restricted = targets[no_zero]
        if restricted.size:
            return restricted
    return targets


def _draw_gains(gains_act, ratio, cfg, rng, ctx, forced):
    policy = cfg.policy
    if callable(policy):
        return np.asarray(policy(gains_act, ratio, cfg, rng, ctx, forced), dtype=float)
    if policy == "uniform":
        targets = _policy_targets(gains_act, ratio, cfg, forced)
        if targets.shape[0] == 0:
            raise ConfigInvalid("gain alphabet leaves no admissible jump target")
        return targets[int(rng.integers(targets.shape[0]))]
    if policy == "scripted":
        if not cfg.script:
            raise ConfigInvalid("scripted policy requires a script")
        k = ctx.get("script_idx", 0) if ctx is not None else 0
        entry = np.asarray(cfg.script[k % len(cfg.script)], dtype=float)
        if ctx is not None:
            ctx["script_idx"] = k + 1
        if forced and np.any(np.abs(entry) < 0.5):
            # the forcing constraint overrides the script
            targets = _policy_targets(gains_act, ratio, cfg, True)
            return targets[int(rng.integers(targets.shape[0]))]
        return entry
    raise ConfigInvalid(f"unknown jump policy {policy!r}")


def theta_jump(theta, cfg: AutomatonConfig, rng, ctx=None, tol=1e-6):
    """One switch of the automaton state (single state vector).

    Fires either as a dwell jump (dwell >= 1 - tol; dwell resets, monitor
    unchanged) or as a forced exit from E_b (monitor <= tol while a gain is
    zero; targets restricted to {-1,+1}^r and the dwell timer is NOT
    reset).  The new active-gain vector always differs from the old one.
    """
    th = np.asarray(theta, dtype=float).copy()
    gains = th[:cfg.r]
    dwell, ratio = float(th[cfg.r]), float(th[cfg.r + 1])
    act = np.asarray(cfg.active, dtype=bool)
    dwell_fire = dwell >= 1.0 - tol
    forced_fire = (ratio <= tol) and bool(in_bad_set(gains, cfg))
    if not (dwell_fire or forced_fire):
        raise PreconditionViolated(
            f"theta jump with dwell={dwell:.6g}, ratio={ratio:.6g} fires nothing")
    forced = forced_fire and not dwell_fire
    new_act = _draw_gains(gains[act], ratio, cfg, rng, ctx, forced)
    gains = gains.copy()
    gains[act] = new_act
    th[:cfg.r] = gains
    if dwell_fire:
        th[cfg.r] = 0.0
    return th


def initial_theta(cfg: AutomatonConfig, gains=None):
    """Default automaton start: all gains +1, dwell 0, monitor full."""
    g = np.ones(cfg.r) if gains is None else np.asarray(gains, dtype=float)
    return np.concatenate([g, [0.0, cfg.t_ceiling]])


def clip_monitor(X, cfg: AutomatonConfig, offset=0):
    """Project the ratio monitor back into its box after an RK4 step.

    RK4 stages straddling the ceiling overshoot by O(h * chi2); the exact
    saturated solution sits at the ceiling, so clipping is the correct
    per-step projection.  The lower bound is left alone: crossing zero in
    E_b is a jump condition that bisection must see.  Mutates and returns X.
    """
    idx = offset + cfg.r + 1
    X[..., idx] = np.minimum(X[..., idx], cfg.t_ceiling)
    return X


def build_theta_system(cfg: AutomatonConfig) -> HybridSystemDef:
    """The automaton alone as a runnable hybrid system (for validation runs)."""

    def flow_field(X):
        return theta_flow(X, cfg)

    def flow_set(X, tol):
        X = np.asarray(X, dtype=float)
        dwell = X[..., cfg.r]
        ratio = X[..., cfg.r + 1]
        return (dwell >= -tol) & (dwell <= 1.0 + tol) & \
               (ratio >= -tol) & (ratio <= cfg.t_ceiling + tol)

    def jump_margin(X):
        X = np.asarray(X, dtype=float)
        dwell_m = X[..., cfg.r] - 1.0
        bad = in_bad_set(X[..., :cfg.r], cfg)
        forced_m = np.where(bad, -X[..., cfg.r + 1], -np.inf)
        return np.stack([dwell_m, forced_m], axis=-1)

    def jump_map(x, rng, ctx):
        return theta_jump(x, cfg, rng, ctx)

    def channels(X):
        X = np.asarray(X, dtype=float)
        bad = in_bad_set(X[..., :cfg.r], cfg).astype(float)
        return np.concatenate([X, bad[..., None]], axis=-1)

    names = tuple(f"theta{i+1}" for i in range(cfg.r)) + ("dwell", "ratio", "in_eb")
    return HybridSystemDef(
        dim=cfg.dim, flow_field=flow_field, flow_set=flow_set,
        jump_map=jump_map, jump_margin=jump_margin,
        margin_names=("theta", "theta_forced"), channels=channels,
        channel_names=names, vectorized=True)


# ---------------------------------------------------------------------------
# dwell / activation-time verifiers
# ---------------------------------------------------------------------------


def theta_jump_times(arc):
    """Times of direction switches recorded on an arc."""
    return np.array([jr.t for jr in arc.jumps
                     if any(tag.startswith("theta") for tag in jr.reason.split("+"))])


def verify_adt(arc, chi1, tol=1e-6):
    """Dwell-time bound N#(t1,t2) <= chi1 (t2-t1) + 1 over every window.

    Checking all pairs of switch times suffices: any window's jump count is
    realized by the window shrunk onto its first and last contained jumps.
    """
    times = theta_jump_times(arc)
    n = times.size
    for i in range(n):
        for k in range(i + 1, n):
            if (k - i) > chi1 * (times[k] - times[i]) + tol:
                return False
    return True


def verify_att(arc, chi2, t_ceiling, tol=1e-6, channel="in_eb"):
    """Activation-time bound T#(t1,t2) <= chi2 (t2-t1) + t_ceiling.

    Uses left-constant quadrature of the E_b indicator channel between
    samples (the indicator is exactly piecewise constant because jump
    pre/post samples are kept in the record).  The pairwise supremum of
    T# - chi2 dt reduces to a running min/max scan of the cumulative
    drift g(t) = occupancy(t) - chi2 t.
    """
    ind = arc.channel(channel)
    t = arc.t
    if t.size < 2:
        return True
    dt = np.diff(t)
    occupancy = np.concatenate([[0.0], np.cumsum(ind[:-1] * dt)])
    g = occupancy - chi2 * t
    worst = np.max(g - np.minimum.accumulate(g))
    return bool(worst <= t_ceiling + tol)


def min_inter_jump_gap(arc):
    """Smallest spacing between consecutive direction switches (inf if < 2)."""
    times = theta_jump_times(arc)
    if times.size < 2:
        return np.inf
    return float(np.min(np.diff(times)))


def load_script(path):
    """Read a scripted gain sequence: one alphabet element per line,
    entries in {-1, 0, +1} separated by spaces."""
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.split()])
    if not rows:
        raise ConfigInvalid(f"script file {path} contains no entries")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ConfigInvalid("script rows have inconsistent widths")
    return [tuple(r) for r in rows]
