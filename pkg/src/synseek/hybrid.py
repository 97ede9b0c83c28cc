"""Hybrid dynamical system representation and fixed-step solver.

A hybrid system is the quadruple (flow set, flow field, jump set, jump map).
The solver integrates flows with classical RK4, detects jump-set crossings at
step boundaries, bisects the last step to locate the crossing, applies the
jump map, and finishes the step from the post-jump state.  Solutions are
hybrid arcs on a hybrid time domain (t, j): t accumulates during flow, j
increments at jumps, and samples are ordered lexicographically.

Batching: all scenario callables broadcast over a leading batch axis, so a
seed sweep integrates in lockstep as one (B, n) array.  Jumps are resolved
per seed (they are rare), after which the seed rejoins the lockstep batch.
``solve`` is the single-trajectory entry point; ``solve_batch`` the sweep
entry point.  Two calls with identical inputs and seeds produce bit-identical
arcs.
"""

from __future__ import annotations

import hashlib
import inspect
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    DeadlockState,
    MissingChannel,
    NonFiniteState,
    PreconditionViolated,
    SolverError,
    ZenoGuardTripped,
)
from .geometry import distance_to_set  # noqa: F401  (part of this module's API)


class HybridTime(NamedTuple):
    """A point (t, j) of a hybrid time domain; ordered lexicographically."""

    t: float
    j: int


@dataclass(frozen=True)
class HybridSystemDef:
    """Data of a hybrid system plus solver-facing selections.

    The flow and jump maps of the underlying inclusion are single-valued
    selections; set-valued jumps draw from the per-run randomness source
    passed to ``jump_map``.

    flow_field(x) -> dx/dt, broadcasting over leading axes when
    ``vectorized`` is set.  flow_set(x, tol) -> bool mask of membership
    within a tolerance band.  jump_margin(x) -> (..., m) continuous margins,
    one per jump condition; the jump set is ``any(margin >= 0)`` and
    bisection drives the largest fired margin into [0, jump_tol].  When only
    a boolean ``jump_set`` is supplied, bisection falls back to shrinking
    the time bracket.  jump_map(x, rng[, ctx]) consumes one state row; ctx
    is a per-run mutable dict for stateful selection policies.
    """

    dim: int
    flow_field: Callable
    flow_set: Callable
    jump_map: Callable
    jump_set: Optional[Callable] = None
    jump_margin: Optional[Callable] = None
    margin_names: tuple = ()
    channels: Optional[Callable] = None
    channel_names: tuple = ()
    vectorized: bool = False

    def __post_init__(self):
        if self.jump_set is None and self.jump_margin is None:
            raise ValueError("need jump_set or jump_margin")

    def in_jump_set(self, x):
        if self.jump_margin is not None:
            return np.any(np.asarray(self.jump_margin(x)) >= 0.0, axis=-1)
        return np.asarray(self.jump_set(x))


@dataclass(frozen=True)
class SolverConfig:
    """Fixed-step solver parameters.

    step: RK4 step h.  horizon_t: continuous-time horizon.  max_jumps: hard
    jump budget (reaching it terminates the arc).  jump_tol: boundary
    location tolerance, also the flow-set violation band and the Lemma-1
    check tolerance.  max_jumps_per_window: Zeno guard (count, seconds);
    exceeding it raises instead of silently continuing.  renormalize:
    optional per-step projection hook x -> x.  record_every: keep every k-th
    step in the arc (jump pre/post samples are always kept).
    """

    step: float
    horizon_t: float
    max_jumps: int = 10_000
    jump_tol: float = 1e-9
    max_jumps_per_window: tuple = (64, 1.0)
    renormalize: Optional[Callable] = None
    seed: Optional[int] = None
    record_every: int = 1

    def __post_init__(self):
        if not (self.step > 0 and self.horizon_t > 0 and self.jump_tol > 0):
            raise ValueError("step, horizon_t and jump_tol must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass(frozen=True)
class MonitorSpec:
    """Running per-step aggregate evaluated on every accepted state.

    mode 'min'/'max' track extrema of fn(x); 'increase_rate' tracks the
    largest (fn(x_k+1) - fn(x_k)) / h over consecutive flow samples, with the
    reference reset at jumps (used for Lyapunov monotonicity checks).
    t_from gates the aggregation to t >= t_from.
    """

    name: str
    fn: Callable
    mode: str = "max"
    t_from: float = 0.0


@dataclass
class JumpRecord:
    """One jump event: hybrid time, pre/post states and channels, reason tag."""

    t: float
    j: int  # jump count before the jump; post-state lives at (t, j + 1)
    pre: np.ndarray
    post: np.ndarray
    reason: str
    pre_channels: dict = field(default_factory=dict)
    post_channels: dict = field(default_factory=dict)


@dataclass
class HybridArc:
    """A solution trace on a hybrid time domain, with named channels."""

    t: np.ndarray
    j: np.ndarray
    x: np.ndarray
    channels: dict
    jumps: list
    aggregates: dict
    termination: str
    seed: Optional[int] = None
    error: Optional[Exception] = None

    def channel(self, name):
        try:
            return self.channels[name]
        except KeyError:
            raise MissingChannel(f"arc has no channel {name!r}") from None

    @property
    def final_state(self):
        return self.x[-1]

    def fingerprint(self):
        """Deterministic digest of the arc contents (states, channels, jumps)."""
        h = hashlib.sha256()
        h.update(self.t.tobytes())
        h.update(self.j.tobytes())
        h.update(self.x.tobytes())
        for name in sorted(self.channels):
            h.update(name.encode())
            h.update(self.channels[name].tobytes())
        for jr in self.jumps:
            h.update(np.float64(jr.t).tobytes())
            h.update(jr.pre.tobytes())
            h.update(jr.post.tobytes())
            h.update(jr.reason.encode())
        return h.hexdigest()

    # --- serialization ------------------------------------------------------

    def write(self, path):
        """Write samples to ``path`` and jump records to ``path + '.jumps'``.

        Delimited text, one row per sample, header row naming columns.
        """
        path = str(path)
        n = self.x.shape[1]
        names = ["t", "j"] + [f"x{i}" for i in range(n)] + list(self.channels)
        cols = [self.t, self.j.astype(float), *self.x.T]
        cols += [self.channels[c] for c in self.channels]
        mat = np.column_stack(cols)
        with open(path, "w") as f:
            f.write(" ".join(names) + "\n")
            np.savetxt(f, mat, fmt="%.17g")
        jnames = (["t", "j"] + [f"pre{i}" for i in range(n)]
                  + [f"post{i}" for i in range(n)] + ["reason"])
        with open(path + ".jumps", "w") as f:
            f.write(" ".join(jnames) + "\n")
            for jr in self.jumps:
                row = [f"{jr.t:.17g}", str(jr.j)]
                row += [f"{v:.17g}" for v in jr.pre]
                row += [f"{v:.17g}" for v in jr.post]
                row.append(jr.reason)
                f.write(" ".join(row) + "\n")

    @staticmethod
    def read(path):
        """Load an arc written by :meth:`write` (jumps file optional)."""
        path = str(path)
        with open(path) as f:
            names = f.readline().split()
            data = np.loadtxt(f, ndmin=2)
        n = sum(1 for c in names if c.startswith("x") and c[1:].isdigit())
        t, j = data[:, 0], data[:, 1].astype(int)
        x = data[:, 2:2 + n]
        channels = {c: data[:, 2 + n + k] for k, c in enumerate(names[2 + n:])}
        jumps = []
        try:
            with open(path + ".jumps") as f:
                f.readline()
                for line in f:
                    parts = line.split()
                    if not parts:
                        continue
                    tj, jj = float(parts[0]), int(parts[1])
                    pre = np.array([float(v) for v in parts[2:2 + n]])
                    post = np.array([float(v) for v in parts[2 + n:2 + 2 * n]])
                    jumps.append(JumpRecord(tj, jj, pre, post, parts[2 + 2 * n]))
        except FileNotFoundError:
            pass
        return HybridArc(t, j, x, channels, jumps, {}, "loaded")


def step_flow(field, x, h, check=True):
    """One explicit RK4 step of size h; local error O(h^5) on smooth fields."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    k1 = field(x)
    k2 = field(x + (0.5 * h) * k1)
    k3 = field(x + (0.5 * h) * k2)
    k4 = field(x + h * k3)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if check and not np.all(np.isfinite(out)):
        raise NonFiniteState("non-finite state after RK4 step")
    return out


def _vectorize_rows(fn):
    def wrapped(X, *args):
        return np.stack([np.asarray(fn(row, *args)) for row in X])
    return wrapped


def _jump_map_adapter(jump_map):
    try:
        n_params = len(inspect.signature(jump_map).parameters)
    except (TypeError, ValueError):
        n_params = 3
    if n_params >= 3:
        return jump_map
    return lambda x, rng, ctx: jump_map(x, rng)


class _SeedState:
    """Mutable per-seed bookkeeping for a batch run."""

    __slots__ = ("rng", "ctx", "jump_times", "extra_rows", "n_jumps",
                 "active", "termination", "error")

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.ctx = {}
        self.jump_times = []
        self.extra_rows = []
        self.n_jumps = 0
        self.active = True
        self.termination = "horizon"
        self.error = None


class _BatchRun:
    """Implements the lockstep batch integration; see module docstring."""

    def __init__(self, sys: HybridSystemDef, X0, cfg: SolverConfig, seeds,
                 monitors: Sequence[MonitorSpec]):
        self.sys = sys
        self.cfg = cfg
        self.monitors = tuple(monitors)
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        if X0.shape[1] != sys.dim:
            raise ValueError(f"x0 has dim {X0.shape[1]}, system has dim {sys.dim}")
        self.B = X0.shape[0]
        self.X = X0.copy()
        self.seeds = list(seeds)
        if len(self.seeds) != self.B:
            raise ValueError("one seed per initial condition required")
        self.per = [_SeedState(s) for s in self.seeds]
        if sys.vectorized:
            self.flow = sys.flow_field
            self.flow_ok = sys.flow_set
            self.margin = sys.jump_margin
            self.jump_bool = sys.jump_set
            self.chan = sys.channels
        else:
            self.flow = _vectorize_rows(sys.flow_field)
            self.flow_ok = _vectorize_rows(sys.flow_set)
            self.margin = _vectorize_rows(sys.jump_margin) if sys.jump_margin else None
            self.jump_bool = _vectorize_rows(sys.jump_set) if sys.jump_set else None
            self.chan = _vectorize_rows(sys.channels) if sys.channels else None
        self.jump_map = _jump_map_adapter(sys.jump_map)
        self.t = 0.0
        self.j = np.zeros(self.B, dtype=int)
        n_steps = int(np.ceil(cfg.horizon_t / cfg.step - 1e-12))
        n_rec = n_steps // cfg.record_every + 3
        self.n_cols = 2 + sys.dim + len(sys.channel_names)
        self.rec = np.full((self.B, n_rec, self.n_cols), np.nan)
        self.rec_count = np.zeros(self.B, dtype=int)
        self.n_steps = n_steps
        # monitor state
        self.agg = {}
        self.rate_prev = {}
        for m in self.monitors:
            if m.mode == "min":
                self.agg[m.name] = np.full(self.B, np.inf)
            elif m.mode == "max":
                self.agg[m.name] = np.full(self.B, -np.inf)
            elif m.mode == "increase_rate":
                self.agg[m.name] = np.full(self.B, -np.inf)
                self.rate_prev[m.name] = np.full(self.B, np.nan)
            else:
                raise ValueError(f"unknown monitor mode {m.mode!r}")

    # --- small helpers --------------------------------------------------------

    def _renorm(self, X):
        return self.cfg.renormalize(X) if self.cfg.renormalize else X

    def _fired(self, X):
        if self.margin is not None:
            return np.any(self.margin(X) >= 0.0, axis=-1)
        return np.asarray(self.jump_bool(X), dtype=bool)

    def _max_margin(self, x):
        return float(np.max(self.margin(x[None, :])))

    def _channels_of(self, x):
        if self.chan is None:
            return {}
        vals = np.asarray(self.chan(x[None, :]))[0]
        return {name: float(v) for name, v in zip(self.sys.channel_names, vals)}

    def _reason(self, x_pre):
        if self.margin is None or not self.sys.margin_names:
            return "jump"
        m = self.margin(x_pre[None, :])[0]
        names = [nm for nm, v in zip(self.sys.margin_names, m) if v >= 0.0]
        return "+".join(names) if names else "jump"

    def _fail(self, b, err):
        st = self.per[b]
        st.active = False
        st.error = err
        st.termination = f"error:{type(err).__name__}"

    # --- recording --------------------------------------------------------------

    def _record_batch(self, mask):
        if self.chan is not None:
            ch = np.asarray(self.chan(self.X))
        idx = np.nonzero(mask)[0]
        for b in idx:
            k = self.rec_count[b]
            row = self.rec[b, k]
            row[0] = self.t
            row[1] = self.j[b]
            row[2:2 + self.sys.dim] = self.X[b]
            if self.chan is not None:
                row[2 + self.sys.dim:] = ch[b]
            self.rec_count[b] = k + 1

    def _record_jump_sample(self, b, t, j, x):
        row = np.empty(self.n_cols)
        row[0] = t
        row[1] = j
        row[2:2 + self.sys.dim] = x
        if self.chan is not None:
            row[2 + self.sys.dim:] = np.asarray(self.chan(x[None, :]))[0]
        self.per[b].extra_rows.append(row)

    def _update_monitors(self, mask, dt=None):
        if not self.monitors:
            return
        for m in self.monitors:
            if self.t < m.t_from:
                continue
            vals = np.asarray(m.fn(self.X), dtype=float)
            acc = self.agg[m.name]
            if m.mode == "min":
                upd = mask & (vals < acc)
                acc[upd] = vals[upd]
            elif m.mode == "max":
                upd = mask & (vals > acc)
                acc[upd] = vals[upd]
            else:  # increase_rate
                prev = self.rate_prev[m.name]
                if dt is not None and dt > 0:
                    rate = (vals - prev) / dt
                    upd = mask & np.isfinite(prev) & (rate > acc)
                    acc[upd] = rate[upd]
                prev[mask] = vals[mask]

    def _reset_rate_reference(self, b):
        for name in self.rate_prev:
            self.rate_prev[name][b] = np.nan

    # --- jump machinery -----------------------------------------------------------

    def _do_jump(self, b, x_pre, t_jump):
        st = self.per[b]
        cfg = self.cfg
        reason = self._reason(x_pre)
        x_post = np.asarray(self.jump_map(x_pre, st.rng, st.ctx), dtype=float)
        if not np.all(np.isfinite(x_post)):
            raise NonFiniteState("jump map produced non-finite state",
                                 t=t_jump, j=int(self.j[b]), seed=self.seeds[b])
        # Zeno-rate guard
        count, window = cfg.max_jumps_per_window
        st.jump_times.append(t_jump)
        while st.jump_times and t_jump - st.jump_times[0] > window:
            st.jump_times.pop(0)
        if len(st.jump_times) > count:
            raise ZenoGuardTripped(
                f"more than {count} jumps within {window} s",
                t=t_jump, j=int(self.j[b]), seed=self.seeds[b])
        # well-posedness runtime check (jump image in C, out of D, within tol)
        post_fired = bool(self._fired(x_post[None, :])[0])
        post_in_C = bool(np.asarray(self.flow_ok(x_post[None, :], cfg.jump_tol))[0])
        if post_fired or not post_in_C:
            self.lemma1_violations[b] += 1
        jr = JumpRecord(t_jump, int(self.j[b]), x_pre.copy(), x_post.copy(), reason,
                        self._channels_of(x_pre), self._channels_of(x_post))
        self.jump_records[b].append(jr)
        self._record_jump_sample(b, t_jump, self.j[b], x_pre)
        self._record_jump_sample(b, t_jump, self.j[b] + 1, x_post)
        self.j[b] += 1
        st.n_jumps += 1
        self._reset_rate_reference(b)
        if st.n_jumps >= cfg.max_jumps:
            st.active = False
            st.termination = "max_jumps"
        return x_post

    def _advance_seed(self, b, x0, t0, h_step, depth=0):
        """Integrate seed b over [t0, t0+h_step], resolving the jump chain."""
        if depth > 12:
            raise ZenoGuardTripped("jump chain exceeded depth 12 within one step",
                                   t=t0, j=int(self.j[b]), seed=self.seeds[b])
        cfg = self.cfg
        x1 = self._renorm(step_flow(self.flow, x0[None, :], h_step, check=False))[0]
        if not np.all(np.isfinite(x1)):
            raise NonFiniteState("non-finite state during integration",
                                 t=t0, j=int(self.j[b]), seed=self.seeds[b])
        if not self._fired(x1[None, :])[0]:
            if not bool(np.asarray(self.flow_ok(x1[None, :], cfg.jump_tol))[0]):
                raise DeadlockState("state left the flow set without entering the jump set",
                                    t=t0 + h_step, j=int(self.j[b]), seed=self.seeds[b])
            return x1
        # bisect the earliest crossing within (0, h_step]
        s_lo, s_hi, x_hi = 0.0, 1.0, x1
        if self.margin is not None:
            for _ in range(90):
                if self._max_margin(x_hi) <= cfg.jump_tol:
                    break
                s_mid = 0.5 * (s_lo + s_hi)
                x_mid = self._renorm(step_flow(self.flow, x0[None, :],
                                               s_mid * h_step, check=False))[0]
                if not np.all(np.isfinite(x_mid)):
                    raise NonFiniteState("non-finite state during bisection",
                                         t=t0, j=int(self.j[b]), seed=self.seeds[b])
                if self._fired(x_mid[None, :])[0]:
                    s_hi, x_hi = s_mid, x_mid
                else:
                    s_lo = s_mid
        else:
            for _ in range(60):
                s_mid = 0.5 * (s_lo + s_hi)
                x_mid = self._renorm(step_flow(self.flow, x0[None, :],
                                               s_mid * h_step, check=False))[0]
                if self._fired(x_mid[None, :])[0]:
                    s_hi, x_hi = s_mid, x_mid
                else:
                    s_lo = s_mid
        t_jump = t0 + s_hi * h_step
        x_post = self._do_jump(b, x_hi, t_jump)
        if not self.per[b].active:  # max_jumps reached at this jump
            return x_post
        rest = (1.0 - s_hi) * h_step
        if rest <= 1e-15 * max(1.0, abs(t_jump)):
            return x_post
        return self._advance_seed(b, x_post, t_jump, rest, depth + 1)

    # --- main loop ------------------------------------------------------------------

    def run(self):
        cfg, sys = self.cfg, self.sys
        self.jump_records = [[] for _ in range(self.B)]
        self.lemma1_violations = np.zeros(self.B, dtype=int)
        active = np.array([st.active for st in self.per])
        # initial membership / initial jumps (jump priority at t = 0)
        fired0 = self._fired(self.X)
        in_C0 = np.asarray(self.flow_ok(self.X, cfg.jump_tol), dtype=bool)
        for b in range(self.B):
            if not (fired0[b] or in_C0[b]):
                self._fail(b, PreconditionViolated(
                    f"x0 of seed {self.seeds[b]} lies in neither flow nor jump set"))
                continue
            guard = 0
            try:
                while self._fired(self.X[b][None, :])[0] and self.per[b].active:
                    self.X[b] = self._do_jump(b, self.X[b].copy(), 0.0)
                    guard += 1
                    if guard > 12:
                        raise ZenoGuardTripped("unresolved jump chain at t=0",
                                               t=0.0, j=int(self.j[b]),
                                               seed=self.seeds[b])
            except SolverError as err:
                self._fail(b, err)
        active = np.array([st.active for st in self.per])
        self._record_batch(active)
        self._update_monitors(active)  # seeds min/max aggregates and rate references
        step_idx = 0
        while self.t < cfg.horizon_t - 1e-12 and np.any(active):
            h_k = min(cfg.step, cfg.horizon_t - self.t)
            X1 = self._renorm(step_flow(self.flow, self.X, h_k, check=False))
            finite = np.all(np.isfinite(X1), axis=-1)
            fired = np.zeros(self.B, dtype=bool)
            ok_rows = active & finite
            if np.any(ok_rows):
                fired[ok_rows] = self._fired(X1[ok_rows])
            flow_bad = np.zeros(self.B, dtype=bool)
            if np.any(ok_rows):
                flow_bad[ok_rows] = ~np.asarray(
                    self.flow_ok(X1[ok_rows], cfg.jump_tol), dtype=bool)
            for b in np.nonzero(active)[0]:
                try:
                    if not finite[b]:
                        raise NonFiniteState("non-finite state during integration",
                                             t=self.t, j=int(self.j[b]),
                                             seed=self.seeds[b])
                    if fired[b]:
                        X1[b] = self._advance_seed(b, self.X[b].copy(), self.t, h_k)
                    elif flow_bad[b]:
                        raise DeadlockState(
                            "state left the flow set without entering the jump set",
                            t=self.t + h_k, j=int(self.j[b]), seed=self.seeds[b])
                except SolverError as err:
                    self._fail(b, err)
                    X1[b] = self.X[b]  # keep the last valid state
            self.X = X1
            self.t += h_k
            step_idx += 1
            active = np.array([st.active for st in self.per])
            self._update_monitors(active, dt=h_k)
            if step_idx % cfg.record_every == 0 or self.t >= cfg.horizon_t - 1e-12:
                self._record_batch(active)
        return self._finalize()

    def _finalize(self):
        arcs = []
        dim = self.sys.dim
        names = self.sys.channel_names
        for b in range(self.B):
            rows = self.rec[b, :self.rec_count[b]]
            if self.per[b].extra_rows:
                rows = np.vstack([rows, np.array(self.per[b].extra_rows)])
                order = np.lexsort((rows[:, 1], rows[:, 0]))
                rows = rows[order]
            aggregates = {m.name: float(self.agg[m.name][b]) for m in self.monitors}
            aggregates["lemma1_violations"] = int(self.lemma1_violations[b])
            arcs.append(HybridArc(
                t=rows[:, 0].copy(),
                j=rows[:, 1].astype(int),
                x=rows[:, 2:2 + dim].copy(),
                channels={c: rows[:, 2 + dim + k].copy() for k, c in enumerate(names)},
                jumps=self.jump_records[b],
                aggregates=aggregates,
                termination=self.per[b].termination,
                seed=self.seeds[b],
                error=self.per[b].error,
            ))
        return arcs


def solve_batch(sys, X0, cfg, seeds, monitors=()):
    """Integrate a batch of initial conditions in lockstep, one arc per seed.

    Failed seeds (Zeno guard, deadlock, non-finite state) yield arcs with
    ``termination='error:...'`` and the exception stored on ``arc.error``;
    healthy seeds are unaffected.
    """
    return _BatchRun(sys, X0, cfg, seeds, monitors).run()


def solve(sys, x0, cfg, monitors=()):
    """Produce one hybrid arc from ``x0``; raises on solver errors.

    The arc discretely satisfies the solution concept: within each interval
    of constant j the samples satisfy the flow set within ``cfg.jump_tol``
    and evolve by RK4 on the flow field; each recorded jump has a pre-state
    in the jump set (margin within tolerance) and a post-state equal to the
    jump map applied to it.  Terminates at the horizon, at ``max_jumps``,
    or with an error.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ValueError("solve expects a single state; use solve_batch for sweeps")
    arc = solve_batch(sys, x0[None, :], cfg, [cfg.seed], monitors)[0]
    if arc.error is not None:
        raise arc.error
    if arc.termination.startswith("error:"):
        raise SolverError(arc.termination)
    return arc


def check_jump_decrease(arc, channel="V", delta=0.0, tol=1e-9, reason="x"):
    """Check that every jump tagged with ``reason`` decreases a channel by >= delta.

    Returns the list of violating jump records (empty when the synergistic
    decrease property holds).  Raises ``MissingChannel`` when the arc's jump
    records do not carry the channel.
    """
    violations = []
    for jr in arc.jumps:
        if reason not in jr.reason.split("+"):
            continue
        if channel not in jr.pre_channels or channel not in jr.post_channels:
            raise MissingChannel(f"jump records carry no channel {channel!r}")
        if jr.post_channels[channel] > jr.pre_channels[channel] - delta + tol:
            violations.append(jr)
    return violations
