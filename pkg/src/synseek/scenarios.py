"""Scenario assembly: the five application closed loops as hybrid systems.

Composite state layout (one row):

    [ p (manifold point) | q | theta gains | dwell | ratio | oscillators ]

Flows combine the plant kinematics driven by the oscillatory law (or by the
averaged comparator), the zero flow of the logic mode, the direction
automaton block, and the rotor bank.  Jumps are the union of the
mode-switch condition (synergy gap >= delta), the automaton dwell switch,
and the forced exit from the zero-gain set; simultaneous firings apply the
combined map.  Scenario defaults reproduce the published simulation
parameters; horizons, start points and the concrete disturbance shape are
artifact choices documented here.

Controllers:
    'hybrid'   - the minimum-seeking law on the synergistic family.
    'baseline' - the same law on the single unwarped potential (no switching).
    'averaged' - the Lie-bracket averaged closed loop (no oscillators), the
                 comparator system used by the convergence and Lyapunov checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from . import geometry as geo
from .controller import (
    ESGains,
    Perturbation,
    es_amplitude,
    es_rotor,
    oscillator_block_flow,
    oscillator_rate,
)
from .direction import (
    AutomatonConfig,
    clip_monitor,
    in_bad_set,
    initial_theta,
    theta_flow,
    theta_jump,
)
from .errors import ConfigInvalid
from .hybrid import HybridSystemDef, MonitorSpec, SolverConfig
from .potentials import (
    PotentialFamily,
    circle_family,
    obstacle_family,
    single_mode_family,
    so3_family,
    sphere_family,
)

SCENARIO_NAMES = ("circle", "obstacle_holonomic", "sphere", "so3",
                  "obstacle_nonholonomic")

# published simulation parameters per scenario (targets, tuning, periods)
_DEFAULTS = {
    "circle": dict(
        gamma=1.0, kappa=4.0, epsilon=1.0 / math.sqrt(4.0 * math.pi),
        delta=0.25, periods=(Fraction(1),), horizon=60.0, record_dt=0.02,
        theta_star=(0.0, 1.0)),
    "obstacle_holonomic": dict(
        gamma=2.0, kappa=4.0, epsilon=1.0 / math.sqrt(6.0 * math.pi),
        delta=0.25, periods=(Fraction(1),), horizon=80.0, record_dt=0.02,
        z_star=(0.0, 2.0), z_obs=(0.0, 0.0), d=1.0),
    "sphere": dict(
        gamma=1.0, kappa=4.0, epsilon=1.0 / math.sqrt(8.0 * math.pi),
        delta=0.2, periods=(Fraction(3), Fraction(2), Fraction(1)),
        horizon=60.0, record_dt=0.02,
        p_star=(0.0, 0.0, 1.0), p_perp=(0.0, 1.0, 0.0)),
    "so3": dict(
        gamma=1.0, kappa=4.0, epsilon=1.0 / math.sqrt(12.0 * math.pi),
        delta=0.2, periods=(Fraction(1), Fraction(2), Fraction(3)),
        horizon=70.0, record_dt=0.05,
        omega_tilde=(11.0, 12.0, 13.0)),
    "obstacle_nonholonomic": dict(
        gamma=2.0, kappa=4.0, epsilon=1.0 / math.sqrt(6.0 * math.pi),
        delta=0.25, periods=(Fraction(1),), horizon=80.0, record_dt=0.02,
        z_star=(0.0, 2.0), z_obs=(0.0, 0.0), d=1.0),
}

CONTROLLERS = ("hybrid", "baseline", "averaged")


@dataclass
class ScenarioConfig:
    """Everything needed to assemble and run one experiment.

    Fields left at None fall back to the scenario defaults above.
    ``automaton='default'`` builds the standard direction automaton;
    ``automaton=None`` freezes the gains at +1 (no switching).
    ``perturbation='default'`` enables the adversarial trap at the
    scenario's problematic critical point for circle / sphere / so3 and
    disables it for the obstacle scenarios.
    """

    scenario: str
    controller: str = "hybrid"
    gains: Optional[ESGains] = None
    delta: Optional[float] = None
    periods: Optional[tuple] = None
    automaton: object = "default"
    perturbation: object = "default"
    solver: Optional[SolverConfig] = None
    horizon: Optional[float] = None
    step: Optional[float] = None
    steps_per_period: int = 40
    record_dt: Optional[float] = None
    x0: Optional[np.ndarray] = None
    initial_gains: Optional[tuple] = None
    seed: int = 0
    out: Optional[str] = None
    target: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIO_NAMES:
            raise ConfigInvalid(f"unknown scenario {self.scenario!r};"
                                f" expected one of {SCENARIO_NAMES}")
        if self.controller not in CONTROLLERS:
            raise ConfigInvalid(f"unknown controller {self.controller!r}")
        unknown = set(self.target) - set(_DEFAULTS[self.scenario])
        if unknown:
            raise ConfigInvalid(f"unknown target keys for {self.scenario}: {sorted(unknown)}")


@dataclass(frozen=True)
class StateLayout:
    """Index map of the composite state row."""

    dim: int
    dim_p: int
    fam_dim: int
    r: int
    n_osc: int
    p: slice
    q: int
    th: slice
    gains: slice
    dwell: int
    ratio: int
    osc: slice


def _make_layout(dim_p, fam_dim, r, n_osc):
    q = dim_p
    th0 = dim_p + 1
    return StateLayout(
        dim=dim_p + 1 + r + 2 + 2 * n_osc, dim_p=dim_p, fam_dim=fam_dim,
        r=r, n_osc=n_osc, p=slice(0, dim_p), q=q, th=slice(th0, th0 + r + 2),
        gains=slice(th0, th0 + r), dwell=th0 + r, ratio=th0 + r + 1,
        osc=slice(th0 + r + 2, th0 + r + 2 + 2 * n_osc))


# ---------------------------------------------------------------------------
# plants
# ---------------------------------------------------------------------------


class _Plant:
    """Scenario-specific kinematics on the embedded manifold."""

    name: str
    dim_p: int
    r: int
    n_osc: int
    averaged_scale = 1.0  # factor multiplying the averaged drift

    def family(self, delta) -> PotentialFamily:
        raise NotImplementedError

    def fields(self, P):
        """Control vector fields stacked as (..., r, dim_p)."""
        raise NotImplementedError

    def pdot_es(self, P, tu, aux=None):
        """sum_i (theta_i u_i) b_i(p); ``tu`` is the gain-weighted input row."""
        f = self.fields(P)
        return np.sum(tu[..., :, None] * f, axis=-2)

    def inputs(self, V, eta, g, periods):
        """Oscillatory inputs u_1..u_r from the rotor bank states."""
        rot = es_rotor(V, g.kappa)
        eta2 = eta.reshape(eta.shape[:-1] + (self.n_osc, 2))
        us = [es_amplitude(periods[i], g) * np.sum(rot * eta2[..., i, :], axis=-1)
              for i in range(self.n_osc)]
        return np.stack(us, axis=-1)

    def pdot_avg(self, P, gains, grad, gamma):
        f = self.fields(P)
        proj = np.sum(f * grad[..., None, :], axis=-1)
        coef = (gains ** 2) * proj
        return -gamma * self.averaged_scale * np.sum(coef[..., :, None] * f, axis=-2)

    def renorm_p(self, P):
        raise NotImplementedError

    def drift(self, P):
        raise NotImplementedError

    def dist_target(self, P):
        raise NotImplementedError

    def extra_channels(self, P):
        return {}

    def p_sharp(self):
        """The problematic critical point used as trap center and hard start."""
        raise NotImplementedError

    def default_x0_p(self):
        return self.p_sharp()


class _CirclePlant(_Plant):
    name = "circle"
    dim_p = 2
    r = 1
    n_osc = 1

    def __init__(self, params):
        self.theta_star = geo.normalize(np.asarray(params["theta_star"], dtype=float))

    def family(self, delta):
        return circle_family(self.theta_star, delta)

    def fields(self, P):
        sp = np.stack([P[..., 1], -P[..., 0]], axis=-1)
        return sp[..., None, :]

    def pdot_es(self, P, tu, aux=None):
        sp = np.stack([P[..., 1], -P[..., 0]], axis=-1)
        return tu[..., 0, None] * sp

    def renorm_p(self, P):
        return geo.normalize(P)

    def drift(self, P):
        return np.abs(np.linalg.norm(P, axis=-1) - 1.0)

    def dist_target(self, P):
        return np.linalg.norm(P - self.theta_star, axis=-1)

    def p_sharp(self):
        return -self.theta_star


class _SpherePlant(_Plant):
    name = "sphere"
    dim_p = 3
    r = 3
    n_osc = 3

    def __init__(self, params):
        self.p_star = geo.normalize(np.asarray(params["p_star"], dtype=float))
        self.p_perp = geo.normalize(np.asarray(params["p_perp"], dtype=float))

    def family(self, delta):
        return sphere_family(self.p_star, self.p_perp, delta)

    def fields(self, P):
        # row i is b_i(p) = e_i - <p, e_i> p, i.e. the rows of I - p p^T
        return np.eye(3) - np.einsum("...i,...j->...ij", P, P)

    def pdot_es(self, P, tu, aux=None):
        # sum_i tu_i (e_i - <p, e_i> p) = tu - <p, tu> p
        return tu - np.sum(P * tu, axis=-1, keepdims=True) * P

    def pdot_avg(self, P, gains, grad, gamma):
        b_proj = grad - np.sum(P * grad, axis=-1, keepdims=True) * P
        coef = (gains ** 2) * b_proj  # <grad, b_i> = tangent-projected grad comps
        return -gamma * (coef - np.sum(P * coef, axis=-1, keepdims=True) * P)

    def renorm_p(self, P):
        return geo.normalize(P)

    def drift(self, P):
        return np.abs(np.linalg.norm(P, axis=-1) - 1.0)

    def dist_target(self, P):
        return np.linalg.norm(P - self.p_star, axis=-1)

    def p_sharp(self):
        return -self.p_star


class _So3Plant(_Plant):
    name = "so3"
    dim_p = 9
    r = 3
    n_osc = 3

    def __init__(self, params):
        self.omega_tilde = np.asarray(params["omega_tilde"], dtype=float)
        # b_i(p) = -(skew(e_i) (x) I) p, the vec image of R -> R skew(e_i)
        eye3 = np.eye(3)
        self._B = np.stack([-np.kron(geo.skew(eye3[i]), eye3) for i in range(3)])

    def family(self, delta):
        return so3_family(self.omega_tilde, delta)

    def fields(self, P):
        return np.stack([P @ self._B[i].T for i in range(3)], axis=-2)

    def pdot_es(self, P, tu, aux=None):
        out = tu[..., 0, None] * (P @ self._B[0].T)
        out += tu[..., 1, None] * (P @ self._B[1].T)
        out += tu[..., 2, None] * (P @ self._B[2].T)
        return out

    def renorm_p(self, P):
        R = np.swapaxes(P.reshape(P.shape[:-1] + (3, 3)), -1, -2)
        return geo.vec(geo.orthonormalize_step(R))

    def drift(self, P):
        R = np.swapaxes(P.reshape(P.shape[:-1] + (3, 3)), -1, -2)
        return geo.orthogonality_defect(R)

    def dist_target(self, P):
        return np.linalg.norm(P - geo.vec(np.eye(3)), axis=-1)

    def p_sharp(self):
        return geo.vec(np.diag([-1.0, 1.0, -1.0]))


class _ObstacleBase(_Plant):
    def __init__(self, params):
        self.z_star = np.asarray(params["z_star"], dtype=float)
        self.z_obs = np.asarray(params["z_obs"], dtype=float)
        self.d = float(params["d"])
        # any d* > d works; the margin keeps the log argument away from 0
        self.d_star = float(params.get("d_star", 1.05 * self.d))
        p_star = geo.obstacle_diffeo(self.z_star, self.z_obs, self.d_star)
        self.rho_star = float(p_star[0])
        self.theta_star = p_star[1:3]

    def family(self, delta):
        return obstacle_family(self.rho_star, self.theta_star, delta)

    def z_of(self, P):
        return self.z_obs + (self.d_star + np.exp(P[..., 0]))[..., None] * P[..., 1:3]

    def clearance(self, P):
        return self.d_star + np.exp(P[..., 0])

    def dist_target(self, P):
        return np.linalg.norm(self.z_of(P) - self.z_star, axis=-1)

    def extra_channels(self, P):
        return {"clearance": self.clearance(P)}

    def p_sharp(self):
        return np.concatenate([[self.rho_star], -self.theta_star])


class _ObstacleHolonomicPlant(_ObstacleBase):
    name = "obstacle_holonomic"
    dim_p = 3
    r = 2
    n_osc = 1

    def fields(self, P):
        return geo.obstacle_fields(P, self.d_star)

    def inputs(self, V, eta, g, periods):
        # two inputs from one rotor via the quarter-period phase shift
        rot = es_rotor(V, g.kappa)
        amp = es_amplitude(periods[0], g)
        a = np.sum(rot * eta, axis=-1)
        b = rot[..., 0] * eta[..., 1] - rot[..., 1] * eta[..., 0]
        return np.stack([amp * a, amp * b], axis=-1)

    def renorm_p(self, P):
        out = P.copy()
        out[..., 1:3] = geo.normalize(P[..., 1:3])
        return out

    def drift(self, P):
        return np.abs(np.linalg.norm(P[..., 1:3], axis=-1) - 1.0)


class _ObstacleNonholonomicPlant(_ObstacleBase):
    name = "obstacle_nonholonomic"
    dim_p = 5  # (rho, theta, psi); the potential reads the first three
    r = 1
    n_osc = 1
    averaged_scale = 0.5  # recursive averaging halves the effective gain

    def fields(self, P):
        # averaged comparator fields: the holonomic pushforwards, zero-padded
        # on the heading block
        f = geo.obstacle_fields(P[..., :3], self.d_star)
        pad = np.zeros(f.shape[:-1] + (2,))
        return np.concatenate([f, pad], axis=-1)

    def pdot_es(self, P, tu, aux=None):
        u2 = aux
        psi = P[..., 3:5]
        mu_dot = tu[..., 0, None] * geo.obstacle_pushforward(P[..., :3], psi, self.d_star)
        psi_dot = u2 * np.stack([psi[..., 1], -psi[..., 0]], axis=-1)
        return np.concatenate([mu_dot, psi_dot], axis=-1)

    def pdot_avg(self, P, gains, grad, gamma):
        f = self.fields(P)
        proj = np.sum(f * grad[..., None, :], axis=-1)
        coef = (gains[..., 0:1] ** 2) * proj  # single unknown gain scales both terms
        return -gamma * self.averaged_scale * np.sum(coef[..., :, None] * f, axis=-2)

    def renorm_p(self, P):
        out = P.copy()
        out[..., 1:3] = geo.normalize(P[..., 1:3])
        out[..., 3:5] = geo.normalize(P[..., 3:5])
        return out

    def drift(self, P):
        d1 = np.abs(np.linalg.norm(P[..., 1:3], axis=-1) - 1.0)
        d2 = np.abs(np.linalg.norm(P[..., 3:5], axis=-1) - 1.0)
        return np.maximum(d1, d2)

    def default_x0_p(self):
        return np.concatenate([self.p_sharp(), [1.0, 0.0]])


_PLANTS = {
    "circle": _CirclePlant,
    "obstacle_holonomic": _ObstacleHolonomicPlant,
    "sphere": _SpherePlant,
    "so3": _So3Plant,
    "obstacle_nonholonomic": _ObstacleNonholonomicPlant,
}

# which gain channels the automaton drives (the holonomic obstacle keeps
# its second gain frozen at +1, matching the published runs)
_ACTIVE_GAINS = {
    "circle": (True,),
    "obstacle_holonomic": (True, False),
    "sphere": (True, True, True),
    "so3": (True, True, True),
    "obstacle_nonholonomic": (True,),
}


@dataclass
class BuiltScenario:
    """A ready-to-solve closed loop plus the pieces needed for analysis."""

    cfg: ScenarioConfig
    system: HybridSystemDef
    solver: SolverConfig
    layout: StateLayout
    family: PotentialFamily
    plant: object
    x0: np.ndarray
    monitors: tuple
    gains: ESGains
    periods: tuple
    automaton: Optional[AutomatonConfig]
    perturbation: Optional[Perturbation]
    horizon: float


def default_config(scenario, **overrides) -> ScenarioConfig:
    return ScenarioConfig(scenario=scenario, **overrides)


def _resolve_params(cfg: ScenarioConfig):
    base = dict(_DEFAULTS[cfg.scenario])
    base.update(cfg.target)
    return base


def build_scenario(cfg: ScenarioConfig) -> BuiltScenario:
    """Assemble the composite hybrid system for a configuration.

    The composite flow/jump sets follow the product construction: flow
    while the synergy gap is at most delta and the automaton can flow; jump
    when the gap reaches delta, the dwell timer reaches one, or the monitor
    forces an exit from the zero-gain set; simultaneous conditions apply
    the combined jump map (mode to argmin, gains redrawn, heading and
    rotors frozen).
    """
    params = _resolve_params(cfg)
    plant = _PLANTS[cfg.scenario](params)
    gains = cfg.gains or ESGains(params["gamma"], params["kappa"], params["epsilon"])
    delta = params["delta"] if cfg.delta is None else cfg.delta
    periods = tuple(Fraction(p) for p in (cfg.periods or params["periods"]))
    if len(periods) != plant.n_osc:
        raise ConfigInvalid(f"{cfg.scenario} needs {plant.n_osc} oscillator period(s)")

    fam_syn = plant.family(delta)
    family = single_mode_family(fam_syn) if cfg.controller == "baseline" else fam_syn

    # automaton
    if cfg.automaton == "default":
        autocfg = AutomatonConfig(r=plant.r, active=_ACTIVE_GAINS[cfg.scenario])
    elif cfg.automaton is None:
        autocfg = None
    elif isinstance(cfg.automaton, AutomatonConfig):
        autocfg = cfg.automaton
        if autocfg.r != plant.r:
            raise ConfigInvalid(f"automaton has r={autocfg.r}, plant has r={plant.r}")
    else:
        raise ConfigInvalid("automaton must be 'default', None, or an AutomatonConfig")

    # perturbation (trap at the problematic critical point)
    if cfg.perturbation == "default":
        pert = None
        if cfg.scenario in ("circle", "sphere", "so3"):
            pert = Perturbation(center=plant.p_sharp())
    elif cfg.perturbation is None or isinstance(cfg.perturbation, Perturbation):
        pert = cfg.perturbation
    else:
        raise ConfigInvalid("perturbation must be 'default', None, or a Perturbation")

    averaged = cfg.controller == "averaged"
    n_osc = 0 if averaged else plant.n_osc
    lay = _make_layout(plant.dim_p, family.dim_p, plant.r, n_osc)
    rates = np.array([oscillator_rate(p, gains.epsilon) for p in periods])

    has_mu_jump = family.n_modes > 1
    t_ceiling = autocfg.t_ceiling if autocfg else 2.0

    def fam_block(P):
        return P[..., :lay.fam_dim]

    # --- flow ---------------------------------------------------------------

    def flow_field(X):
        X = np.asarray(X, dtype=float)
        out = np.zeros_like(X)
        P = X[..., lay.p]
        q = X[..., lay.q]
        gvec = X[..., lay.gains]
        if averaged:
            g = family.grad(q, fam_block(P))
            if lay.fam_dim < lay.dim_p:
                g = np.concatenate(
                    [g, np.zeros(g.shape[:-1] + (lay.dim_p - lay.fam_dim,))], axis=-1)
            pd = plant.pdot_avg(P, gvec, g, gains.gamma)
        else:
            V = family.eval(q, fam_block(P))
            eta = X[..., lay.osc]
            u = plant.inputs(V, eta, gains, periods)
            tu = gvec * u
            aux = 2.0 * math.pi / gains.epsilon if plant.name == "obstacle_nonholonomic" else None
            pd = plant.pdot_es(P, tu, aux)
            out[..., lay.osc] = oscillator_block_flow(eta, rates)
        if pert is not None:
            d = pert.field(fam_block(P), family.tangent_project)
            pd = pd.copy()
            pd[..., :lay.fam_dim] += d
        out[..., lay.p] = pd
        if autocfg is not None:
            out[..., lay.th] = theta_flow(X[..., lay.th], autocfg)
        return out

    # --- sets / margins -------------------------------------------------------

    margin_names = []
    if has_mu_jump:
        margin_names.append("x")
    if autocfg is not None:
        margin_names += ["theta", "theta_forced"]
    if not margin_names:
        margin_names = ["none"]

    def jump_margin(X):
        X = np.asarray(X, dtype=float)
        cols = []
        if has_mu_jump:
            cols.append(family.mu(X[..., lay.q], fam_block(X[..., lay.p])) - delta)
        if autocfg is not None:
            cols.append(X[..., lay.dwell] - 1.0)
            bad = in_bad_set(X[..., lay.gains], autocfg)
            cols.append(np.where(bad, -X[..., lay.ratio], -np.inf))
        if not cols:
            cols.append(np.full(X.shape[:-1], -np.inf))
        return np.stack(cols, axis=-1)

    def flow_set(X, tol):
        X = np.asarray(X, dtype=float)
        ok = np.ones(X.shape[:-1], dtype=bool)
        if has_mu_jump:
            mu = family.mu(X[..., lay.q], fam_block(X[..., lay.p]))
            ok &= mu <= delta + max(tol, 1e-7)
        if autocfg is not None:
            dwell = X[..., lay.dwell]
            ratio = X[..., lay.ratio]
            ok &= (dwell >= -tol) & (dwell <= 1.0 + tol)
            ok &= (ratio >= -max(tol, 1e-9)) & (ratio <= t_ceiling + tol)
        ok &= plant.drift(X[..., lay.p]) <= 0.1
        return ok

    # --- jump map ---------------------------------------------------------------

    def jump_map(x, rng, ctx):
        m = jump_margin(x[None, :])[0]
        fired = {nm: v >= 0.0 for nm, v in zip(margin_names, m)}
        out = x.copy()
        if fired.get("x"):
            out[lay.q] = float(family.argmin_mode(fam_block(x[lay.p])))
        if fired.get("theta") or fired.get("theta_forced"):
            out[lay.th] = theta_jump(x[lay.th], autocfg, rng, ctx)
        return out

    # --- channels ------------------------------------------------------------------

    channel_names = (["V", "mu", "q"]
                     + [f"theta{i+1}" for i in range(plant.r)]
                     + ["dwell", "ratio"]
                     + [f"u{i+1}" for i in range(plant.r)]
                     + ["dist", "in_eb", "W"])
    extra = sorted(plant.extra_channels(plant.default_x0_p()[None, :]))
    channel_names += extra
    channel_names = tuple(channel_names)

    def channels(X):
        X = np.asarray(X, dtype=float)
        P = X[..., lay.p]
        q = X[..., lay.q]
        gvec = X[..., lay.gains]
        vals = family.eval_all(fam_block(P))
        idx = np.rint(q).astype(int) - 1
        V = np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0]
        mu = V - np.min(vals, axis=-1)
        if averaged:
            g = family.grad(q, fam_block(P))
            if lay.fam_dim < lay.dim_p:
                g = np.concatenate(
                    [g, np.zeros(g.shape[:-1] + (lay.dim_p - lay.fam_dim,))], axis=-1)
            f = plant.fields(P)
            u = -gains.gamma * np.sum(f * g[..., None, :], axis=-1) * gvec
        else:
            u = plant.inputs(V, X[..., lay.osc], gains, periods)
            if u.shape[-1] < plant.r:  # single-input plants log u2 implicitly
                pad = np.zeros(u.shape[:-1] + (plant.r - u.shape[-1],))
                u = np.concatenate([u, pad], axis=-1)
        bad = (in_bad_set(gvec, autocfg).astype(float) if autocfg is not None
               else np.zeros(X.shape[:-1]))
        cols = [V, mu, q]
        cols += [gvec[..., i] for i in range(plant.r)]
        cols += [X[..., lay.dwell], X[..., lay.ratio]]
        cols += [u[..., i] for i in range(plant.r)]
        cols += [plant.dist_target(P), bad, family.base_eval(fam_block(P))]
        for name in extra:
            cols.append(plant.extra_channels(P)[name])
        return np.stack(cols, axis=-1)

    # --- renormalization ---------------------------------------------------------

    def renormalize(X):
        X[..., lay.p] = plant.renorm_p(X[..., lay.p])
        if autocfg is not None:
            clip_monitor(X, autocfg, offset=lay.dim_p + 1)
        if n_osc:
            eta = X[..., lay.osc].reshape(X.shape[:-1] + (n_osc, 2))
            X[..., lay.osc] = geo.normalize(eta).reshape(X[..., lay.osc].shape)
        return X

    system = HybridSystemDef(
        dim=lay.dim, flow_field=flow_field, flow_set=flow_set,
        jump_map=jump_map, jump_margin=jump_margin,
        margin_names=tuple(margin_names), channels=channels,
        channel_names=channel_names, vectorized=True)

    # --- initial condition ----------------------------------------------------------

    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float)
        if x0.shape != (lay.dim,):
            raise ConfigInvalid(f"x0 must have shape ({lay.dim},)")
    else:
        p0 = plant.default_x0_p()
        q0 = float(family.argmin_mode(fam_block(p0)))
        th0 = (initial_theta(autocfg, cfg.initial_gains) if autocfg is not None
               else np.concatenate([np.ones(plant.r) if cfg.initial_gains is None
                                    else np.asarray(cfg.initial_gains, dtype=float),
                                    [0.0, t_ceiling]]))
        eta0 = np.tile([1.0, 0.0], n_osc)
        x0 = np.concatenate([p0, [q0], th0, eta0])

    # --- solver config ----------------------------------------------------------------

    horizon = float(cfg.horizon if cfg.horizon is not None else params["horizon"])
    if cfg.step is not None:
        h = float(cfg.step)
    elif averaged:
        h = 5e-3
    else:
        # resolve the fastest rotor with steps_per_period samples
        t_min = float(min(periods))
        h = gains.epsilon ** 2 * t_min / cfg.steps_per_period
    rec_dt = cfg.record_dt if cfg.record_dt is not None else \
        (0.01 if averaged else params["record_dt"])
    record_every = max(1, int(round(rec_dt / h)))
    if cfg.solver is not None:
        solver = replace(cfg.solver, renormalize=renormalize)
    else:
        solver = SolverConfig(step=h, horizon_t=horizon, renormalize=renormalize,
                              seed=cfg.seed, record_every=record_every)

    monitors = [
        MonitorSpec("drift_max", lambda X: plant.drift(X[..., lay.p]), "max"),
        MonitorSpec("dist_min", lambda X: plant.dist_target(X[..., lay.p]), "min"),
        MonitorSpec("dist_final_window_max",
                    lambda X: plant.dist_target(X[..., lay.p]), "max",
                    t_from=horizon * 2 / 3),
    ]
    if isinstance(plant, _ObstacleBase):
        monitors.append(MonitorSpec(
            "clearance_min", lambda X: plant.clearance(X[..., lay.p]), "min"))

    return BuiltScenario(
        cfg=cfg, system=system, solver=solver, layout=lay, family=family,
        plant=plant, x0=x0, monitors=tuple(monitors), gains=gains,
        periods=periods, automaton=autocfg, perturbation=pert, horizon=horizon)
