"""Forced-circulation evaporator truth model.

Continuous-time ODE in x = (X2, P2) (product concentration [%], operating
pressure [kPa]) with controls u = (P100, F200) (steam pressure [kPa],
cooling-water flow [kg/min]) and exogenous quantities d = (X1, F1, T1, T200)
that are constant in the control model but stochastic in reality.

All algebraic relations are evaluated in :func:`algebraic_outputs`; the state
derivative, one-step integration (RK4), disturbance sampling and the realized
economic stage cost build on it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import NonFiniteError

# Nominal optimal steady state of the economically operated plant.
X_S = np.array([25.0, 49.74])
U_S = np.array([191.71, 215.89])

# Hard state/control boxes of the benchmark.
X_LOWER = np.array([25.0, 40.0])
X_UPPER = np.array([100.0, 80.0])
U_LOWER = np.array([100.0, 100.0])
U_UPPER = np.array([400.0, 400.0])

# Half-widths of the uniform disturbance intervals around the nominal values,
# ordered as (X1, F1, T1, T200).
DEFAULT_DISTURBANCE_WIDTH = np.array([1.0, 2.0, 8.0, 5.0])

# Loaded constants must satisfy ||xdot(x_s, u_s, d_nom)||_inf below this.
STEADY_STATE_GATE = 1e-1

_CONSTANT_KEYS = (
    "M", "C", "a", "b", "c", "d", "e", "f", "g", "h",
    "lambda", "lambda_s", "C_p", "UA2", "F3",
    "X1_nom", "F1_nom", "T1_nom", "T200_nom",
)


@dataclass(frozen=True)
class PlantConstants:
    """Physical constants of the evaporator model."""

    M: float          # liquid holdup [kg]
    C: float          # vapor holdup constant [kg/kPa]
    a: float          # T2 = a*P2 + b*X2 + c
    b: float
    c: float
    d: float          # T3 = d*P2 + e
    e: float
    f: float          # T100 = f*P100 + g
    g: float
    h: float          # UA1 = h*(F1 + F3)
    lam: float        # latent heat of vaporization [kW/(kg/min)]
    lam_s: float      # latent heat of steam [kW/(kg/min)]
    C_p: float        # heat capacity [kW/(kg/min K)]
    UA2: float        # condenser heat transfer coefficient [kW/K]
    F3: float         # circulating flow [kg/min]
    X1_nom: float
    F1_nom: float
    T1_nom: float
    T200_nom: float

    def __post_init__(self):
        for name in ("M", "C", "lam", "lam_s", "C_p"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"plant constant {name} must be positive")

    def nominal_disturbance(self) -> "Disturbance":
        return Disturbance(self.X1_nom, self.F1_nom, self.T1_nom, self.T200_nom)


@dataclass(frozen=True)
class Disturbance:
    """One realization of the exogenous quantities (X1, F1, T1, T200)."""

    X1: float
    F1: float
    T1: float
    T200: float

    def as_array(self) -> np.ndarray:
        return np.array([self.X1, self.F1, self.T1, self.T200])


@dataclass(frozen=True)
class AlgebraicOutputs:
    T2: float
    T3: float
    T100: float
    UA1: float
    Q100: float
    Q200: float
    F2: float
    F4: float
    F5: float
    F100: float


def load_constants(path=None, check: bool = True) -> PlantConstants:
    """Load plant constants from a JSON file (packaged default if no path).

    With ``check=True`` the constants must reproduce the nominal steady state:
    ``||ode_rhs(X_S, U_S, d_nom)||_inf <= STEADY_STATE_GATE``.
    """
    if path is None:
        text = resources.files("rtirl").joinpath("data/evaporator_constants.json").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    missing = [k for k in _CONSTANT_KEYS if k not in raw]
    if missing:
        raise ValueError(f"constants file is missing keys: {missing}")
    kwargs = {k: float(raw[k]) for k in _CONSTANT_KEYS}
    kwargs["lam"] = kwargs.pop("lambda")
    kwargs["lam_s"] = kwargs.pop("lambda_s")
    consts = PlantConstants(**kwargs)
    if check:
        resid = ode_rhs(consts, X_S, U_S, consts.nominal_disturbance())
        if not np.all(np.isfinite(resid)) or np.max(np.abs(resid)) > STEADY_STATE_GATE:
            raise ValueError(
                "constants fail the steady-state gate: |xdot(x_s, u_s)| = "
                f"{np.max(np.abs(resid)):.3e} > {STEADY_STATE_GATE:g}"
            )
    return consts


def _split_xu(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return x[..., 0], x[..., 1], u[..., 0], u[..., 1]


def algebraic_outputs(consts: PlantConstants, x, u, d: Disturbance) -> AlgebraicOutputs:
    """Evaluate the full algebraic chain of the evaporator model.

    The flow identities F2 = F1 - F4, lam*F5 = Q200 and F100 = Q100/lam_s
    hold by construction and are asserted on every call.
    """
    X2, P2, P100, F200 = _split_xu(x, u)
    cp2F200 = 2.0 * consts.C_p * F200
    if np.any(1.0 + consts.UA2 / cp2F200 == 0.0) or np.any(cp2F200 == 0.0):
        raise NonFiniteError("condenser denominator 1 + UA2/(2*C_p*F200) vanished")

    T2 = consts.a * P2 + consts.b * X2 + consts.c
    T3 = consts.d * P2 + consts.e
    T100 = consts.f * P100 + consts.g
    UA1 = consts.h * (d.F1 + consts.F3)
    Q100 = UA1 * (T100 - T2)
    F4 = (Q100 - d.F1 * consts.C_p * (T2 - d.T1)) / consts.lam
    F100 = Q100 / consts.lam_s
    Q200 = consts.UA2 * (T3 - d.T200) / (1.0 + consts.UA2 / cp2F200)
    F5 = Q200 / consts.lam
    F2 = d.F1 - F4

    out = AlgebraicOutputs(T2, T3, T100, UA1, Q100, Q200, F2, F4, F5, F100)
    for name, value in out.__dict__.items():
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"algebraic output {name} is not finite")
    assert np.allclose(out.F2, d.F1 - out.F4, rtol=0.0, atol=0.0)
    assert np.allclose(consts.lam * out.F5, out.Q200, rtol=1e-15, atol=1e-12)
    assert np.allclose(out.F100, out.Q100 / consts.lam_s, rtol=0.0, atol=0.0)
    return out


def ode_rhs(consts: PlantConstants, x, u, d: Disturbance) -> np.ndarray:
    """State derivative (X2_dot, P2_dot). Broadcasts over leading axes of x, u."""
    X2 = np.asarray(x, dtype=float)[..., 0]
    alg = algebraic_outputs(consts, x, u, d)
    dX2 = (d.F1 * d.X1 - alg.F2 * X2) / consts.M
    dP2 = (alg.F4 - alg.F5) / consts.C
    rhs = np.stack([dX2, dP2], axis=-1)
    if not np.all(np.isfinite(rhs)):
        raise NonFiniteError("ode_rhs produced non-finite values")
    return rhs


def ode_jacobians(consts: PlantConstants, x, u, d: Disturbance):
    """Analytic Jacobians (d rhs/dx, d rhs/du), each of shape (..., 2, 2)."""
    X2, P2, P100, F200 = _split_xu(x, u)
    alg = algebraic_outputs(consts, x, u, d)

    UA1 = alg.UA1
    k = (UA1 + d.F1 * consts.C_p) / consts.lam
    dF4_dX2 = -consts.b * k
    dF4_dP2 = -consts.a * k
    dF4_dP100 = UA1 * consts.f / consts.lam

    cp2 = 2.0 * consts.C_p
    den = cp2 * F200 + consts.UA2
    w = cp2 * F200 / den
    dQ200_dP2 = consts.UA2 * consts.d * w
    dQ200_dF200 = consts.UA2 * (alg.T3 - d.T200) * cp2 * consts.UA2 / den**2
    dF5_dP2 = dQ200_dP2 / consts.lam
    dF5_dF200 = dQ200_dF200 / consts.lam

    # dX2_dot = (F1*X1 - F2*X2)/M with F2 = F1 - F4
    dX2dot_dX2 = (dF4_dX2 * X2 - alg.F2) / consts.M
    dX2dot_dP2 = dF4_dP2 * X2 / consts.M
    dX2dot_dP100 = dF4_dP100 * X2 / consts.M
    zeros = np.zeros_like(X2)

    dP2dot_dX2 = dF4_dX2 / consts.C
    dP2dot_dP2 = (dF4_dP2 - dF5_dP2) / consts.C
    dP2dot_dP100 = dF4_dP100 / consts.C
    dP2dot_dF200 = -dF5_dF200 / consts.C

    fx = np.stack([
        np.stack([dX2dot_dX2, dX2dot_dP2], axis=-1),
        np.stack([dP2dot_dX2, dP2dot_dP2], axis=-1),
    ], axis=-2)
    fu = np.stack([
        np.stack([dX2dot_dP100, zeros], axis=-1),
        np.stack([dP2dot_dP100, dP2dot_dF200], axis=-1),
    ], axis=-2)
    return fx, fu


def integrate_step(consts: PlantConstants, x, u, d: Disturbance, ts: float,
                   substeps: int) -> np.ndarray:
    """RK4 integration over one sampling period, disturbance held constant."""
    if ts <= 0.0:
        raise ValueError("ts must be positive")
    x = np.asarray(x, dtype=float)
    h = ts / substeps
    for _ in range(substeps):
        k1 = ode_rhs(consts, x, u, d)
        k2 = ode_rhs(consts, x + 0.5 * h * k1, u, d)
        k3 = ode_rhs(consts, x + 0.5 * h * k2, u, d)
        k4 = ode_rhs(consts, x + h * k3, u, d)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("integration produced non-finite state")
    return x


def integrate_step_with_jacobians(consts: PlantConstants, x, u, d: Disturbance,
                                  ts: float, substeps: int):
    """RK4 step plus Jacobians of the step map wrt x and u.

    Jacobians are propagated through the RK4 stages with the analytic ODE
    Jacobians; broadcasts over leading axes.
    """
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    eye = np.broadcast_to(np.eye(2), batch + (2, 2)).copy()
    Jx = eye.copy()
    Ju = np.zeros(batch + (2, 2))
    h = ts / substeps

    for _ in range(substeps):
        k1 = ode_rhs(consts, x, u, d)
        A1, B1 = ode_jacobians(consts, x, u, d)
        x2 = x + 0.5 * h * k1
        k2 = ode_rhs(consts, x2, u, d)
        A2, B2 = ode_jacobians(consts, x2, u, d)
        x3 = x + 0.5 * h * k2
        k3 = ode_rhs(consts, x3, u, d)
        A3, B3 = ode_jacobians(consts, x3, u, d)
        x4 = x + h * k3
        k4 = ode_rhs(consts, x4, u, d)
        A4, B4 = ode_jacobians(consts, x4, u, d)

        # dk_i/dx and dk_i/du at the current substep entry point
        D1x, D1u = A1, B1
        D2x = A2 @ (eye + 0.5 * h * D1x)
        D2u = A2 @ (0.5 * h * D1u) + B2
        D3x = A3 @ (eye + 0.5 * h * D2x)
        D3u = A3 @ (0.5 * h * D2u) + B3
        D4x = A4 @ (eye + h * D3x)
        D4u = A4 @ (h * D3u) + B4

        step_x = eye + (h / 6.0) * (D1x + 2.0 * D2x + 2.0 * D3x + D4x)
        step_u = (h / 6.0) * (D1u + 2.0 * D2u + 2.0 * D3u + D4u)
        Jx = step_x @ Jx
        Ju = step_x @ Ju + step_u
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(Jx)) and np.all(np.isfinite(Ju))):
        raise NonFiniteError("integration produced non-finite state or Jacobian")
    return x, Jx, Ju


def sample_disturbance(consts: PlantConstants, rng: np.random.Generator,
                       widths=DEFAULT_DISTURBANCE_WIDTH) -> Disturbance:
    """Draw (X1, F1, T1, T200) uniformly from nominal +- widths, independently."""
    widths = np.asarray(widths, dtype=float)
    nom = consts.nominal_disturbance().as_array()
    draw = nom + rng.uniform(-widths, widths)
    return Disturbance(*draw)


def realized_stage_cost(consts: PlantConstants, x, u, x_bounds,
                        B_sigma=None, b_sigma=None) -> float:
    """Economic stage cost plus the penalty on the measured bound violation.

    ``x_bounds`` is the pair (x_lower, x_upper) of the true operating bounds;
    the violation sigma = max(0, x_l - x, x - x_u) is computed componentwise
    from the measured state. The algebraic chain is evaluated at the nominal
    disturbance, so the cost is a deterministic function of (x, u).
    """
    x = np.asarray(x, dtype=float)
    x_l, x_u = (np.asarray(v, dtype=float) for v in x_bounds)
    if B_sigma is None:
        B_sigma = np.eye(2)
    if b_sigma is None:
        b_sigma = 1e5 * np.ones(2)
    alg = algebraic_outputs(consts, x, u, consts.nominal_disturbance())
    econ = 10.09 * (alg.F2 + consts.F3) + 600.0 * alg.F100 + 0.6 * np.asarray(u, dtype=float)[..., 1]
    sigma = np.maximum(0.0, np.maximum(x_l - x, x - x_u))
    penalty = sigma @ B_sigma @ sigma + b_sigma @ sigma
    value = float(econ + penalty)
    if not np.isfinite(value):
        raise NonFiniteError("realized stage cost is not finite")
    return value


class EvaporatorEnv:
    """Stateful environment: holds the plant state and the disturbance RNG.

    ``step(u)`` samples one disturbance (zero-order hold over the sampling
    period), returns the realized stage cost at the current state and advances
    the state by one RK4 integration step.
    """

    def __init__(self, consts: PlantConstants, rng: np.random.Generator,
                 x0=X_S, x_bounds=(X_LOWER, X_UPPER), ts: float = 1.0,
                 substeps: int = 10, widths=DEFAULT_DISTURBANCE_WIDTH,
                 B_sigma=None, b_sigma=None):
        self.consts = consts
        self.rng = rng
        self.x_bounds = (np.asarray(x_bounds[0], dtype=float),
                         np.asarray(x_bounds[1], dtype=float))
        self.ts = ts
        self.substeps = substeps
        self.widths = np.asarray(widths, dtype=float)
        self.B_sigma = np.eye(2) if B_sigma is None else np.asarray(B_sigma, dtype=float)
        self.b_sigma = 1e5 * np.ones(2) if b_sigma is None else np.asarray(b_sigma, dtype=float)
        self.state = np.asarray(x0, dtype=float).copy()

    def reset(self, x0=X_S) -> np.ndarray:
        self.state = np.asarray(x0, dtype=float).copy()
        return self.state.copy()

    def step(self, u):
        d = sample_disturbance(self.consts, self.rng, self.widths)
        cost = realized_stage_cost(self.consts, self.state, u, self.x_bounds,
                                   self.B_sigma, self.b_sigma)
        self.state = integrate_step(self.consts, self.state, u, d, self.ts, self.substeps)
        return self.state.copy(), cost, d
