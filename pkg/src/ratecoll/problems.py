"""Registry of benchmark problems.

Every entry is a deterministic factory returning an :class:`~ratecoll.ocp.OcpSpec`
with analytic first and second derivatives.  Entries marked ``invented``
are synthetic test problems made for this package.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .ocp import OcpSpec

__all__ = ["ProblemEntry", "REGISTRY", "get_problem", "spec_from_json", "problem_names"]


@dataclass(frozen=True)
class ProblemEntry:
    """A registered problem factory with reference metadata."""

    name: str
    factory: Callable[..., OcpSpec]
    description: str
    invented: bool = False
    reference: dict = field(default_factory=dict)
    arc: Callable | None = None  # residual(traj, t, k) of the singular-arc condition

    def build(self, **params):
        return self.factory(**params)


def _zeros(m, a, b):
    return np.zeros((m, a, b))


# ---------------------------------------------------------------------------
# second-order singular regulator
# ---------------------------------------------------------------------------

def sosr(tf=5.0, x1_0=0.0, x2_0=1.0, rate=1.0):
    """Regulator ``min int x1^2 + x2^2`` with ``x1' = x2`` and ``|x2'| <= rate``.

    The second state is written as an input ``u := x2`` with an input rate
    bound; the add-state rewrite recovers the classical two-state form with
    ``x2' = u`` in ``[-rate, rate]``.  Local vector ``[x1, u, t]``.
    """

    def dynamics(x, u, t, p):
        return u.copy()

    def dyn_jac(x, u, t, p):
        J = _zeros(len(t), 1, 3)
        J[:, 0, 1] = 1.0
        return J

    def dyn_hess(x, u, t, p, w):
        return _zeros(len(t), 3, 3)

    def lagrange(x, u, t, p):
        return x[:, 0] ** 2 + u[:, 0] ** 2

    def lag_jac(x, u, t, p):
        J = _zeros(len(t), 1, 3)
        J[:, 0, 0] = 2 * x[:, 0]
        J[:, 0, 1] = 2 * u[:, 0]
        return J

    def lag_hess(x, u, t, p, w):
        H = _zeros(len(t), 3, 3)
        H[:, 0, 0] = 2 * w[:, 0]
        H[:, 1, 1] = 2 * w[:, 0]
        return H

    return OcpSpec(
        n_states=1, n_inputs=1, dynamics=dynamics, lagrange_cost=lagrange,
        x0_bounds=([x1_0], [x1_0]), u0_bounds=([x2_0], [x2_0]), t0=0.0, tf=float(tf),
        input_rate_bounds={0: (-rate, rate)},
        jacobians={"dynamics": dyn_jac, "lagrange": lag_jac},
        hessians={"dynamics": dyn_hess, "lagrange": lag_hess},
        guess={"x0": [x1_0], "xf": [0.0], "u0": [x2_0], "uf": [0.0]},
        state_names=("x1",), input_names=("x2",), name="sosr",
    )


def sosr_rate(tf=5.0, x1_0=0.0, x2_0=1.0, rate=1.0, u_max=2.0, eps=1e-3):
    """Regulator with two states, ``x2' = u`` and a state rate bound on ``x2``.

    ``u`` is bounded loosely by ``u_max`` and carries a small ``eps * u^2``
    weight so the input stays unique where the rate bound decides ``x2``.
    """

    def dynamics(x, u, t, p):
        return np.column_stack([x[:, 1], u[:, 0]])

    def dyn_jac(x, u, t, p):
        J = _zeros(len(t), 2, 4)
        J[:, 0, 1] = 1.0
        J[:, 1, 2] = 1.0
        return J

    def dyn_hess(x, u, t, p, w):
        return _zeros(len(t), 4, 4)

    def lagrange(x, u, t, p):
        return x[:, 0] ** 2 + x[:, 1] ** 2 + eps * u[:, 0] ** 2

    def lag_jac(x, u, t, p):
        J = _zeros(len(t), 1, 4)
        J[:, 0, 0] = 2 * x[:, 0]
        J[:, 0, 1] = 2 * x[:, 1]
        J[:, 0, 2] = 2 * eps * u[:, 0]
        return J

    def lag_hess(x, u, t, p, w):
        H = _zeros(len(t), 4, 4)
        H[:, 0, 0] = 2 * w[:, 0]
        H[:, 1, 1] = 2 * w[:, 0]
        H[:, 2, 2] = 2 * eps * w[:, 0]
        return H

    return OcpSpec(
        n_states=2, n_inputs=1, dynamics=dynamics, lagrange_cost=lagrange,
        u_bounds=([-u_max], [u_max]), x0_bounds=([x1_0, x2_0], [x1_0, x2_0]), tf=float(tf),
        state_rate_bounds={1: (-rate, rate)},
        jacobians={"dynamics": dyn_jac, "lagrange": lag_jac},
        hessians={"dynamics": dyn_hess, "lagrange": lag_hess},
        guess={"x0": [x1_0, x2_0], "xf": [0.0, 0.0], "u0": [0.0], "uf": [0.0]},
        state_names=("x1", "x2"), input_names=("u",), name="sosr-rate",
    )


# ---------------------------------------------------------------------------
# invented problems
# ---------------------------------------------------------------------------

def nl_actuator(tf=6.0, target=0.8, gain=2.0, weight=0.1, rate=1.0):
    """Scalar plant ``x' = -x + gain * tanh(u)`` tracking ``target``.

    Cost ``int (x - target)^2 + weight * u^2`` with ``u(0) = 0`` and
    ``|u'| <= rate``.  The dynamics are nonlinear in ``u``, so the add-state
    form has a switching function of arbitrary shape.  Local ``[x, u, t]``.
    """

    def dynamics(x, u, t, p):
        return (-x[:, 0] + gain * np.tanh(u[:, 0]))[:, None]

    def dyn_jac(x, u, t, p):
        J = _zeros(len(t), 1, 3)
        J[:, 0, 0] = -1.0
        J[:, 0, 1] = gain / np.cosh(u[:, 0]) ** 2
        return J

    def dyn_hess(x, u, t, p, w):
        H = _zeros(len(t), 3, 3)
        th = np.tanh(u[:, 0])
        H[:, 1, 1] = w[:, 0] * (-2.0 * gain * th * (1.0 - th ** 2))
        return H

    def lagrange(x, u, t, p):
        return (x[:, 0] - target) ** 2 + weight * u[:, 0] ** 2

    def lag_jac(x, u, t, p):
        J = _zeros(len(t), 1, 3)
        J[:, 0, 0] = 2 * (x[:, 0] - target)
        J[:, 0, 1] = 2 * weight * u[:, 0]
        return J

    def lag_hess(x, u, t, p, w):
        H = _zeros(len(t), 3, 3)
        H[:, 0, 0] = 2 * w[:, 0]
        H[:, 1, 1] = 2 * weight * w[:, 0]
        return H

    return OcpSpec(
        n_states=1, n_inputs=1, dynamics=dynamics, lagrange_cost=lagrange,
        x0_bounds=([0.0], [0.0]), u0_bounds=([0.0], [0.0]), u_bounds=([-3.0], [3.0]),
        tf=float(tf), input_rate_bounds={0: (-rate, rate)},
        jacobians={"dynamics": dyn_jac, "lagrange": lag_jac},
        hessians={"dynamics": dyn_hess, "lagrange": lag_hess},
        guess={"x0": [0.0], "xf": [target], "u0": [0.0], "uf": [0.0]},
        state_names=("x",), input_names=("u",), name="nl-actuator",
    )


def di_staterate(tf=4.0, target=1.0, drag=0.5, accel=0.5, u_max=5.0, weight=0.01):
    """Double integrator with quadratic drag and a bound on the velocity rate.

    ``x' = v``, ``v' = u - drag * v^2``, cost ``int (x - target)^2 + weight * u^2``,
    ``|v'| <= accel``.  The velocity dynamics are nonlinear, so the add-path
    row carries a Hessian.  Local ``[x, v, u, t]``.
    """

    def dynamics(x, u, t, p):
        return np.column_stack([x[:, 1], u[:, 0] - drag * x[:, 1] ** 2])

    def dyn_jac(x, u, t, p):
        J = _zeros(len(t), 2, 4)
        J[:, 0, 1] = 1.0
        J[:, 1, 1] = -2 * drag * x[:, 1]
        J[:, 1, 2] = 1.0
        return J

    def dyn_hess(x, u, t, p, w):
        H = _zeros(len(t), 4, 4)
        H[:, 1, 1] = -2 * drag * w[:, 1]
        return H

    def lagrange(x, u, t, p):
        return (x[:, 0] - target) ** 2 + weight * u[:, 0] ** 2

    def lag_jac(x, u, t, p):
        J = _zeros(len(t), 1, 4)
        J[:, 0, 0] = 2 * (x[:, 0] - target)
        J[:, 0, 2] = 2 * weight * u[:, 0]
        return J

    def lag_hess(x, u, t, p, w):
        H = _zeros(len(t), 4, 4)
        H[:, 0, 0] = 2 * w[:, 0]
        H[:, 2, 2] = 2 * weight * w[:, 0]
        return H

    return OcpSpec(
        n_states=2, n_inputs=1, dynamics=dynamics, lagrange_cost=lagrange,
        u_bounds=([-u_max], [u_max]), x0_bounds=([0.0, 0.0], [0.0, 0.0]), tf=float(tf),
        state_rate_bounds={1: (-accel, accel)},
        jacobians={"dynamics": dyn_jac, "lagrange": lag_jac},
        hessians={"dynamics": dyn_hess, "lagrange": lag_hess},
        guess={"x0": [0.0, 0.0], "xf": [target, 0.0], "u0": [0.0], "uf": [0.0]},
        state_names=("x", "v"), input_names=("u",), name="di-staterate",
    )


def lin_switch(tf=5.0, decay=1.0, c2=0.3, c3=1.0, a=1.0, rate=1.0):
    """Problem linear in the rate-bounded input.

    ``x' = -decay * x + c3 * u``, running cost ``c2 * u``, terminal cost
    ``-a * x(tf)``, ``u(0) = 0`` and ``|u'| <= rate``.  In add-state form the
    switching function is ``lambda_u(t) = int_t^tf (c2 - a c3 e^{-decay (tf - s)}) ds``,
    which has at most one interior zero.  Local ``[x, u, t]``.
    """

    def dynamics(x, u, t, p):
        return (-decay * x[:, 0] + c3 * u[:, 0])[:, None]

    def dyn_jac(x, u, t, p):
        J = _zeros(len(t), 1, 3)
        J[:, 0, 0] = -decay
        J[:, 0, 1] = c3
        return J

    def dyn_hess(x, u, t, p, w):
        return _zeros(len(t), 3, 3)

    def lagrange(x, u, t, p):
        return c2 * u[:, 0]

    def lag_jac(x, u, t, p):
        J = _zeros(len(t), 1, 3)
        J[:, 0, 1] = c2
        return J

    def lag_hess(x, u, t, p, w):
        return _zeros(len(t), 3, 3)

    def mayer(x0, t0, xf, tf_, p):
        return -a * xf[0]

    def mayer_jac(x0, t0, xf, tf_, p):
        g = np.zeros(4)
        g[2] = -a
        return g

    def mayer_hess(x0, t0, xf, tf_, p, w):
        return np.zeros((4, 4))

    return OcpSpec(
        n_states=1, n_inputs=1, dynamics=dynamics, lagrange_cost=lagrange, mayer_cost=mayer,
        x0_bounds=([0.0], [0.0]), u0_bounds=([0.0], [0.0]), tf=float(tf),
        input_rate_bounds={0: (-rate, rate)},
        jacobians={"dynamics": dyn_jac, "lagrange": lag_jac, "mayer": mayer_jac},
        hessians={"dynamics": dyn_hess, "lagrange": lag_hess, "mayer": mayer_hess},
        guess={"x0": [0.0], "xf": [0.0], "u0": [0.0], "uf": [0.0]},
        state_names=("x",), input_names=("u",), name="lin-switch",
    )


def lin_switch_costate(t, tf=5.0, decay=1.0, c2=0.3, c3=1.0, a=1.0):
    """Analytic switching function of :func:`lin_switch` in add-state form."""
    t = np.asarray(t, dtype=float)
    if decay == 0:
        return (c2 - a * c3) * (tf - t)
    return c2 * (tf - t) - a * c3 * (1.0 - np.exp(-decay * (tf - t))) / decay


def _rate_equals_x1(traj, t, k):
    """Regulator arc condition: the rate of input 0 equals state 0."""
    return traj.original_input_rate(t, 0, k) - traj.state(t, k)[:, 0]


def _state_rate_equals_x1(traj, t, k):
    """Regulator arc condition with ``x2`` as a state: ``x2' = x1``."""
    return traj.state_rate(t, k)[:, 1] - traj.state(t, k)[:, 0]


REGISTRY = {
    "sosr": ProblemEntry(
        "sosr", sosr, "second-order singular regulator (rate bound on x2 as input rate)",
        reference={"singular_arc": "u = x1", "dense_mesh": {"scheme": "hs", "nodes": 400,
                                                              "mode": "onmesh"}},
        arc=_rate_equals_x1),
    "sosr-rate": ProblemEntry(
        "sosr-rate", sosr_rate, "regulator with a state rate bound on x2",
        reference={"singular_arc": "x2' = x1"}, arc=_state_rate_equals_x1),
    "nl-actuator": ProblemEntry(
        "nl-actuator", nl_actuator, "scalar plant nonlinear in a rate-limited input",
        invented=True),
    "di-staterate": ProblemEntry(
        "di-staterate", di_staterate, "double integrator with drag and a velocity rate bound",
        invented=True),
    "lin-switch": ProblemEntry(
        "lin-switch", lin_switch, "dynamics and cost linear in a rate-limited input",
        invented=True, reference={"switching_function": "lin_switch_costate"}),
}


def problem_names():
    return sorted(REGISTRY)


def get_problem(name, **params) -> OcpSpec:
    """Build the registered problem ``name`` with optional factory parameters."""
    try:
        entry = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {', '.join(problem_names())}") from None
    return entry.build(**params)


_OVERRIDABLE = {"x_bounds", "u_bounds", "p_bounds", "x0_bounds", "xf_bounds", "u0_bounds",
                "t0", "tf", "state_rate_bounds", "input_rate_bounds", "guess", "name",
                "path_bounds"}


def spec_from_json(doc) -> OcpSpec:
    """Build a spec from a JSON document or mapping.

    The document names a registered problem under ``"problem"`` (its
    callbacks), optional factory ``"params"``, and may override any of the
    bound, time, rate-bound and guess fields of the spec.  Rate-bound keys
    are variable indices.
    """
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    doc = dict(doc)
    name = doc.pop("problem", None) or doc.pop("dynamics", None)
    if name is None:
        raise KeyError("JSON problem needs a 'problem' entry naming a registered problem")
    spec = get_problem(name, **doc.pop("params", {}))
    unknown = set(doc) - _OVERRIDABLE
    if unknown:
        raise KeyError(f"unsupported fields in problem document: {sorted(unknown)}")
    changes = {}
    for key, value in doc.items():
        if key in ("state_rate_bounds", "input_rate_bounds"):
            value = {int(k): (float(v[0]), float(v[1])) for k, v in value.items()}
        elif key in ("t0", "tf") and isinstance(value, list):
            value = tuple(value)
        elif key.endswith("_bounds") and value is not None:
            value = (np.asarray(value[0], dtype=float), np.asarray(value[1], dtype=float))
        changes[key] = value
    names = {f.name for f in fields(OcpSpec)}
    assert set(changes) <= names
    return replace(spec, **changes)
