"""Continuous-time optimal control problems in Bolza form.

Callbacks are vectorised over points: ``x`` has shape ``(M, n_states)``,
``u`` ``(M, n_inputs)``, ``t`` ``(M,)`` and ``p`` ``(n_params,)``.  Point
callbacks return ``(M, n_out)`` arrays (``(M,)`` for the running cost).

Derivatives of point callbacks are taken with respect to the local vector
``v = [x, u, p, t]``.  Analytic Jacobians may be supplied with shape
``(M, n_out, nv)``; analytic Hessians receive output weights ``w`` of shape
``(M, n_out)`` and return ``(M, nv, nv)``.  Whatever is missing is
approximated by finite differences.

End-point callbacks (Mayer cost, boundary conditions) take
``(x0, t0, xf, tf, p)`` and are differentiated with respect to
``e = [x0, t0, xf, tf, p]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (
    CallbackFailure,
    DimensionMismatch,
    InvertedBounds,
    MissingObjective,
    NoInputRateBounds,
    NoStateRateBounds,
    NotAddStateForm,
)

__all__ = [
    "OcpSpec",
    "ValidatedSpec",
    "RateMode",
    "PointFunction",
    "EndpointFunction",
    "validate",
    "augment_add_state",
    "augment_add_path",
    "apply_regularization",
]

INF = np.inf
_EPS = np.finfo(float).eps
_JAC_STEP = np.sqrt(_EPS)
_HESS_STEP_JAC = _EPS ** (1.0 / 3.0)
_HESS_STEP_FUN = _EPS ** (1.0 / 4.0)


class RateMode(str, enum.Enum):
    ADD_STATE = "addstate"
    ADD_PATH = "addpath"
    ON_MESH = "onmesh"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        table = {
            "addstate": cls.ADD_STATE,
            "addpath": cls.ADD_PATH,
            "addpathconstraint": cls.ADD_PATH,
            "onmesh": cls.ON_MESH,
        }
        if key not in table:
            raise ValueError(f"unknown rate mode {value!r}")
        return table[key]


# ---------------------------------------------------------------------------
# callback wrappers
# ---------------------------------------------------------------------------

def _call(fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # user code
        raise CallbackFailure(f"callback {getattr(fn, '__name__', fn)!r} raised: {exc}") from exc


@dataclass(frozen=True)
class PointFunction:
    """A vectorised function of ``(x, u, t, p)`` with derivative support.

    Attributes
    ----------
    jac_pattern : tuple
        ``(n_out, nv)`` nested tuple of bools; structural Jacobian.
    hess_pattern : tuple
        ``(n_out, nv, nv)`` nested tuple of bools; per-output Hessian.
    """

    fn: Callable
    n_out: int
    nx: int
    nu: int
    npar: int
    jac: Optional[Callable] = None
    hess: Optional[Callable] = None
    scalar: bool = False
    jac_pattern: tuple = ()
    hess_pattern: tuple = ()

    @property
    def nv(self):
        return self.nx + self.nu + self.npar + 1

    def split(self, v):
        nx, nu, npar = self.nx, self.nu, self.npar
        x = v[:, :nx]
        u = v[:, nx:nx + nu]
        p = v[0, nx + nu:nx + nu + npar] if len(v) else np.zeros(npar)
        t = v[:, -1]
        return x, u, t, p

    def stack(self, x, u, t, p):
        m = len(t)
        return np.hstack([x.reshape(m, self.nx), u.reshape(m, self.nu),
                          np.broadcast_to(np.asarray(p, dtype=float), (m, self.npar)),
                          np.asarray(t, dtype=float).reshape(m, 1)])

    def value(self, x, u, t, p):
        m = len(t)
        out = np.asarray(_call(self.fn, x, u, t, p), dtype=float)
        if self.scalar and out.shape == (m,):
            out = out.reshape(m, 1)
        if out.shape != (m, self.n_out):
            raise DimensionMismatch(
                f"callback returned shape {out.shape}, expected {(m, self.n_out)}")
        return out

    def value_v(self, v):
        return self.value(*self.split(v))

    def jacobian(self, x, u, t, p):
        m = len(t)
        if self.jac is not None:
            jac = np.asarray(_call(self.jac, x, u, t, p), dtype=float)
            jac = jac.reshape(m, self.n_out, self.nv) if jac.size == m * self.n_out * self.nv else jac
            if jac.shape != (m, self.n_out, self.nv):
                raise DimensionMismatch(
                    f"jacobian callback returned {jac.shape}, expected {(m, self.n_out, self.nv)}")
            return jac
        return self._fd_jacobian(self.stack(x, u, t, p))

    def _fd_jacobian(self, v):
        base = self.value_v(v)
        jac = np.empty((len(v), self.n_out, self.nv))
        for k in range(self.nv):
            h = _JAC_STEP * (1.0 + np.abs(v[:, k]))
            vp = v.copy()
            vp[:, k] += h
            if k >= self.nx + self.nu and k < self.nv - 1:
                # parameters are shared by all points; one step size
                vp[:, k] = v[0, k] + h[0]
                h = np.full(len(v), h[0])
            jac[:, :, k] = (self.value_v(vp) - base) / h[:, None]
        return jac

    def hessian(self, x, u, t, p, w):
        """Weighted Hessian ``sum_j w_j d2 g_j`` per point, shape ``(M, nv, nv)``."""
        m = len(t)
        w = np.asarray(w, dtype=float).reshape(m, self.n_out)
        if self.hess is not None:
            hess = np.asarray(_call(self.hess, x, u, t, p, w), dtype=float)
            if hess.shape != (m, self.nv, self.nv):
                raise DimensionMismatch(
                    f"hessian callback returned {hess.shape}, expected {(m, self.nv, self.nv)}")
            return hess
        v = self.stack(x, u, t, p)
        if self.jac is not None:
            return self._fd_hessian_from_jac(v, w)
        return self._fd_hessian_from_values(v, w)

    def _fd_hessian_from_jac(self, v, w):
        out = np.empty((len(v), self.nv, self.nv))
        for k in range(self.nv):
            h = _HESS_STEP_JAC * (1.0 + np.abs(v[:, k]))
            vp, vm = v.copy(), v.copy()
            vp[:, k] += h
            vm[:, k] -= h
            jp = self.jacobian(*self.split(vp))
            jm = self.jacobian(*self.split(vm))
            out[:, k, :] = np.einsum("mo,mov->mv", w, jp - jm) / (2 * h[:, None])
        return 0.5 * (out + out.transpose(0, 2, 1))

    def _fd_hessian_from_values(self, v, w):
        nv = self.nv

        def f(vv):
            return np.einsum("mo,mo->m", w, self.value_v(vv))

        h = _HESS_STEP_FUN * (1.0 + np.abs(v))
        f0 = f(v)
        out = np.empty((len(v), nv, nv))
        for k in range(nv):
            for j in range(k, nv):
                def shifted(a, b):
                    vv = v.copy()
                    vv[:, k] += a * h[:, k]
                    vv[:, j] += b * h[:, j]
                    return f(vv)
                if j == k:
                    val = (shifted(1, 0) - 2 * f0 + shifted(-1, 0)) / h[:, k] ** 2
                else:
                    val = (shifted(1, 1) - shifted(1, -1) - shifted(-1, 1) + shifted(-1, -1)) / (
                        4 * h[:, k] * h[:, j])
                out[:, k, j] = val
                out[:, j, k] = val
        return out

    # structure ------------------------------------------------------------
    @property
    def jac_mask(self):
        return np.asarray(self.jac_pattern, dtype=bool).reshape(self.n_out, self.nv)

    @property
    def hess_mask(self):
        return np.asarray(self.hess_pattern, dtype=bool).reshape(self.n_out, self.nv, self.nv)

    def output_is_linear(self):
        """Per-output flag: True where the detected Hessian pattern is empty."""
        return tuple(not row.any() for row in self.hess_mask)

    def with_patterns(self, samples):
        """Return a copy whose patterns were detected at ``samples`` (``(M, nv)``)."""
        jac_mask = np.zeros((self.n_out, self.nv), dtype=bool)
        hess_mask = np.zeros((self.n_out, self.nv, self.nv), dtype=bool)
        x, u, t, p = self.split(samples)
        vals = self.value(x, u, t, p)
        scale = 1.0 + np.max(np.abs(vals))
        jac = self.jacobian(x, u, t, p)
        jac_mask |= np.any(jac != 0.0, axis=0)
        thresh = 0.0 if self.hess is not None else 1e-5 * scale
        for j in range(self.n_out):
            w = np.zeros((len(t), self.n_out))
            w[:, j] = 1.0
            hs = self.hessian(x, u, t, p, w)
            hess_mask[j] |= np.any(np.abs(hs) > thresh, axis=0)
        hess_mask |= hess_mask.transpose(0, 2, 1)
        return replace(self, jac_pattern=_to_tuple(jac_mask), hess_pattern=_to_tuple(hess_mask))


@dataclass(frozen=True)
class EndpointFunction:
    """A function of ``(x0, t0, xf, tf, p)`` returning ``n_out`` values."""

    fn: Callable
    n_out: int
    nx: int
    npar: int
    jac: Optional[Callable] = None
    hess: Optional[Callable] = None
    scalar: bool = False
    jac_pattern: tuple = ()
    hess_pattern: tuple = ()

    @property
    def ne(self):
        return 2 * self.nx + 2 + self.npar

    def split(self, e):
        nx = self.nx
        return e[:nx], e[nx], e[nx + 1:2 * nx + 1], e[2 * nx + 1], e[2 * nx + 2:]

    def value_e(self, e):
        out = np.atleast_1d(np.asarray(_call(self.fn, *self.split(e)), dtype=float))
        if out.shape != (self.n_out,):
            raise DimensionMismatch(f"end-point callback returned {out.shape}, expected {(self.n_out,)}")
        return out

    def jacobian_e(self, e):
        if self.jac is not None:
            jac = np.asarray(_call(self.jac, *self.split(e)), dtype=float).reshape(self.n_out, self.ne)
            return jac
        base = self.value_e(e)
        jac = np.empty((self.n_out, self.ne))
        for k in range(self.ne):
            h = _JAC_STEP * (1.0 + abs(e[k]))
            ep = e.copy()
            ep[k] += h
            jac[:, k] = (self.value_e(ep) - base) / h
        return jac

    def hessian_e(self, e, w):
        w = np.asarray(w, dtype=float).reshape(self.n_out)
        if self.hess is not None:
            return np.asarray(_call(self.hess, *self.split(e), w), dtype=float).reshape(self.ne, self.ne)
        ne = self.ne
        out = np.empty((ne, ne))
        if self.jac is not None:
            for k in range(ne):
                h = _HESS_STEP_JAC * (1.0 + abs(e[k]))
                ep, em = e.copy(), e.copy()
                ep[k] += h
                em[k] -= h
                out[k] = w @ (self.jacobian_e(ep) - self.jacobian_e(em)) / (2 * h)
            return 0.5 * (out + out.T)

        def f(ee):
            return float(w @ self.value_e(ee))

        h = _HESS_STEP_FUN * (1.0 + np.abs(e))
        f0 = f(e)
        for k in range(ne):
            for j in range(k, ne):
                def sh(a, b):
                    ee = e.copy()
                    ee[k] += a * h[k]
                    ee[j] += b * h[j]
                    return f(ee)
                if j == k:
                    val = (sh(1, 0) - 2 * f0 + sh(-1, 0)) / h[k] ** 2
                else:
                    val = (sh(1, 1) - sh(1, -1) - sh(-1, 1) + sh(-1, -1)) / (4 * h[k] * h[j])
                out[k, j] = out[j, k] = val
        return out

    @property
    def jac_mask(self):
        return np.asarray(self.jac_pattern, dtype=bool).reshape(self.n_out, self.ne)

    @property
    def hess_mask(self):
        """Union over outputs of the Hessian pattern, ``(ne, ne)``."""
        return np.asarray(self.hess_pattern, dtype=bool).reshape(self.ne, self.ne)

    def with_patterns(self, samples):
        jac_mask = np.zeros((self.n_out, self.ne), dtype=bool)
        hess_mask = np.zeros((self.ne, self.ne), dtype=bool)
        for e in samples:
            vals = self.value_e(e)
            scale = 1.0 + np.max(np.abs(vals)) if vals.size else 1.0
            jac_mask |= self.jacobian_e(e) != 0.0
            thresh = 0.0 if self.hess is not None else 1e-5 * scale
            for j in range(self.n_out):
                w = np.zeros(self.n_out)
                w[j] = 1.0
                hess_mask |= np.abs(self.hessian_e(e, w)) > thresh
        hess_mask |= hess_mask.T
        return replace(self, jac_pattern=_to_tuple(jac_mask), hess_pattern=_to_tuple(hess_mask))


def _to_tuple(arr):
    if arr.ndim == 1:
        return tuple(bool(a) for a in arr)
    return tuple(_to_tuple(a) for a in arr)


# ---------------------------------------------------------------------------
# composition helpers used by the rewrites
# ---------------------------------------------------------------------------

def _remap_point(base, nx, nu, src, out_map, n_out, extra=None):
    """Compose ``base`` with a variable selection and output scattering.

    ``src[b]`` is the column of the new local vector feeding base variable
    ``b``; ``out_map[j]`` is the new output receiving base output ``j``.
    ``extra`` is an optional list of further ``(PointFunction, src, out_map)``
    terms that are summed in.
    """
    terms = [(base, np.asarray(src), np.asarray(out_map))]
    if extra:
        terms.extend((f, np.asarray(s), np.asarray(o)) for f, s, o in extra)
    npar = base.npar
    nv = nx + nu + npar + 1
    scalar = base.scalar and n_out == 1

    def stack(x, u, t, p):
        m = len(t)
        return np.hstack([x, u, np.broadcast_to(np.asarray(p, dtype=float), (m, npar)),
                          np.asarray(t, dtype=float).reshape(m, 1)])

    def fn(x, u, t, p):
        v = stack(x, u, t, p)
        out = np.zeros((len(t), n_out))
        for f, s, o in terms:
            out[:, o] += f.value_v(v[:, s])
        return out[:, 0] if scalar else out

    def jac(x, u, t, p):
        v = stack(x, u, t, p)
        out = np.zeros((len(t), n_out, nv))
        for f, s, o in terms:
            jb = f.jacobian(*f.split(v[:, s]))
            for j_base, j_new in enumerate(o):
                out[:, j_new, s] += jb[:, j_base, :]
        return out

    def hess(x, u, t, p, w):
        v = stack(x, u, t, p)
        w = np.asarray(w, dtype=float).reshape(len(t), n_out)
        out = np.zeros((len(t), nv, nv))
        for f, s, o in terms:
            hb = f.hessian(*f.split(v[:, s]), w[:, o])
            out[:, s[:, None], s[None, :]] += hb
        return out

    jac_mask = np.zeros((n_out, nv), dtype=bool)
    hess_mask = np.zeros((n_out, nv, nv), dtype=bool)
    for f, s, o in terms:
        jm, hm = f.jac_mask, f.hess_mask
        for j_base, j_new in enumerate(o):
            jac_mask[j_new, s] |= jm[j_base]
            hess_mask[j_new][np.ix_(s, s)] |= hm[j_base]
    return PointFunction(fn=fn, n_out=n_out, nx=nx, nu=nu, npar=npar, jac=jac, hess=hess,
                         scalar=scalar, jac_pattern=_to_tuple(jac_mask),
                         hess_pattern=_to_tuple(hess_mask))


def _remap_endpoint(base, nx_new, src):
    """Compose an end-point function with a selection of the new end-point vector."""
    src = np.asarray(src)
    npar = base.npar
    ne = 2 * nx_new + 2 + npar

    def pack(x0, t0, xf, tf, p):
        return np.concatenate([np.atleast_1d(x0), [t0], np.atleast_1d(xf), [tf], np.atleast_1d(p)])

    def fn(x0, t0, xf, tf, p):
        out = base.value_e(pack(x0, t0, xf, tf, p)[src])
        return out[0] if base.scalar else out

    def jac(x0, t0, xf, tf, p):
        out = np.zeros((base.n_out, ne))
        out[:, src] = base.jacobian_e(pack(x0, t0, xf, tf, p)[src])
        return out

    def hess(x0, t0, xf, tf, p, w):
        out = np.zeros((ne, ne))
        out[np.ix_(src, src)] = base.hessian_e(pack(x0, t0, xf, tf, p)[src], w)
        return out

    jac_mask = np.zeros((base.n_out, ne), dtype=bool)
    jac_mask[:, src] = base.jac_mask
    hess_mask = np.zeros((ne, ne), dtype=bool)
    hess_mask[np.ix_(src, src)] = base.hess_mask
    return EndpointFunction(fn=fn, n_out=base.n_out, nx=nx_new, npar=npar, jac=jac, hess=hess,
                            scalar=base.scalar, jac_pattern=_to_tuple(jac_mask),
                            hess_pattern=_to_tuple(hess_mask))


def _linear_point(coeffs, nx, nu, npar):
    """Point function ``v -> C v`` (rows of ``coeffs`` are outputs)."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    n_out, nv = coeffs.shape

    def stack(x, u, t, p):
        m = len(t)
        return np.hstack([x, u, np.broadcast_to(np.asarray(p, dtype=float), (m, npar)),
                          np.asarray(t, dtype=float).reshape(m, 1)])

    def fn(x, u, t, p):
        return stack(x, u, t, p) @ coeffs.T

    def jac(x, u, t, p):
        return np.broadcast_to(coeffs, (len(t), n_out, nv)).copy()

    def hess(x, u, t, p, w):
        return np.zeros((len(t), nv, nv))

    return PointFunction(fn=fn, n_out=n_out, nx=nx, nu=nu, npar=npar, jac=jac, hess=hess,
                         jac_pattern=_to_tuple(coeffs != 0.0),
                         hess_pattern=_to_tuple(np.zeros((n_out, nv, nv), dtype=bool)))


def _quadratic_point(idx, weight, nx, nu, npar):
    """Scalar point function ``weight * sum(v[idx]**2)``."""
    idx = np.asarray(idx)
    nv = nx + nu + npar + 1

    def stack(x, u, t, p):
        m = len(t)
        return np.hstack([x, u, np.broadcast_to(np.asarray(p, dtype=float), (m, npar)),
                          np.asarray(t, dtype=float).reshape(m, 1)])

    def fn(x, u, t, p):
        return weight * np.sum(stack(x, u, t, p)[:, idx] ** 2, axis=1)

    def jac(x, u, t, p):
        v = stack(x, u, t, p)
        out = np.zeros((len(t), 1, nv))
        out[:, 0, idx] = 2 * weight * v[:, idx]
        return out

    def hess(x, u, t, p, w):
        out = np.zeros((len(t), nv, nv))
        w = np.asarray(w).reshape(len(t))
        for i in idx:
            out[:, i, i] = 2 * weight * w
        return out

    jm = np.zeros((1, nv), dtype=bool)
    hm = np.zeros((1, nv, nv), dtype=bool)
    if weight != 0.0:
        jm[0, idx] = True
        hm[0, idx, idx] = True
    return PointFunction(fn=fn, n_out=1, nx=nx, nu=nu, npar=npar, jac=jac, hess=hess, scalar=True,
                         jac_pattern=_to_tuple(jm), hess_pattern=_to_tuple(hm))


# ---------------------------------------------------------------------------
# problem definitions
# ---------------------------------------------------------------------------

def _bounds(b, n, default=(-INF, INF)):
    if b is None:
        lo = np.full(n, default[0], dtype=float)
        hi = np.full(n, default[1], dtype=float)
    else:
        lo, hi = b
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    return lo, hi


def _time_bounds(value):
    if np.ndim(value) == 0:
        return float(value), float(value)
    lo, hi = value
    return float(lo), float(hi)


@dataclass
class OcpSpec:
    """User description of a continuous-time optimal control problem.

    Rate bounds are given per variable as ``{index: (lower, upper)}``; use
    ``-inf``/``inf`` for one-sided bounds.  ``t0`` and ``tf`` are either a
    number (fixed) or a ``(lower, upper)`` pair (free).  Analytic derivatives
    are looked up in ``jacobians`` and ``hessians`` under the keys
    ``"dynamics"``, ``"lagrange"``, ``"path"``, ``"mayer"`` and ``"boundary"``.
    ``guess`` holds end values (``x0``, ``xf``, ``u0``, ``uf``, ``p``) for the
    default straight-line initial guess.
    """

    n_states: int
    n_inputs: int
    dynamics: Callable
    n_params: int = 0
    lagrange_cost: Optional[Callable] = None
    mayer_cost: Optional[Callable] = None
    path_constraints: Optional[Callable] = None
    path_bounds: Optional[tuple] = None
    boundary: Optional[Callable] = None
    n_boundary: int = 0
    x_bounds: Optional[tuple] = None
    u_bounds: Optional[tuple] = None
    p_bounds: Optional[tuple] = None
    x0_bounds: Optional[tuple] = None
    xf_bounds: Optional[tuple] = None
    u0_bounds: Optional[tuple] = None
    t0: object = 0.0
    tf: object = 1.0
    state_rate_bounds: dict = field(default_factory=dict)
    input_rate_bounds: dict = field(default_factory=dict)
    jacobians: dict = field(default_factory=dict)
    hessians: dict = field(default_factory=dict)
    guess: dict = field(default_factory=dict)
    state_names: tuple = ()
    input_names: tuple = ()
    name: str = "ocp"


@dataclass(frozen=True)
class ValidatedSpec:
    """Checked, immutable problem ready for transcription.

    Bounds are stored as tuples so two validations of the same
    :class:`OcpSpec` compare equal.
    """

    name: str
    nx: int
    nu: int
    npar: int
    dynamics: PointFunction
    lagrange: Optional[PointFunction]
    mayer: Optional[EndpointFunction]
    path: Optional[PointFunction]
    path_lb: tuple
    path_ub: tuple
    path_labels: tuple
    boundary: Optional[EndpointFunction]
    x_lb: tuple
    x_ub: tuple
    u_lb: tuple
    u_ub: tuple
    p_lb: tuple
    p_ub: tuple
    x0_lb: tuple
    x0_ub: tuple
    xf_lb: tuple
    xf_ub: tuple
    u0_lb: tuple
    u0_ub: tuple
    t0_bounds: tuple
    tf_bounds: tuple
    state_rate: tuple  # ((index, lo, hi), ...)
    input_rate: tuple
    promoted: tuple = ()  # ((input_slot, state_index), ...)
    regularization: tuple = ()  # (rho, norm, aux_input_slots)
    guess: tuple = ()  # sorted (key, tuple(values)) pairs
    state_names: tuple = ()
    input_names: tuple = ()

    @property
    def free_t0(self):
        return self.t0_bounds[0] != self.t0_bounds[1]

    @property
    def free_tf(self):
        return self.tf_bounds[0] != self.tf_bounds[1]

    @property
    def fixed_time(self):
        return not (self.free_t0 or self.free_tf)

    @property
    def n_path(self):
        return len(self.path_lb)

    @property
    def n_boundary(self):
        return self.boundary.n_out if self.boundary is not None else 0

    @property
    def path_linear(self):
        return self.path.output_is_linear() if self.path is not None else ()

    def guess_dict(self):
        return {k: np.asarray(v, dtype=float) for k, v in self.guess}

    def sample_points(self, m=3, seed=20240611):
        """Deterministic sample of local vectors ``(m, nv)`` inside the bounds."""
        rng = np.random.default_rng(seed)
        lo = np.concatenate([self.x_lb, self.u_lb, self.p_lb,
                             [min(self.t0_bounds[0], self.tf_bounds[0])]])
        hi = np.concatenate([self.x_ub, self.u_ub, self.p_ub,
                             [max(self.t0_bounds[1], self.tf_bounds[1])]])
        return _sample_box(lo, hi, m, rng)

    def sample_endpoints(self, m=3, seed=20240612):
        rng = np.random.default_rng(seed)
        x_lo = np.maximum(self.x_lb, np.minimum(self.x0_lb, self.xf_lb))
        x_hi = np.minimum(self.x_ub, np.maximum(self.x0_ub, self.xf_ub))
        x_lo = np.where(x_lo > x_hi, self.x_lb, x_lo)
        x_hi = np.where(x_lo > x_hi, self.x_ub, x_hi)
        lo = np.concatenate([x_lo, [self.t0_bounds[0]], x_lo, [self.tf_bounds[0]], self.p_lb])
        hi = np.concatenate([x_hi, [self.t0_bounds[1]], x_hi, [self.tf_bounds[1]], self.p_ub])
        return _sample_box(lo, hi, m, rng)


def _sample_box(lo, hi, m, rng):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = np.empty((m, len(lo)))
    for i in range(len(lo)):
        a, b = lo[i], hi[i]
        if np.isfinite(a) and np.isfinite(b):
            out[:, i] = a + (b - a) * rng.uniform(0.1, 0.9, m) if b > a else a
        elif np.isfinite(a):
            out[:, i] = a + rng.uniform(0.1, 1.0, m)
        elif np.isfinite(b):
            out[:, i] = b - rng.uniform(0.1, 1.0, m)
        else:
            out[:, i] = rng.uniform(-1.0, 1.0, m)
    return out


def _check_order(lo, hi, what):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        bad = int(np.argmax(lo > hi))
        raise InvertedBounds(f"{what}: lower bound {lo[bad]} exceeds upper bound {hi[bad]} (index {bad})")


def _rate_tuple(rates, n, what):
    out = []
    for idx, bounds in sorted(dict(rates).items()):
        idx = int(idx)
        if not 0 <= idx < n:
            raise DimensionMismatch(f"{what} rate bound on index {idx} out of range (0..{n - 1})")
        lo, hi = float(bounds[0]), float(bounds[1])
        if lo > hi:
            raise InvertedBounds(f"{what} rate bound on index {idx}: {lo} > {hi}")
        out.append((idx, lo, hi))
    return tuple(out)


def validate(spec: OcpSpec) -> ValidatedSpec:
    """Check dimensions and bounds of ``spec`` and detect derivative sparsity."""
    nx, nu, npar = int(spec.n_states), int(spec.n_inputs), int(spec.n_params)
    if nx < 1 or nu < 0 or npar < 0:
        raise DimensionMismatch("need n_states >= 1 and non-negative input/parameter counts")
    if spec.lagrange_cost is None and spec.mayer_cost is None:
        raise MissingObjective("Bolza problem needs a Mayer or a Lagrange term")

    x_lb, x_ub = _bounds(spec.x_bounds, nx)
    u_lb, u_ub = _bounds(spec.u_bounds, nu)
    p_lb, p_ub = _bounds(spec.p_bounds, npar)
    x0_lb, x0_ub = _bounds(spec.x0_bounds, nx)
    xf_lb, xf_ub = _bounds(spec.xf_bounds, nx)
    u0_lb, u0_ub = _bounds(spec.u0_bounds, nu)
    for lo, hi, what in [(x_lb, x_ub, "state bounds"), (u_lb, u_ub, "input bounds"),
                         (p_lb, p_ub, "parameter bounds"), (x0_lb, x0_ub, "initial state bounds"),
                         (xf_lb, xf_ub, "final state bounds"), (u0_lb, u0_ub, "initial input bounds")]:
        _check_order(lo, hi, what)
    t0b = _time_bounds(spec.t0)
    tfb = _time_bounds(spec.tf)
    _check_order([t0b[0], tfb[0]], [t0b[1], tfb[1]], "time bounds")
    if tfb[1] <= t0b[0]:
        raise InvertedBounds("final time must be able to exceed initial time")

    state_rate = _rate_tuple(spec.state_rate_bounds, nx, "state")
    input_rate = _rate_tuple(spec.input_rate_bounds, nu, "input")

    if spec.path_constraints is not None:
        if spec.path_bounds is None:
            raise DimensionMismatch("path constraints need path_bounds=(lower, upper)")
        pl = np.atleast_1d(np.asarray(spec.path_bounds[0], dtype=float))
        pu = np.atleast_1d(np.asarray(spec.path_bounds[1], dtype=float))
        if pl.shape != pu.shape:
            raise DimensionMismatch("path lower and upper bounds differ in length")
        _check_order(pl, pu, "path constraint bounds")
    else:
        pl = pu = np.zeros(0)

    jacs, hesss = dict(spec.jacobians), dict(spec.hessians)
    partial = ValidatedSpec(
        name=spec.name, nx=nx, nu=nu, npar=npar, dynamics=None, lagrange=None, mayer=None,
        path=None, path_lb=tuple(pl), path_ub=tuple(pu),
        path_labels=tuple(f"path[{i}]" for i in range(len(pl))), boundary=None,
        x_lb=tuple(x_lb), x_ub=tuple(x_ub), u_lb=tuple(u_lb), u_ub=tuple(u_ub),
        p_lb=tuple(p_lb), p_ub=tuple(p_ub), x0_lb=tuple(x0_lb), x0_ub=tuple(x0_ub),
        xf_lb=tuple(xf_lb), xf_ub=tuple(xf_ub), u0_lb=tuple(u0_lb), u0_ub=tuple(u0_ub),
        t0_bounds=t0b, tf_bounds=tfb, state_rate=state_rate, input_rate=input_rate,
        guess=tuple(sorted((k, tuple(np.atleast_1d(np.asarray(v, dtype=float)).tolist()))
                           for k, v in spec.guess.items())),
        state_names=tuple(spec.state_names) or tuple(f"x{i + 1}" for i in range(nx)),
        input_names=tuple(spec.input_names) or tuple(f"u{i + 1}" for i in range(nu)),
    )
    samples = partial.sample_points()
    esamples = partial.sample_endpoints()

    def point(fn, n_out, key, scalar=False):
        pf = PointFunction(fn=fn, n_out=n_out, nx=nx, nu=nu, npar=npar, jac=jacs.get(key),
                           hess=hesss.get(key), scalar=scalar)
        return pf.with_patterns(samples)

    def endpoint(fn, n_out, key, scalar=False):
        ef = EndpointFunction(fn=fn, n_out=n_out, nx=nx, npar=npar, jac=jacs.get(key),
                              hess=hesss.get(key), scalar=scalar)
        return ef.with_patterns(esamples)

    dynamics = point(spec.dynamics, nx, "dynamics")
    lagrange = point(spec.lagrange_cost, 1, "lagrange", scalar=True) if spec.lagrange_cost else None
    path = point(spec.path_constraints, len(pl), "path") if spec.path_constraints else None
    mayer = endpoint(spec.mayer_cost, 1, "mayer", scalar=True) if spec.mayer_cost else None
    boundary = None
    if spec.boundary is not None:
        if spec.n_boundary < 1:
            raise DimensionMismatch("boundary callback given but n_boundary < 1")
        boundary = endpoint(spec.boundary, int(spec.n_boundary), "boundary")
    return replace(partial, dynamics=dynamics, lagrange=lagrange, path=path, mayer=mayer,
                   boundary=boundary)


# ---------------------------------------------------------------------------
# conventional rate-constraint rewrites
# ---------------------------------------------------------------------------

def augment_add_state(vs: ValidatedSpec) -> ValidatedSpec:
    """Promote every rate-bounded input to a state driven by a new input.

    Input slot ``j`` keeps its position but now holds the rate ``nu_j``,
    bounded by the former rate bounds.  The promoted state is appended after
    the existing states and inherits the input's simple bounds; its initial
    value is bounded only if initial input bounds were declared.
    """
    if not vs.input_rate:
        raise NoInputRateBounds(f"{vs.name}: no input rate bounds to promote")
    nx, nu, npar = vs.nx, vs.nu, vs.npar
    promoted = [(j, nx + r) for r, (j, _, _) in enumerate(vs.input_rate)]
    nx2 = nx + len(promoted)
    nv2 = nx2 + nu + npar + 1
    slot_to_state = dict(promoted)

    # base local vector [x, u, p, t] -> columns of the new local vector
    src = list(range(nx))
    for j in range(nu):
        src.append(slot_to_state[j] if j in slot_to_state else nx2 + j)
    src += [nx2 + nu + k for k in range(npar)] + [nv2 - 1]

    coeffs = np.zeros((len(promoted), nv2))
    for r, (j, _) in enumerate(promoted):
        coeffs[r, nx2 + j] = 1.0
    rate_fn = _linear_point(coeffs, nx2, nu, npar)
    dynamics = _remap_point(vs.dynamics, nx2, nu, src, range(nx), nx2,
                            extra=[(rate_fn, range(nv2), range(nx, nx2))])
    lagrange = (_remap_point(vs.lagrange, nx2, nu, src, [0], 1) if vs.lagrange else None)
    path = (_remap_point(vs.path, nx2, nu, src, range(vs.path.n_out), vs.path.n_out)
            if vs.path else None)
    esrc = list(range(nx)) + [nx2] + list(range(nx2 + 1, nx2 + 1 + nx)) + [2 * nx2 + 1] + \
        list(range(2 * nx2 + 2, 2 * nx2 + 2 + npar))
    mayer = _remap_endpoint(vs.mayer, nx2, esrc) if vs.mayer else None
    boundary = _remap_endpoint(vs.boundary, nx2, esrc) if vs.boundary else None

    x_lb, x_ub = list(vs.x_lb), list(vs.x_ub)
    x0_lb, x0_ub = list(vs.x0_lb), list(vs.x0_ub)
    xf_lb, xf_ub = list(vs.xf_lb), list(vs.xf_ub)
    u_lb, u_ub = list(vs.u_lb), list(vs.u_ub)
    u0_lb, u0_ub = list(vs.u0_lb), list(vs.u0_ub)
    names_x, names_u = list(vs.state_names), list(vs.input_names)
    guess = vs.guess_dict()
    tspan = vs.tf_bounds[0] - vs.t0_bounds[1]
    g_x0 = list(guess.get("x0", np.zeros(nx)))
    g_xf = list(guess.get("xf", guess.get("x0", np.zeros(nx))))
    g_u0 = list(guess.get("u0", np.zeros(nu)))
    g_uf = list(guess.get("uf", guess.get("u0", np.zeros(nu))))
    for (j, lo, hi), (_, k) in zip(vs.input_rate, promoted):
        x_lb.append(vs.u_lb[j])
        x_ub.append(vs.u_ub[j])
        x0_lb.append(vs.u0_lb[j])
        x0_ub.append(vs.u0_ub[j])
        xf_lb.append(-INF)
        xf_ub.append(INF)
        u_lb[j], u_ub[j] = lo, hi
        u0_lb[j], u0_ub[j] = -INF, INF
        names_x.append(vs.input_names[j])
        names_u[j] = f"d{vs.input_names[j]}/dt"
        g_x0.append(g_u0[j])
        g_xf.append(g_uf[j])
        slope = (g_uf[j] - g_u0[j]) / tspan if tspan > 0 else 0.0
        g_u0[j] = g_uf[j] = float(np.clip(slope, lo, hi))
    guess.update(x0=g_x0, xf=g_xf, u0=g_u0, uf=g_uf)

    return replace(
        vs, nx=nx2, dynamics=dynamics, lagrange=lagrange, path=path, mayer=mayer,
        boundary=boundary, x_lb=tuple(x_lb), x_ub=tuple(x_ub), x0_lb=tuple(x0_lb),
        x0_ub=tuple(x0_ub), xf_lb=tuple(xf_lb), xf_ub=tuple(xf_ub), u_lb=tuple(u_lb),
        u_ub=tuple(u_ub), u0_lb=tuple(u0_lb), u0_ub=tuple(u0_ub), input_rate=(),
        promoted=vs.promoted + tuple(promoted),
        guess=tuple(sorted((k, tuple(np.atleast_1d(v).tolist())) for k, v in guess.items())),
        state_names=tuple(names_x), input_names=tuple(names_u),
    )


def augment_add_path(vs: ValidatedSpec) -> ValidatedSpec:
    """Append ``lo <= f_j(x, u, t, p) <= hi`` for every rate-bounded state ``j``."""
    if not vs.state_rate:
        raise NoStateRateBounds(f"{vs.name}: no state rate bounds to convert")
    nv = vs.dynamics.nv
    n_old = vs.path.n_out if vs.path else 0
    n_new = n_old + len(vs.state_rate)
    idx = range(nv)
    terms = []
    if vs.path is not None:
        base, base_map = vs.path, range(n_old)
    else:
        base, base_map = None, None
    # one term per rate-bounded state: select that dynamics row
    for r, (j, _, _) in enumerate(vs.state_rate):
        terms.append((_select_output(vs.dynamics, j), idx, [n_old + r]))
    if base is None:
        first, *rest = terms
        path = _remap_point(first[0], vs.nx, vs.nu, idx, first[2], n_new, extra=rest)
    else:
        path = _remap_point(base, vs.nx, vs.nu, idx, base_map, n_new, extra=terms)
    labels = vs.path_labels + tuple(f"rate[{vs.state_names[j]}]" for j, _, _ in vs.state_rate)
    return replace(
        vs, path=path,
        path_lb=vs.path_lb + tuple(lo for _, lo, _ in vs.state_rate),
        path_ub=vs.path_ub + tuple(hi for _, _, hi in vs.state_rate),
        path_labels=labels, state_rate=(),
    )


def _select_output(pf, j):
    """Point function returning only output ``j`` of ``pf``."""

    def fn(x, u, t, p):
        return pf.value(x, u, t, p)[:, j:j + 1]

    def jac(x, u, t, p):
        return pf.jacobian(x, u, t, p)[:, j:j + 1, :]

    def hess(x, u, t, p, w):
        full = np.zeros((len(t), pf.n_out))
        full[:, j] = np.asarray(w).reshape(len(t))
        return pf.hessian(x, u, t, p, full)

    return PointFunction(fn=fn, n_out=1, nx=pf.nx, nu=pf.nu, npar=pf.npar, jac=jac, hess=hess,
                         jac_pattern=_to_tuple(pf.jac_mask[j:j + 1]),
                         hess_pattern=_to_tuple(pf.hess_mask[j:j + 1]))


def apply_regularization(vs: ValidatedSpec, rho: float, norm: str = "L2sq") -> ValidatedSpec:
    """Add ``rho * ||nu||`` over the add-state rate inputs to the running cost.

    ``norm`` is ``"L2sq"`` (``rho * sum nu_j^2``) or ``"L1"``.  The L1 form is
    written exactly with one auxiliary input ``a_j >= |nu_j|`` per rate input
    and two linear path rows, so the problem stays smooth.
    """
    if not vs.promoted:
        raise NotAddStateForm(f"{vs.name}: regularisation needs the add-state form")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    norm = {"l2sq": "L2sq", "l2": "L2sq", "l1": "L1"}.get(str(norm).lower())
    if norm is None:
        raise ValueError("norm must be 'L1' or 'L2sq'")
    nx, nu, npar = vs.nx, vs.nu, vs.npar
    slots = [j for j, _ in vs.promoted]
    if norm == "L2sq":
        nv = nx + nu + npar + 1
        penalty = _quadratic_point([nx + j for j in slots], float(rho), nx, nu, npar)
        if vs.lagrange is not None:
            lagrange = _remap_point(vs.lagrange, nx, nu, range(nv), [0], 1,
                                    extra=[(penalty, range(nv), [0])])
        else:
            lagrange = penalty
        return replace(vs, lagrange=lagrange, regularization=(float(rho), norm, ()))

    # L1: new inputs a_j appended after the existing inputs
    na = len(slots)
    nu2 = nu + na
    nv2 = nx + nu2 + npar + 1
    src = list(range(nx + nu)) + [nx + nu2 + k for k in range(npar)] + [nv2 - 1]
    aux = list(range(nu, nu2))
    cost = np.zeros((1, nv2))
    cost[0, [nx + a for a in aux]] = rho
    cost_fn = _linear_point(cost, nx, nu2, npar)
    lagrange = (_remap_point(vs.lagrange, nx, nu2, src, [0], 1, extra=[(cost_fn, range(nv2), [0])])
                if vs.lagrange else _remap_point(cost_fn, nx, nu2, range(nv2), [0], 1))
    lagrange = replace(lagrange, scalar=True)
    rows = np.zeros((2 * na, nv2))
    for r, (j, a) in enumerate(zip(slots, aux)):
        rows[2 * r, nx + j] = 1.0
        rows[2 * r, nx + a] = -1.0
        rows[2 * r + 1, nx + j] = -1.0
        rows[2 * r + 1, nx + a] = -1.0
    abs_rows = _linear_point(rows, nx, nu2, npar)
    n_old = vs.path.n_out if vs.path else 0
    rate_map = range(n_old, n_old + 2 * na)
    if vs.path is not None:
        path = _remap_point(vs.path, nx, nu2, src, range(n_old), n_old + 2 * na,
                            extra=[(abs_rows, range(nv2), rate_map)])
    else:
        path = _remap_point(abs_rows, nx, nu2, range(nv2), rate_map, 2 * na)
    remap = lambda f: _remap_point(f, nx, nu2, src, range(f.n_out), f.n_out)  # noqa: E731
    guess = vs.guess_dict()
    g_u0 = list(guess.get("u0", np.zeros(nu))) + [1.0] * na
    g_uf = list(guess.get("uf", guess.get("u0", np.zeros(nu)))) + [1.0] * na
    guess.update(u0=g_u0, uf=g_uf)
    return replace(
        vs, nu=nu2, dynamics=remap(vs.dynamics), lagrange=lagrange, path=path,
        path_lb=vs.path_lb + (-INF,) * (2 * na), path_ub=vs.path_ub + (0.0,) * (2 * na),
        path_labels=vs.path_labels + tuple(f"l1[{j}]{s}" for j in slots for s in "+-"),
        u_lb=vs.u_lb + (0.0,) * na, u_ub=vs.u_ub + (INF,) * na,
        u0_lb=vs.u0_lb + (-INF,) * na, u0_ub=vs.u0_ub + (INF,) * na,
        regularization=(float(rho), norm, tuple(aux)),
        guess=tuple(sorted((k, tuple(np.atleast_1d(v).tolist())) for k, v in guess.items())),
        input_names=vs.input_names + tuple(f"|{vs.input_names[j]}|" for j in slots),
    )
