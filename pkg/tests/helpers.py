"""Finite-difference oracles shared by the test modules."""
import numpy as np


def random_point(problem, rng, scale=0.3):
    z = problem.initial_guess()
    z = z + scale * rng.standard_normal(problem.n)
    lo, hi = problem.x_lower, problem.x_upper
    span = np.where(np.isfinite(hi - lo), hi - lo, 2.0)
    inner_lo = np.where(np.isfinite(lo), lo + 0.05 * span, -np.inf)
    inner_hi = np.where(np.isfinite(hi), hi - 0.05 * span, np.inf)
    return np.clip(z, inner_lo, inner_hi)


def fd_jacobian(fun, z, h=1e-6):
    cols = []
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = h * (1.0 + abs(z[i]))
        cols.append((fun(z + e) - fun(z - e)) / (2 * e[i]))
    return np.column_stack(cols)


def full_hessian(upper):
    upper = upper.toarray()
    return upper + upper.T - np.diag(np.diag(upper))


def lagrangian_gradient(problem, z, y, sigma=1.0):
    ev = problem.evaluate(z)
    return sigma * ev.gradient + ev.jacobian.T @ y


def rel_err(a, b):
    """Largest elementwise error relative to ``max(1, |b|)``."""
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if a.size else 0.0
