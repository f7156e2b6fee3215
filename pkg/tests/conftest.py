"""Shared test helpers: finite-difference oracles and random rigid motions."""

from __future__ import annotations

import numpy as np

import _verdicts
from sphattn import geometry


def central_diff(f, x, step=1e-5):
    """Central finite differences of a scalar function, one entry at a time."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = g.ravel()
    for i in range(x.size):
        xp = x.copy().ravel()
        xm = x.copy().ravel()
        xp[i] += step
        xm[i] -= step
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * step)
    return g


def relative_close(a, b, rtol, floor=1e-12):
    """Fraction of entries where a and b agree to rtol (denominator floored)."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.mean(np.abs(a - b) / denom < rtol)


def random_rotation(rng) -> np.ndarray:
    """Haar-ish random rotation via random Euler angles."""
    phi, psi = rng.uniform(0, 2 * np.pi, size=2)
    theta = np.arccos(rng.uniform(-1, 1))
    return geometry.rotation_from_euler(phi, theta, psi)


def random_rigid(rng, tmax=5.0) -> geometry.RigidMotion:
    return geometry.RigidMotion(random_rotation(rng), rng.uniform(-tmax, tmax, size=3))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # acceptance verdicts collected in _verdicts survive any capture mode here
    if not _verdicts.LINES:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria", sep="-")
    for line in _verdicts.LINES:
        terminalreporter.line(line)
