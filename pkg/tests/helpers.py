import numpy as np

from measurepmp.forward import ControlSignal, TimeGrid


def const(value, M):
    return ControlSignal.constant(value, M)


def grid(M, T=1.0):
    return TimeGrid(T, M)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
