import numpy as np


def ulp_distance(x, y):
    """Per-component distance in units in the last place between float64 arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def ordered(z):
        i = z.view(np.int64)
        return np.where(i < 0, np.int64(-(2**63)) - i, i)

    return np.abs(ordered(x) - ordered(y))


def central_difference_gradient(fn, a, step):
    a = np.asarray(a, dtype=float)
    g = np.empty_like(a)
    for i in range(a.size):
        e = np.zeros_like(a)
        e[i] = step
        g[i] = (fn(a + e) - fn(a - e)) / (2 * step)
    return g
