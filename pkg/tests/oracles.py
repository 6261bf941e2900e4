"""Independent reference computations shared by unit and acceptance tests."""
import numpy as np
from numba import njit

from battwin import sim
from battwin.params import F
from battwin.sim import diffusion_step, initial_state


@njit(cache=True)
def explicit_fd(c0, flux, D, R, dt, t_end):
    """Node-based explicit finite differences with a ghost node at the surface."""
    n = c0.size - 1
    dr = R / n
    c = c0.copy()
    new = np.empty_like(c)
    for _ in range(int(round(t_end / dt))):
        new[0] = c[0] + dt * 6.0 * D * (c[1] - c[0]) / dr**2
        for i in range(1, n):
            r = i * dr
            lap = (c[i + 1] - 2 * c[i] + c[i - 1]) / dr**2 + (c[i + 1] - c[i - 1]) / (r * dr)
            new[i] = c[i] + dt * D * lap
        ghost = c[n - 1] - 2.0 * dr * flux / D
        lap = (ghost - 2 * c[n] + c[n - 1]) / dr**2 + (ghost - c[n - 1]) / (R * dr)
        new[n] = c[n] + dt * D * lap
        c, new = new, c
    return c[n]


def fv_surface_after(params, electrode, current, t_end):
    """Surface concentration from the 20-shell solver (dt=1 s) and from the explicit oracle."""
    tag = electrode[0]
    st0 = initial_state(params, soc=1.0 if tag == "n" else 0.0)
    p = st0.neg if tag == "n" else st0.pos
    c0 = p.c[0]
    R = getattr(params, f"R_part_{tag}")
    D = getattr(params, f"D_{tag}")
    S = 3 * getattr(params, f"eps_{tag}") * getattr(params, f"L_{tag}") * params.A_cell / R
    flux = current / (S * F) if tag == "n" else -current / (S * F)
    for _ in range(int(round(t_end))):
        p = diffusion_step(p, flux, D, 1.0, R)
    fv = sim.K.surface_concentration(p.c, flux, D, R)
    return fv, explicit_fd(np.full(201, c0), flux, D, R, 1e-3, t_end)


def central_difference_errors(loss, entries, h=1e-5):
    """Relative error between analytic and central-difference derivatives.

    ``entries`` holds (array, index, analytic) triples; ``array[index]`` is
    perturbed in place and restored.
    """
    errs = []
    for arr, idx, analytic in entries:
        old = arr[idx]
        arr[idx] = old + h
        lp = loss()
        arr[idx] = old - h
        lm = loss()
        arr[idx] = old
        fd = (lp - lm) / (2 * h)
        errs.append(abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8))
    return errs
