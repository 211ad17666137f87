"""Compiled inner loops for online linear-basis solvers on very long paths.

They see precomputed features, offsets and rewards for one chunk of a path and
carry (theta, u) or the CLSTD accumulators across chunks. Step sizes follow the
pseudo-episode schedule alpha0 * k^-p with k the 1-based block index. Chunks
must start on a block boundary; out row b holds the b-th block end inside the
chunk.
"""
import numpy as np
from numba import njit

CTD0, GTD2, TDC, GTD0 = 0, 1, 2, 3


@njit(cache=True)
def linear_online_chunk(alg, theta, u, phi, off, rew, dt, rho, a0, p, au0, pu, block_steps, step0, out, bound):
    """Advance theta (and u) over one chunk; write theta at every block end into out.

    Returns the global step index at which divergence was detected, or -1.
    """
    n = rew.shape[0]
    L = theta.shape[0]
    gdm = np.empty(L)
    for i in range(n):
        s = step0 + i
        k = s // block_steps + 1
        a = a0 * k ** (-p)
        au = au0 * k ** (-pu)
        j0 = off[i]
        j1 = off[i + 1]
        for l in range(L):
            j0 += theta[l] * phi[i, l]
            j1 += theta[l] * phi[i + 1, l]
        dm = j1 - j0 + rew[i] * dt
        if rho != 0.0:
            dm -= rho * j0 * dt
        if alg == CTD0:
            for l in range(L):
                theta[l] += a * phi[i, l] * dm
        else:
            xu = 0.0
            for l in range(L):
                xu += phi[i, l] * u[l]
            for l in range(L):
                g = phi[i + 1, l] - phi[i, l]
                if rho != 0.0:
                    g -= rho * phi[i, l] * dt
                gdm[l] = g
            if alg == TDC:
                f = 1.0 + rho * dt if rho != 0.0 else 1.0
                for l in range(L):
                    theta[l] -= a * (phi[i + 1, l] * xu * dt - f * phi[i, l] * dm)
            else:
                for l in range(L):
                    theta[l] -= a * gdm[l] * xu
            if alg == GTD0:
                for l in range(L):
                    u[l] += au * (phi[i, l] * dm - u[l] * dt)
            else:
                for l in range(L):
                    u[l] += au * (phi[i, l] * dm - phi[i, l] * xu * dt)
        if (s + 1) % block_steps == 0:
            b = (i + 1) // block_steps - 1
            for l in range(L):
                out[b, l] = theta[l]
            for l in range(L):
                if not np.isfinite(theta[l]) or abs(theta[l]) > bound:
                    return s
    return -1


@njit(cache=True)
def clstd_chunk(Bmat, c, phi, off, rew, dt, rho, block_steps, out):
    """Accumulate sum phi (dphi - rho phi dt)^T and sum phi (r dt + doff - rho off dt); solve at block ends."""
    n = rew.shape[0]
    L = c.shape[0]
    for i in range(n):
        for l in range(L):
            pl = phi[i, l]
            for m in range(L):
                d = phi[i + 1, m] - phi[i, m]
                if rho != 0.0:
                    d -= rho * phi[i, m] * dt
                Bmat[l, m] += pl * d
            e = rew[i] * dt + off[i + 1] - off[i]
            if rho != 0.0:
                e -= rho * off[i] * dt
            c[l] += pl * e
        if (i + 1) % block_steps == 0:
            b = (i + 1) // block_steps - 1
            if abs(np.linalg.det(Bmat)) > 1e-300:
                sol = np.linalg.solve(Bmat, c)
                for l in range(L):
                    out[b, l] = -sol[l]
            else:
                for l in range(L):
                    out[b, l] = np.nan


RG = 4
XI_GRAD, XI_TRACE = 0, 1


@njit(cache=True)
def linear_episode(alg, xi_mode, decay, theta, u, phi, off, rew, dt, rho, a, au):
    """One online episode for every repetition r (rows of theta, phi, off, rew).

    xi_mode XI_GRAD uses xi = phi; XI_TRACE carries trace = decay * trace + dt * phi
    (CTD only). alg RG is the one-step residual gradient.
    """
    R, L = theta.shape
    n = rew.shape[1]
    xi = np.empty(L)
    tr = np.empty(L)
    for r in range(R):
        for l in range(L):
            tr[l] = 0.0
        for i in range(n):
            j0 = off[r, i]
            j1 = off[r, i + 1]
            for l in range(L):
                j0 += theta[r, l] * phi[r, i, l]
                j1 += theta[r, l] * phi[r, i + 1, l]
            dm = j1 - j0 + rew[r, i] * dt
            if rho != 0.0:
                dm -= rho * j0 * dt
            if xi_mode == XI_TRACE:
                for l in range(L):
                    tr[l] = decay * tr[l] + dt * phi[r, i, l]
                    xi[l] = tr[l]
            else:
                for l in range(L):
                    xi[l] = phi[r, i, l]
            if alg == CTD0:
                for l in range(L):
                    theta[r, l] += a * xi[l] * dm
            elif alg == RG:
                for l in range(L):
                    g = phi[r, i + 1, l] - phi[r, i, l]
                    if rho != 0.0:
                        g -= rho * phi[r, i, l] * dt
                    theta[r, l] -= a * (dm / dt) * g
            else:
                xu = 0.0
                for l in range(L):
                    xu += xi[l] * u[r, l]
                for l in range(L):
                    if alg == TDC:
                        f = 1.0 + rho * dt if rho != 0.0 else 1.0
                        theta[r, l] -= a * (phi[r, i + 1, l] * xu * dt - f * xi[l] * dm)
                    else:
                        g = phi[r, i + 1, l] - phi[r, i, l]
                        if rho != 0.0:
                            g -= rho * phi[r, i, l] * dt
                        theta[r, l] -= a * g * xu
                for l in range(L):
                    if alg == GTD0:
                        u[r, l] += au * (xi[l] * dm - u[r, l] * dt)
                    else:
                        u[r, l] += au * (xi[l] * dm - xi[l] * xu * dt)
