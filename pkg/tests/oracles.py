"""Brute-force reference computations used by the tests.

Nothing here calls the package's difference operator, TV code or solvers;
the projector is only used column by column to assemble a dense matrix.
"""

import numpy as np


def ray_box_length(origin, direction, lo, hi):
    """Length of the segment of the line ``origin + t*direction`` inside the box ``[lo, hi]`` (slab method)."""
    t0, t1 = -np.inf, np.inf
    for a in range(3):
        if direction[a] == 0:
            if not lo[a] <= origin[a] <= hi[a]:
                return 0.0
            continue
        ta = (lo[a] - origin[a]) / direction[a]
        tb = (hi[a] - origin[a]) / direction[a]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    return max(0.0, t1 - t0) * float(np.linalg.norm(direction))


def dense_matrix(linear_map, n_in):
    cols = []
    for i in range(n_in):
        e = np.zeros(n_in)
        e[i] = 1.0
        cols.append(np.asarray(linear_map(e), dtype=np.float64).reshape(-1))
    return np.stack(cols, axis=1)


def difference_matrix(dims):
    """3N x N forward-difference matrix; rows ``c*N + j`` hold component ``c`` at voxel ``j``."""
    nx, ny, nz = dims
    N = nx * ny * nz
    D = np.zeros((3 * N, N))
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                j = ix + nx * (iy + ny * iz)
                if ix + 1 < nx:
                    D[j, j + 1] += 1.0
                    D[j, j] -= 1.0
                if iy + 1 < ny:
                    D[N + j, j + nx] += 1.0
                    D[N + j, j] -= 1.0
                if iz + 1 < nz:
                    D[2 * N + j, j + nx * ny] += 1.0
                    D[2 * N + j, j] -= 1.0
    return D


def _components(Dmat, x):
    N = x.size
    z = Dmat @ x
    return np.stack([z[:N], z[N:2 * N], z[2 * N:]], axis=1)


def dense_tv(Dmat, x, tau):
    t = np.linalg.norm(_components(Dmat, x), axis=1)
    if tau == 0:
        return float(t.sum())
    return float(np.sum(np.where(t >= tau, t - tau / 2, t * t / (2 * tau))))


class DenseTV:
    """Dense reference for ``1/2||Mx - b||^2 + alpha * TV_tau(x)`` with exact gradient and Hessian."""

    def __init__(self, M, b, Dmat, alpha, tau):
        self.M, self.b, self.D, self.alpha, self.tau = M, b, Dmat, alpha, tau
        self.N = M.shape[1]

    def value(self, x):
        r = self.M @ x - self.b
        return 0.5 * float(r @ r) + self.alpha * dense_tv(self.D, x, self.tau)

    def gradient(self, x):
        N, tau = self.N, self.tau
        z = _components(self.D, x)
        t = np.linalg.norm(z, axis=1)
        w = z / np.maximum(t, tau)[:, None]
        return self.M.T @ (self.M @ x - self.b) + self.alpha * (self.D.T @ np.concatenate([w[:, 0], w[:, 1], w[:, 2]]))

    def hessian(self, x):
        N, tau = self.N, self.tau
        z = _components(self.D, x)
        t = np.linalg.norm(z, axis=1)
        H = self.M.T @ self.M
        for j in range(N):
            Dj = self.D[[j, N + j, 2 * N + j]]
            if t[j] < tau:
                Hj = np.eye(3) / tau
            else:
                u = z[j] / t[j]
                Hj = (np.eye(3) - np.outer(u, u)) / t[j]
            H = H + self.alpha * Dj.T @ Hj @ Dj
        return H


def newton_minimize(f, x0, tol=1e-13, max_iter=200):
    """Damped Newton iteration for a smooth strictly convex function (unconstrained)."""
    x = x0.copy()
    for _ in range(max_iter):
        g = f.gradient(x)
        if np.linalg.norm(g) <= tol:
            break
        step = np.linalg.solve(f.hessian(x), g)
        fx, t = f.value(x), 1.0
        while f.value(x - t * step) > fx - 1e-4 * t * (g @ step) and t > 1e-12:
            t *= 0.5
        x_new = x - t * step
        if np.array_equal(x_new, x):
            break
        x = x_new
    return x


def central_difference_gradient(fun, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def fit_log_slope(values, start, stop):
    """Least-squares slope of ``log(values[k])`` against ``k`` over ``start <= k < stop``."""
    k = np.arange(start, stop)
    return float(np.polyfit(k, np.log(np.asarray(values)[start:stop]), 1)[0])
