"""Independent reference computations used only by the tests.

``ChainOracle`` solves the belief MDP exactly (no interpolation) on the
countable set of beliefs reachable once both channels have been observed:
one coordinate equals lambda_k, the other equals T^n(lambda_j).  The chain
is truncated at n = K, where T^K(lambda_j) sits within machine precision of
the fixed point of T, so n > K is identified with n = K.
"""

from __future__ import annotations

import math

import numpy as np


def balanced_affine(params):
    """Value of always-Balanced: c0 + c1 (p1 + p2)."""
    l0, rl, beta, a = params.lambda0, params.r_low, params.beta, params.alpha
    c1 = rl / (1.0 - beta * a)
    c0 = 2.0 * beta * l0 * rl / ((1.0 - beta) * (1.0 - beta * a))
    return c0, c1


class ChainOracle:
    def __init__(self, params, k_max: int | None = None, tol: float = 1e-13):
        self.pr = params
        l0, l1, a = params.lambda0, params.lambda1, params.alpha
        if k_max is None:
            k_max = 10 if a <= 0 else max(10, int(math.ceil(math.log(1e-17) / math.log(a))) + 2)
        self.K = k_max
        # x[j, n] = T^n(lambda_j)
        x = np.empty((2, k_max + 1))
        x[:, 0] = (l0, l1)
        for n in range(1, k_max + 1):
            x[:, n] = a * x[:, n - 1] + l0
        self.x = x
        self.lam = (l0, l1)
        # state (k, j, n): observed coordinate lambda_k, other coordinate x[j, n].
        # By symmetry the same table serves both orientations.
        self.v = self._solve(tol)

    def _q(self, v):
        """Action values (3, 2, 2, K+1) at belief (lambda_k, x[j, n])."""
        pr, K = self.pr, self.K
        l0, l1 = self.lam
        rl, rh, beta = pr.r_low, pr.r_high, pr.beta
        k = np.arange(2)[:, None, None]
        p1 = np.where(k == 1, l1, l0) * np.ones((2, 2, K + 1))
        p2 = np.broadcast_to(self.x[None, :, :], (2, 2, K + 1))
        corner = v[:, :, 0]  # V(lambda_k1, lambda_k2)
        vb = (p1 + p2) * rl + beta * ((1 - p1) * (1 - p2) * corner[0, 0] + p1 * (1 - p2) * corner[1, 0]
                                      + (1 - p1) * p2 * corner[0, 1] + p1 * p2 * corner[1, 1])
        nxt = np.minimum(np.arange(K + 1) + 1, K)
        # Bet1 observes channel 1 (the lambda_k one); channel 2 moves x[j, n] -> x[j, n+1]
        v1 = p1 * rh + beta * ((1 - p1) * v[0][:, nxt][None] + p1 * v[1][:, nxt][None])
        # Bet2 observes channel 2; channel 1 moves lambda_k -> x[k, 1]
        # successor (T(lambda_k), lambda_g) mirrors to state (g, k, 1)
        v2 = p2 * rh + beta * ((1 - p2) * v[0, :, 1][:, None, None] + p2 * v[1, :, 1][:, None, None])
        return np.stack([vb, v1, v2])

    def _solve(self, tol):
        v = np.zeros((2, 2, self.K + 1))
        beta = self.pr.beta
        stop = tol * (1 - beta) / (2 * beta) if beta > 0 else math.inf
        for _ in range(100_000):
            vn = self._q(v).max(axis=0)
            d = np.abs(vn - v).max()
            v = vn
            if d <= stop:
                return v
        raise RuntimeError("oracle did not converge")

    def q(self):
        return self._q(self.v)

    def corner_values(self):
        """(3, 2, 2) action values at the four corners."""
        return self.q()[:, :, :, 0]

    def value(self, k: int, j: int, n: int) -> float:
        """V(lambda_k, T^n(lambda_j)); mirror for the other orientation."""
        return float(self.v[k, j, min(n, self.K)])

    def rho1(self) -> float:
        """Exact Balanced/Bet1 switch point on the side p2 = lambda0.

        Both action values are affine in p1 there, with coefficients given
        by corner values and by V at (lambda_k, T(lambda0)).
        """
        pr = self.pr
        l0 = pr.lambda0
        c = self.v[:, :, 0]
        rl, rh, beta = pr.r_low, pr.r_high, pr.beta
        # V_B(p, l0) = (p + l0) rl + beta[(1-p)((1-l0)c00 + l0 c01) + p((1-l0)c10 + l0 c11)]
        a0 = (1 - l0) * c[0, 0] + l0 * c[0, 1]
        a1 = (1 - l0) * c[1, 0] + l0 * c[1, 1]
        vb_0, vb_1 = l0 * rl + beta * a0, rl + beta * (a1 - a0)
        # V_B1(p, l0) = p rh + beta[(1-p) V(l0, T l0) + p V(l1, T l0)]
        w0, w1 = self.value(0, 0, 1), self.value(1, 0, 1)
        v1_0, v1_1 = beta * w0, rh + beta * (w1 - w0)
        # difference vb - v1 = (vb_0 - v1_0) + p (vb_1 - v1_1)
        return (vb_0 - v1_0) / (v1_1 - vb_1)
