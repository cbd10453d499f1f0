import numpy as np


def dirichlet_mix(rng, n, size, alphas=(0.05, 1.0)):
    """Simplex samples alternating between concentrations (near-vertex and uniform)."""
    per = -(-size // len(alphas))
    out = np.concatenate([rng.dirichlet(np.full(n, a), size=per) for a in alphas])
    return out[:size]


def exact_floor_profile(N0, g, n):
    """floor(N0 * g ** (-k / (n - 1))) for k = 0..n-1, decided in integer arithmetic.

    m is the answer iff m**(n-1) * g**k <= N0**(n-1) < (m+1)**(n-1) * g**k.
    """
    e = n - 1
    lhs = N0 ** e
    out = []
    for k in range(n):
        gk = g ** k
        m = int(N0 * g ** (-k / e)) + 1
        while m > 0 and m ** e * gk > lhs:
            m -= 1
        while (m + 1) ** e * gk <= lhs:
            m += 1
        out.append(m)
    return out


def gamma_sweep_oracle(D_x, N0, n, limit=1000):
    """Exhaustive sweep over gamma = 1..limit. Floats screen candidates, integers decide."""
    g = np.arange(1, limit + 1, dtype=np.float64)[:, None]
    k = np.arange(n)[None, :]
    approx = N0 * g ** (-k / (n - 1))
    # float floors are only trusted when no value sits within 1e-6 of an integer
    near = np.abs(approx - np.round(approx)).min(axis=1) < 1e-6
    for gi in range(limit):
        if near[gi]:
            counts = exact_floor_profile(N0, gi + 1, n)
        else:
            counts = [int(v) for v in np.floor(approx[gi])]
        if sum(counts) < D_x:
            return gi + 1, counts
    return None
