"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx``.  The Gaussian
generator is written with IEEE basic operations only (no libm ``log``) so that
both backends emit bit-identical draws.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)

LN2_HI = 6.93147180369123816490e-01
LN2_LO = 1.90821492927058770002e-10
SQRT_HALF = 0.70710678118654752440

# AS241 (PPND16) coefficients, highest order last
_A = (3.3871328727963666080e0, 1.3314166789178437745e+2, 1.9715909503065514427e+3,
      1.3731693765509461125e+4, 4.5921953931549871457e+4, 6.7265770927008700853e+4,
      3.3430575583588128105e+4, 2.5090809287301226727e+3)
_B = (1.0, 4.2313330701600911252e+1, 6.8718700749205790830e+2, 5.3941960214247511077e+3,
      2.1213794301586595867e+4, 3.9307895800092710610e+4, 2.8729085735721942674e+4,
      5.2264952788528545610e+3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)

LOG_TERMS = 13


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def _horner(coef, r):
    acc = np.full_like(r, coef[-1])
    for c in coef[-2::-1]:
        acc = acc * r + c
    return acc


def portable_log(x):
    """Natural log from frexp and an atanh series; reproducible across backends."""
    x = np.asarray(x, dtype=np.float64)
    mant, expo = np.frexp(x)
    low = mant < SQRT_HALF
    mant = np.where(low, mant * 2.0, mant)
    e = expo.astype(np.float64) - np.where(low, 1.0, 0.0)
    s = (mant - 1.0) / (mant + 1.0)
    s2 = s * s
    poly = np.full_like(s, 1.0 / (2 * (LOG_TERMS - 1) + 1))
    for k in range(LOG_TERMS - 2, -1, -1):
        poly = poly * s2 + 1.0 / (2 * k + 1)
    return e * LN2_HI + (2.0 * s * poly + e * LN2_LO)


def normal_quantile(p):
    p = np.asarray(p, dtype=np.float64)
    q = p - 0.5
    central = np.abs(q) <= 0.425
    r = 0.180625 - q * q
    val_c = q * _horner(_A, r) / _horner(_B, r)
    tail_p = np.where(q < 0.0, p, 1.0 - p)
    tail_p = np.where(central, 0.5, tail_p)
    rt = np.sqrt(-portable_log(tail_p))
    near = rt <= 5.0
    r1 = rt - 1.6
    r2 = rt - 5.0
    val_t = np.where(near, _horner(_C, r1) / _horner(_D, r1), _horner(_E, r2) / _horner(_F, r2))
    val_t = np.where(q < 0.0, -val_t, val_t)
    return np.where(central, val_c, val_t)


def counter_normals(seed, path_start, n_paths, n_counters, out=None):
    """Standard normals indexed by (seed, path, counter); shape (n_paths, n_counters)."""
    with np.errstate(over="ignore"):
        paths = np.arange(path_start, path_start + n_paths, dtype=np.uint64)
        key = _mix64(np.uint64(seed) * GOLDEN + paths + np.uint64(1))
        ctr = (np.arange(n_counters, dtype=np.uint64) + np.uint64(1)) * GOLDEN
        bits = _mix64(key[:, None] + ctr[None, :])
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    z = normal_quantile(u)
    if out is not None:
        out[...] = z
        return out
    return z


def _matvec(M, x):
    """M x summed left to right over the inner index, as the compiled loop does.

    BLAS-backed products reorder the sum and break bit-identity between backends.
    """
    acc = np.zeros(x.shape)
    for b in range(x.shape[1]):
        acc = acc + M[..., :, b] * x[:, None, b]
    return acc


def linear_step(S, x, J, K, u, v, dw, dt, out):
    """One exponential-Euler step for all paths.

    out = S (x + dt (J x + u) + sum_i dw_i (K_i x + v_i)).  J is (P, m, m)
    (possibly broadcast), K is (P, d, m, m), u is (P, m), v is (P, d, m);
    any of them may be None.
    """
    y = x.copy()
    if J is not None or u is not None:
        drift = np.zeros_like(x)
        if J is not None:
            drift = _matvec(J, x)
        if u is not None:
            drift = drift + u
        y += dt * drift
    if K is not None or v is not None:
        for i in range(dw.shape[1]):
            diff = np.zeros_like(x)
            if K is not None:
                diff = _matvec(K[:, i], x)
            if v is not None:
                diff = diff + v[:, i]
            y += dw[:, i, None] * diff
    out[...] = _matvec(S, y)
    return out
