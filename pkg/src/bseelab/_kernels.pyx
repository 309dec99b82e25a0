# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; mirrors ``_fallback`` function by function."""

from libc.math cimport frexp, sqrt, fabs
from libc.stdint cimport uint64_t

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL

cdef double LN2_HI = 6.93147180369123816490e-01
cdef double LN2_LO = 1.90821492927058770002e-10
cdef double SQRT_HALF = 0.70710678118654752440
cdef int LOG_TERMS = 13

cdef double[8] A_ = [3.3871328727963666080e0, 1.3314166789178437745e+2, 1.9715909503065514427e+3,
                     1.3731693765509461125e+4, 4.5921953931549871457e+4, 6.7265770927008700853e+4,
                     3.3430575583588128105e+4, 2.5090809287301226727e+3]
cdef double[8] B_ = [1.0, 4.2313330701600911252e+1, 6.8718700749205790830e+2, 5.3941960214247511077e+3,
                     2.1213794301586595867e+4, 3.9307895800092710610e+4, 2.8729085735721942674e+4,
                     5.2264952788528545610e+3]
cdef double[8] C_ = [1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
                     3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
                     2.27238449892691845833e-2, 7.74545014278341407640e-4]
cdef double[8] D_ = [1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
                     1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
                     1.05075007164441684324e-9]
cdef double[8] E_ = [6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
                     2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
                     2.71155556874348757815e-5, 2.01033439929228813265e-7]
cdef double[8] F_ = [1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
                     7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
                     2.04426310338993978564e-15]


cdef inline uint64_t mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


cdef inline double horner(double* coef, double r) noexcept nogil:
    cdef double acc = coef[7]
    cdef int k
    for k in range(6, -1, -1):
        acc = acc * r + coef[k]
    return acc


cdef inline double portable_log(double x) noexcept nogil:
    cdef int expo
    cdef double mant = frexp(x, &expo)
    cdef double e = <double>expo
    if mant < SQRT_HALF:
        mant = mant * 2.0
        e = e - 1.0
    else:
        e = e - 0.0
    cdef double s = (mant - 1.0) / (mant + 1.0)
    cdef double s2 = s * s
    cdef double poly = 1.0 / (2 * (LOG_TERMS - 1) + 1)
    cdef int k
    for k in range(LOG_TERMS - 2, -1, -1):
        poly = poly * s2 + 1.0 / (2 * k + 1)
    return e * LN2_HI + ((2.0 * s) * poly + e * LN2_LO)


cdef inline double normal_quantile(double p) noexcept nogil:
    cdef double q = p - 0.5
    cdef double r, val
    if fabs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * horner(A_, r) / horner(B_, r)
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    r = sqrt(-portable_log(r))
    if r <= 5.0:
        r = r - 1.6
        val = horner(C_, r) / horner(D_, r)
    else:
        r = r - 5.0
        val = horner(E_, r) / horner(F_, r)
    if q < 0.0:
        val = -val
    return val


def py_portable_log(double x):
    return portable_log(x)


def counter_normals(uint64_t seed, Py_ssize_t path_start, Py_ssize_t n_paths,
                    Py_ssize_t n_counters, double[:, ::1] out):
    cdef Py_ssize_t i, c
    cdef uint64_t key, bits
    with nogil:
        for i in range(n_paths):
            key = mix64(seed * GOLDEN + <uint64_t>(path_start + i) + 1)
            for c in range(n_counters):
                bits = mix64(key + (<uint64_t>c + 1) * GOLDEN)
                out[i, c] = normal_quantile(
                    ((<double>(bits >> 11)) + 0.5) * (1.0 / 9007199254740992.0))
    return out


def linear_step(const double[:, ::1] S, const double[:, :] x,
                const double[:, :, :] J, const double[:, :, :, :] K,
                const double[:, :] u, const double[:, :, :] v,
                const double[:, :] dw, double dt, double[:, ::1] out):
    cdef Py_ssize_t P = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    cdef Py_ssize_t d = dw.shape[1]
    cdef bint has_J = J is not None
    cdef bint has_K = K is not None
    cdef bint has_u = u is not None
    cdef bint has_v = v is not None
    cdef Py_ssize_t p, a, b, i
    cdef double acc, diff
    cdef double[64] y
    if m > 64:
        raise ValueError("compiled linear_step supports m <= 64")
    with nogil:
        for p in range(P):
            for a in range(m):
                y[a] = x[p, a]
            if has_J or has_u:
                for a in range(m):
                    acc = 0.0
                    if has_J:
                        for b in range(m):
                            acc = acc + J[p, a, b] * x[p, b]
                    if has_u:
                        acc = acc + u[p, a]
                    y[a] = y[a] + dt * acc
            if has_K or has_v:
                for i in range(d):
                    for a in range(m):
                        diff = 0.0
                        if has_K:
                            for b in range(m):
                                diff = diff + K[p, i, a, b] * x[p, b]
                        if has_v:
                            diff = diff + v[p, i, a]
                        y[a] = y[a] + dw[p, i] * diff
            for a in range(m):
                acc = 0.0
                for b in range(m):
                    acc = acc + S[a, b] * y[b]
                out[p, a] = acc
    return out
