"""Pure-Python Bulirsch-Stoer kernel.

Mirrors ``_bs_core.pyx`` operation for operation, using ``numpy.longdouble``
scalars where the compiled kernel uses ``long double``, so that both
backends produce bit-identical trajectories. Keep the two files in sync.

States cross the API as lists of 12 Python floats in canonical order.
"""

import numpy as np

OK = 0
UNDERFLOW = 1
BUDGET = 2
SINGULAR = 3

FAC_MIN = 0.02
FAC_MAX = 4.0

L = np.longdouble
_sqrt = np.sqrt
_ZERO = L(0.0)
_ONE = L(1.0)
_HALF = L(0.5)
_TWO = L(2.0)
_PAIRS = ((0, 1), (0, 2), (1, 2))


class _Singular(Exception):
    pass


class Params:
    """Flat integrator parameters shared by both kernels."""

    __slots__ = ("m0", "m1", "m2", "G", "floor", "tol", "min_step", "kmax", "max_steps", "safety")

    def __init__(self, masses, G, floor, tol, min_step, kmax, max_steps, safety):
        self.m0, self.m1, self.m2 = (float(m) for m in masses)
        self.G = float(G)
        self.floor = float(floor)
        self.tol = float(tol)
        self.min_step = float(min_step)
        self.kmax = int(kmax)
        self.max_steps = int(max_steps)
        self.safety = float(safety)


class _P:
    # extended-precision view of Params
    __slots__ = ("m", "G", "floor", "tol", "min_step", "kmax", "max_steps", "safety")

    def __init__(self, pp):
        if not 3 <= pp.kmax <= 16:
            raise ValueError("kmax must lie in [3, 16]")
        self.m = (L(pp.m0), L(pp.m1), L(pp.m2))
        self.G = L(pp.G)
        self.floor = L(pp.floor)
        self.tol = pp.tol
        self.min_step = pp.min_step
        self.kmax = pp.kmax
        self.max_steps = pp.max_steps
        self.safety = pp.safety


def deriv(y, p):
    m = p.m
    G = p.G
    a = [_ZERO] * 6
    for i, j in _PAIRS:
        dx = y[2 * j] - y[2 * i]
        dz = y[2 * j + 1] - y[2 * i + 1]
        r2 = dx * dx + dz * dz
        r = _sqrt(r2)
        if r < p.floor or r == 0.0:
            raise _Singular
        inv3 = G / (r2 * r)
        a[2 * i] = a[2 * i] + m[j] * inv3 * dx
        a[2 * i + 1] = a[2 * i + 1] + m[j] * inv3 * dz
        a[2 * j] = a[2 * j] - m[i] * inv3 * dx
        a[2 * j + 1] = a[2 * j + 1] - m[i] * inv3 * dz
    return y[6:12] + a


def energy_error(y, yl, p):
    m = p.m
    G = p.G
    ke = _ZERO
    pe = _ZERO
    num = _ZERO
    gp = [_ZERO] * 6
    for q in range(3):
        ke = ke + _HALF * m[q] * (y[6 + 2 * q] * y[6 + 2 * q] + y[7 + 2 * q] * y[7 + 2 * q])
    for i, j in _PAIRS:
        dx = y[2 * j] - y[2 * i]
        dz = y[2 * j + 1] - y[2 * i + 1]
        r2 = dx * dx + dz * dz
        r = _sqrt(r2)
        pe = pe - G * m[i] * m[j] / r
        w = G * m[i] * m[j] / (r2 * r)
        gp[2 * i] = gp[2 * i] + abs(w * dx)
        gp[2 * i + 1] = gp[2 * i + 1] + abs(w * dz)
        gp[2 * j] = gp[2 * j] + abs(w * dx)
        gp[2 * j + 1] = gp[2 * j + 1] + abs(w * dz)
    for q in range(6):
        num = num + gp[q] * abs(y[q] - yl[q])
        num = num + m[q // 2] * abs(y[6 + q]) * abs(y[6 + q] - yl[6 + q])
    return float(num / abs(ke + pe))


def mmid(y, f0, H, n, p):
    h = L(H) / n
    h2 = _TWO * h
    z0 = list(y)
    z1 = [y[i] + h * f0[i] for i in range(12)]
    f = deriv(z1, p)
    for _ in range(1, n):
        z2 = [z0[i] + h2 * f[i] for i in range(12)]
        z0 = z1
        z1 = z2
        f = deriv(z1, p)
    return [_HALF * (z1[i] + z0[i] + h * f[i]) for i in range(12)]


def _bs_step(y, H, kc, p):
    kmax = p.kmax
    kend = kc + 1
    if kend > kmax - 1:
        kend = kmax - 1
    work = [0.0] * kmax
    hk = [0.0] * kmax
    nevals = 1
    err = 0.0
    try:
        f0 = deriv(y, p)
    except _Singular:
        return SINGULAR, y, float("inf"), False, H, kc, nevals
    prev = []
    for k in range(kend + 1):
        nk = 2 * (k + 1)
        try:
            row = [mmid(y, f0, H, nk, p)]
        except _Singular:
            return SINGULAR, y, float("inf"), False, H, kc, nevals
        nevals += nk
        for j in range(1, k + 1):
            r = L(nk) / L(2 * (k - j + 1))
            den = r * r - _ONE
            a = row[j - 1]
            b = prev[j - 1]
            row.append([a[i] + (a[i] - b[i]) / den for i in range(12)])
        prev = row
        if k == 0:
            continue
        top = row[k]
        low = row[k - 1]
        emax = _ZERO
        for i in range(12):
            s = abs(top[i])
            if s < 1.0:
                s = _ONE
            e = abs(top[i] - low[i]) / s
            if e > emax or e != e:
                emax = e
        err = float(emax)
        eg = energy_error(top, low, p)
        if eg > err or eg != eg:
            err = eg
        errn = err / p.tol
        if errn != errn:
            fac = FAC_MIN
        elif errn == 0.0:
            fac = FAC_MAX
        else:
            fac = p.safety * (1.0 / errn) ** (1.0 / (2 * k + 1))
            if fac < FAC_MIN:
                fac = FAC_MIN
            elif fac > FAC_MAX:
                fac = FAC_MAX
        hk[k] = H * fac
        work[k] = float(nevals) / hk[k]
        if k >= kc - 1 and errn <= 1.0:
            kn = k
            hn = hk[k]
            if k >= 2 and work[k - 1] < 0.8 * work[k]:
                kn = k - 1
                hn = hk[k - 1]
            elif k == kend and k < kmax - 1 and (k < 2 or work[k] < 0.9 * work[k - 1]):
                kn = k + 1
                hn = hk[k] * float(nevals + 2 * (k + 2)) / float(nevals)
            if kn < 1:
                kn = 1
            elif kn > kmax - 2:
                kn = kmax - 2
            return OK, top, err, True, hn, kn, nevals
    kn = 1
    for k in range(2, kend + 1):
        if work[k] < work[kn]:
            kn = k
    hn = hk[kn]
    if kn > kmax - 2:
        kn = kmax - 2
    return OK, y, err, False, hn, kn, nevals


def _integrate(y, t, t_target, H, kc, p, counters):
    nsteps = 0
    while t < t_target:
        if nsteps >= p.max_steps:
            return BUDGET, y, t, H, kc
        h = H
        last = False
        if t + h >= t_target:
            h = t_target - t
            last = True
        elif h < p.min_step:
            return UNDERFLOW, y, t, H, kc
        status, out, err, accepted, hn, kn, ne = _bs_step(y, h, kc, p)
        counters[0] += ne
        counters[1] += 1
        nsteps += 1
        if status != OK:
            return status, y, t, H, kc
        kc = kn
        if accepted:
            y = out
            if last:
                t = t_target
                if hn > H:
                    H = hn
            else:
                t = t + h
                H = hn
        else:
            H = hn
            if H < p.min_step:
                return UNDERFLOW, y, t, H, kc
    return OK, y, t, H, kc


def _ext(y):
    return [L(float(v)) for v in y]


def _dbl(y):
    return [float(v) for v in y]


def mmid_step(y, H, n, pp):
    p = _P(pp)
    y = _ext(y)
    try:
        return OK, _dbl(mmid(y, deriv(y, p), float(H), int(n), p))
    except _Singular:
        return SINGULAR, _dbl(y)


def bs_step(y, H, kc, pp):
    status, out, err, accepted, hn, kn, ne = _bs_step(_ext(y), float(H), int(kc), _P(pp))
    return status, _dbl(out), err, accepted, hn, kn, ne


def integrate(y, t, t_target, H, kc, pp):
    counters = [0, 0]
    status, y, t, H, kc = _integrate(_ext(y), float(t), float(t_target), float(H), int(kc), _P(pp), counters)
    return status, _dbl(y), t, H, kc, counters[0], counters[1]


def trajectory(y0, dt, n_intervals, H, kc, pp):
    """Sample at ``k * dt`` for ``k = 0..n_intervals`` keeping extended state between samples."""
    p = _P(pp)
    y = _ext(y0)
    samples = [_dbl(y)]
    counters = [0, 0]
    t = 0.0
    H = float(H)
    kc = int(kc)
    dt = float(dt)
    status = OK
    for k in range(1, int(n_intervals) + 1):
        status, y, t, H, kc = _integrate(y, t, k * dt, H, kc, p, counters)
        if status != OK:
            break
        samples.append(_dbl(y))
    return status, samples, t, counters[0]
