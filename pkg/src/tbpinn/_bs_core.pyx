# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Bulirsch-Stoer kernel.

Operation-for-operation mirror of ``_bs_py.py``. Internal arithmetic is
x87 extended precision (``long double``); step sizes, times and error norms
are plain doubles. Samples leave the kernel rounded to float64.
"""

cdef extern from "math.h" nogil:
    long double sqrtl(long double)
    long double fabsl(long double)
    double pow(double, double)

ctypedef long double real

cdef enum:
    NS = 12
    KMAX_LIMIT = 16

cdef enum:
    OK = 0
    UNDERFLOW = 1
    BUDGET = 2
    SINGULAR = 3

cdef double FAC_MIN = 0.02
cdef double FAC_MAX = 4.0

cdef struct Params:
    real m[3]
    real G
    real floor
    double tol
    double min_step
    int kmax
    long long max_steps
    double safety


cdef int deriv(const real* y, real* out, Params* p) noexcept nogil:
    cdef int pi[3]
    cdef int pj[3]
    cdef int q, i, j
    cdef real dx, dz, r2, r, inv3
    cdef real a[6]
    pi[0] = 0; pj[0] = 1
    pi[1] = 0; pj[1] = 2
    pi[2] = 1; pj[2] = 2
    for q in range(6):
        a[q] = 0.0
    for q in range(3):
        i = pi[q]
        j = pj[q]
        dx = y[2 * j] - y[2 * i]
        dz = y[2 * j + 1] - y[2 * i + 1]
        r2 = dx * dx + dz * dz
        r = sqrtl(r2)
        if r < p.floor or r == 0.0:
            return SINGULAR
        inv3 = p.G / (r2 * r)
        a[2 * i] = a[2 * i] + p.m[j] * inv3 * dx
        a[2 * i + 1] = a[2 * i + 1] + p.m[j] * inv3 * dz
        a[2 * j] = a[2 * j] - p.m[i] * inv3 * dx
        a[2 * j + 1] = a[2 * j + 1] - p.m[i] * inv3 * dz
    for q in range(6):
        out[q] = y[6 + q]
        out[6 + q] = a[q]
    return OK


cdef double energy_error(const real* y, const real* yl, Params* p) noexcept nogil:
    # first-order bound on the relative energy change between y and yl
    cdef int pi[3]
    cdef int pj[3]
    cdef int q, i, j
    cdef real ke = 0.0
    cdef real pe = 0.0
    cdef real num = 0.0
    cdef real dx, dz, r2, r, w
    cdef real gp[6]
    pi[0] = 0; pj[0] = 1
    pi[1] = 0; pj[1] = 2
    pi[2] = 1; pj[2] = 2
    for q in range(6):
        gp[q] = 0.0
    for q in range(3):
        ke = ke + 0.5 * p.m[q] * (y[6 + 2 * q] * y[6 + 2 * q] + y[7 + 2 * q] * y[7 + 2 * q])
    for q in range(3):
        i = pi[q]
        j = pj[q]
        dx = y[2 * j] - y[2 * i]
        dz = y[2 * j + 1] - y[2 * i + 1]
        r2 = dx * dx + dz * dz
        r = sqrtl(r2)
        pe = pe - p.G * p.m[i] * p.m[j] / r
        w = p.G * p.m[i] * p.m[j] / (r2 * r)
        gp[2 * i] = gp[2 * i] + fabsl(w * dx)
        gp[2 * i + 1] = gp[2 * i + 1] + fabsl(w * dz)
        gp[2 * j] = gp[2 * j] + fabsl(w * dx)
        gp[2 * j + 1] = gp[2 * j + 1] + fabsl(w * dz)
    for q in range(6):
        num = num + gp[q] * fabsl(y[q] - yl[q])
        num = num + p.m[q // 2] * fabsl(y[6 + q]) * fabsl(y[6 + q] - yl[6 + q])
    return <double>(num / fabsl(ke + pe))


cdef int mmid(const real* y, const real* f0, double H, int n, real* out, Params* p) noexcept nogil:
    cdef real h = (<real>H) / n
    cdef real h2 = 2.0 * h
    cdef real z0[NS]
    cdef real z1[NS]
    cdef real z2[NS]
    cdef real f[NS]
    cdef int i, m
    for i in range(NS):
        z0[i] = y[i]
        z1[i] = y[i] + h * f0[i]
    if deriv(z1, f, p) != OK:
        return SINGULAR
    for m in range(1, n):
        for i in range(NS):
            z2[i] = z0[i] + h2 * f[i]
        for i in range(NS):
            z0[i] = z1[i]
            z1[i] = z2[i]
        if deriv(z1, f, p) != OK:
            return SINGULAR
    for i in range(NS):
        out[i] = 0.5 * (z1[i] + z0[i] + h * f[i])
    return OK


cdef int c_bs_step(const real* y, double H, int kc, Params* p, real* yout,
                   double* err_out, int* accepted, double* hnext, int* knext,
                   long long* nevals_out) noexcept nogil:
    cdef int kmax = p.kmax
    cdef int kend = kc + 1
    cdef double work[KMAX_LIMIT]
    cdef double hk[KMAX_LIMIT]
    cdef real prev[KMAX_LIMIT][NS]
    cdef real row[KMAX_LIMIT][NS]
    cdef real f0[NS]
    cdef long long nevals = 1
    cdef int k, j, i, nk, kn
    cdef real r, den, e, s, emax
    cdef double err, eg, errn, fac, hn
    if kend > kmax - 1:
        kend = kmax - 1
    for k in range(kmax):
        work[k] = 0.0
        hk[k] = 0.0
    accepted[0] = 0
    err = 0.0
    for i in range(NS):
        yout[i] = y[i]
    hnext[0] = H
    knext[0] = kc
    if deriv(y, f0, p) != OK:
        nevals_out[0] = nevals
        err_out[0] = 1.0 / 0.0
        return SINGULAR
    for k in range(kend + 1):
        nk = 2 * (k + 1)
        if mmid(y, f0, H, nk, row[0], p) != OK:
            nevals_out[0] = nevals
            err_out[0] = 1.0 / 0.0
            return SINGULAR
        nevals += nk
        for j in range(1, k + 1):
            r = (<real>nk) / (<real>(2 * (k - j + 1)))
            den = r * r - 1.0
            for i in range(NS):
                row[j][i] = row[j - 1][i] + (row[j - 1][i] - prev[j - 1][i]) / den
        for j in range(k + 1):
            for i in range(NS):
                prev[j][i] = row[j][i]
        if k == 0:
            continue
        emax = 0.0
        for i in range(NS):
            s = fabsl(row[k][i])
            if s < 1.0:
                s = 1.0
            e = fabsl(row[k][i] - row[k - 1][i]) / s
            if e > emax or e != e:
                emax = e
        err = <double>emax
        eg = energy_error(row[k], row[k - 1], p)
        if eg > err or eg != eg:
            err = eg
        errn = err / p.tol
        if errn != errn:
            fac = FAC_MIN
        elif errn == 0.0:
            fac = FAC_MAX
        else:
            fac = p.safety * pow(1.0 / errn, 1.0 / (2 * k + 1))
            if fac < FAC_MIN:
                fac = FAC_MIN
            elif fac > FAC_MAX:
                fac = FAC_MAX
        hk[k] = H * fac
        work[k] = (<double>nevals) / hk[k]
        if k >= kc - 1 and errn <= 1.0:
            kn = k
            hn = hk[k]
            if k >= 2 and work[k - 1] < 0.8 * work[k]:
                kn = k - 1
                hn = hk[k - 1]
            elif k == kend and k < kmax - 1 and (k < 2 or work[k] < 0.9 * work[k - 1]):
                kn = k + 1
                hn = hk[k] * (<double>(nevals + 2 * (k + 2))) / (<double>nevals)
            if kn < 1:
                kn = 1
            elif kn > kmax - 2:
                kn = kmax - 2
            for i in range(NS):
                yout[i] = row[k][i]
            err_out[0] = err
            accepted[0] = 1
            hnext[0] = hn
            knext[0] = kn
            nevals_out[0] = nevals
            return OK
    kn = 1
    for k in range(2, kend + 1):
        if work[k] < work[kn]:
            kn = k
    hn = hk[kn]
    if kn > kmax - 2:
        kn = kmax - 2
    err_out[0] = err
    hnext[0] = hn
    knext[0] = kn
    nevals_out[0] = nevals
    return OK


cdef int c_integrate(real* y, double* t_io, double t_target, double* H_io, int* kc_io,
                     Params* p, long long* nevals_io, long long* nsteps_out) noexcept nogil:
    cdef double t = t_io[0]
    cdef double H = H_io[0]
    cdef int kc = kc_io[0]
    cdef long long nsteps = 0
    cdef long long ne = 0
    cdef double h, err, hn
    cdef int last, status, accepted, kn, i
    cdef int result = OK
    cdef real out[NS]
    while t < t_target:
        if nsteps >= p.max_steps:
            result = BUDGET
            break
        h = H
        last = 0
        if t + h >= t_target:
            h = t_target - t
            last = 1
        elif h < p.min_step:
            result = UNDERFLOW
            break
        status = c_bs_step(y, h, kc, p, out, &err, &accepted, &hn, &kn, &ne)
        nevals_io[0] += ne
        nsteps += 1
        if status != OK:
            result = status
            break
        kc = kn
        if accepted:
            for i in range(NS):
                y[i] = out[i]
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
                result = UNDERFLOW
                break
    t_io[0] = t
    H_io[0] = H
    kc_io[0] = kc
    nsteps_out[0] = nsteps
    return result


cdef Params _params(object pp) except *:
    cdef Params p
    p.m[0] = pp.m0
    p.m[1] = pp.m1
    p.m[2] = pp.m2
    p.G = pp.G
    p.floor = pp.floor
    p.tol = pp.tol
    p.min_step = pp.min_step
    p.kmax = pp.kmax
    p.max_steps = pp.max_steps
    p.safety = pp.safety
    if p.kmax < 3 or p.kmax > KMAX_LIMIT:
        raise ValueError(f"kmax must lie in [3, {KMAX_LIMIT}]")
    return p


def mmid_step(y, double H, int n, pp):
    cdef Params p = _params(pp)
    cdef real yin[NS]
    cdef real f0[NS]
    cdef real out[NS]
    cdef int i
    for i in range(NS):
        yin[i] = <double>y[i]
    if deriv(yin, f0, &p) != OK or mmid(yin, f0, H, n, out, &p) != OK:
        return SINGULAR, [<double>yin[i] for i in range(NS)]
    return OK, [<double>out[i] for i in range(NS)]


def bs_step(y, double H, int kc, pp):
    cdef Params p = _params(pp)
    cdef real yin[NS]
    cdef real yout[NS]
    cdef double err, hn
    cdef int accepted, kn, i, status
    cdef long long ne
    for i in range(NS):
        yin[i] = <double>y[i]
    status = c_bs_step(yin, H, kc, &p, yout, &err, &accepted, &hn, &kn, &ne)
    return status, [<double>yout[i] for i in range(NS)], err, bool(accepted), hn, kn, ne


def integrate(y, double t, double t_target, double H, int kc, pp):
    cdef Params p = _params(pp)
    cdef real yy[NS]
    cdef long long ne = 0
    cdef long long ns = 0
    cdef int i, status
    for i in range(NS):
        yy[i] = <double>y[i]
    with nogil:
        status = c_integrate(yy, &t, t_target, &H, &kc, &p, &ne, &ns)
    return status, [<double>yy[i] for i in range(NS)], t, H, kc, ne, ns


def trajectory(y0, double dt, int n_intervals, double H, int kc, pp):
    """Sample at ``k * dt`` for ``k = 0..n_intervals`` keeping extended state between samples."""
    cdef Params p = _params(pp)
    cdef real yy[NS]
    cdef long long ne = 0
    cdef long long ns = 0
    cdef double t = 0.0
    cdef int i, k, status = OK
    samples = [[<double>y0[i] for i in range(NS)]]
    for i in range(NS):
        yy[i] = <double>y0[i]
    for k in range(1, n_intervals + 1):
        with nogil:
            status = c_integrate(yy, &t, k * dt, &H, &kc, &p, &ne, &ns)
        if status != OK:
            break
        samples.append([<double>yy[i] for i in range(NS)])
    return status, samples, t, ne
