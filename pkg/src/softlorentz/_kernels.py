"""Compiled hot paths: field generation, symplectic stepping, free flight,
on-line trajectory detectors, and the ensemble driver.

Everything is numba @njit with cache=True and fastmath left OFF: reductions
must be bit-reproducible across runs (a determinism contract of the package),
and fastmath licenses reassociation.

Layout notes
------------
* The obstacle field is a counter-based Poisson process: cell (i, j) of side
  `cell` owns a splitmix64 stream seeded by hash(seed, i, j); the stream
  yields the cell's Poisson count (Knuth product method) and then uniform
  positions.  Regeneration is a pure function of (seed, i, j), so the Python
  field object and these kernels see bit-identical obstacles with no shared
  storage.
* Inside supports the integrator is a symmetric 4th-order composite
      kick(h/6, F) drift(h/2) kick(2h/3, F~) drift(h/2) kick(h/6, F)
  with F~ = F + (h^2/48) grad|grad V|^2 (one Hessian-vector product).  The
  potential is only C^1 at support boundaries, which would degrade any fixed
  composite to O(h^2); steps are therefore *boundary-anchored*: a trial step
  whose endpoint changed any support membership is re-solved to end exactly
  on the earliest crossed boundary (Illinois root solve on d^2 - eps^2 along
  the re-integrated step).
* Detectors (self-approach, self-crossings, tube re-entry) work on the
  macro-grid polyline only, via a generation-stamped spatial hash of path
  segments, so workspace arrays are reused across trajectories without
  clearing.
* Scalar parameters travel in two small arrays (pf8/pi8) indexed by the
  P_* / Q_* constants; per-trajectory counters and times live in ic/fc
  indexed by IC_* / FC_*.  Keeps signatures sane under numba.
"""

import math

import numpy as np
from numba import njit

# ---------------------------------------------------------------------------
# parameter slots (pf8: float64 params, pi8: int64 params)

P_EPS = 0
P_ALPHA = 1
P_G0 = 2
P_RHO = 3
P_MU = 4        # Poisson mean per field cell
P_CELL = 5      # field cell size
P_X0 = 6
P_Y0 = 7
P_VX0 = 8
P_VY0 = 9
P_T = 10
P_H = 11        # base step inside supports
P_MDT = 12      # macro sample spacing
P_COSPHI = 13   # cos(phi) for the small-angle cutoff
P_ADIST = 14    # distance threshold a
P_VLO2 = 15     # squared speed band
P_VHI2 = 16
P_TUBER = 17    # tube radius for the literal recollision event (2 eps)
P_GAP = 18      # minimum time gap for a same-excursion obstacle revisit
P_SUPV = 19     # sup |V| (speed-bound invariant)
P_GX0 = 20      # detector grid origin
P_GY0 = 21
P_CDET = 22     # detector grid cell size
P_SPEED0 = 23
P_PP = 24       # profile parameter (power exponent)
P_N = 25

Q_PID = 0
Q_KMAX = 1
Q_PHI_ON = 2
Q_K_ON = 3
Q_V_ON = 4
Q_RECORD = 5
Q_WANT_EV = 6
Q_WANT_CTL = 7
Q_NG = 8        # detector grid dimension (ng x ng)
Q_NQ = 9        # number of query times
Q_MAXST = 10    # runaway guard: max composite steps per trajectory
Q_N = 11

# per-trajectory integer counters
IC_ERR = 0          # 0 ok; else error code (1 block ovf, 2 macro ovf, 3 ev ovf,
                    # 4 grid out, 5 root fail, 6 mem ovf, 7 visited ovf, 8 rec ovf)
IC_STOPKIND = 1     # 0 horizon, 3 tau_phi, 4 tau_K, 5 tau_v
IC_MN = 2           # macro samples stored
IC_EVN = 3          # events stored
IC_RECN = 4         # record samples stored
IC_NCROSS = 5
IC_NCOLLIN = 6
IC_NVIS = 7         # completed obstacle-ball visits
IC_NEXC = 8         # completed excursions
IC_NDBL = 9         # doublet excursions
IC_NRECOLL = 10     # obstacle-revisit events
IC_NTUBE = 11       # 0/1: path re-entered the tube of its past
IC_MEMN = 12        # current membership count
IC_EXC_D = 13       # distinct obstacles in current excursion (saturates at 3)
IC_QP = 14          # query-time pointer
IC_NSTEP = 15
IC_NSPLIT = 16
IC_MAXCL = 17
IC_SPDVIO = 18      # speed-bound invariant violations
IC_VMN = 19         # visited-map load
IC_EXCID = 20       # running excursion id
IC_NENTER = 21
IC_HAVTPHI = 22
IC_N = 24

# per-trajectory float slots
FC_TAU = 0
FC_TPHI = 1
FC_TK = 2
FC_TV = 3
FC_TREC = 4
FC_TTUBE = 5
FC_EMAX = 6         # max |H - H_anchor| over boundary events (per crossing)
FC_ANGLE = 7        # unwrapped velocity angle
FC_MINV2 = 8
FC_MAXV2 = 9
FC_DBLSUM = 10      # sum of signed doublet deflections
FC_H0 = 11          # energy at current excursion open
FC_EXC_T0 = 12
FC_EXC_A0 = 13
FC_STOPT = 14
FC_EGLOB = 15       # max global energy drift (free flight speed vs v0)
FC_N = 18

# glob slots (persist across trajectories in one driver run)
G_HGEN = 0      # segment-hash generation
G_VGEN = 1      # query-visit generation
G_MGEN = 2      # visited-map generation
G_CTLN = 3      # entries in the crossing-stats buffer
G_CTLOVF = 4
G_DBLN = 5      # entries in the doublet-angle buffer
G_DBLOVF = 6
G_N = 8

# event kinds
EV_ENTER = 0
EV_EXIT = 1
EV_CROSS = 2
EV_TPHI = 3
EV_TK = 4
EV_TV = 5
EV_RECOLL = 6
EV_TUBE = 7

# record-sample kinds
RK_MACRO = 0
RK_EVENT = 1
RK_END = 2

BLOCK_CAP = 160
MEM_CAP = 64
EXC_KEYS = 4
CELL_CAP = 64       # max obstacles generated per cell (Poisson tail guard)

_U = np.uint64
_GOLD = _U(0x9E3779B97F4A7C15)
_M1 = _U(0xBF58476D1CE4E5B9)
_M2 = _U(0x94D049BB133111EB)
_S30 = _U(30)
_S27 = _U(27)
_S31 = _U(31)
_S11 = _U(11)
_PA = _U(0xC2B2AE3D27D4EB4F)
_PB = _U(0x165667B19E3779F9)
_INV53 = 1.0 / 9007199254740992.0  # 2^-53


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def _next(state):
    state = state + _GOLD
    return state, _mix(state)


@njit(cache=True, inline="always")
def _u01(z):
    # top 53 bits -> [0, 1)
    return float(z >> _S11) * _INV53


@njit(cache=True, inline="always")
def _cell_state(seedu, ci, cj):
    h = _mix(seedu + _GOLD)
    h = _mix(h ^ (_U(ci) * _PA))
    h = _mix(h ^ (_U(cj) * _PB))
    return h


@njit(cache=True)
def derive_seed(master, index):
    """Per-trajectory stream seed: hash of (master seed, trajectory index)."""
    return _mix(_mix(_U(master) + _GOLD) ^ (_U(index) * _PA))


@njit(cache=True, inline="always")
def _poisson(state, lam):
    # Knuth product-of-uniforms; lam is validated small at setup (exp(-lam)
    # must stay normal).
    limit = math.exp(-lam)
    k = 0
    p = 1.0
    while True:
        state, z = _next(state)
        p *= _u01(z)
        if p <= limit:
            return state, k
        k += 1


@njit(cache=True, inline="always")
def _pack_key(ci, cj, idx):
    # unique int64 obstacle id for |cell index| < 2^20, idx < 256;
    # stays below 2^53 so it round-trips through float64 exactly.
    return (((ci + (1 << 20)) << 30) + ((cj + (1 << 20)) << 9)) + idx


@njit(cache=True, inline="always")
def _gen_cell(seedu, ci, cj, mu, cell, xs, ys, start):
    """Generate cell (ci, cj) obstacles into xs/ys[start:]; returns new count
    or -1 on capacity overflow."""
    st = _cell_state(seedu, ci, cj)
    st, n = _poisson(st, mu)
    if n > CELL_CAP or start + n > xs.shape[0]:
        return -1
    for i in range(n):
        st, z1 = _next(st)
        st, z2 = _next(st)
        xs[start + i] = (ci + _u01(z1)) * cell
        ys[start + i] = (cj + _u01(z2)) * cell
    return start + n


@njit(cache=True)
def cell_points(seed, ci, cj, mu, cell):
    """Python-facing single-cell generator (same stream as the kernels)."""
    xs = np.empty(CELL_CAP, np.float64)
    ys = np.empty(CELL_CAP, np.float64)
    n = _gen_cell(_U(seed), ci, cj, mu, cell, xs, ys, 0)
    if n < 0:
        # overflow: caller validates mu, so this is a hard error sentinel
        return xs[:0], ys[:0], -1
    return xs[:n].copy(), ys[:n].copy(), n


# ---------------------------------------------------------------------------
# radial profiles (ids match potential.py)

@njit(cache=True, inline="always")
def _V(pid, pp, r):
    if r >= 1.0:
        return 0.0
    if pid == 0:
        u = 1.0 - r * r
        if pp == 2.0:
            return u * u
        return u ** pp
    c = math.cos(0.5 * math.pi * r)
    return c * c


@njit(cache=True, inline="always")
def _dV(pid, pp, r):
    if r >= 1.0:
        return 0.0
    if pid == 0:
        u = 1.0 - r * r
        if pp == 2.0:
            return -4.0 * r * u
        return -2.0 * pp * r * u ** (pp - 1.0)
    return -0.5 * math.pi * math.sin(math.pi * r)


@njit(cache=True, inline="always")
def _d2V(pid, pp, r):
    if r >= 1.0:
        return 0.0
    if pid == 0:
        if pp == 2.0:
            return -4.0 + 12.0 * r * r
        u = 1.0 - r * r
        return -2.0 * pp * (u ** (pp - 2.0)) * (1.0 - (2.0 * pp - 1.0) * r * r)
    return -0.5 * math.pi * math.pi * math.cos(math.pi * r)


# ---------------------------------------------------------------------------
# forces over an explicit obstacle list

@njit(cache=True, inline="always")
def _force(pid, pp, g0, eps, x, y, ox, oy, nb):
    fx = 0.0
    fy = 0.0
    eps2 = eps * eps
    for i in range(nb):
        dx = x - ox[i]
        dy = y - oy[i]
        d2 = dx * dx + dy * dy
        if d2 < eps2 and d2 > 0.0:
            d = math.sqrt(d2)
            s = -(g0 / eps) * _dV(pid, pp, d / eps) / d
            fx += s * dx
            fy += s * dy
    return fx, fy


@njit(cache=True, inline="always")
def _force_mid(pid, pp, g0, eps, h, x, y, ox, oy, nb):
    # modified mid force F~ = -(g - (h^2/24) H g), g = grad V_tot, H = Hessian
    gx = 0.0
    gy = 0.0
    eps2 = eps * eps
    for i in range(nb):
        dx = x - ox[i]
        dy = y - oy[i]
        d2 = dx * dx + dy * dy
        if d2 < eps2 and d2 > 0.0:
            d = math.sqrt(d2)
            s = (g0 / eps) * _dV(pid, pp, d / eps) / d
            gx += s * dx
            gy += s * dy
    if gx == 0.0 and gy == 0.0:
        return 0.0, 0.0
    hx = 0.0
    hy = 0.0
    for i in range(nb):
        dx = x - ox[i]
        dy = y - oy[i]
        d2 = dx * dx + dy * dy
        if d2 < eps2 and d2 > 0.0:
            d = math.sqrt(d2)
            r = d / eps
            ux = dx / d
            uy = dy / d
            gd = gx * ux + gy * uy
            v1 = _dV(pid, pp, r)
            v2 = _d2V(pid, pp, r)
            cc = g0 / eps2
            hx += cc * (v2 * gd * ux + (v1 / r) * (gx - gd * ux))
            hy += cc * (v2 * gd * uy + (v1 / r) * (gy - gd * uy))
    k = h * h / 24.0
    return -(gx - k * hx), -(gy - k * hy)


@njit(cache=True, inline="always")
def _comp_step(pid, pp, g0, eps, x, y, vx, vy, h, ox, oy, nb, f0x, f0y, have_f0):
    """Symmetric composite step of size h; returns end state and end force
    (reusable as the next step's first kick)."""
    if have_f0:
        fx = f0x
        fy = f0y
    else:
        fx, fy = _force(pid, pp, g0, eps, x, y, ox, oy, nb)
    c1 = h / 6.0
    vx += c1 * fx
    vy += c1 * fy
    hh = 0.5 * h
    x += hh * vx
    y += hh * vy
    fmx, fmy = _force_mid(pid, pp, g0, eps, h, x, y, ox, oy, nb)
    c2 = 2.0 * h / 3.0
    vx += c2 * fmx
    vy += c2 * fmy
    x += hh * vx
    y += hh * vy
    fex, fey = _force(pid, pp, g0, eps, x, y, ox, oy, nb)
    vx += c1 * fex
    vy += c1 * fey
    return x, y, vx, vy, fex, fey


@njit(cache=True)
def _cross_time(pid, pp, g0, eps, ax, ay, avx, avy, ox, oy, nb,
                cx, cy, h, inside_before, f0x, f0y, have_f0):
    """Earliest s in (0, h] where |x(s) - c|^2 crosses eps^2, by Illinois
    false position on the re-integrated step.  Returns (s, ok)."""
    eps2 = eps * eps
    dx = ax - cx
    dy = ay - cy
    flo = dx * dx + dy * dy - eps2
    # anchors can sit exactly on a boundary; bias the sign by membership
    if inside_before and flo >= 0.0:
        flo = -1e-30
    if (not inside_before) and flo <= 0.0:
        flo = 1e-30
    x1, y1, _, _, _, _ = _comp_step(pid, pp, g0, eps, ax, ay, avx, avy, h,
                                    ox, oy, nb, f0x, f0y, have_f0)
    dx = x1 - cx
    dy = y1 - cy
    fhi = dx * dx + dy * dy - eps2
    lo = 0.0
    hi = h
    side = 0
    s = hi
    tol = 1e-13 * eps2
    for _ in range(100):
        denom = fhi - flo
        if denom != 0.0:
            s = (lo * fhi - hi * flo) / denom
        else:
            s = 0.5 * (lo + hi)
        if s <= lo or s >= hi:
            s = 0.5 * (lo + hi)
        x1, y1, _, _, _, _ = _comp_step(pid, pp, g0, eps, ax, ay, avx, avy, s,
                                        ox, oy, nb, f0x, f0y, have_f0)
        dx = x1 - cx
        dy = y1 - cy
        f = dx * dx + dy * dy - eps2
        if abs(f) <= tol:
            return s, True
        if (f < 0.0) == (flo < 0.0):
            lo = s
            flo = f
            if side == -1:
                fhi *= 0.5
            side = -1
        else:
            hi = s
            fhi = f
            if side == 1:
                flo *= 0.5
            side = 1
        if hi - lo < 1e-16 * h:
            return 0.5 * (lo + hi), True
    return s, False


# ---------------------------------------------------------------------------
# free flight: exact ray-circle first hit over the lazily generated field

@njit(cache=True, inline="always")
def _ray_circle(px, py, vx, vy, cx, cy, eps, speed2):
    """First t > tol with |p + t v - c| = eps, or inf."""
    wx = px - cx
    wy = py - cy
    b = vx * wx + vy * wy
    c = wx * wx + wy * wy - eps * eps
    disc = b * b - speed2 * c
    if disc < 0.0:
        return math.inf
    t = (-b - math.sqrt(disc)) / speed2
    if t > 1e-12:
        return t
    return math.inf


@njit(cache=True)
def _scan_cell(seedu, mu, cell, eps, px, py, vx, vy, speed2,
               ci, cj, sox, soy, best, bkey, bcx, bcy):
    n = _gen_cell(seedu, ci, cj, mu, cell, sox, soy, 0)
    if n < 0:
        return best, np.int64(-2), bcx, bcy  # cell overflow sentinel
    for i in range(n):
        t = _ray_circle(px, py, vx, vy, sox[i], soy[i], eps, speed2)
        if t < best:
            best = t
            bkey = _pack_key(ci, cj, i)
            bcx = sox[i]
            bcy = soy[i]
    return best, bkey, bcx, bcy


@njit(cache=True)
def flight_first_hit(seed, mu, cell, eps, px, py, vx, vy, tmax, sox, soy):
    """(t_hit, key, center) of the first support entry along the ray within
    time tmax, or (inf, -1, 0, 0).  Amanatides-Woo traversal with a sliding
    3x3 neighborhood so off-axis obstacles within eps of the ray are seen."""
    seedu = _U(seed)
    speed2 = vx * vx + vy * vy
    speed = math.sqrt(speed2)
    ci = np.int64(math.floor(px / cell))
    cj = np.int64(math.floor(py / cell))
    best = math.inf
    bkey = np.int64(-1)
    bcx = 0.0
    bcy = 0.0
    for di in range(-1, 2):
        for dj in range(-1, 2):
            best, bkey, bcx, bcy = _scan_cell(
                seedu, mu, cell, eps, px, py, vx, vy, speed2,
                ci + di, cj + dj, sox, soy, best, bkey, bcx, bcy)
            if bkey == -2:
                return math.inf, np.int64(-2), 0.0, 0.0
    # DDA setup (time-parameterized)
    if vx > 0.0:
        sx = np.int64(1)
        tmaxx = ((ci + 1) * cell - px) / vx
        tdx = cell / vx
    elif vx < 0.0:
        sx = np.int64(-1)
        tmaxx = (ci * cell - px) / vx
        tdx = -cell / vx
    else:
        sx = np.int64(0)
        tmaxx = math.inf
        tdx = math.inf
    if vy > 0.0:
        sy = np.int64(1)
        tmaxy = ((cj + 1) * cell - py) / vy
        tdy = cell / vy
    elif vy < 0.0:
        sy = np.int64(-1)
        tmaxy = (cj * cell - py) / vy
        tdy = -cell / vy
    else:
        sy = np.int64(0)
        tmaxy = math.inf
        tdy = math.inf
    margin = (1.5 * cell + eps) / speed
    while True:
        tenter = min(tmaxx, tmaxy)
        if tenter > tmax or tenter > best + margin:
            break
        if tmaxx <= tmaxy:
            ci += sx
            tmaxx += tdx
            ni = ci + sx
            for dj in range(-1, 2):
                best, bkey, bcx, bcy = _scan_cell(
                    seedu, mu, cell, eps, px, py, vx, vy, speed2,
                    ni, cj + dj, sox, soy, best, bkey, bcx, bcy)
                if bkey == -2:
                    return math.inf, np.int64(-2), 0.0, 0.0
        else:
            cj += sy
            tmaxy += tdy
            nj = cj + sy
            for di in range(-1, 2):
                best, bkey, bcx, bcy = _scan_cell(
                    seedu, mu, cell, eps, px, py, vx, vy, speed2,
                    ci + di, nj, sox, soy, best, bkey, bcx, bcy)
                if bkey == -2:
                    return math.inf, np.int64(-2), 0.0, 0.0
        if abs(ci) > (1 << 20) or abs(cj) > (1 << 20):
            return math.inf, np.int64(-3), 0.0, 0.0
    if best > tmax:
        return math.inf, np.int64(-1), 0.0, 0.0
    return best, bkey, bcx, bcy


# ---------------------------------------------------------------------------
# block (3x3 field neighborhood) maintenance

@njit(cache=True)
def _build_block(seedu, mu, cell, ci, cj, box, boy, bokey):
    """Gather the 3x3 cell block around (ci, cj), sorted by (x, y) so force
    sums are order-deterministic.  Returns count or -1 on overflow."""
    n = 0
    for di in range(-1, 2):
        for dj in range(-1, 2):
            st = _cell_state(seedu, ci + di, cj + dj)
            st, m = _poisson(st, mu)
            if m > CELL_CAP or n + m > BLOCK_CAP:
                return -1
            for i in range(m):
                st, z1 = _next(st)
                st, z2 = _next(st)
                box[n] = ((ci + di) + _u01(z1)) * cell
                boy[n] = ((cj + dj) + _u01(z2)) * cell
                bokey[n] = _pack_key(ci + di, cj + dj, i)
                n += 1
    # insertion sort by (x, y)
    for i in range(1, n):
        kx = box[i]
        ky = boy[i]
        kk = bokey[i]
        j = i - 1
        while j >= 0 and (box[j] > kx or (box[j] == kx and boy[j] > ky)):
            box[j + 1] = box[j]
            boy[j + 1] = boy[j]
            bokey[j + 1] = bokey[j]
            j -= 1
        box[j + 1] = kx
        boy[j + 1] = ky
        bokey[j + 1] = kk
    return n


# ---------------------------------------------------------------------------
# geometry helpers for the detectors

@njit(cache=True, inline="always")
def _pt_seg_d2(px, py, ax, ay, bx, by):
    ux = bx - ax
    uy = by - ay
    wx = px - ax
    wy = py - ay
    den = ux * ux + uy * uy
    if den <= 0.0:
        return wx * wx + wy * wy
    s = (wx * ux + wy * uy) / den
    if s < 0.0:
        s = 0.0
    elif s > 1.0:
        s = 1.0
    dx = wx - s * ux
    dy = wy - s * uy
    return dx * dx + dy * dy


@njit(cache=True, inline="always")
def _seg_cross(ax, ay, bx, by, cx, cy, dx, dy):
    """Proper (transversal) crossing test; returns (code, s) with s the
    parameter on AB.  code: 1 crossing, 0 none, -1 degenerate/collinear."""
    rx = bx - ax
    ry = by - ay
    sx = dx - cx
    sy = dy - cy
    den = rx * sy - ry * sx
    qpx = cx - ax
    qpy = cy - ay
    num_t = qpx * sy - qpy * sx
    num_u = qpx * ry - qpy * rx
    if den == 0.0:
        if num_t == 0.0 and num_u == 0.0:
            return -1, 0.0  # collinear overlap: reported separately
        return 0, 0.0
    t = num_t / den
    u = num_u / den
    if 0.0 < t < 1.0 and 0.0 < u < 1.0:
        return 1, t
    return 0, 0.0


# ---------------------------------------------------------------------------
# macro-sample pipeline: spatial-hash insert + detector queries

@njit(cache=True, inline="always")
def _grid_ix(x, gx0, cdet, ng):
    i = np.int64(math.floor((x - gx0) / cdet))
    if i < 0:
        i = 0
    elif i >= ng:
        i = ng - 1
    return i


@njit(cache=True)
def _append_ev(ic, ev, want_ev, t, kind, key, x, y, aux):
    if want_ev != 1:
        return
    e = ic[IC_EVN]
    if e >= ev.shape[0]:
        ic[IC_ERR] = 3
        return
    ev[e, 0] = t
    ev[e, 1] = kind
    ev[e, 2] = key
    ev[e, 3] = x
    ev[e, 4] = y
    ev[e, 5] = aux
    ic[IC_EVN] = e + 1


@njit(cache=True)
def _emit_sample(ts, qx, qy, pvx, pvy,
                 pf8, pi8, ic, fc, glob,
                 mt, mx, my, mvx, mvy,
                 head, hstamp, nxt, vstamp,
                 ev):
    """Append a macro sample, run the polyline detectors against the hashed
    past, insert the new segment.  Returns the earliest *stopping* time among
    enabled cutoffs triggered here, or inf.

    Chain entries are slot-expanded ids eid = seg*4 + slot (a segment can be
    hashed into at most 4 grid cells since its length is <= cdet/2); vstamp
    deduplicates per *segment* so a multi-cell segment is tested once.
    """
    k = ic[IC_MN]
    if k + 1 >= mt.shape[0]:
        ic[IC_ERR] = 2
        return ts
    ng = pi8[Q_NG]
    gx0 = pf8[P_GX0]
    gy0 = pf8[P_GY0]
    cdet = pf8[P_CDET]
    a_dist = pf8[P_ADIST]
    cosphi = pf8[P_COSPHI]
    tube_r = pf8[P_TUBER]
    mdt = pf8[P_MDT]
    # temporal washout for the tube detector: the immediate past of the path
    # is trivially within 2*eps of the present, so only segments ending more
    # than max(4 macro steps, 8 eps) ago are eligible
    wsh = 4.0 * mdt
    if 8.0 * pf8[P_EPS] > wsh:
        wsh = 8.0 * pf8[P_EPS]
    hgen = np.int32(glob[G_HGEN])
    want_ev = pi8[Q_WANT_EV]
    stop_t = math.inf

    if k > 0:
        pax = mx[k - 1]
        pay = my[k - 1]
        t0 = mt[k - 1]
        seglen2 = (qx - pax) * (qx - pax) + (qy - pay) * (qy - pay)

        # -- hairpin within one macro interval: reversal between consecutive
        #    sampled directions plus the distance condition
        if ic[IC_HAVTPHI] == 0:
            dd = mvx[k - 1] * pvx + mvy[k - 1] * pvy
            if dd <= 0.0:
                n1 = math.sqrt(mvx[k - 1] ** 2 + mvy[k - 1] ** 2)
                n2 = math.sqrt(pvx * pvx + pvy * pvy)
                if n1 > 0.0 and n2 > 0.0 and abs(dd) / (n1 * n2) >= cosphi \
                        and seglen2 <= a_dist * a_dist:
                    ic[IC_HAVTPHI] = 1
                    fc[FC_TPHI] = ts
                    _append_ev(ic, ev, want_ev, ts, EV_TPHI, -1.0, qx, qy, 0.0)
                    if pi8[Q_PHI_ON] == 1:
                        stop_t = ts

        # -- hash queries over cells within cdet of the new segment's bbox
        glob[G_VGEN] += 1
        vgen = np.int32(glob[G_VGEN])
        i0 = _grid_ix(min(qx, pax) - cdet, gx0, cdet, ng)
        i1 = _grid_ix(max(qx, pax) + cdet, gx0, cdet, ng)
        j0 = _grid_ix(min(qy, pay) - cdet, gy0, cdet, ng)
        j1 = _grid_ix(max(qy, pay) + cdet, gy0, cdet, ng)
        best_phi = math.inf
        best_k = math.inf
        for gi in range(i0, i1 + 1):
            for gj in range(j0, j1 + 1):
                cellidx = gj * ng + gi
                if hstamp[cellidx] != hgen:
                    continue
                eid = head[cellidx]
                while eid >= 0:
                    j = eid >> 2
                    if vstamp[j] == vgen:
                        eid = nxt[eid]
                        continue
                    vstamp[j] = vgen
                    # --- approach detector: old segment j <= k-2
                    if ic[IC_HAVTPHI] == 0 and j <= k - 2:
                        d2 = _pt_seg_d2(qx, qy, mx[j], my[j], mx[j + 1], my[j + 1])
                        if d2 <= a_dist * a_dist:
                            sjx = mvx[j]
                            sjy = mvy[j]
                            n1 = math.sqrt(sjx * sjx + sjy * sjy)
                            n2 = math.sqrt(pvx * pvx + pvy * pvy)
                            if n1 > 0.0 and n2 > 0.0 and \
                                    abs(sjx * pvx + sjy * pvy) / (n1 * n2) >= cosphi:
                                # a direction reversal must occur on [s, t]
                                rev = False
                                for u in range(j, k + 1):
                                    uu = pvx if u == k else mvx[u]
                                    vv = pvy if u == k else mvy[u]
                                    if sjx * uu + sjy * vv <= 0.0:
                                        rev = True
                                        break
                                if rev:
                                    # earliest point of the new segment within
                                    # distance a of segment j (macro-grid
                                    # resolution suffices; refine to a/100)
                                    tfound = ts
                                    for m in range(1, 257):
                                        f = m / 256.0
                                        sx_ = pax + f * (qx - pax)
                                        sy_ = pay + f * (qy - pay)
                                        if _pt_seg_d2(sx_, sy_, mx[j], my[j],
                                                      mx[j + 1], my[j + 1]) <= a_dist * a_dist:
                                            tfound = t0 + f * (ts - t0)
                                            break
                                    if tfound < best_phi:
                                        best_phi = tfound
                    # --- crossings and tube re-entry: non-adjacent j <= k-3
                    if j <= k - 3:
                        code, sprm = _seg_cross(pax, pay, qx, qy,
                                                mx[j], my[j], mx[j + 1], my[j + 1])
                        if code == 1:
                            tcross = t0 + sprm * (ts - t0)
                            ic[IC_NCROSS] += 1
                            _append_ev(ic, ev, want_ev, tcross, EV_CROSS, float(j),
                                       pax + sprm * (qx - pax),
                                       pay + sprm * (qy - pay), 0.0)
                            if ic[IC_NCROSS] == pi8[Q_KMAX] and math.isnan(fc[FC_TK]):
                                fc[FC_TK] = tcross
                                if pi8[Q_K_ON] == 1 and tcross < best_k:
                                    best_k = tcross
                        elif code == -1:
                            ic[IC_NCOLLIN] += 1
                        if ic[IC_NTUBE] == 0 and mt[j + 1] <= ts - wsh:
                            dmin2 = _pt_seg_d2(qx, qy, mx[j], my[j],
                                               mx[j + 1], my[j + 1])
                            d_ = _pt_seg_d2(pax, pay, mx[j], my[j],
                                            mx[j + 1], my[j + 1])
                            if d_ < dmin2:
                                dmin2 = d_
                            d_ = _pt_seg_d2(mx[j], my[j], pax, pay, qx, qy)
                            if d_ < dmin2:
                                dmin2 = d_
                            d_ = _pt_seg_d2(mx[j + 1], my[j + 1], pax, pay, qx, qy)
                            if d_ < dmin2:
                                dmin2 = d_
                            if code == 1:
                                dmin2 = 0.0
                            if dmin2 <= tube_r * tube_r:
                                ic[IC_NTUBE] = 1
                                tfound = ts
                                for m in range(1, 257):
                                    f = m / 256.0
                                    sx_ = pax + f * (qx - pax)
                                    sy_ = pay + f * (qy - pay)
                                    if _pt_seg_d2(sx_, sy_, mx[j], my[j],
                                                  mx[j + 1], my[j + 1]) <= tube_r * tube_r:
                                        tfound = t0 + f * (ts - t0)
                                        break
                                fc[FC_TTUBE] = tfound
                                _append_ev(ic, ev, want_ev, tfound, EV_TUBE,
                                           float(j), qx, qy, 0.0)
                    eid = nxt[eid]
        if best_phi < math.inf:
            ic[IC_HAVTPHI] = 1
            fc[FC_TPHI] = best_phi
            _append_ev(ic, ev, want_ev, best_phi, EV_TPHI, -1.0, qx, qy, 0.0)
            if pi8[Q_PHI_ON] == 1 and best_phi < stop_t:
                stop_t = best_phi
        if best_k < stop_t:
            stop_t = best_k

        # -- insert segment (k-1, k) into every grid cell its bbox overlaps
        i0 = _grid_ix(min(qx, pax), gx0, cdet, ng)
        i1 = _grid_ix(max(qx, pax), gx0, cdet, ng)
        j0 = _grid_ix(min(qy, pay), gy0, cdet, ng)
        j1 = _grid_ix(max(qy, pay), gy0, cdet, ng)
        segid = k - 1
        if (i1 - i0 + 1) * (j1 - j0 + 1) > 4:
            # segment longer than the sizing assumption (cdet >= 2 vmax mdt)
            ic[IC_ERR] = 4
            return ts
        slot = 0
        for gi in range(i0, i1 + 1):
            for gj in range(j0, j1 + 1):
                if slot == 4:
                    break
                cellidx = gj * ng + gi
                if hstamp[cellidx] != hgen:
                    hstamp[cellidx] = hgen
                    head[cellidx] = -1
                eid = segid * 4 + slot
                nxt[eid] = head[cellidx]
                head[cellidx] = eid
                slot += 1
            if slot == 4:
                break

    mt[k] = ts
    mx[k] = qx
    my[k] = qy
    mvx[k] = pvx
    mvy[k] = pvy
    ic[IC_MN] = k + 1
    return stop_t


# ---------------------------------------------------------------------------
# visited-obstacle map: open-addressing, generation-stamped (no clearing)

@njit(cache=True, inline="always")
def _vm_find(vm_key, vm_stamp, gen, key):
    """Linear-probe slot for `key`; the slot is occupied iff its stamp is
    current.  Capacity is a power of two."""
    mask = vm_key.shape[0] - 1
    idx = np.int64(_mix(_U(key)) & _U(mask))
    while vm_stamp[idx] == gen and vm_key[idx] != key:
        idx = (idx + 1) & mask
    return idx


@njit(cache=True, inline="always")
def _pot_sum(pid, pp, g0, eps, x, y, box, boy, nb):
    s = 0.0
    eps2 = eps * eps
    for i in range(nb):
        dx = x - box[i]
        dy = y - boy[i]
        d2 = dx * dx + dy * dy
        if d2 < eps2:
            s += g0 * _V(pid, pp, math.sqrt(d2) / eps)
    return s


# ---------------------------------------------------------------------------
# explicit-set tracer: dynamics through a finite obstacle list (no field,
# no detectors); used for single-obstacle scattering and small-cluster tests

@njit(cache=True)
def trace_cluster(pid, pp, g0, eps, cxs, cys, nc, x, y, vx, vy, tmax, h):
    """Integrate through the explicit supports B(c_i, eps).  Free flight
    between supports is exact (ray-circle).  Stops when no support lies ahead
    or t reaches tmax.

    Returns (x, y, vx, vy, t, angle, t_first_enter, t_last_exit, n_visits,
    emax, ok); ok=False means the time guard tripped (trapped orbit) or the
    root solve failed.
    """
    inb = np.zeros(nc, np.uint8)
    eps2 = eps * eps
    t = 0.0
    angle = 0.0
    tfe = math.nan
    tle = math.nan
    nvis = 0
    emax = 0.0
    h0 = 0.5 * (vx * vx + vy * vy)
    memn = 0
    # initial memberships (starting inside is allowed)
    for i in range(nc):
        dx = x - cxs[i]
        dy = y - cys[i]
        if dx * dx + dy * dy < eps2:
            inb[i] = 1
            memn += 1
            if math.isnan(tfe):
                tfe = 0.0
    if memn > 0:
        h0 = 0.5 * (vx * vx + vy * vy) + _pot_sum(pid, pp, g0, eps, x, y, cxs, cys, nc)
    fex = 0.0
    fey = 0.0
    havef = False
    while t < tmax:
        if memn == 0:
            speed2 = vx * vx + vy * vy
            best = math.inf
            bi = -1
            for i in range(nc):
                s = _ray_circle(x, y, vx, vy, cxs[i], cys[i], eps, speed2)
                if s < best:
                    best = s
                    bi = i
            if bi < 0 or t + best > tmax:
                return x, y, vx, vy, t, angle, tfe, tle, nvis, emax, True
            x += vx * best
            y += vy * best
            t += best
            dx = x - cxs[bi]
            dy = y - cys[bi]
            dn = math.sqrt(dx * dx + dy * dy)
            x = cxs[bi] + dx * (eps / dn)
            y = cys[bi] + dy * (eps / dn)
            inb[bi] = 1
            memn = 1
            if math.isnan(tfe):
                tfe = t
            h0 = 0.5 * (vx * vx + vy * vy) + _pot_sum(pid, pp, g0, eps, x, y, cxs, cys, nc)
            havef = False
        else:
            hc = h
            if t + hc > tmax:
                hc = tmax - t
            if hc <= 0.0:
                break
            x1, y1, vx1, vy1, fx1, fy1 = _comp_step(
                pid, pp, g0, eps, x, y, vx, vy, hc, cxs, cys, nc, fex, fey, havef)
            smin = math.inf
            jmin = -1
            for i in range(nc):
                dx = x1 - cxs[i]
                dy = y1 - cys[i]
                inside_end = dx * dx + dy * dy < eps2
                if inside_end != (inb[i] == 1):
                    s, okr = _cross_time(pid, pp, g0, eps, x, y, vx, vy,
                                         cxs, cys, nc, cxs[i], cys[i], hc,
                                         inb[i] == 1, fex, fey, havef)
                    if not okr:
                        return x, y, vx, vy, t, angle, tfe, tle, nvis, emax, False
                    if s < smin:
                        smin = s
                        jmin = i
            if jmin >= 0:
                x1, y1, vx1, vy1, fx1, fy1 = _comp_step(
                    pid, pp, g0, eps, x, y, vx, vy, smin, cxs, cys, nc,
                    fex, fey, havef)
                dt = smin
            else:
                dt = hc
            cross = vx * vy1 - vy * vx1
            dot = vx * vx1 + vy * vy1
            angle += math.atan2(cross, dot)
            x = x1
            y = y1
            vx = vx1
            vy = vy1
            fex = fx1
            fey = fy1
            havef = True
            t += dt
            if jmin >= 0:
                hnow = 0.5 * (vx * vx + vy * vy) + _pot_sum(
                    pid, pp, g0, eps, x, y, cxs, cys, nc)
                d = abs(hnow - h0)
                if d > emax:
                    emax = d
                if inb[jmin] == 1:
                    inb[jmin] = 0
                    memn -= 1
                    nvis += 1
                    tle = t
                else:
                    inb[jmin] = 1
                    memn += 1
                    if math.isnan(tfe):
                        tfe = t
    return x, y, vx, vy, t, angle, tfe, tle, nvis, emax, memn == 0


@njit(cache=True)
def deflection_single(pid, pp, g0, b, h, tmax):
    """Deflection angle through one unit-radius support at coupling g0.

    The incoming line is y = -b traversed at unit speed along +x (so positive
    b puts the scatterer on the particle's left).  Starts well outside the
    support; the free-flight root lands the entry on the boundary exactly.
    Returns (theta, t_inside, ok) where t_inside is entry-to-exit time and
    ok=False flags a (near-)trapped crossing that hit the time guard.
    """
    if b <= -1.0 or b >= 1.0:
        return 0.0, 0.0, True
    cx = np.zeros(1, np.float64)
    cy = np.zeros(1, np.float64)
    x, y, vx, vy, t, ang, tfe, tle, nvis, emax, ok = trace_cluster(
        pid, pp, g0, 1.0, cx, cy, 1, -2.0, -b, 1.0, 0.0, tmax, h)
    if not ok:
        return ang, math.nan, False
    if nvis == 0:
        return 0.0, 0.0, True  # grazing miss at |b| ~ 1
    return ang, tle - tfe, True


@njit(cache=True)
def build_theta_table(pid, pp, g0, bs, h, tmax):
    """Deflection angle and crossing time on a grid of impact parameters."""
    n = bs.shape[0]
    th = np.empty(n, np.float64)
    tau = np.empty(n, np.float64)
    ok = np.ones(n, np.uint8)
    for i in range(n):
        a, s, o = deflection_single(pid, pp, g0, bs[i], h, tmax)
        th[i] = a
        tau[i] = s
        if not o:
            ok[i] = 0
    return th, tau, ok


# ---------------------------------------------------------------------------
# event bookkeeping helpers for the field tracer

@njit(cache=True)
def _rec_row(ic, rec, record, t, x, y, vx, vy, kind):
    if record != 1:
        return
    r = ic[IC_RECN]
    if r >= rec.shape[0]:
        ic[IC_ERR] = 8
        return
    rec[r, 0] = t
    rec[r, 1] = x
    rec[r, 2] = y
    rec[r, 3] = vx
    rec[r, 4] = vy
    rec[r, 5] = kind
    ic[IC_RECN] = r + 1


@njit(cache=True)
def _do_enter(ic, fc, glob, mgen, mem_key, mem_cx, mem_cy, mem_t0,
              mem_vx, mem_vy, exc_keys, vm_key, vm_exit, vm_exc, vm_stamp,
              ev, rec, want_ev, record, gap,
              key, ocx, ocy, t1, x, y, vx, vy, angle, hnow):
    """Particle crossed into support `key` at time t1 (state already on the
    boundary).  Opens the excursion if membership was empty."""
    memn = ic[IC_MEMN]
    if memn >= MEM_CAP:
        ic[IC_ERR] = 6
        return
    if memn == 0:
        ic[IC_EXCID] += 1
        fc[FC_EXC_T0] = t1
        fc[FC_EXC_A0] = angle
        ic[IC_EXC_D] = 0
        fc[FC_H0] = hnow
    else:
        d = abs(hnow - fc[FC_H0])
        if d > fc[FC_EMAX]:
            fc[FC_EMAX] = d
    mem_key[memn] = key
    mem_cx[memn] = ocx
    mem_cy[memn] = ocy
    mem_t0[memn] = t1
    mem_vx[memn] = vx
    mem_vy[memn] = vy
    ic[IC_MEMN] = memn + 1
    if memn + 1 > ic[IC_MAXCL]:
        ic[IC_MAXCL] = memn + 1
    ic[IC_NENTER] += 1
    # distinct obstacles this excursion (saturating count: 0..4, where 4
    # just means "more than 3"; only the value 2 is ever used)
    d = ic[IC_EXC_D]
    if d < 4:
        seen = False
        lim = d if d < 3 else 3
        for i in range(lim):
            if exc_keys[i] == key:
                seen = True
                break
        if not seen:
            if d < 3:
                exc_keys[d] = key
            ic[IC_EXC_D] = d + 1
    # obstacle revisit: visited in an earlier excursion, or in this one but
    # exited longer than `gap` ago
    slot = _vm_find(vm_key, vm_stamp, mgen, key)
    if vm_stamp[slot] == mgen:
        if vm_exc[slot] != float(ic[IC_EXCID]) or (t1 - vm_exit[slot]) > gap:
            ic[IC_NRECOLL] += 1
            if math.isnan(fc[FC_TREC]):
                fc[FC_TREC] = t1
            _append_ev(ic, ev, want_ev, t1, EV_RECOLL, float(key), x, y, 0.0)
    _append_ev(ic, ev, want_ev, t1, EV_ENTER, float(key), ocx, ocy, 0.0)
    _rec_row(ic, rec, record, t1, x, y, vx, vy, RK_EVENT)


@njit(cache=True)
def _do_exit(ic, fc, glob, mgen, mem_key, mem_cx, mem_cy, mem_t0,
             mem_vx, mem_vy, vm_key, vm_exit, vm_exc, vm_stamp,
             ctl_dur, ctl_dv, dbl_ang, ev, rec, want_ev, want_ctl, record,
             key, t1, x, y, vx, vy, angle, hnow):
    """Particle crossed out of support `key` at time t1.  Closes the visit
    (and the excursion, when membership empties)."""
    memn = ic[IC_MEMN]
    slot = -1
    for i in range(memn):
        if mem_key[i] == key:
            slot = i
            break
    if slot < 0:
        ic[IC_ERR] = 6
        return
    ocx = mem_cx[slot]
    ocy = mem_cy[slot]
    dur = t1 - mem_t0[slot]
    dvx = vx - mem_vx[slot]
    dvy = vy - mem_vy[slot]
    dv = math.sqrt(dvx * dvx + dvy * dvy)
    if want_ctl == 1:
        n = glob[G_CTLN]
        if n < ctl_dur.shape[0]:
            ctl_dur[n] = dur
            ctl_dv[n] = dv
            glob[G_CTLN] = n + 1
        else:
            glob[G_CTLOVF] = 1
    vs = _vm_find(vm_key, vm_stamp, mgen, key)
    if vm_stamp[vs] != mgen:
        vm_stamp[vs] = mgen
        vm_key[vs] = key
        ic[IC_VMN] += 1
        if ic[IC_VMN] * 4 > vm_key.shape[0] * 3:
            ic[IC_ERR] = 7
    vm_exit[vs] = t1
    vm_exc[vs] = float(ic[IC_EXCID])
    last = memn - 1
    mem_key[slot] = mem_key[last]
    mem_cx[slot] = mem_cx[last]
    mem_cy[slot] = mem_cy[last]
    mem_t0[slot] = mem_t0[last]
    mem_vx[slot] = mem_vx[last]
    mem_vy[slot] = mem_vy[last]
    ic[IC_MEMN] = last
    ic[IC_NVIS] += 1
    d = abs(hnow - fc[FC_H0])
    if d > fc[FC_EMAX]:
        fc[FC_EMAX] = d
    _append_ev(ic, ev, want_ev, t1, EV_EXIT, float(key), ocx, ocy, 0.0)
    _rec_row(ic, rec, record, t1, x, y, vx, vy, RK_EVENT)
    if last == 0:
        ic[IC_NEXC] += 1
        if ic[IC_EXC_D] == 2:
            ic[IC_NDBL] += 1
            dang = angle - fc[FC_EXC_A0]
            fc[FC_DBLSUM] += dang
            if want_ctl == 1:
                n = glob[G_DBLN]
                if n < dbl_ang.shape[0]:
                    dbl_ang[n] = dang
                    glob[G_DBLN] = n + 1
                else:
                    glob[G_DBLOVF] = 1


@njit(cache=True, inline="always")
def _remap_blk_in(ic, blk_in, bokey, nb, mem_key):
    """Recompute per-block membership flags by matching obstacle keys after a
    block rebuild.  Every current member must be present in the new block."""
    memn = ic[IC_MEMN]
    found = 0
    for i in range(nb):
        blk_in[i] = 0
        for m in range(memn):
            if mem_key[m] == bokey[i]:
                blk_in[i] = 1
                found += 1
                break
    if found != memn:
        ic[IC_ERR] = 6


# ---------------------------------------------------------------------------
# the field tracer

@njit(cache=True)
def _trace(seedu, pf8, pi8, tq, oq, ic, fc, glob,
           box, boy, bokey, blk_in, sox, soy,
           mem_key, mem_cx, mem_cy, mem_t0, mem_vx, mem_vy, exc_keys,
           vm_key, vm_exit, vm_exc, vm_stamp,
           mt, mx, my, mvx, mvy, mang,
           head, hstamp, nxt, vstamp,
           ctl_dur, ctl_dv, dbl_ang, rec, ev):
    eps = pf8[P_EPS]
    g0 = pf8[P_G0]
    mu = pf8[P_MU]
    cell = pf8[P_CELL]
    T = pf8[P_T]
    h = pf8[P_H]
    mdt = pf8[P_MDT]
    vlo2 = pf8[P_VLO2]
    vhi2 = pf8[P_VHI2]
    gap = pf8[P_GAP]
    supv = pf8[P_SUPV]
    pp = pf8[P_PP]
    pid = pi8[Q_PID]
    nq = pi8[Q_NQ]
    record = pi8[Q_RECORD]
    want_ev = pi8[Q_WANT_EV]
    want_ctl = pi8[Q_WANT_CTL]
    v_on = pi8[Q_V_ON]
    maxst = pi8[Q_MAXST]
    eps2 = eps * eps

    for i in range(IC_N):
        ic[i] = 0
    for i in range(FC_N):
        fc[i] = 0.0
    fc[FC_TPHI] = math.nan
    fc[FC_TK] = math.nan
    fc[FC_TV] = math.nan
    fc[FC_TREC] = math.nan
    fc[FC_TTUBE] = math.nan
    fc[FC_TAU] = math.nan

    # fresh generations; reset stamped arrays long before int32 wraparound
    if glob[G_HGEN] > 2000000000 or glob[G_VGEN] > 2000000000:
        for i in range(hstamp.shape[0]):
            hstamp[i] = -1
            head[i] = -1
        for i in range(vstamp.shape[0]):
            vstamp[i] = -1
        glob[G_HGEN] = 0
        glob[G_VGEN] = 0
    if glob[G_MGEN] > 2000000000:
        for i in range(vm_stamp.shape[0]):
            vm_stamp[i] = -1
        glob[G_MGEN] = 0
    glob[G_HGEN] += 1
    glob[G_MGEN] += 1
    mgen = np.int32(glob[G_MGEN])

    x = pf8[P_X0]
    y = pf8[P_Y0]
    vx = pf8[P_VX0]
    vy = pf8[P_VY0]
    t = 0.0
    angle = math.atan2(vy, vx)
    speed0_2 = vx * vx + vy * vy
    fc[FC_MINV2] = speed0_2
    fc[FC_MAXV2] = speed0_2
    stopped = False

    _emit_sample(0.0, x, y, vx, vy, pf8, pi8, ic, fc, glob,
                 mt, mx, my, mvx, mvy, head, hstamp, nxt, vstamp, ev)
    mang[0] = angle
    _rec_row(ic, rec, record, 0.0, x, y, vx, vy, RK_MACRO)
    while ic[IC_QP] < nq and tq[ic[IC_QP]] <= 0.0:
        q = ic[IC_QP]
        oq[q, 0] = x
        oq[q, 1] = y
        oq[q, 2] = vx
        oq[q, 3] = vy
        oq[q, 4] = angle
        ic[IC_QP] = q + 1

    bi = np.int64(math.floor(x / cell))
    bj = np.int64(math.floor(y / cell))
    nb = _build_block(seedu, mu, cell, bi, bj, box, boy, bokey)
    if nb < 0:
        ic[IC_ERR] = 1
        nb = 0
        stopped = True
    for i in range(nb):
        blk_in[i] = 0
    fex = 0.0
    fey = 0.0
    havef = False

    # the start point may already sit inside supports
    if not stopped:
        for i in range(nb):
            dx = x - box[i]
            dy = y - boy[i]
            if dx * dx + dy * dy < eps2:
                hnow = 0.5 * speed0_2 + _pot_sum(pid, pp, g0, eps, x, y, box, boy, nb)
                _do_enter(ic, fc, glob, mgen, mem_key, mem_cx, mem_cy, mem_t0,
                          mem_vx, mem_vy, exc_keys, vm_key, vm_exit, vm_exc,
                          vm_stamp, ev, rec, want_ev, record, gap,
                          bokey[i], box[i], boy[i], 0.0, x, y, vx, vy, angle, hnow)
                blk_in[i] = 1

    while not stopped and t < T and ic[IC_ERR] == 0:
        if ic[IC_MEMN] == 0:
            # ---------------- free flight ----------------
            smax = T - t
            thit, hkey, hcx, hcy = flight_first_hit(
                seedu, mu, cell, eps, x, y, vx, vy, smax, sox, soy)
            if hkey == -2:
                ic[IC_ERR] = 1
                break
            if hkey == -3:
                ic[IC_ERR] = 4
                break
            hit = hkey >= 0
            t_end = t + (thit if hit else smax)
            x0f = x
            y0f = y
            t0f = t
            while True:
                tqn = tq[ic[IC_QP]] if ic[IC_QP] < nq else math.inf
                ms = float(ic[IC_MN]) * mdt
                if tqn <= t_end and tqn <= ms:
                    q = ic[IC_QP]
                    dtq = tqn - t0f
                    oq[q, 0] = x0f + vx * dtq
                    oq[q, 1] = y0f + vy * dtq
                    oq[q, 2] = vx
                    oq[q, 3] = vy
                    oq[q, 4] = angle
                    ic[IC_QP] = q + 1
                    continue
                if ms <= t_end:
                    sx_ = x0f + vx * (ms - t0f)
                    sy_ = y0f + vy * (ms - t0f)
                    stp = _emit_sample(ms, sx_, sy_, vx, vy, pf8, pi8, ic, fc,
                                       glob, mt, mx, my, mvx, mvy,
                                       head, hstamp, nxt, vstamp, ev)
                    mang[ic[IC_MN] - 1] = angle
                    _rec_row(ic, rec, record, ms, sx_, sy_, vx, vy, RK_MACRO)
                    if ic[IC_ERR] != 0:
                        x = sx_
                        y = sy_
                        t = ms
                        stopped = True
                        break
                    if stp < math.inf:
                        x = x0f + vx * (stp - t0f)
                        y = y0f + vy * (stp - t0f)
                        t = stp
                        stopped = True
                        if (not math.isnan(fc[FC_TPHI])) and fc[FC_TPHI] == stp:
                            ic[IC_STOPKIND] = 3
                        elif (not math.isnan(fc[FC_TK])) and fc[FC_TK] == stp:
                            ic[IC_STOPKIND] = 4
                        while ic[IC_QP] > 0 and tq[ic[IC_QP] - 1] > stp:
                            ic[IC_QP] -= 1
                        break
                    continue
                break
            if stopped:
                break
            x = x0f + vx * (t_end - t0f)
            y = y0f + vy * (t_end - t0f)
            t = t_end
            if hit:
                dx = x - hcx
                dy = y - hcy
                dn = math.sqrt(dx * dx + dy * dy)
                x = hcx + dx * (eps / dn)
                y = hcy + dy * (eps / dn)
                bi = np.int64(math.floor(x / cell))
                bj = np.int64(math.floor(y / cell))
                nb = _build_block(seedu, mu, cell, bi, bj, box, boy, bokey)
                if nb < 0:
                    ic[IC_ERR] = 1
                    break
                _remap_blk_in(ic, blk_in, bokey, nb, mem_key)
                hnow = 0.5 * (vx * vx + vy * vy) + _pot_sum(
                    pid, pp, g0, eps, x, y, box, boy, nb)
                _do_enter(ic, fc, glob, mgen, mem_key, mem_cx, mem_cy, mem_t0,
                          mem_vx, mem_vy, exc_keys, vm_key, vm_exit, vm_exc,
                          vm_stamp, ev, rec, want_ev, record, gap,
                          hkey, hcx, hcy, t, x, y, vx, vy, angle, hnow)
                for i in range(nb):
                    if bokey[i] == hkey:
                        blk_in[i] = 1
                        break
                havef = False
        else:
            # ---------------- stepping inside supports ----------------
            nbi = np.int64(math.floor(x / cell))
            nbj = np.int64(math.floor(y / cell))
            if nbi != bi or nbj != bj:
                bi = nbi
                bj = nbj
                nb = _build_block(seedu, mu, cell, bi, bj, box, boy, bokey)
                if nb < 0:
                    ic[IC_ERR] = 1
                    break
                _remap_blk_in(ic, blk_in, bokey, nb, mem_key)
                if ic[IC_ERR] != 0:
                    break
                havef = False
            hc = h
            if t + hc > T:
                hc = T - t
            if hc < 1e-18:
                t = T
                break
            x1, y1, vx1, vy1, fx1, fy1 = _comp_step(
                pid, pp, g0, eps, x, y, vx, vy, hc, box, boy, nb, fex, fey, havef)
            smin = math.inf
            jmin = -1
            for i in range(nb):
                dx = x1 - box[i]
                dy = y1 - boy[i]
                inside_end = dx * dx + dy * dy < eps2
                if inside_end != (blk_in[i] == 1):
                    s, okr = _cross_time(pid, pp, g0, eps, x, y, vx, vy,
                                         box, boy, nb, box[i], boy[i], hc,
                                         blk_in[i] == 1, fex, fey, havef)
                    if not okr:
                        ic[IC_ERR] = 5
                        break
                    if s < smin:
                        smin = s
                        jmin = i
            if ic[IC_ERR] != 0:
                break
            if jmin >= 0:
                x1, y1, vx1, vy1, fx1, fy1 = _comp_step(
                    pid, pp, g0, eps, x, y, vx, vy, smin, box, boy, nb,
                    fex, fey, havef)
                dt = smin
                ic[IC_NSPLIT] += 1
            else:
                dt = hc
            t1 = t + dt
            crossp = vx * vy1 - vy * vx1
            dotp = vx * vx1 + vy * vy1
            delta = math.atan2(crossp, dotp)
            # fixed-time queries inside this sub-step (linear interpolation)
            while ic[IC_QP] < nq and tq[ic[IC_QP]] <= t1:
                q = ic[IC_QP]
                f = (tq[q] - t) / dt if dt > 0.0 else 1.0
                if f < 0.0:
                    f = 0.0
                elif f > 1.0:
                    f = 1.0
                oq[q, 0] = x + (x1 - x) * f
                oq[q, 1] = y + (y1 - y) * f
                oq[q, 2] = vx + (vx1 - vx) * f
                oq[q, 3] = vy + (vy1 - vy) * f
                oq[q, 4] = angle + delta * f
                ic[IC_QP] = q + 1
            # macro samples inside this sub-step
            while True:
                ms = float(ic[IC_MN]) * mdt
                if ms > t1:
                    break
                f = (ms - t) / dt if dt > 0.0 else 1.0
                if f < 0.0:
                    f = 0.0
                elif f > 1.0:
                    f = 1.0
                sx_ = x + (x1 - x) * f
                sy_ = y + (y1 - y) * f
                svx = vx + (vx1 - vx) * f
                svy = vy + (vy1 - vy) * f
                stp = _emit_sample(ms, sx_, sy_, svx, svy, pf8, pi8, ic, fc,
                                   glob, mt, mx, my, mvx, mvy,
                                   head, hstamp, nxt, vstamp, ev)
                mang[ic[IC_MN] - 1] = angle + delta * f
                _rec_row(ic, rec, record, ms, sx_, sy_, svx, svy, RK_MACRO)
                if ic[IC_ERR] != 0:
                    x = sx_
                    y = sy_
                    vx = svx
                    vy = svy
                    t = ms
                    stopped = True
                    break
                if stp < math.inf:
                    # truncate on the macro polyline segment that triggered
                    k = ic[IC_MN] - 1
                    tlo = mt[k - 1]
                    thi = mt[k]
                    ff = (stp - tlo) / (thi - tlo) if thi > tlo else 1.0
                    if ff < 0.0:
                        ff = 0.0
                    elif ff > 1.0:
                        ff = 1.0
                    x = mx[k - 1] + (mx[k] - mx[k - 1]) * ff
                    y = my[k - 1] + (my[k] - my[k - 1]) * ff
                    vx = mvx[k - 1] + (mvx[k] - mvx[k - 1]) * ff
                    vy = mvy[k - 1] + (mvy[k] - mvy[k - 1]) * ff
                    angle = mang[k - 1] + (mang[k] - mang[k - 1]) * ff
                    t = stp
                    stopped = True
                    if (not math.isnan(fc[FC_TPHI])) and fc[FC_TPHI] == stp:
                        ic[IC_STOPKIND] = 3
                    elif (not math.isnan(fc[FC_TK])) and fc[FC_TK] == stp:
                        ic[IC_STOPKIND] = 4
                    while ic[IC_QP] > 0 and tq[ic[IC_QP] - 1] > stp:
                        ic[IC_QP] -= 1
                    break
            if stopped:
                break
            # speed band
            v2 = vx1 * vx1 + vy1 * vy1
            if v2 < vlo2 or v2 > vhi2:
                if math.isnan(fc[FC_TV]):
                    fc[FC_TV] = t1
                if v_on == 1:
                    x = x1
                    y = y1
                    vx = vx1
                    vy = vy1
                    angle += delta
                    t = t1
                    ic[IC_STOPKIND] = 5
                    stopped = True
                    break
            # commit
            x = x1
            y = y1
            vx = vx1
            vy = vy1
            angle += delta
            t = t1
            fex = fx1
            fey = fy1
            havef = True
            if not (math.isfinite(x) and math.isfinite(y) and
                    math.isfinite(vx) and math.isfinite(vy)):
                ic[IC_ERR] = 9
                break
            if v2 < fc[FC_MINV2]:
                fc[FC_MINV2] = v2
            if v2 > fc[FC_MAXV2]:
                fc[FC_MAXV2] = v2
            if v2 > speed0_2 + 2.0 * g0 * ic[IC_MEMN] * supv + 1e-9:
                ic[IC_SPDVIO] += 1
            ic[IC_NSTEP] += 1
            if ic[IC_NSTEP] > maxst:
                ic[IC_ERR] = 10
                break
            if jmin >= 0:
                hnow = 0.5 * v2 + _pot_sum(pid, pp, g0, eps, x, y, box, boy, nb)
                if blk_in[jmin] == 1:
                    _do_exit(ic, fc, glob, mgen, mem_key, mem_cx, mem_cy,
                             mem_t0, mem_vx, mem_vy, vm_key, vm_exit, vm_exc,
                             vm_stamp, ctl_dur, ctl_dv, dbl_ang, ev, rec,
                             want_ev, want_ctl, record,
                             bokey[jmin], t, x, y, vx, vy, angle, hnow)
                    blk_in[jmin] = 0
                else:
                    _do_enter(ic, fc, glob, mgen, mem_key, mem_cx, mem_cy,
                              mem_t0, mem_vx, mem_vy, exc_keys, vm_key,
                              vm_exit, vm_exc, vm_stamp, ev, rec, want_ev,
                              record, gap, bokey[jmin], box[jmin], boy[jmin],
                              t, x, y, vx, vy, angle, hnow)
                    blk_in[jmin] = 1

    fc[FC_STOPT] = t if t < T else T
    fc[FC_ANGLE] = angle
    tau = math.inf
    if not math.isnan(fc[FC_TPHI]) and fc[FC_TPHI] < tau:
        tau = fc[FC_TPHI]
    if not math.isnan(fc[FC_TK]) and fc[FC_TK] < tau:
        tau = fc[FC_TK]
    if not math.isnan(fc[FC_TV]) and fc[FC_TV] < tau:
        tau = fc[FC_TV]
    if tau < math.inf:
        fc[FC_TAU] = tau
    for q in range(ic[IC_QP], nq):
        oq[q, 0] = math.nan
        oq[q, 1] = math.nan
        oq[q, 2] = math.nan
        oq[q, 3] = math.nan
        oq[q, 4] = math.nan
    _rec_row(ic, rec, record, fc[FC_STOPT], x, y, vx, vy, RK_END)


OUT_W = FC_N + IC_N  # summary row width: fc slots then ic slots


@njit(cache=True)
def run_ensemble(master, i0, i1, pf8, pi8, tq, out_sum, out_q,
                 oq, ic, fc, glob,
                 box, boy, bokey, blk_in, sox, soy,
                 mem_key, mem_cx, mem_cy, mem_t0, mem_vx, mem_vy, exc_keys,
                 vm_key, vm_exit, vm_exc, vm_stamp,
                 mt, mx, my, mvx, mvy, mang,
                 head, hstamp, nxt, vstamp,
                 ctl_dur, ctl_dv, dbl_ang, rec, ev):
    """Trace trajectories i0..i1-1 (seed = hash(master, i)) and write one
    summary row + query-time rows per trajectory."""
    nq = pi8[Q_NQ]
    for i in range(i0, i1):
        seedu = derive_seed(master, i)
        _trace(seedu, pf8, pi8, tq, oq, ic, fc, glob,
               box, boy, bokey, blk_in, sox, soy,
               mem_key, mem_cx, mem_cy, mem_t0, mem_vx, mem_vy, exc_keys,
               vm_key, vm_exit, vm_exc, vm_stamp,
               mt, mx, my, mvx, mvy, mang,
               head, hstamp, nxt, vstamp,
               ctl_dur, ctl_dv, dbl_ang, rec, ev)
        r = i - i0
        for j in range(FC_N):
            out_sum[r, j] = fc[j]
        for j in range(IC_N):
            out_sum[r, FC_N + j] = float(ic[j])
        for qq in range(nq):
            for c in range(5):
                out_q[r, qq, c] = oq[qq, c]
