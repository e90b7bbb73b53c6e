"""Box counting, upper box dimension and the lattice-built cutoff family.

The cutoff ``phi_delta`` is the ratio of two bump sums over the lattice
``delta Z^d``: the numerator keeps lattice points within ``3 delta sqrt(d)``
of the compact set, the denominator keeps all of them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

ENUMERATION_BUDGET = 20_000_000
# slack for closed-inequality tests done in floating point
TIE_TOL = 1e-12


# --- compact sets ---------------------------------------------------------

def cantor_intervals(depth: int, length: float = 1.0) -> np.ndarray:
    """The 2**depth closed intervals of the middle-thirds construction on [0, length]."""
    iv = np.array([[0.0, 1.0]])
    for _ in range(depth):
        w = (iv[:, 1] - iv[:, 0]) / 3
        iv = np.concatenate([np.stack([iv[:, 0], iv[:, 0] + w], 1),
                             np.stack([iv[:, 1] - w, iv[:, 1]], 1)])
        iv = iv[np.argsort(iv[:, 0])]
    return iv * length


@dataclass(frozen=True, eq=False)
class CompactSet:
    """Finite point set, straight segment, or Cantor iterate laid along one axis."""

    kind: str
    points: np.ndarray = None  # finite-points: (N, d); segment: (2, d) endpoints
    origin: np.ndarray = None  # cantor: left end of the construction
    axis: int = 0
    depth: int = 0
    length: float = 1.0
    _intervals: np.ndarray = field(default=None, repr=False)

    @classmethod
    def finite(cls, points) -> "CompactSet":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if len(pts) == 0:
            raise ValueError("a compact set must be nonempty")
        return cls("finite-points", points=pts)

    @classmethod
    def segment(cls, a, b) -> "CompactSet":
        return cls("segment", points=np.array([a, b], dtype=float))

    @classmethod
    def cantor(cls, depth: int, origin, axis: int = 0, length: float = 1.0) -> "CompactSet":
        origin = np.asarray(origin, dtype=float)
        return cls("cantor-iterate", origin=origin, axis=axis, depth=int(depth), length=float(length),
                   _intervals=cantor_intervals(int(depth), float(length)) + origin[axis])

    def __post_init__(self):
        if self.kind not in ("finite-points", "segment", "cantor-iterate"):
            raise ValueError(f"unknown compact set kind {self.kind!r}")
        data = self.origin if self.kind == "cantor-iterate" else self.points
        if data is None or not np.all(np.isfinite(data)):
            raise ValueError("compact set data must be finite")

    @property
    def dim(self) -> int:
        return len(self.origin) if self.kind == "cantor-iterate" else self.points.shape[1]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "cantor-iterate":
            lo = self.origin.copy()
            hi = self.origin.copy()
            hi[self.axis] += self.length
            return lo, hi
        return self.points.min(axis=0), self.points.max(axis=0)

    def dist(self, x) -> np.ndarray:
        """Euclidean distance from points ``x`` (shape ``(..., d)``) to the set."""
        x = np.asarray(x, dtype=float)
        if self.kind == "finite-points":
            out = np.full(x.shape[:-1], np.inf)
            for p in self.points:
                out = np.minimum(out, np.sqrt(((x - p) ** 2).sum(axis=-1)))
            return out
        if self.kind == "segment":
            a, b = self.points
            v = b - a
            vv = float(v @ v)
            t = np.zeros(x.shape[:-1]) if vv == 0 else np.clip(((x - a) @ v) / vv, 0.0, 1.0)
            return np.sqrt(((x - a - t[..., None] * v) ** 2).sum(axis=-1))
        ax = self.axis
        iv = self._intervals
        s = x[..., ax]
        j = np.clip(np.searchsorted(iv[:, 0], s, side="right") - 1, 0, len(iv) - 1)
        along = np.maximum.reduce([iv[j, 0] - s, s - iv[j, 1], np.zeros_like(s)])
        # the interval to the right may be closer
        jr = np.minimum(j + 1, len(iv) - 1)
        along = np.minimum(along, np.maximum(iv[jr, 0] - s, 0.0) + np.maximum(s - iv[jr, 1], 0.0))
        trans = np.delete(x - self.origin, ax, axis=-1)
        return np.sqrt(along ** 2 + (trans ** 2).sum(axis=-1))


# --- box counting ---------------------------------------------------------

def _axis_range(lo: float, hi: float, delta: float) -> tuple[int, int]:
    """Integers k with lo - delta/2 <= k delta <= hi + delta/2 (inclusive ties)."""
    return (math.ceil((lo - delta / 2) / delta - TIE_TOL),
            math.floor((hi + delta / 2) / delta + TIE_TOL))


def _count_ranges(ranges: list[tuple[int, int]]) -> int:
    total, end = 0, None
    for a, b in sorted(ranges):
        if end is not None and a <= end:
            a = end + 1
        if b >= a:
            total += b - a + 1
            end = b if end is None else max(end, b)
    return total


def box_count(K: CompactSet, delta: float) -> int:
    """|Z_delta(K)|: lattice points of delta Z^d within delta/2 (sup norm) of K."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    d = K.dim
    if K.kind == "finite-points":
        boxes = set()
        for p in K.points:
            rng = [_axis_range(v, v, delta) for v in p]
            size = math.prod(b - a + 1 for a, b in rng)
            if len(boxes) + size > ENUMERATION_BUDGET:
                raise OverflowError("box count exceeds the enumeration budget")
            grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in rng], indexing="ij")
            boxes.update(zip(*[g.ravel().tolist() for g in grids]))
        return len(boxes)
    if K.kind == "cantor-iterate":
        ax = K.axis
        along = [_axis_range(lo, hi, delta) for lo, hi in K._intervals]
        n = _count_ranges(along)
        for a in range(d):
            if a != ax:
                lo, hi = _axis_range(K.origin[a], K.origin[a], delta)
                n *= max(hi - lo + 1, 0)
        if n > ENUMERATION_BUDGET:
            raise OverflowError("box count exceeds the enumeration budget")
        return int(n)
    # segment: b is counted iff some t in [0, 1] puts a + t v in the closed sup-ball around b
    a, b = K.points
    v = b - a
    lo, hi = K.bounds()
    rng = [_axis_range(l, h, delta) for l, h in zip(lo, hi)]
    size = math.prod(q - p + 1 for p, q in rng)
    if size > ENUMERATION_BUDGET:
        raise OverflowError("box count exceeds the enumeration budget")
    grids = np.meshgrid(*[np.arange(p, q + 1) for p, q in rng], indexing="ij")
    B = np.stack([g.ravel() for g in grids], axis=1) * delta
    t_lo = np.zeros(len(B))
    t_hi = np.ones(len(B))
    ok = np.ones(len(B), dtype=bool)
    half = delta / 2 * (1 + TIE_TOL)
    for k in range(d):
        if v[k] == 0:
            ok &= np.abs(a[k] - B[:, k]) <= half
            continue
        t1 = (B[:, k] - half - a[k]) / v[k]
        t2 = (B[:, k] + half - a[k]) / v[k]
        t_lo = np.maximum(t_lo, np.minimum(t1, t2))
        t_hi = np.minimum(t_hi, np.maximum(t1, t2))
    return int((ok & (t_lo <= t_hi + TIE_TOL)).sum())


def dyadic_schedule(k_min: int, k_max: int) -> list[float]:
    return [2.0 ** -k for k in range(k_min, k_max + 1)]


@dataclass
class DimensionEstimate:
    estimate: float
    deltas: list[float]
    counts: list[int]
    ratios: list[float]
    fit_scales: int

    def rows(self):
        return [(dl, n, r) for dl, n, r in zip(self.deltas, self.counts, self.ratios)]


def upper_box_dim(K: CompactSet, schedule) -> DimensionEstimate:
    """Slope of log2 |Z_delta| against log2 (1/delta) over the finest half of a dyadic schedule."""
    deltas = sorted((float(s) for s in schedule), reverse=True)
    if len(deltas) < 4:
        raise ValueError("need at least four dyadic scales")
    for dl in deltas:
        k = -math.log2(dl)
        if abs(k - round(k)) > 1e-12 or k <= 0:
            raise ValueError(f"scale {dl} is not of the form 2^-k with k >= 1")
    counts = [box_count(K, dl) for dl in deltas]
    logs = np.log2(1 / np.array(deltas))
    ratios = list(np.log2(counts) / logs)
    m = (len(deltas) + 1) // 2
    slope = np.polyfit(logs[-m:], np.log2(counts[-m:]), 1)[0]
    return DimensionEstimate(float(slope), deltas, counts, [float(r) for r in ratios], m)


@dataclass
class DimCondition:
    threshold: float
    admissible: bool
    reasons: list[str]


def dim_condition(estimate: float, d: int, r: float) -> DimCondition:
    """Admissibility of a degeneracy set of the given dimension for (d, r)."""
    threshold = d - 2 * r / (r - 1) if r != 1 else -math.inf
    reasons = []
    if d < 3:
        reasons.append("d < 3")
    if r < 2:
        reasons.append("r < 2")
    if d > 2 and not r > d / (d - 2):
        reasons.append("r <= d/(d-2)")
    if not estimate < threshold:
        reasons.append(f"dim {estimate:.4g} >= {threshold:.4g}")
    return DimCondition(threshold, not reasons, reasons)


# --- cutoff family --------------------------------------------------------

def transition(s):
    """C^2 profile: 1 on [0, 1], quintic smoothstep down to 0 on [1, 2], 0 beyond."""
    t = np.clip(np.asarray(s, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - t ** 3 * (10 - 15 * t + 6 * t ** 2)


@numba.njit(cache=True, inline="always")
def _profile(r):
    if r <= 1.0:
        return 1.0, 0.0, 0.0
    if r >= 2.0:
        return 0.0, 0.0, 0.0
    t = r - 1.0
    return (1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t),
            -30.0 * t * t * (1.0 - t) ** 2,
            -60.0 * t * (1.0 - t) * (1.0 - 2.0 * t))


@numba.njit(cache=True)
def _cutoff_kernel(X, delta, offsets, active, lo, ashape, astrides, derivs,
                   val, grad, hess, den_out, nnz):
    n, d = X.shape
    scale = delta * math.sqrt(d)
    base = np.empty(d, dtype=np.int64)
    diff = np.empty(d)
    gN = np.empty(d)
    gD = np.empty(d)
    hN = np.empty((d, d))
    hD = np.empty((d, d))
    for i in range(n):
        for a in range(d):
            base[a] = math.floor(X[i, a] / delta)
        num = 0.0
        den = 0.0
        cnt = 0
        if derivs:
            gN[:] = 0.0
            gD[:] = 0.0
            hN[:, :] = 0.0
            hD[:, :] = 0.0
        for k in range(offsets.shape[0]):
            r2 = 0.0
            for a in range(d):
                diff[a] = X[i, a] - (base[a] + offsets[k, a]) * delta
                r2 += diff[a] * diff[a]
            dist = math.sqrt(r2)
            r = dist / scale
            if r >= 2.0:
                continue
            e, e1, e2 = _profile(r)
            if e == 0.0:
                continue
            cnt += 1
            flat = 0
            on = True
            for a in range(d):
                q = base[a] + offsets[k, a] - lo[a]
                if q < 0 or q >= ashape[a]:
                    on = False
                    break
                flat += q * astrides[a]
            on = on and active[flat]
            den += e
            if on:
                num += e
            if derivs and e1 != 0.0:
                # grad e(|x-z|/s) = e1 u / s, hess = e2 u u^T / s^2 + e1 (I - u u^T) / (s |x-z|)
                for a in range(d):
                    ga = e1 * diff[a] / (dist * scale)
                    gD[a] += ga
                    if on:
                        gN[a] += ga
                    for b in range(d):
                        uu = diff[a] * diff[b] / r2
                        hab = e2 * uu / (scale * scale) + e1 * ((1.0 if a == b else 0.0) - uu) / (scale * dist)
                        hD[a, b] += hab
                        if on:
                            hN[a, b] += hab
        phi = num / den
        val[i] = phi
        den_out[i] = den
        nnz[i] = cnt
        if derivs:
            for a in range(d):
                grad[i, a] = (gN[a] - phi * gD[a]) / den
            for a in range(d):
                for b in range(d):
                    hess[i, a, b] = (hN[a, b] - phi * hD[a, b]
                                     - grad[i, a] * gD[b] - gD[a] * grad[i, b]) / den


@numba.njit(cache=True)
def _cutoff_kernel3(X, delta, active, lo, ashape, derivs, val, grad, hess, den_out, nnz):
    """d = 3 specialization: walk only the lattice points inside the bump radius."""
    n = X.shape[0]
    scale = delta * math.sqrt(3.0)
    R = 2.0 * scale
    R2 = R * R
    gN = np.empty(3)
    gD = np.empty(3)
    hN = np.empty((3, 3))
    hD = np.empty((3, 3))
    u = np.empty(3)
    for i in range(n):
        x0, x1, x2 = X[i, 0], X[i, 1], X[i, 2]
        num = 0.0
        den = 0.0
        cnt = 0
        if derivs:
            gN[:] = 0.0
            gD[:] = 0.0
            hN[:, :] = 0.0
            hD[:, :] = 0.0
        for k0 in range(math.floor((x0 - R) / delta), math.ceil((x0 + R) / delta) + 1):
            d0 = x0 - k0 * delta
            r0 = d0 * d0
            if r0 >= R2:
                continue
            q0 = k0 - lo[0]
            in0 = 0 <= q0 < ashape[0]
            w1 = math.sqrt(R2 - r0)
            for k1 in range(math.floor((x1 - w1) / delta), math.ceil((x1 + w1) / delta) + 1):
                d1 = x1 - k1 * delta
                r1 = r0 + d1 * d1
                if r1 >= R2:
                    continue
                q1 = k1 - lo[1]
                in1 = in0 and 0 <= q1 < ashape[1]
                w2 = math.sqrt(R2 - r1)
                for k2 in range(math.floor((x2 - w2) / delta), math.ceil((x2 + w2) / delta) + 1):
                    d2 = x2 - k2 * delta
                    r2 = r1 + d2 * d2
                    if r2 >= R2:
                        continue
                    dist = math.sqrt(r2)
                    e, e1, e2 = _profile(dist / scale)
                    if e == 0.0:
                        continue
                    cnt += 1
                    q2 = k2 - lo[2]
                    on = in1 and 0 <= q2 < ashape[2] and active[q0, q1, q2]
                    den += e
                    if on:
                        num += e
                    if derivs and e1 != 0.0:
                        u[0] = d0 / dist
                        u[1] = d1 / dist
                        u[2] = d2 / dist
                        c1 = e1 / scale
                        c2 = e2 / (scale * scale)
                        c3 = e1 / (scale * dist)
                        for a in range(3):
                            gD[a] += c1 * u[a]
                            if on:
                                gN[a] += c1 * u[a]
                            for b in range(a, 3):
                                uu = u[a] * u[b]
                                hab = c2 * uu + c3 * ((1.0 if a == b else 0.0) - uu)
                                hD[a, b] += hab
                                if on:
                                    hN[a, b] += hab
        phi = num / den
        val[i] = phi
        den_out[i] = den
        nnz[i] = cnt
        if derivs:
            for a in range(3):
                grad[i, a] = (gN[a] - phi * gD[a]) / den
            for a in range(3):
                for b in range(a, 3):
                    h = (hN[a, b] - phi * hD[a, b] - grad[i, a] * gD[b] - gD[a] * grad[i, b]) / den
                    hess[i, a, b] = h
                    hess[i, b, a] = h


def lattice_ball_count(d: int, radius: float) -> int:
    """|B(0, radius) cap Z^d|."""
    R = int(math.floor(radius))
    g = np.meshgrid(*[np.arange(-R, R + 1)] * d, indexing="ij")
    return int((sum(x ** 2 for x in g) <= radius ** 2 + 1e-12).sum())


@dataclass(frozen=True, eq=False)
class CutoffFamily:
    """One member phi_delta of the cutoff family for the compact set K."""

    K: CompactSet
    delta: float
    active: np.ndarray  # boolean lattice window; True on delta Z^d cap O_{3 delta sqrt d}(K)
    lo: np.ndarray  # lattice index of active[0, ..., 0]
    offsets: np.ndarray

    @property
    def dim(self) -> int:
        return self.K.dim

    @property
    def locality_bound(self) -> int:
        return lattice_ball_count(self.dim, 3 * math.sqrt(self.dim))

    def evaluate(self, x, derivatives: bool = False, chunk: int = 65536) -> dict:
        """Values (and gradient/Hessian) at points ``x`` of shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        X = np.ascontiguousarray(x.reshape(-1, self.dim))
        n, d = X.shape
        val = np.empty(n)
        den = np.empty(n)
        nnz = np.empty(n, dtype=np.int64)
        grad = np.empty((n, d) if derivatives else (1, d))
        hess = np.empty((n, d, d) if derivatives else (1, d, d))
        ashape = np.array(self.active.shape, dtype=np.int64)
        astrides = np.array(self.active.strides, dtype=np.int64) // self.active.itemsize
        flat = self.active.ravel()
        for s in range(0, n, chunk):
            e = min(n, s + chunk)
            g = grad[s:e] if derivatives else grad
            hs = hess[s:e] if derivatives else hess
            if d == 3:
                _cutoff_kernel3(X[s:e], self.delta, self.active, self.lo, ashape, derivatives,
                                val[s:e], g, hs, den[s:e], nnz[s:e])
            else:
                _cutoff_kernel(X[s:e], self.delta, self.offsets, flat, self.lo, ashape, astrides,
                               derivatives, val[s:e], g, hs, den[s:e], nnz[s:e])
        out = {"value": val.reshape(shape), "denominator": den.reshape(shape),
               "support_points": nnz.reshape(shape)}
        if derivatives:
            out["gradient"] = grad.reshape(shape + (d,))
            out["hessian"] = hess.reshape(shape + (d, d))
        return out

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)["value"]

    def on_grid(self, dom) -> np.ndarray:
        """Cellwise samples on a BoxDomain."""
        x = np.moveaxis(dom.centers(), 0, -1)
        return self(x)


def build_cutoff(K: CompactSet, delta: float) -> CutoffFamily:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    d = K.dim
    reach = 3 * delta * math.sqrt(d)
    lo_pt, hi_pt = K.bounds()
    lo = np.floor((lo_pt - reach) / delta).astype(np.int64) - 1
    hi = np.ceil((hi_pt + reach) / delta).astype(np.int64) + 1
    shape = tuple(int(v) for v in hi - lo + 1)
    if np.prod(shape) > ENUMERATION_BUDGET:
        raise OverflowError("active lattice window exceeds the enumeration budget")
    grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij")
    Z = np.stack(grids, axis=-1) * delta
    active = np.ascontiguousarray(K.dist(Z) < reach)
    # x - floor(x/delta) delta lies in [0, delta)^d, so only offsets m within
    # 2 sqrt(d) of the unit cube can carry a nonzero bump
    R = int(math.ceil(2 * math.sqrt(d))) + 1
    g = np.meshgrid(*[np.arange(-R, R + 2)] * d, indexing="ij")
    m = np.stack([v.ravel() for v in g], axis=1)
    gap = np.maximum(np.maximum(-m, m - 1), 0)
    offsets = m[np.sqrt((gap ** 2).sum(axis=1)) < 2 * math.sqrt(d)].astype(np.int64)
    return CutoffFamily(K, float(delta), active, lo, np.ascontiguousarray(offsets))


# --- verification ---------------------------------------------------------

@dataclass
class CutoffRow:
    delta: float
    range_ok: bool
    one_near_ok: bool
    support_ok: bool
    grad_scaled: float
    hess_scaled: float
    support_measure: float
    key_limit: float
    decay_value: float
    max_support_points: int
    min_denominator: float


@dataclass
class CutoffReport:
    r: float
    exponent: float
    rows: list[CutoffRow]
    checks: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def table(self):
        header = ["delta", "range_ok", "one_near_ok", "support_ok", "grad_scaled", "hess_scaled",
                  "support_measure", "key_limit", "decay_value", "max_support_points", "min_denominator"]
        return header, [[getattr(row, h) for h in header] for row in self.rows]


def _sample_grid(K: CompactSet, delta: float, pad: float, spacing: float) -> np.ndarray:
    lo, hi = K.bounds()
    axes = []
    for a in range(K.dim):
        n = int(math.ceil((hi[a] - lo[a] + 2 * pad) / spacing))
        axes.append(lo[a] - pad + (np.arange(n) + 0.5) * spacing)
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1), spacing ** K.dim


def verify_cutoff(K: CompactSet, r: float, schedule, decay_point=None,
                  resolution: float = 0.25) -> CutoffReport:
    """Check range, plateau, support, scaled derivatives, pointwise decay and the key limit.

    Sampling uses a grid of spacing ``resolution * delta`` covering the
    ``5 delta sqrt(d)`` neighbourhood of K plus a margin.
    """
    deltas = sorted((float(s) for s in schedule), reverse=True)
    if any(not 0 < dl < 1 for dl in deltas):
        raise ValueError("cutoff scales must lie in (0, 1)")
    d = K.dim
    exponent = 2 * r / (r - 1)
    if decay_point is None:
        lo, _ = K.bounds()
        decay_point = lo - 0.25 / math.sqrt(d)
    decay_point = np.asarray(decay_point, dtype=float)
    rows = []
    for dl in deltas:
        phi = build_cutoff(K, dl)
        s = dl * math.sqrt(d)
        X, cell = _sample_grid(K, dl, 5 * s + dl / 2, resolution * dl)
        ev = phi.evaluate(X, derivatives=True)
        v = ev["value"]
        dist = K.dist(X)
        grad_n = np.sqrt((ev["gradient"] ** 2).sum(axis=-1))
        hess_n = np.sqrt((ev["hessian"] ** 2).sum(axis=(-1, -2)))
        support = float((v > 0).sum() * cell)
        rows.append(CutoffRow(
            delta=dl,
            range_ok=bool(np.all((v >= 0) & (v <= 1))),
            one_near_ok=bool(np.all(v[dist < s] == 1.0)),
            support_ok=bool(np.all(v[dist >= 5 * s] == 0.0)),
            grad_scaled=float(grad_n.max() * dl),
            hess_scaled=float(hess_n.max() * dl ** 2),
            support_measure=support,
            key_limit=dl ** (-exponent) * support,
            decay_value=float(phi(decay_point[None])[0]),
            max_support_points=int(ev["support_points"].max()),
            min_denominator=float(ev["denominator"].min()),
        ))
    key = [row.key_limit for row in rows]
    g = [row.grad_scaled for row in rows]
    hs = [row.hess_scaled for row in rows]
    bound = lattice_ball_count(d, 3 * math.sqrt(d))
    checks = {
        "range": all(row.range_ok for row in rows),
        "one_near_K": all(row.one_near_ok for row in rows),
        "support": all(row.support_ok for row in rows),
        "grad_stable": max(g) <= 3 * min(g),
        "hess_stable": max(hs) <= 3 * min(hs),
        "decay": rows[-1].decay_value == 0.0,
        "key_limit_decreasing": all(b < a for a, b in zip(key, key[1:])),
        "denominator": all(row.min_denominator >= 1.0 for row in rows),
        "locality": all(row.max_support_points <= bound for row in rows),
    }
    return CutoffReport(r, exponent, rows, checks)
