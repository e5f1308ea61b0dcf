"""Discretized scalar / tensor / immersion fields on rectangular charts.

Fields live on uniform tensor-product grids, either clamped (a rectangle,
nodes include the frame) or periodic (a flat torus, last node wraps to the
first).  All arithmetic is float64: the iteration spans several orders of
magnitude in frequency and 32-bit accumulates visible error.

Derivatives use centered 4th-order stencils in the interior and one-sided
2nd-order stencils within two cells of a clamped frame.  All operations are
pure: inputs are never mutated, outputs are freshly allocated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

PERIODIC = "periodic"
CLAMPED = "clamped"

MIN_RESOLUTION = 8


class ChartError(ValueError):
    """Invalid chart geometry or mismatched charts."""


class UnderResolvedError(ValueError):
    """An operation was asked to act below the resolvable grid scale."""


@dataclass(frozen=True)
class GridChart:
    """A rectangular sample grid over a planar chart or flat torus.

    extent      physical side lengths (length units)
    resolution  samples per axis
    boundary    "clamped" (rectangle, frame nodes included) or "periodic"
                (torus; node n would coincide with node 0 and is not stored)
    """

    extent: tuple[float, float] = (1.0, 1.0)
    resolution: tuple[int, int] = (128, 128)
    boundary: str = CLAMPED

    def __post_init__(self):
        if self.boundary not in (PERIODIC, CLAMPED):
            raise ChartError(f"unknown boundary mode {self.boundary!r}")
        if any(r < MIN_RESOLUTION for r in self.resolution):
            raise ChartError(
                f"resolution {self.resolution} below minimum {MIN_RESOLUTION} per axis")
        if any(e <= 0.0 for e in self.extent):
            raise ChartError(f"extent {self.extent} must be positive")

    @property
    def spacing(self) -> tuple[float, float]:
        nx, ny = self.resolution
        lx, ly = self.extent
        if self.boundary == PERIODIC:
            return lx / nx, ly / ny
        return lx / (nx - 1), ly / (ny - 1)

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        hx, hy = self.spacing
        nx, ny = self.resolution
        return np.arange(nx) * hx, np.arange(ny) * hy

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        ax, ay = self.axes()
        return np.meshgrid(ax, ay, indexing="ij")

    def same_grid(self, other: "GridChart") -> bool:
        return (self.resolution == other.resolution
                and self.boundary == other.boundary
                and np.allclose(self.extent, other.extent))


def _require_same_chart(a, b):
    if not a.chart.same_grid(b.chart):
        raise ChartError("fields live on different charts")


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ScalarField:
    chart: GridChart
    values: np.ndarray  # (nx, ny)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != self.chart.resolution:
            raise ChartError(f"scalar values {v.shape} do not match chart {self.chart.resolution}")
        _check_finite(v, "scalar field")

    @classmethod
    def constant(cls, chart, c):
        return cls(chart, np.full(chart.resolution, float(c)))

    @classmethod
    def from_function(cls, chart, fn):
        x, y = chart.mesh()
        return cls(chart, np.asarray(fn(x, y), dtype=float))

    def gradient(self) -> np.ndarray:
        """Stencil gradient, shape (nx, ny, 2)."""
        hx, hy = self.chart.spacing
        p = self.chart.periodic
        return np.stack([_diff1(self.values, 0, hx, p), _diff1(self.values, 1, hy, p)], axis=-1)


@dataclass(frozen=True)
class MetricField:
    """Symmetric 2x2 tensor samples; symmetry is exact by storage.

    values[..., 0] = a11, values[..., 1] = a12 = a21, values[..., 2] = a22.
    """

    chart: GridChart
    values: np.ndarray  # (nx, ny, 3)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (*self.chart.resolution, 3):
            raise ChartError(f"metric values {v.shape} do not match chart {self.chart.resolution}")
        _check_finite(v, "metric field")

    @classmethod
    def constant(cls, chart, matrix):
        m = np.asarray(matrix, dtype=float)
        comp = np.array([m[0, 0], m[0, 1], m[1, 1]])
        return cls(chart, np.broadcast_to(comp, (*chart.resolution, 3)).copy())

    @classmethod
    def from_components(cls, chart, a11, a12, a22):
        return cls(chart, np.stack(np.broadcast_arrays(a11, a12, a22), axis=-1).astype(float))

    def as_matrices(self) -> np.ndarray:
        a, b, c = self.values[..., 0], self.values[..., 1], self.values[..., 2]
        m = np.empty((*a.shape, 2, 2))
        m[..., 0, 0] = a
        m[..., 0, 1] = b
        m[..., 1, 0] = b
        m[..., 1, 1] = c
        return m

    def eigenvalues(self) -> tuple[np.ndarray, np.ndarray]:
        """Closed-form symmetric 2x2 eigenvalues, (min, max) per node."""
        a, b, c = self.values[..., 0], self.values[..., 1], self.values[..., 2]
        mean = 0.5 * (a + c)
        rad = np.sqrt((0.5 * (a - c)) ** 2 + b ** 2)
        return mean - rad, mean + rad

    def det(self) -> np.ndarray:
        a, b, c = self.values[..., 0], self.values[..., 1], self.values[..., 2]
        return a * c - b * b

    def trace(self) -> np.ndarray:
        return self.values[..., 0] + self.values[..., 2]

    def spd_band(self) -> tuple[float, float]:
        """(min eigenvalue, max eigenvalue) over all nodes."""
        lo, hi = self.eigenvalues()
        return float(lo.min()), float(hi.max())

    def check_spd(self, gamma: float):
        """Verify 1/gamma <= eigenvalues <= gamma at every node."""
        lo, hi = self.spd_band()
        if lo < 1.0 / gamma - 1e-12 or hi > gamma + 1e-12:
            raise ValueError(
                f"metric eigenvalues [{lo:.6g}, {hi:.6g}] leave the band "
                f"[{1.0 / gamma:.6g}, {gamma:.6g}]")

    def apply(self, vec2) -> np.ndarray:
        """Matrix-vector product per node; vec2 broadcastable to (..., 2)."""
        a, b, c = self.values[..., 0], self.values[..., 1], self.values[..., 2]
        vx, vy = vec2[..., 0], vec2[..., 1]
        return np.stack([a * vx + b * vy, b * vx + c * vy], axis=-1)


@dataclass(frozen=True)
class ImmersionField:
    """Map samples into R^3 with a configurable derivative stencil order.

    On periodic charts a map like the flat chart map is not periodic in its
    values; its linear part (a 3x2 matrix) is carried separately so that
    stencils, mollification and seam wrapping act on the periodic samples
    only.  positions() returns the actual points linear . x + values.
    """

    chart: GridChart
    values: np.ndarray  # (nx, ny, 3), the (periodic) sample part
    stencil_order: int = 4
    linear: np.ndarray | None = None  # (3, 2) or None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (*self.chart.resolution, 3):
            raise ChartError(f"immersion values {v.shape} do not match chart {self.chart.resolution}")
        if self.stencil_order not in (2, 4):
            raise ValueError("stencil order must be 2 or 4")
        if self.linear is not None:
            lin = np.asarray(self.linear, dtype=float)
            if lin.shape != (3, 2):
                raise ChartError(f"linear part must be 3x2, got {lin.shape}")
            if np.all(lin == 0.0):
                lin = None
            object.__setattr__(self, "linear", lin)
        _check_finite(v, "immersion field")

    @classmethod
    def from_function(cls, chart, fn, stencil_order=4):
        x, y = chart.mesh()
        comps = fn(x, y)
        return cls(chart, np.stack(comps, axis=-1), stencil_order)

    @classmethod
    def flat(cls, chart, scale=1.0, stencil_order=4):
        """(s*x, s*y, 0): the scaled planar chart map."""
        if chart.periodic:
            lin = np.array([[scale, 0.0], [0.0, scale], [0.0, 0.0]])
            return cls(chart, np.zeros((*chart.resolution, 3)), stencil_order, lin)
        x, y = chart.mesh()
        z = np.zeros_like(x)
        return cls(chart, np.stack([scale * x, scale * y, z], axis=-1), stencil_order)

    def positions(self) -> np.ndarray:
        """Actual map values, including any linear part."""
        if self.linear is None:
            return self.values
        x, y = self.chart.mesh()
        return self.values + np.einsum("ki,i...->...k", self.linear, np.stack([x, y]))

    def displaced(self, offset: np.ndarray) -> "ImmersionField":
        """New immersion moved by a (periodic) displacement field."""
        return ImmersionField(self.chart, self.values + offset, self.stencil_order, self.linear)

    def jacobian(self) -> np.ndarray:
        """Per-node Jacobian, shape (nx, ny, 3, 2): J[..., k, i] = d_i u^k."""
        hx, hy = self.chart.spacing
        p = self.chart.periodic
        o = self.stencil_order
        jx = _diff1(self.values, 0, hx, p, order=o)
        jy = _diff1(self.values, 1, hy, p, order=o)
        jac = np.stack([jx, jy], axis=-1)
        if self.linear is not None:
            jac = jac + self.linear
        return jac

    def min_singular_value(self) -> np.ndarray:
        """Smallest singular value of the Jacobian per node."""
        j = self.jacobian()
        gram = np.einsum("...ki,...kj->...ij", j, j)
        tr = gram[..., 0, 0] + gram[..., 1, 1]
        det = gram[..., 0, 0] * gram[..., 1, 1] - gram[..., 0, 1] ** 2
        rad = np.sqrt(np.maximum((0.5 * tr) ** 2 - det, 0.0))
        return np.sqrt(np.maximum(0.5 * tr - rad, 0.0))


# ---------------------------------------------------------------------------
# finite-difference stencils

def _diff1(values, axis, h, periodic, order=4):
    """First derivative along axis 0 or 1 of a (nx, ny, ...) array."""
    f = np.moveaxis(values, axis, 0)
    out = np.empty_like(f)
    if periodic:
        if order == 4:
            out[:] = (-np.roll(f, -2, 0) + 8 * np.roll(f, -1, 0)
                      - 8 * np.roll(f, 1, 0) + np.roll(f, 2, 0)) / (12 * h)
        else:
            out[:] = (np.roll(f, -1, 0) - np.roll(f, 1, 0)) / (2 * h)
    else:
        if order == 4:
            out[2:-2] = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * h)
        else:
            out[2:-2] = (f[3:-1] - f[1:-3]) / (2 * h)
        # one-sided / short centered rows near the frame, 2nd order
        out[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
        out[1] = (f[2] - f[0]) / (2 * h)
        out[-2] = (f[-1] - f[-3]) / (2 * h)
        out[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


def _diff2(values, axis, h, periodic, order=4):
    """Pure second derivative along one axis."""
    f = np.moveaxis(values, axis, 0)
    out = np.empty_like(f)
    h2 = h * h
    if periodic:
        if order == 4:
            out[:] = (-np.roll(f, -2, 0) + 16 * np.roll(f, -1, 0) - 30 * f
                      + 16 * np.roll(f, 1, 0) - np.roll(f, 2, 0)) / (12 * h2)
        else:
            out[:] = (np.roll(f, -1, 0) - 2 * f + np.roll(f, 1, 0)) / h2
    else:
        if order == 4:
            out[2:-2] = (-f[4:] + 16 * f[3:-1] - 30 * f[2:-2] + 16 * f[1:-3] - f[:-4]) / (12 * h2)
        else:
            out[2:-2] = (f[3:-1] - 2 * f[2:-2] + f[1:-3]) / h2
        out[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h2
        out[1] = (f[2] - 2 * f[1] + f[0]) / h2
        out[-2] = (f[-1] - 2 * f[-2] + f[-3]) / h2
        out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h2
    return np.moveaxis(out, 0, axis)


def second_derivatives(values, chart, order=4):
    """(d_xx, d_xy, d_yy) of a (nx, ny, ...) sample array."""
    hx, hy = chart.spacing
    p = chart.periodic
    fxx = _diff2(values, 0, hx, p, order)
    fyy = _diff2(values, 1, hy, p, order)
    fxy = _diff1(_diff1(values, 0, hx, p, order), 1, hy, p, order)
    return fxx, fxy, fyy


# ---------------------------------------------------------------------------
# pullback metric

def pullback_metric(u: ImmersionField, degenerate_tol: float = 1e-10) -> MetricField:
    """Pullback of the euclidean metric: components d_i u . d_j u.

    Symmetric and PSD up to stencil truncation error.  Nodes whose Jacobian
    is rank-deficient are recorded in the result's meta["degenerate_nodes"];
    they are not fatal.
    """
    j = u.jacobian()
    g11 = np.einsum("...k,...k->...", j[..., 0], j[..., 0])
    g12 = np.einsum("...k,...k->...", j[..., 0], j[..., 1])
    g22 = np.einsum("...k,...k->...", j[..., 1], j[..., 1])
    out = MetricField(u.chart, np.stack([g11, g12, g22], axis=-1))
    sigma = u.min_singular_value()
    bad = np.argwhere(sigma <= degenerate_tol)
    if bad.size:
        out.meta["degenerate_nodes"] = [tuple(ix) for ix in bad[:64]]
        out.meta["degenerate_count"] = int(bad.shape[0])
    return out


# ---------------------------------------------------------------------------
# mollification

def _bump_kernel(chart: GridChart, ell: float):
    """Quartic bump (1 - (r/ell)^2)^2 sampled on the grid, unit discrete mass."""
    hx, hy = chart.spacing
    rx, ry = int(np.floor(ell / hx)), int(np.floor(ell / hy))
    dx = np.arange(-rx, rx + 1) * hx
    dy = np.arange(-ry, ry + 1) * hy
    r2 = (dx[:, None] ** 2 + dy[None, :] ** 2) / ell ** 2
    w = np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)
    return w / w.sum()


def mollify(f, ell: float, clamped_mode: str = "renormalize"):
    """Componentwise convolution with the quartic bump of radius ell.

    Periodic charts wrap; clamped charts either renormalize the clipped
    kernel mass near the frame (default; preserves constants exactly) or
    extend fields by first-order extrapolation across the frame
    (clamped_mode="extrapolate"; also preserves affine fields, used where an
    immersion's pullback must survive smoothing).
    """
    chart = f.chart
    hx, hy = chart.spacing
    if ell < 2 * max(hx, hy):
        raise UnderResolvedError(
            f"mollification length {ell:.4g} under-resolved: need >= 2*spacing={2 * max(hx, hy):.4g}")
    if clamped_mode not in ("renormalize", "extrapolate"):
        raise ValueError(f"unknown clamped_mode {clamped_mode!r}")
    w = _bump_kernel(chart, ell)
    vals = f.values
    comps = vals[..., None] if vals.ndim == 2 else vals
    out = np.empty_like(comps)
    if chart.periodic:
        nx, ny = chart.resolution
        kern = np.zeros((nx, ny))
        rx, ry = (w.shape[0] - 1) // 2, (w.shape[1] - 1) // 2
        ix = (np.arange(-rx, rx + 1)) % nx
        iy = (np.arange(-ry, ry + 1)) % ny
        np.add.at(kern, (ix[:, None], iy[None, :]), w)
        kern_hat = np.fft.rfft2(kern)
        for c in range(comps.shape[-1]):
            out[..., c] = np.fft.irfft2(np.fft.rfft2(comps[..., c]) * kern_hat, s=(nx, ny))
    elif clamped_mode == "renormalize":
        mass = fftconvolve(np.ones(chart.resolution), w, mode="same")
        for c in range(comps.shape[-1]):
            out[..., c] = fftconvolve(comps[..., c], w, mode="same") / mass
    else:
        rx, ry = (w.shape[0] - 1) // 2, (w.shape[1] - 1) // 2
        for c in range(comps.shape[-1]):
            padded = np.pad(comps[..., c], ((rx, rx), (ry, ry)),
                            mode="reflect", reflect_type="odd")
            out[..., c] = fftconvolve(padded, w, mode="valid")
    out = out if vals.ndim == 3 else out[..., 0]
    if isinstance(f, ScalarField):
        return ScalarField(chart, out)
    if isinstance(f, MetricField):
        return MetricField(chart, out)
    # a linear part survives mollification exactly (symmetric unit-mass kernel)
    return ImmersionField(chart, out, f.stencil_order, f.linear)


# ---------------------------------------------------------------------------
# Hoelder seminorms and norm reports

def _offset_quotient(arr, dx, dy, hx, hy, theta, periodic):
    if periodic:
        d = np.roll(arr, (-dx, -dy), axis=(0, 1)) - arr
    else:
        nx, ny = arr.shape[:2]
        if dy >= 0:
            d = arr[dx:, dy:] - arr[:nx - dx or None, :ny - dy or None]
        else:
            d = arr[dx:, :ny + dy] - arr[:nx - dx or None, -dy:]
        if d.size == 0:
            return 0.0
    sep = np.hypot(dx * hx, dy * hy)
    return float(np.max(np.abs(d))) / sep ** theta


def _offsets(chart: GridChart, exhaustive: bool):
    nx, ny = chart.resolution
    if chart.periodic:
        mx, my = nx // 2, ny // 2
    else:
        mx, my = nx - 1, ny - 1
    if exhaustive:
        for dx in range(0, mx + 1):
            for dy in range(-my if dx > 0 else 1, my + 1):
                if dx == 0 and dy <= 0:
                    continue
                yield dx, dy
    else:
        d = 1
        while d <= max(mx, my):
            for dx, dy in ((d, 0), (0, d), (d, d), (d, -d)):
                if dx <= mx and abs(dy) <= my:
                    yield dx, dy
            d *= 2


def holder_seminorm(f, theta: float, deriv_order: int = 0,
                    exhaustive: bool | None = None) -> float:
    """Max Hoelder quotient |f(x)-f(y)| / |x-y|^theta over sampled node pairs.

    Pairs are sampled at dyadic separations (axis and diagonal offsets
    spacing * 2^j); grids with at most 128 nodes per axis are searched over
    all offsets instead.  The result is a lower bound for the continuum
    seminorm; dyadic sampling changes it by a bounded factor only.

    deriv_order=1 applies the quotient to the stencil first derivatives.
    """
    if not (0.0 < theta <= 1.0):
        raise ValueError("Hoelder exponent must lie in (0, 1]")
    if deriv_order not in (0, 1):
        raise ValueError("deriv_order must be 0 or 1")
    chart = f.chart
    hx, hy = chart.spacing
    if exhaustive is None:
        exhaustive = max(chart.resolution) <= 128
    vals = f.values
    if deriv_order == 1:
        p = chart.periodic
        vals = np.concatenate([_diff1(vals, 0, hx, p)[..., None] if vals.ndim == 2
                               else _diff1(vals, 0, hx, p),
                               _diff1(vals, 1, hy, p)[..., None] if vals.ndim == 2
                               else _diff1(vals, 1, hy, p)], axis=-1)
    arrs = [vals] if vals.ndim == 2 else [vals[..., c] for c in range(vals.shape[-1])]
    best = 0.0
    for dx, dy in _offsets(chart, exhaustive):
        for arr in arrs:
            q = _offset_quotient(arr, dx, dy, hx, hy, theta, chart.periodic)
            if q > best:
                best = q
    return best


@dataclass(frozen=True)
class NormReport:
    sup_norm: float
    c1_norm: float
    c2_norm: float
    holder_seminorms: tuple = ()

    def __post_init__(self):
        if min(self.sup_norm, self.c1_norm, self.c2_norm) < 0:
            raise ValueError("norms must be nonnegative")
        if self.c1_norm < self.sup_norm - 1e-12:
            raise ValueError("C1 norm cannot undercut the sup norm")


def _component_view(f):
    v = f.values
    return v[..., None] if v.ndim == 2 else v


def sup_norm(f) -> float:
    v = _component_view(f)
    if v.shape[-1] == 1:
        return float(np.max(np.abs(v)))
    return float(np.max(np.linalg.norm(v, axis=-1)))


def c1_seminorm(f) -> float:
    chart = f.chart
    hx, hy = chart.spacing
    p = chart.periodic
    v = _component_view(f)
    gx = _diff1(v, 0, hx, p)
    gy = _diff1(v, 1, hy, p)
    return float(max(np.max(np.abs(gx)), np.max(np.abs(gy))))


def c2_seminorm(f) -> float:
    v = _component_view(f)
    fxx, fxy, fyy = second_derivatives(v, f.chart)
    return float(max(np.max(np.abs(fxx)), np.max(np.abs(fxy)), np.max(np.abs(fyy))))


def norm_report(f, thetas: Sequence[float] = ()) -> NormReport:
    """Sup / C1 / C2 estimates plus optional Hoelder seminorms.

    Norms follow the summed convention |f|_m = sum of seminorms [f]_j.
    """
    sup = sup_norm(f)
    s1 = c1_seminorm(f)
    s2 = c2_seminorm(f)
    hs = tuple((float(t), holder_seminorm(f, t)) for t in thetas)
    return NormReport(sup, sup + s1, sup + s1 + s2, hs)


# ---------------------------------------------------------------------------
# shortness

@dataclass(frozen=True)
class ShortnessReport:
    classification: str  # "strictly_short" | "short" | "not_short"
    min_eigenvalue: float
    min_eig_field: np.ndarray
    strong_short: bool | None = None
    strong_margin: float | None = None

    @property
    def is_short(self) -> bool:
        return self.classification in ("strictly_short", "short")


def check_short(u: ImmersionField, g: MetricField, rho: ScalarField | None = None,
                h: MetricField | None = None, tol: float = 1e-12) -> ShortnessReport:
    """Classify g - u#e by its pointwise smallest eigenvalue.

    With a (rho, h) factorization supplied, additionally reports whether
    -g/2 <= h <= g/2 holds at every node (the strong-short bound).
    """
    _require_same_chart(u, g)
    d = MetricField(g.chart, g.values - pullback_metric(u).values)
    lo, _ = d.eigenvalues()
    m = float(lo.min())
    if m > tol:
        cls = "strictly_short"
    elif m >= -tol:
        cls = "short"
    else:
        cls = "not_short"
    strong = margin = None
    if rho is not None and h is not None:
        _require_same_chart(g, h)
        upper = MetricField(g.chart, 0.5 * g.values - h.values)
        lower = MetricField(g.chart, 0.5 * g.values + h.values)
        margin = float(min(upper.eigenvalues()[0].min(), lower.eigenvalues()[0].min()))
        strong = bool(margin >= -tol)
    return ShortnessReport(cls, m, lo, strong, margin)
