"""Parameter schedules, distance cut-offs, the amplitude recursion, and the
inductive driver that upgrades an adapted short immersion from one skeleton
to the next.

The exponent algebra (the growth exponent b, the degraded Hoelder and
auxiliary exponents, the amplitude-base power) is exact rational
arithmetic; the executed frequency ladder is planned against the grid's
resolvable ceiling and the run truncates with a certificate rather than
aliasing when frequencies outrun the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .corrugation import CorrugationTable
from .grid import (
    GridChart,
    ImmersionField,
    MetricField,
    ScalarField,
    UnderResolvedError,
    c1_seminorm,
    c2_seminorm,
    holder_seminorm,
    pullback_metric,
    second_derivatives,
    sup_norm,
)
from .nash_step import (
    NODES_PER_WAVELENGTH,
    ShortnessLostError,
    StepPreconditionError,
    add_metric_2d,
    bootstrap_strong,
)


class ScheduleError(ValueError):
    pass


def growth_exponent(theta: Fraction, alpha: Fraction, n: int = 2) -> Fraction:
    """b = 1 + 4 alpha theta / (1 - 5 theta) in 2-D; the n(n+1)/2-direction
    variant 1 + 2 n* alpha theta / (1 - (2 n* + 1) theta) for n >= 3."""
    theta, alpha = Fraction(theta), Fraction(alpha)
    if n == 2:
        if not 0 < theta < Fraction(1, 5):
            raise ScheduleError(f"theta={theta} outside (0, 1/5)")
        return 1 + 4 * alpha * theta / (1 - 5 * theta)
    n_star = n * (n + 1) // 2
    bound = Fraction(1, 2 * n_star + 1)
    if not 0 < theta < bound:
        raise ScheduleError(f"theta={theta} outside (0, {bound}) for n={n}")
    return 1 + 2 * n_star * alpha * theta / (1 - (2 * n_star + 1) * theta)


@dataclass(frozen=True)
class Schedule:
    """The asymptotic parameter ladder, with exact exponent algebra.

    Exponent relations are kept as exact rationals (theta' b^2 = theta,
    2 b^2 alpha' = alpha, A' = A^(b^2) via the exponent of A); the frequency
    and amplitude ladders lam_(q+1) = lam_q^b, lam_q = A delta_q^(-1/(2
    theta)) are float evaluations of those exact relations.
    """

    A: float
    theta: Fraction
    alpha: Fraction
    n: int
    b: Fraction
    delta: tuple      # delta_1 .. delta_(depth)
    lam: tuple        # lam_1 .. lam_(depth)
    a_exponent: Fraction = Fraction(1)  # this pass's A = A_base^(a_exponent)

    @property
    def theta_prime(self) -> Fraction:
        return self.theta / self.b ** 2

    @property
    def alpha_prime(self) -> Fraction:
        return self.alpha / (2 * self.b ** 2)

    @property
    def a_prime_exponent(self) -> Fraction:
        return self.a_exponent * self.b ** 2

    @property
    def a_prime(self) -> float:
        return self.A ** float(self.b ** 2)

    def delta_q(self, q: int) -> float:
        """1-indexed; extends the ladder beyond the generated depth."""
        if q <= len(self.delta):
            return self.delta[q - 1]
        ll = math.log(self.lam[-1]) * float(self.b) ** (q - len(self.lam))
        ld = -2.0 * float(self.theta) * (ll - math.log(self.A))
        return 0.0 if ld < -700.0 else math.exp(ld)

    def lam_q(self, q: int) -> float:
        if q <= len(self.lam):
            return self.lam[q - 1]
        ll = math.log(self.lam[-1]) * float(self.b) ** (q - len(self.lam))
        return math.inf if ll > 700.0 else math.exp(ll)

    def successor(self) -> "Schedule":
        """Exponents for the next skeleton pass.

        The exponent algebra (theta', alpha', the A-power) is exact; the
        ladder base is raised to the next pass's own adequate value when
        A^(b^2) alone cannot keep the ordering ("A sufficiently large" is a
        per-pass requirement).
        """
        a_min = minimal_adequate_a(self.theta_prime, self.alpha_prime,
                                   self.delta[0], self.n)
        return build_schedule(max(self.a_prime, 1.01 * a_min), self.theta_prime,
                              self.alpha_prime, self.delta[0], n=self.n,
                              depth=len(self.delta),
                              a_exponent=self.a_prime_exponent)


def minimal_adequate_a(theta: Fraction, alpha: Fraction, delta1: float, n: int = 2) -> float:
    """Smallest A making the ordering delta_(q+1) <= delta_q / 4 and
    lam_(q+1) >= 2 lam_q hold along the ladder (binding at q = 1)."""
    b = growth_exponent(theta, alpha, n)
    bf, tf = float(b), float(theta)
    # delta ratio: A^(-2 theta (b-1)) delta1^(b-1) <= 1/4
    a_delta = (4.0 * delta1 ** (bf - 1.0)) ** (1.0 / (2.0 * tf * (bf - 1.0)))
    # lam doubling: (A delta1^(-1/(2 theta)))^(b-1) >= 2
    a_lam = 2.0 ** (1.0 / (bf - 1.0)) * delta1 ** (1.0 / (2.0 * tf))
    return max(a_delta, a_lam, 1.0)


def build_schedule(A: float, theta, alpha, delta1: float, n: int = 2,
                   depth: int = 6, a_exponent=Fraction(1),
                   a_base_known: bool = False) -> Schedule:
    """Generate the ladder to the requested depth, checking the ordering
    delta_(q+1) <= delta_q/4, lam_(q+1) >= 2 lam_q eagerly."""
    theta = Fraction(theta).limit_denominator(10 ** 12) if not isinstance(theta, Fraction) else theta
    alpha = Fraction(alpha).limit_denominator(10 ** 12) if not isinstance(alpha, Fraction) else alpha
    if not 0 < alpha < 1:
        raise ScheduleError(f"alpha={alpha} outside (0, 1)")
    if not 0 < delta1 < 1:
        raise ScheduleError(f"delta_1={delta1} outside (0, 1)")
    b = growth_exponent(theta, alpha, n)
    if A < 1.0:
        raise ScheduleError("amplitude base A must be >= 1")

    tf, bf = float(theta), float(b)
    log_a = math.log(A)
    # the ladder explodes superexponentially; generate in log space and
    # surface inf/0 floats where float64 gives out
    log_lam = [log_a - math.log(delta1) / (2.0 * tf)]
    log_delta = [math.log(delta1)]
    for q in range(1, depth):
        ll = bf * log_lam[-1]
        ld = -2.0 * tf * (ll - log_a)
        if ld > log_delta[-1] - math.log(4.0) + 1e-12 or ll < log_lam[-1] + math.log(2.0) - 1e-12:
            if a_base_known:
                raise ScheduleError(f"ordering failed at q={q + 1} for derived pass")
            raise ScheduleError(
                f"ordering failed at q={q + 1}: delta ratio "
                f"{math.exp(ld - log_delta[-1]):.4g}, lam ratio "
                f"{math.exp(min(ll - log_lam[-1], 700.0)):.4g}; "
                f"minimal adequate A = {minimal_adequate_a(theta, alpha, delta1, n):.6g}")
        log_lam.append(ll)
        log_delta.append(ld)

    def _exp(v):
        return math.inf if v > 700.0 else math.exp(v)

    deltas = tuple(_exp(v) for v in log_delta)
    lams = tuple(_exp(v) for v in log_lam)
    return Schedule(A, theta, alpha, n, b, deltas, lams, a_exponent)


# ---------------------------------------------------------------------------
# executed desk ladder

@dataclass(frozen=True)
class DeskLadder:
    """The ladder a finite grid actually runs.

    Amplitude levels keep the exact quarter ratio (delta_(q+1) = delta_q /
    4, the boundary case of the ordering); executed frequencies grow by a
    per-stage factor planned against the grid ceiling instead of the
    asymptotic law lam_q = A delta_q^(-1/(2 theta)), which leaves any fixed
    grid after roughly one stage.  A, theta, alpha still drive every
    exponent check; the deviation is certified in the run report.
    """

    delta: tuple
    lam: tuple
    A: float
    theta: float
    alpha: float
    kappa: float
    b: float
    radii: tuple | None = None   # explicit tube radii r_q; 1/lam_(q+2) if None

    def delta_q(self, q: int) -> float:
        return self.delta[q - 1] if q <= len(self.delta) else self.delta[0] * 0.25 ** (q - 1)

    def lam_q(self, q: int) -> float:
        return self.lam[min(q, len(self.lam)) - 1]

    def r_q(self, q: int) -> float:
        """Tube radius for the level-q cut-off (1-indexed like r_(q+1))."""
        if self.radii is not None:
            return self.radii[min(q, len(self.radii)) - 1]
        return 1.0 / self.lam_q(q + 1)


def desk_ladder(schedule: Schedule, delta1: float, chart: GridChart, depth: int,
                base_frequency: float | None = None,
                stage_growth: float | None = None,
                tube_radius: float | None = None) -> DeskLadder:
    deltas = tuple(delta1 * 0.25 ** q for q in range(depth + 3))
    ceiling = 2.0 * np.pi / (NODES_PER_WAVELENGTH * max(chart.spacing))
    if base_frequency is None:
        base_frequency = 2.0 * np.pi / max(chart.extent)
    if stage_growth is None:
        # greedy: the first stage takes the whole resolvable band (the
        # cross-step coupling makes each stage cost a ~30-50x frequency
        # ratio, so no split of a desk grid's band buys a second stage)
        stage_growth = max(2.0, ceiling / base_frequency)
    lams = tuple(base_frequency * stage_growth ** q for q in range(depth + 3))
    kappa = 1.0 + (2.0 * float(schedule.theta) / float(schedule.b)) * (
        float(schedule.b) - 1.0 + float(schedule.alpha))
    radii = None
    if tube_radius is not None:
        # tubes shrink geometrically but stay grid-resolvable, decoupled
        # from the executed frequencies (the 1/lam coupling collapses the
        # tubes below the grid after the first greedy stage)
        radii = tuple(tube_radius * 0.5 ** q for q in range(depth + 3))
    return DeskLadder(deltas, lams, schedule.A, float(schedule.theta),
                      float(schedule.alpha), kappa, float(schedule.b), radii)


# ---------------------------------------------------------------------------
# skeleta and cut-offs

@dataclass(frozen=True)
class SkeletonSet:
    """Vertices / segments / whole-chart flags with exact distance fields."""

    dimension_level: int           # 0 vertices, 1 edges, 2 whole chart
    points: tuple = ()
    segments: tuple = ()           # ((x0,y0),(x1,y1)) pairs
    whole: bool = False

    @classmethod
    def empty(cls):
        return cls(dimension_level=0)

    @property
    def is_empty(self) -> bool:
        return not self.whole and not self.points and not self.segments

    def distance_field(self, chart: GridChart) -> np.ndarray:
        """Exact euclidean distance per node (inf for the empty set)."""
        x, y = chart.mesh()
        if self.whole:
            return np.zeros(chart.resolution)
        if self.is_empty:
            return np.full(chart.resolution, np.inf)
        best = np.full(chart.resolution, np.inf)
        for px, py in self.points:
            best = np.minimum(best, np.hypot(x - px, y - py))
        for (ax, ay), (bx, by) in self.segments:
            vx, vy = bx - ax, by - ay
            vv = vx * vx + vy * vy
            t = np.clip(((x - ax) * vx + (y - ay) * vy) / vv, 0.0, 1.0)
            best = np.minimum(best, np.hypot(x - (ax + t * vx), y - (ay + t * vy)))
        return best

    def feature_separation(self) -> float:
        """Minimum separation between distinct features (basis for r-bar)."""
        feats = [np.asarray(p) for p in self.points]
        feats += [np.asarray(s) for s in self.segments]
        if len(feats) < 2:
            return np.inf
        best = np.inf
        for i in range(len(feats)):
            for j in range(i + 1, len(feats)):
                a, b = feats[i], feats[j]
                pa = a.reshape(-1, 2)
                pb = b.reshape(-1, 2)
                d = np.min(np.linalg.norm(pa[:, None] - pb[None, :], axis=-1))
                if d > 0:
                    best = min(best, d)
        return best


def smoothstep(s):
    """Quintic C^2 ramp: exactly 0 below 0, exactly 1 above 1."""
    t = np.clip(s, 0.0, 1.0)
    return np.clip(t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t), 0.0, 1.0)


def _phi(s):        # 0 below 8/5, 1 at 2 and above
    return smoothstep((np.asarray(s, dtype=float) - 1.6) * 2.5)


def _phi_tilde(s):  # 0 below 3/2, 1 at 8/5 and above: equals 1 on supp(phi)
    return smoothstep((np.asarray(s, dtype=float) - 1.5) * 10.0)


def _psi(s, r_star, r_tilde):
    # falls from 1 below r* to 0 at 0.9 r~; psi~ = 1 on its support
    knee = r_star + 0.75 * (r_tilde - r_star)
    return 1.0 - smoothstep((np.asarray(s, dtype=float) - r_star) / (knee - r_star))


def _psi_tilde(s, r_star, r_tilde):
    knee = r_star + 0.75 * (r_tilde - r_star)
    return 1.0 - smoothstep((np.asarray(s, dtype=float) - knee) / (r_tilde - knee))


@dataclass(frozen=True)
class CutoffPair:
    chi: ScalarField
    chi_tilde: ScalarField
    audit: dict
    inner_tube: np.ndarray | None = None  # dist(., Sigma) < r* r_(q+1)


def cutoffs(rho: ScalarField, sigma: SkeletonSet, s_set: SkeletonSet, q: int,
            ladder, r_star: float = 0.75) -> CutoffPair:
    """chi_q = phi(rho / delta_(q+2)^(1/2)) psi(dist(., Sigma) / r_(q+1)).

    psi falls from 1 inside r* r_(q+1) to 0 at r~* = r_(q+1).  The audit
    measures the geometric quantities the construction relies on: the
    largest S-tube radius r_** avoided by {rho > (3/2) delta^(1/2)}, the
    feature-separation constant, whether the used tube respects
    r~* <= r_bar r_**, the cut-off gradients, and the profile nesting.
    Violated geometry raises; everything else is recorded.
    """
    chart = rho.chart
    d2 = ladder.delta_q(q + 2)
    r_q1 = ladder.r_q(q + 1)
    dist_sigma = sigma.distance_field(chart)

    ratio = rho.values / math.sqrt(d2)
    audit = {"q": q, "r_q1": r_q1}
    if sigma.whole:
        psi_v = np.ones(chart.resolution)
        psit_v = np.ones(chart.resolution)
        inner = np.ones(chart.resolution, dtype=bool)
    else:
        psi_v = _psi(dist_sigma / r_q1, r_star, 1.0)
        psit_v = _psi_tilde(dist_sigma / r_q1, r_star, 1.0)
        inner = dist_sigma < r_star * r_q1

    if not (s_set.is_empty or sigma.whole):
        dist_s = s_set.distance_field(chart)
        live = ratio > 1.5
        if live.any():
            r_starstar = 0.9 * float(dist_s[live].min()) / r_q1
            if r_starstar <= 0:
                raise StepPreconditionError(
                    f"q={q}: a node with rho > (3/2) delta^(1/2) sits on S")
        else:
            r_starstar = np.inf
        sep = s_set.feature_separation()
        r_bar = 0.5 * sep / r_q1 if np.isfinite(sep) else np.inf
        audit["r_starstar"] = r_starstar
        audit["r_bar"] = r_bar
        audit["geometric_condition_ok"] = bool(1.0 <= r_bar * r_starstar + 1e-12)
        if not audit["geometric_condition_ok"]:
            raise StepPreconditionError(
                f"q={q}: geometric condition violated: used tube radius "
                f"exceeds r_bar x r_** = {r_bar * r_starstar:.4g} x r_(q+1)")

    chi = ScalarField(chart, _phi(ratio) * psi_v)
    chit = ScalarField(chart, _phi_tilde(ratio) * psit_v)

    supp_chi = chi.values > 0
    plateau = chit.values >= 1.0 - 1e-12
    nesting_ok = bool(np.all(plateau[supp_chi])) if supp_chi.any() else True
    grad_chi = max(c1_seminorm(chi), c1_seminorm(chit))
    audit.update({
        "nesting_ok": nesting_ok,
        "grad_chi": grad_chi,
        "grad_chi_times_r": grad_chi * r_q1,
        "support_fraction": float(np.mean(chit.values > 0)),
    })
    if not nesting_ok:
        raise StepPreconditionError(f"q={q}: supp chi escapes the chi~ plateau")
    return CutoffPair(chi, chit, audit, inner)


def update_rho(rho_q: ScalarField, chi_q: ScalarField, delta_q2: float) -> ScalarField:
    """rho_(q+1)^2 = rho_q^2 (1 - chi_q^2) + delta_(q+2) chi_q^2."""
    c2 = chi_q.values ** 2
    return ScalarField(rho_q.chart,
                       np.sqrt(rho_q.values ** 2 * (1.0 - c2) + delta_q2 * c2))


def check_rho_lemma(rho_seq, chi_seq, chit_seq, ladder, rho0: ScalarField,
                    tol: float = 1e-12, inner_seq=None) -> list[dict]:
    """Node-wise verification of the amplitude-recursion properties.

    (i)   (3/2) delta_(q+2)^(1/2) <= rho_q <= 2 delta_(q+1)^(1/2) on supp chi~_q
    (ii)  rho_(q+1) <= rho_q everywhere
    (iii) rho_q strictly below delta_(q+1)^(1/2) forces rho_q = rho_0
          (strict: the recursion pins rho_q = delta_(q+1)^(1/2) exactly on
          saturated regions, where the implication would be vacuous-false)
    (iv)  rho_q >= delta_(q+1)^(1/2) forces chi_q = 1 or dist > r* r_(q+1)
    """
    out = []
    # a truncated pass may have computed cut-offs for one more q than it
    # completed amplitude updates for
    for q in range(min(len(chi_seq), len(rho_seq) - 1)):
        rho_q, chi_q, chit_q = rho_seq[q], chi_seq[q], chit_seq[q]
        d1 = ladder.delta_q(q + 1)
        d2 = ladder.delta_q(q + 2)
        rec = {"q": q}
        supp = chit_q.values > 0
        if supp.any():
            rv = rho_q.values[supp]
            rec["i_lower"] = bool(np.all(rv >= 1.5 * math.sqrt(d2) * (1 - 1e-9)))
            rec["i_upper"] = bool(np.all(rv <= 2.0 * math.sqrt(d1) * (1 + 1e-9)))
        else:
            rec["i_lower"] = rec["i_upper"] = True
        rec["ii_monotone"] = bool(np.all(
            rho_seq[q + 1].values <= rho_q.values + tol))
        small = rho_q.values < math.sqrt(d1) * (1 - 1e-9)
        rec["iii_untouched"] = bool(np.all(
            np.abs(rho_q.values[small] - rho0.values[small]) <= tol)) if small.any() else True
        big = rho_q.values >= math.sqrt(d1) * (1 - 1e-12)
        if big.any():
            sat = chi_q.values >= 1.0 - 1e-12
            if inner_seq is not None and inner_seq[q] is not None:
                far = ~inner_seq[q]
            else:
                far = chit_q.values == 0.0
            rec["iv_saturated_or_far"] = bool(np.all(sat[big] | far[big]))
        else:
            rec["iv_saturated_or_far"] = True
        rec["ok"] = all(rec[k] for k in
                        ("i_lower", "i_upper", "ii_monotone", "iii_untouched",
                         "iv_saturated_or_far"))
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# adapted states and the inductive pass

@dataclass(frozen=True)
class AdaptedState:
    """A strongly short immersion with its factorization g - u#e = rho^2 (g+h)
    and the set S it is adapted to, plus the exponent bookkeeping."""

    u: ImmersionField
    rho: ScalarField
    h: MetricField
    s_set: SkeletonSet
    A: float
    theta: float
    alpha: float
    certificate: dict = field(default_factory=dict)


def certify_adapted(state: AdaptedState, g: MetricField,
                    rho_floor: float = 1e-6) -> dict:
    """Node-wise checks of the adapted-state invariants.

    The factorization residual and shortness are hard facts; the strong
    band -g/2 <= h <= g/2 and the rho-power gradient bounds are recorded
    with their worst margins (nodes with rho below the floor are skipped,
    matching the off-Sigma scope of the bounds).
    """
    chart = state.u.chart
    pb = pullback_metric(state.u)
    resid = g.values - pb.values - (state.rho.values ** 2)[..., None] * (
        g.values + state.h.values)
    short_lo = MetricField(chart, g.values - pb.values).eigenvalues()[0]
    strong_lo = MetricField(chart, 0.5 * g.values - state.h.values).eigenvalues()[0]
    strong_hi = MetricField(chart, 0.5 * g.values + state.h.values).eigenvalues()[0]

    mask = state.rho.values > rho_floor
    out = {
        "factorization_residual": float(np.max(np.abs(resid))),
        "short_min_eig": float(short_lo.min()),
        "strong_band_ok": bool(min(strong_lo.min(), strong_hi.min()) >= -1e-9),
        "strong_band_margin": float(min(strong_lo.min(), strong_hi.min())),
    }
    if mask.any() and state.theta > 0:
        expo = 1.0 - 1.0 / state.theta
        rpow = state.rho.values[mask] ** expo
        hxx, hxy, hyy = second_derivatives(state.u.values, chart)
        hess = np.maximum(np.abs(hxx), np.maximum(np.abs(hxy), np.abs(hyy)))
        hess = hess.max(axis=-1)
        grad_rho = np.linalg.norm(state.rho.gradient(), axis=-1)
        gh = np.stack([np.linalg.norm(
            ScalarField(chart, state.h.values[..., c]).gradient(), axis=-1)
            for c in range(3)], axis=-1).max(axis=-1)
        out["hess_u_ok"] = bool(np.all(hess[mask] <= state.A * rpow + 1e-9))
        out["grad_rho_ok"] = bool(np.all(grad_rho[mask] <= state.A * rpow + 1e-9))
        out["grad_h_ok"] = bool(np.all(
            gh[mask] <= state.A * state.rho.values[mask] ** (-1.0 / state.theta) + 1e-9))
    return out


def _flood_components(mask: np.ndarray, periodic: bool):
    from scipy.ndimage import label

    lab, n = label(mask)
    if not periodic or n <= 1:
        return lab, n, (0, 0)
    # merge labels that touch across the seam by rolling until no component
    # splits over an edge (desk scenarios keep supports simply placed)
    for shift_x in (0, mask.shape[0] // 2):
        for shift_y in (0, mask.shape[1] // 2):
            rolled = np.roll(mask, (shift_x, shift_y), axis=(0, 1))
            lab, n = label(rolled)
            touches = (lab[0, :].any() and lab[-1, :].any()) or \
                      (lab[:, 0].any() and lab[:, -1].any())
            if not touches:
                return lab, n, (shift_x, shift_y)
    return lab, n, (0, 0)


def _crop_slices(component_mask: np.ndarray, margin: int, shape):
    ix, iy = np.nonzero(component_mask)
    x0, x1 = max(ix.min() - margin, 0), min(ix.max() + margin + 1, shape[0])
    y0, y1 = max(iy.min() - margin, 0), min(iy.max() + margin + 1, shape[1])
    return slice(x0, x1), slice(y0, y1)


@dataclass
class PassConfig:
    table: CorrugationTable
    c0: float = 1.0
    c1: float = 1.0
    stage_growth_cap: float | None = None   # cap on K per stage
    displacement_constant: float = 12.0     # C-bar budget for (5)_q
    conformal_tol: float | None = None
    rho_floor: float = 1e-6
    min_component_cells: int = 24


def inductive_pass(state: AdaptedState, sigma: SkeletonSet, schedule: Schedule,
                   ladder: DeskLadder, depth: int, g: MetricField,
                   config: PassConfig, incoming_top: float = 0.0):
    """Run the cut-off / add-metric / amplitude-update loop for q = 0..depth-1.

    Every iterate is verified: the factorization identity, shortness, the
    locality of the update, the displacement budget, the strong band and
    the rho-power bounds; shortness or budget failures roll the iterate
    back and truncate the pass with an explicit reason instead of
    delivering an aliased state.  Returns (new state, history, truncation).
    """
    chart = state.u.chart
    hmax = max(chart.spacing)
    ceiling = 2.0 * np.pi / (NODES_PER_WAVELENGTH * hmax)
    gamma_g = max(g.spd_band()[1], 1.0 / g.spd_band()[0])

    u, rho, h = state.u, state.rho, state.h
    rho_seq, chi_seq, chit_seq, inner_seq = [rho], [], [], []
    history = []
    truncation = None

    for q in range(depth):
        d1 = ladder.delta_q(q + 1)
        d2 = ladder.delta_q(q + 2)
        rec = {"q": q, "delta_q1": d1, "delta_q2": d2}

        if math.sqrt(d2) / ladder.lam_q(q + 1) < 2.0 * hmax:
            truncation = {"q": q, "reason": "amplitude floor",
                          "detail": f"stage displacement delta^(1/2)/lam = "
                                    f"{math.sqrt(d2) / ladder.lam_q(q + 1):.3g} "
                                    f"below 2 grid cells"}
            break

        cut = cutoffs(rho, sigma, state.s_set, q, ladder)
        chi, chit = cut.chi, cut.chi_tilde
        rec["cutoff_audit"] = cut.audit
        chi_seq.append(chi)
        chit_seq.append(chit)
        inner_seq.append(cut.inner_tube)

        live = chit.values > 0
        if not live.any():
            rho_seq.append(rho)
            rec["active"] = False
            history.append(rec)
            continue
        rec["active"] = True

        rr = rho.values ** 2 - d2
        if float(rr[live].min()) < 1.25 * d2 * (1 - 1e-9):
            raise StepPreconditionError(
                f"q={q}: rho^2 - delta_(q+2) = {rr[live].min():.4g} under the "
                f"(9/4-1) delta floor on supp chi~ (recursion band broken)")

        amp_sq = np.where(chi.values > 0, np.maximum(rr, 0.0) * chi.values ** 2, 0.0)
        rho_t = ScalarField(chart, np.sqrt(amp_sq))
        ratio = np.where(live, rho.values ** 2 / np.where(live, rr, 1.0), 0.0)
        h_t = MetricField(chart, chit.values[..., None] * ratio[..., None] * h.values)

        added_lo = MetricField(chart, g.values + h_t.values).eigenvalues()[0]
        if float(added_lo[live].min()) <= 0:
            truncation = {"q": q, "reason": "added metric lost ellipticity",
                          "detail": f"min eig(g + h~) = {added_lo[live].min():.4g}"}
            break

        # nominal corollary scale from the data norms that feed the
        # corrugation directly; the h smallness hypotheses are recorded by
        # the stage (strict_hypotheses=False) rather than driving the
        # frequency, since an O(1) factorization error h makes them
        # unattainable at any resolvable frequency
        delta_eff = min(4.0 * d1, 0.99)
        sd = math.sqrt(delta_eff)
        lam_nom = 1.02 * max(2.0, c1_seminorm(rho_t) / sd, c2_seminorm(u) / sd,
                             (2.0 * gamma_g) ** (1.0 / 0.9))

        # the new corrugation must ride above whatever the map already
        # carries (else its mollification wipes the inherited oscillations)
        # and above the data scale lam_nom^kappa (the corollary's own
        # frequency floor c0 lam^kappa with c0 >= 1)
        base = max(ladder.lam_q(q + 1), 1.3 * incoming_top,
                   1.05 * lam_nom ** ladder.kappa)
        growth = 0.999 * ceiling / base
        if config.stage_growth_cap:
            growth = min(growth, config.stage_growth_cap)
        if growth < 2.0:
            truncation = {"q": q, "reason": "frequency ceiling",
                          "detail": f"base {base:.1f} x growth {growth:.2f} "
                                    f"cannot fit the {ceiling:.1f} grid ceiling "
                                    f"(incoming top {incoming_top:.1f}, data scale "
                                    f"{lam_nom:.1f})"}
            break
        kappa_eff = max(ladder.kappa, math.log(base / 1.02) / math.log(max(lam_nom, 2.0)))

        try:
            out = add_metric_2d(
                u, rho_t, g, h_t, delta_eff, lam_nom, kappa_eff, config.table,
                c0=base / lam_nom ** kappa_eff, c1=growth / lam_nom ** (kappa_eff - 1.0),
                conformal_tol=config.conformal_tol, strict_hypotheses=False)
        except (StepPreconditionError, ShortnessLostError, UnderResolvedError) as exc:
            truncation = {"q": q, "reason": "stage failed", "detail": str(exc)}
            rec["active"] = False
            rec["truncated"] = True
            history.append(rec)
            break

        v = out.v
        pb_v = pullback_metric(v)
        short_lo = MetricField(chart, g.values - pb_v.values).eigenvalues()[0]
        if float(short_lo.min()) <= 0:
            truncation = {
                "q": q, "reason": "shortness would be lost",
                "detail": f"min eig(g - v#e) = {short_lo.min():.4g} at stage "
                          f"defect {out.defect_sup:.4g}; a larger frequency "
                          f"ratio than {growth:.1f} is needed"}
            rec["active"] = False
            rec["truncated"] = True
            history.append(rec)
            break

        disp = out.diff_norms.sup_norm
        disp_budget = config.displacement_constant * math.sqrt(d1) / ladder.lam_q(q + 1)
        if disp > disp_budget:
            truncation = {"q": q, "reason": "displacement budget",
                          "detail": f"|u_(q+1) - u_q| = {disp:.4g} over "
                                    f"C delta^(1/2)/lam = {disp_budget:.4g}"}
            rec["active"] = False
            rec["truncated"] = True
            history.append(rec)
            break

        rho_next = update_rho(rho, chi, d2)
        mask = live
        h_next_vals = h.values.copy()
        denom = (rho_next.values[mask] ** 2)[:, None]
        h_next_vals[mask] = (g.values[mask] - pb_v.values[mask]
                             - denom * g.values[mask]) / denom
        h_next = MetricField(chart, h_next_vals)

        # locality: nothing outside supp chi~ may move
        frozen = ~live
        if frozen.any():
            moved_out = float(np.max(np.abs(v.values[frozen] - u.values[frozen])))
            if moved_out > 1e-13:
                truncation = {"q": q, "reason": "locality violated",
                              "detail": f"update leaked {moved_out:.2e} outside supp chi~"}
                break
        else:
            moved_out = 0.0

        # consistency of the h update with its closed form
        # h' = ((1 - chi^2) rho^2 (g+h) + delta chi^2 g - E) / rho'^2 - g
        e_vals = pb_v.values - pullback_metric(u).values - amp_sq[..., None] * (
            g.values + h_t.values)
        pred = (1.0 - chi.values[mask] ** 2)[:, None] * (
            (rho.values[mask] ** 2)[:, None] * (g.values[mask] + h.values[mask])) \
            + d2 * (chi.values[mask] ** 2)[:, None] * g.values[mask] - e_vals[mask]
        pred = pred / denom - g.values[mask]
        rec["h_update_consistency"] = float(np.max(np.abs(pred - h_next_vals[mask])))

        resid = g.values - pb_v.values - (rho_next.values ** 2)[..., None] * (
            g.values + h_next_vals)
        rec["factorization_residual"] = float(np.max(np.abs(resid)))
        rec["short_min_eig"] = float(short_lo.min())
        strong_lo = MetricField(chart, 0.5 * g.values - h_next.values).eigenvalues()[0]
        strong_hi = MetricField(chart, 0.5 * g.values + h_next.values).eigenvalues()[0]
        rec["strong_band_ok"] = bool(min(strong_lo.min(), strong_hi.min()) >= -1e-9)
        rec["h_sup"] = float(np.max(np.abs(h_next_vals)))
        rec["defect_sup"] = out.defect_sup
        rec["stage_meta"] = {k: out.meta[k] for k in
                             ("base_frequency", "K", "ell", "support_inflation",
                              "stage_constant", "conformal_residual")
                             if k in out.meta}
        rec["displacement"] = disp
        rec["displacement_constant"] = disp * ladder.lam_q(q + 1) / math.sqrt(d1)
        rec["moved_outside"] = moved_out
        rec["rho_bands"] = {"min": float(rho_next.values.min()),
                            "max": float(rho_next.values.max())}

        # rho-power bounds at the pass exponents ((3)_q / (4)_q analogues);
        # compared in log space, the bounds blow up rapidly as rho drops
        b2 = ladder.b ** 2
        theta = ladder.theta
        live_pow = rho_next.values > config.rho_floor
        if live_pow.any() and theta > 0:
            log_bound = b2 * math.log(ladder.A) + (1.0 - b2 / theta) * np.log(
                rho_next.values[live_pow])
            hxx, hxy, hyy = second_derivatives(v.values, chart)
            hess = np.maximum(np.abs(hxx), np.maximum(np.abs(hxy), np.abs(hyy))).max(axis=-1)
            gr = np.linalg.norm(rho_next.gradient(), axis=-1)
            with np.errstate(divide="ignore"):
                rec["cond3_hess_ok"] = bool(np.all(
                    np.log(np.maximum(hess[live_pow], 1e-300)) <= log_bound + 1e-9))
                rec["cond3_grad_rho_ok"] = bool(np.all(
                    np.log(np.maximum(gr[live_pow], 1e-300)) <= log_bound + 1e-9))

        if not state.s_set.is_empty:
            dist_s = state.s_set.distance_field(chart)
            on_s = dist_s <= hmax
            if on_s.any():
                rec["moved_on_S"] = float(np.max(np.abs(v.values[on_s] - u.values[on_s])))

        rec["assertions_passed"] = bool(
            rec["factorization_residual"] < 1e-9 and rec["short_min_eig"] > 0
            and rec.get("cond3_hess_ok", True) and rec.get("cond3_grad_rho_ok", True)
            and moved_out < 1e-13)
        u, rho, h = v, rho_next, h_next
        incoming_top = out.meta.get("top_frequency", base * growth)
        rho_seq.append(rho)
        history.append(rec)

    lemma = check_rho_lemma(rho_seq, chi_seq, chit_seq, ladder, state.rho,
                            inner_seq=inner_seq) if chi_seq else []
    new_state = AdaptedState(
        u, rho, h, sigma,
        A=state.A ** float(schedule.b ** 2),
        theta=float(schedule.theta_prime),
        alpha=float(schedule.alpha_prime),
        certificate={"history": history, "rho_lemma": lemma,
                     "truncation": truncation})
    return new_state, history, truncation


def rho_recursion_audit(rho0: ScalarField, sigma: SkeletonSet, s_set: SkeletonSet,
                        ladder: DeskLadder, depth: int):
    """Run the amplitude recursion alone (no corrugation) to any depth.

    The recursion lemma is a statement about rho, chi and the delta ladder
    only, so its node-wise properties can be certified deeper than a grid
    can corrugate.  Returns (rho sequence, per-q lemma records).
    """
    rho = rho0
    rho_seq, chi_seq, chit_seq, inner_seq = [rho0], [], [], []
    for q in range(depth):
        cut = cutoffs(rho, sigma, s_set, q, ladder)
        chi_seq.append(cut.chi)
        chit_seq.append(cut.chi_tilde)
        inner_seq.append(cut.inner_tube)
        rho = update_rho(rho, cut.chi, ladder.delta_q(q + 2))
        rho_seq.append(rho)
    return rho_seq, check_rho_lemma(rho_seq, chi_seq, chit_seq, ladder, rho0,
                                    inner_seq=inner_seq)


# ---------------------------------------------------------------------------
# global driver

def run_global(g: MetricField, u0: ImmersionField, theta0, alpha0, a0: float,
               depth: int, table: CorrugationTable,
               skeleta: list[SkeletonSet] | None = None,
               config: PassConfig | None = None,
               bootstrap_delta_star: float | None = None,
               holder_probe: bool = True):
    """Bootstrap, then a pass per skeleton level, with full reporting.

    Returns (final immersion, report).  The report carries the exact
    schedule chain, the per-stage history of every pass, displacement and
    defect accounting, the Hoelder probes, and any truncation certificates.
    """
    chart = u0.chart
    config = config or PassConfig(table=table)
    skeleta = skeleta if skeleta is not None else [
        SkeletonSet.empty(), SkeletonSet.empty(),
        SkeletonSet(dimension_level=2, whole=True)]

    report: dict = {"passes": [], "schedules": []}

    u_t, h_t, delta_star, boot = bootstrap_strong(
        u0, g, a0, table, delta_star=bootstrap_delta_star)
    report["bootstrap"] = boot
    rho0 = ScalarField.constant(chart, math.sqrt(delta_star))

    theta = Fraction(theta0).limit_denominator(10 ** 9)
    alpha = Fraction(alpha0).limit_denominator(10 ** 9)
    state = AdaptedState(u_t, rho0, h_t, SkeletonSet.empty(),
                         A=a0, theta=float(theta), alpha=float(alpha))
    report["initial_certificate"] = certify_adapted(state, g, config.rho_floor)

    # exact exponent chain across the planned passes
    theta_j, alpha_j = theta, alpha
    exponent_chain = []
    for _ in skeleta:
        b_j = growth_exponent(theta_j, alpha_j, 2)
        exponent_chain.append((theta_j, alpha_j, b_j))
        theta_j, alpha_j = theta_j / b_j ** 2, alpha_j / (2 * b_j ** 2)
    theta_final = theta_j
    report["theta_final"] = float(theta_final)
    probe_theta = 0.9 * float(theta_final)

    probes = []
    if holder_probe:
        probes.append(holder_seminorm(state.u, probe_theta, deriv_order=1))

    total_disp = float(boot.get("u_moved", 0.0))
    current_top = float(boot.get("top_frequency", 0.0))
    for level, sigma in enumerate(skeleta):
        theta_p, alpha_p, b_p = exponent_chain[level]
        delta1 = float(np.max(state.rho.values) ** 2)
        a_sched = max(state.A, minimal_adequate_a(theta_p, alpha_p, delta1))
        sched = build_schedule(a_sched, theta_p, alpha_p, delta1, depth=max(depth + 3, 4))
        report["schedules"].append({
            "level": level, "A_exact_ladder": a_sched, "A_executed": state.A,
            "b": str(sched.b), "theta": str(theta_p), "alpha": str(alpha_p),
            "lam1_exact": sched.lam_q(1),
            "exact_ladder_resolvable": sched.lam_q(1) <= 2 * np.pi / (
                NODES_PER_WAVELENGTH * max(chart.spacing)),
        })
        if sigma.is_empty:
            report["passes"].append({"level": level, "skipped": "empty skeleton"})
            continue
        ladder = desk_ladder(sched, delta1, chart, depth)
        prev_u = state.u
        state, history, truncation = inductive_pass(
            state, sigma, sched, ladder, depth, g, config,
            incoming_top=current_top)
        for s_rec in history:
            if s_rec.get("active"):
                current_top = max(current_top,
                                  s_rec["stage_meta"].get("base_frequency", 0.0)
                                  * s_rec["stage_meta"].get("K", 1.0))
        pass_disp = float(np.max(np.linalg.norm(state.u.values - prev_u.values, axis=-1)))
        total_disp += pass_disp
        if holder_probe:
            probes.append(holder_seminorm(state.u, probe_theta, deriv_order=1))
        report["passes"].append({
            "level": level, "stages": history, "truncation": truncation,
            "displacement": pass_disp,
            "rho_lemma": state.certificate["rho_lemma"],
        })

    pb = pullback_metric(state.u)
    defect = np.abs(g.values - pb.values)
    g_scale = float(np.max(np.abs(g.values)))
    report["final"] = {
        "defect_sup": float(defect.max()),
        "defect_relative": float(defect.max()) / g_scale,
        "rho_max": float(state.rho.values.max()),
        "rho_min": float(state.rho.values.min()),
        "displacement_total": total_disp,
        "displacement_budget": a0 ** -0.5,
        "short_min_eig": float(MetricField(chart, g.values - pb.values)
                               .eigenvalues()[0].min()),
        "holder_probe_theta": probe_theta,
        "holder_probes": probes,
    }
    report["final"]["certificate"] = certify_adapted(state, g, config.rho_floor)
    return state, report


def calibrate_amplitude_base(g: MetricField, u0: ImmersionField, theta0, alpha0,
                             table: CorrugationTable, depth: int = 3,
                             candidates=(1.0, 2.0, 4.0, 8.0, 16.0, 32.0),
                             bootstrap_delta_star: float | None = None) -> dict:
    """Sweep amplitude bases and return twice the smallest passing one.

    A base passes when every executed stage of a depth-limited run keeps its
    assertions (factorization exactness, shortness, the rho-power bounds,
    locality) and the total displacement stays within A^(-1/2).  The sweep
    mirrors the role "A sufficiently large" plays in the estimates; at desk
    amplitudes the rho-power bounds are slack for any A >= 1, so the
    displacement budget is normally the binding constraint.
    """
    results = []
    chosen = None
    for a0 in candidates:
        try:
            _, rep = run_global(g, u0, theta0, alpha0, a0, depth, table,
                                bootstrap_delta_star=bootstrap_delta_star,
                                holder_probe=False)
        except (StepPreconditionError, ShortnessLostError, ScheduleError) as exc:
            results.append({"A": a0, "ok": False, "reason": str(exc)})
            continue
        stage_ok = all(
            s.get("assertions_passed", True)
            for p in rep["passes"] for s in p.get("stages", []) if s.get("active"))
        disp_ok = rep["final"]["displacement_total"] <= a0 ** -0.5
        ok = stage_ok and disp_ok and rep["final"]["short_min_eig"] > 0
        results.append({"A": a0, "ok": ok, "stage_ok": stage_ok,
                        "displacement": rep["final"]["displacement_total"],
                        "budget": a0 ** -0.5})
        if ok and chosen is None:
            chosen = a0
            break
    return {"sweep": results, "smallest_passing": chosen,
            "recommended": 2.0 * chosen if chosen else None}
