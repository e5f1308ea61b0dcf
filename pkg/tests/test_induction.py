from fractions import Fraction

import numpy as np
import pytest

from isoflex.corrugation import build_corrugation
from isoflex.grid import (
    CLAMPED,
    PERIODIC,
    GridChart,
    ImmersionField,
    MetricField,
    ScalarField,
    pullback_metric,
)
from isoflex.induction import (
    AdaptedState,
    DeskLadder,
    PassConfig,
    ScheduleError,
    SkeletonSet,
    build_schedule,
    certify_adapted,
    cutoffs,
    desk_ladder,
    growth_exponent,
    inductive_pass,
    minimal_adequate_a,
    rho_recursion_audit,
    run_global,
    update_rho,
)


@pytest.fixture(scope="module")
def table():
    return build_corrugation()


def quarter_ladder(delta1=0.125, base=2 * np.pi, growth=2.0, depth=8,
                   A=4.0, theta=0.15, alpha=0.1):
    b = float(growth_exponent(Fraction(theta).limit_denominator(10**6),
                              Fraction(alpha).limit_denominator(10**6)))
    return DeskLadder(tuple(delta1 * 0.25 ** q for q in range(depth)),
                      tuple(base * growth ** q for q in range(depth)),
                      A, theta, alpha, 1.05, b)


class TestScheduleAlgebra:
    def test_growth_exponent_2d(self):
        b = growth_exponent(Fraction(15, 100), Fraction(1, 10))
        assert b == 1 + Fraction(4, 1) * Fraction(1, 10) * Fraction(15, 100) / Fraction(25, 100)
        assert b == Fraction(31, 25)  # 1.24

    def test_growth_exponent_limit(self):
        # alpha -> 0 pushes b -> 1 and theta' -> theta
        b = growth_exponent(Fraction(19999, 100000), Fraction(1, 10 ** 9))
        assert abs(float(b) - 1.0) < 1e-4

    def test_growth_exponent_3d(self):
        # n = 3: n* = 6, b = 1 + 12 alpha theta / (1 - 13 theta)
        b = growth_exponent(Fraction(5, 100), Fraction(1, 10), n=3)
        assert b == 1 + Fraction(12, 1) * Fraction(1, 10) * Fraction(5, 100) / Fraction(35, 100)

    def test_theta_band_rejected(self):
        with pytest.raises(ScheduleError):
            growth_exponent(Fraction(1, 4), Fraction(1, 10))
        with pytest.raises(ScheduleError):
            growth_exponent(Fraction(1, 10), Fraction(1, 10), n=3)

    def test_exact_exponent_relations(self):
        sched = build_schedule(1e9, Fraction(3, 20), Fraction(1, 10), 0.125)
        assert sched.theta_prime * sched.b ** 2 == sched.theta
        assert sched.alpha_prime * 2 * sched.b ** 2 == sched.alpha
        assert sched.a_prime_exponent == sched.b ** 2

    def test_ordering_violation_names_minimal_a(self):
        with pytest.raises(ScheduleError, match="minimal adequate A"):
            build_schedule(2.0, Fraction(3, 20), Fraction(1, 10), 0.125)
        a_min = minimal_adequate_a(Fraction(3, 20), Fraction(1, 10), 0.125)
        sched = build_schedule(a_min * 1.01, Fraction(3, 20), Fraction(1, 10), 0.125)
        for q in range(1, 4):
            assert sched.delta_q(q + 1) <= sched.delta_q(q) / 4 * (1 + 1e-9)
            assert sched.lam_q(q + 1) >= 2 * sched.lam_q(q) * (1 - 1e-9)

    def test_successor_degrades_exponents(self):
        sched = build_schedule(1e9, Fraction(3, 20), Fraction(1, 10), 0.125)
        nxt = sched.successor()
        assert nxt.theta == sched.theta_prime
        assert nxt.alpha == sched.alpha_prime
        assert nxt.theta < sched.theta
        # the A-power bookkeeping stays exact even when the ladder base has
        # to exceed A^(b^2) for the ordering
        assert nxt.a_exponent == sched.b ** 2


class TestRhoRecursion:
    def chart(self):
        return GridChart((1.0, 1.0), (64, 64), PERIODIC)

    def test_chi_zero_keeps_rho(self):
        c = self.chart()
        rho = ScalarField.constant(c, 0.3)
        chi = ScalarField.constant(c, 0.0)
        out = update_rho(rho, chi, 0.01)
        assert np.array_equal(out.values, rho.values)

    def test_chi_one_sets_delta_level(self):
        c = self.chart()
        rho = ScalarField.constant(c, 0.3)
        chi = ScalarField.constant(c, 1.0)
        out = update_rho(rho, chi, 0.01)
        assert np.allclose(out.values, 0.1)

    def test_monotone_everywhere(self):
        c = self.chart()
        rng = np.random.default_rng(0)
        ladder = quarter_ladder()
        # random rho inside the lemma band, random partial cut-off
        rho = ScalarField(c, np.sqrt(ladder.delta_q(2)) * rng.uniform(1.5, 2.0,
                                                                      c.resolution))
        chi = ScalarField(c, rng.uniform(0, 1, c.resolution))
        out = update_rho(rho, chi, ladder.delta_q(3))
        assert np.all(out.values <= rho.values + 1e-15)

    def test_depth_five_torus_audit(self):
        c = self.chart()
        ladder = quarter_ladder()
        rho0 = ScalarField.constant(c, np.sqrt(0.125))
        whole = SkeletonSet(dimension_level=2, whole=True)
        seq, recs = rho_recursion_audit(rho0, whole, SkeletonSet.empty(), ladder, 5)
        assert len(recs) == 5
        assert all(r["ok"] for r in recs)
        # saturation: rho halves per level on the full-support torus
        for q, f in enumerate(seq):
            assert np.allclose(f.values, np.sqrt(0.125) * 0.5 ** q)

    def test_vertex_dip_profile_untouched_near_s(self):
        c = GridChart((1.0, 1.0), (128, 128), CLAMPED)
        ladder = quarter_ladder(base=4 * np.pi)
        verts = SkeletonSet(0, points=((0.5, 0.5),))
        d = verts.distance_field(c)
        plateau = np.sqrt(0.125)
        rho0 = ScalarField(c, np.minimum(plateau, 0.9 * np.sqrt(d)))
        seq, recs = rho_recursion_audit(rho0, verts, SkeletonSet.empty(), ladder, 4)
        assert all(r["ok"] for r in recs)
        # the node at the vertex never moves
        i = j = 64
        assert seq[-1].values[i, j] == rho0.values[i, j]


class TestCutoffs:
    def test_saturated_plateau_gives_chi_one(self):
        c = GridChart((1.0, 1.0), (64, 64), PERIODIC)
        ladder = quarter_ladder()
        rho = ScalarField.constant(c, np.sqrt(ladder.delta_q(1)))
        whole = SkeletonSet(dimension_level=2, whole=True)
        cut = cutoffs(rho, whole, SkeletonSet.empty(), 0, ladder)
        assert np.all(cut.chi.values == 1.0)
        assert cut.audit["nesting_ok"]

    def test_small_rho_gives_chi_zero(self):
        c = GridChart((1.0, 1.0), (64, 64), PERIODIC)
        ladder = quarter_ladder()
        rho = ScalarField.constant(c, 1.4 * np.sqrt(ladder.delta_q(2)))
        whole = SkeletonSet(dimension_level=2, whole=True)
        cut = cutoffs(rho, whole, SkeletonSet.empty(), 0, ladder)
        assert np.all(cut.chi.values == 0.0)
        assert np.all(cut.chi_tilde.values == 0.0)

    def test_tube_localization(self):
        c = GridChart((1.0, 1.0), (128, 128), CLAMPED)
        ladder = quarter_ladder(base=2.0)  # r_(q+1) = 1/lam(q+2) decently wide
        rho = ScalarField.constant(c, np.sqrt(ladder.delta_q(1)))
        verts = SkeletonSet(0, points=((0.5, 0.5),))
        cut = cutoffs(rho, verts, SkeletonSet.empty(), 0, ladder)
        assert cut.audit["nesting_ok"]
        assert 0.0 < cut.audit["support_fraction"] < 1.0
        d = verts.distance_field(c)
        assert np.all(cut.chi.values[d > ladder.r_q(1)] == 0.0)
        assert cut.chi.values[64, 64] == 1.0


class TestSkeleton:
    def test_distance_to_segment(self):
        c = GridChart((1.0, 1.0), (64, 64), CLAMPED)
        seg = SkeletonSet(1, segments=(((0.25, 0.5), (0.75, 0.5)),))
        d = seg.distance_field(c)
        x, y = c.mesh()
        inside = (x >= 0.25) & (x <= 0.75)
        assert np.allclose(d[inside], np.abs(y[inside] - 0.5), atol=1e-12)

    def test_feature_separation(self):
        s = SkeletonSet(0, points=((0.2, 0.2), (0.2, 0.6), (0.7, 0.2)))
        assert s.feature_separation() == pytest.approx(0.4)

    def test_empty_and_whole(self):
        c = GridChart((1.0, 1.0), (16, 16), CLAMPED)
        assert np.all(np.isinf(SkeletonSet.empty().distance_field(c)))
        assert np.all(SkeletonSet(2, whole=True).distance_field(c) == 0.0)


class TestPipeline:
    def test_trivial_bootstrap_single_stage(self, table):
        n = 512
        c = GridChart((1.0, 1.0), (n, n), PERIODIC)
        g = MetricField.constant(c, 1.44 * np.eye(2))
        u0 = ImmersionField.flat(c, scale=np.sqrt(1.44 * 0.875))
        state, report = run_global(g, u0, theta0=0.15, alpha0=0.1, a0=4.0,
                                   depth=3, table=table,
                                   bootstrap_delta_star=0.125)
        assert report["bootstrap"]["trivial"]
        main = report["passes"][2]
        active = [s for s in main["stages"] if s.get("active")]
        assert len(active) >= 1
        s0 = active[0]
        assert s0["factorization_residual"] < 1e-9
        assert s0["short_min_eig"] > 0
        assert s0["h_update_consistency"] < 1e-10
        assert all(r["ok"] for r in main["rho_lemma"])
        # truncation carries an explicit reason once the grid is exhausted
        if main["truncation"] is not None:
            assert main["truncation"]["reason"] in (
                "frequency ceiling", "amplitude floor")
        assert report["final"]["defect_relative"] < report["bootstrap"]["delta_star"]
        assert report["final"]["short_min_eig"] > 0

    def test_literal_flat_start_runs_bootstrap(self, table):
        n = 256
        c = GridChart((1.0, 1.0), (n, n), PERIODIC)
        g = MetricField.constant(c, 1.44 * np.eye(2))
        u0 = ImmersionField.flat(c)
        state, report = run_global(g, u0, theta0=0.15, alpha0=0.1, a0=4.0,
                                   depth=2, table=table)
        assert not report["bootstrap"]["trivial"]
        assert report["initial_certificate"]["factorization_residual"] < 1e-9
        assert report["final"]["short_min_eig"] > 0
        assert report["final"]["displacement_total"] <= 4.0 ** -0.5

    def test_refuses_isometric_start(self, table):
        c = GridChart((1.0, 1.0), (128, 128), PERIODIC)
        g = MetricField.constant(c, np.eye(2))
        u0 = ImmersionField.flat(c)
        with pytest.raises(Exception, match="not strictly short"):
            run_global(g, u0, theta0=0.15, alpha0=0.1, a0=4.0, depth=1, table=table)

    def test_synthetic_vertex_state_preserves_s(self, table):
        # an adapted-by-construction state whose rho dips at the vertices:
        # the pass over the edge skeleton must leave the vertices untouched
        n = 512
        c = GridChart((1.0, 1.0), (n, n), CLAMPED)
        csq = 1.21
        g = MetricField.constant(c, csq * np.eye(2))
        delta_star = 0.125
        u0 = ImmersionField.flat(c, scale=np.sqrt(csq * (1.0 - delta_star)))
        verts = ((0.35, 0.35), (0.65, 0.35), (0.5, 0.62))
        s_set = SkeletonSet(0, points=verts)
        sigma = SkeletonSet(1, points=verts,
                            segments=((verts[0], verts[1]),
                                      (verts[1], verts[2]),
                                      (verts[2], verts[0])))
        d = s_set.distance_field(c)
        plateau = np.sqrt(delta_star)
        rho0 = ScalarField(c, np.minimum(plateau, 0.9 * np.sqrt(d)))
        # scale the map down where rho is positive: u#e = (1 - rho^2) g
        # exactly, via an explicit conformal flattening of the z-graph kind
        # is not available in closed form; instead keep u0 and absorb the
        # factorization into h0 (exact by construction)
        pb = pullback_metric(u0)
        defect = g.values - pb.values
        h0_vals = defect / np.maximum(rho0.values ** 2, 1e-30)[..., None] - g.values
        h0_vals[rho0.values == 0.0] = 0.0
        h0 = MetricField(c, h0_vals)
        state = AdaptedState(u0, rho0, h0, s_set, A=4.0, theta=0.15, alpha=0.1)

        cert = certify_adapted(state, g, rho_floor=1e-4)
        assert cert["factorization_residual"] < 1e-9
        assert cert["short_min_eig"] > 0

        sched = build_schedule(
            max(4.0, minimal_adequate_a(Fraction(3, 20), Fraction(1, 10), delta_star)),
            Fraction(3, 20), Fraction(1, 10), delta_star)
        ladder = desk_ladder(sched, delta_star, c, depth=2,
                             base_frequency=4 * np.pi, tube_radius=0.1)
        config = PassConfig(table=table)
        new_state, history, truncation = inductive_pass(
            state, sigma, sched, ladder, 2, g, config)
        active = [h for h in history if h.get("active")]
        # at this resolution the stage either survives or rolls back with a
        # clean certificate; the state stays exact either way
        if not active:
            assert truncation is not None
        for rec in active:
            assert rec.get("moved_on_S", 0.0) < 1e-12
            assert rec["factorization_residual"] < 1e-9
            assert rec["short_min_eig"] > 0
        cert = certify_adapted(new_state, g, rho_floor=1e-4)
        assert cert["factorization_residual"] < 1e-9
        assert cert["short_min_eig"] > 0
        ix = [(int(round(v[0] * (n - 1))), int(round(v[1] * (n - 1)))) for v in verts]
        for i, j in ix:
            assert np.max(np.abs(new_state.u.values[i, j] - u0.values[i, j])) < 1e-12


class TestCalibration:
    def test_sweep_returns_doubled_smallest(self, table):
        c = GridChart((1.0, 1.0), (128, 128), PERIODIC)
        g = MetricField.constant(c, 1.44 * np.eye(2))
        u0 = ImmersionField.flat(c, scale=np.sqrt(1.44 * 0.875))
        from isoflex.induction import calibrate_amplitude_base

        out = calibrate_amplitude_base(g, u0, 0.15, 0.1, table, depth=1,
                                       bootstrap_delta_star=0.125)
        assert out["smallest_passing"] is not None
        assert out["recommended"] == 2.0 * out["smallest_passing"]
        assert out["sweep"][0]["A"] == 1.0
