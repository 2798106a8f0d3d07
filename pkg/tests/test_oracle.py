import numpy as np
import pytest
from conftest import DI_GRID, SMALL_GRID, interior_mask

from hjfilter.dynamics import constraint, make_plant
from hjfilter.oracle import (
    GridModel,
    GridSpec,
    NonConvergence,
    TabularAdvantage,
    ValueTable,
    advantage_closed_form,
    advantage_table,
    apply_bellman_v,
    bellman_dv_pointwise,
    bellman_v_pointwise,
    discounted_int,
    interp_weights,
    read_table_csv,
    tabular_advantage,
    tabular_q,
    value_gradient,
    value_iteration,
    write_table_csv,
)


def braking_value(p, v, p_max=1.4):
    """Undiscounted double-integrator safety value from full braking."""
    if v >= 0:
        return min(p_max + p, p_max - (p + 0.5 * v * v))
    return min(p_max - p, p_max + (p - 0.5 * v * v))


class TestGrid:
    def test_parse_roundtrip(self):
        g = GridSpec.parse("-1:1:5,0:2:3")
        assert g.cells == (5, 3)
        np.testing.assert_allclose(g.spacing, [0.5, 1.0])
        assert g.nodes().shape == (15, 2)

    def test_interpolation_reproduces_nodes_and_linear(self):
        g = GridSpec(np.array([0.0, -1.0]), np.array([2.0, 1.0]), (5, 7))
        nodes = g.nodes()
        vals = 3.0 * nodes[:, 0] - 2.0 * nodes[:, 1] + 0.5
        table = ValueTable(g, vals.reshape(g.cells), 0.0, 0.1)
        np.testing.assert_allclose(table(nodes), vals, atol=1e-12)
        rng = np.random.default_rng(0)
        pts = rng.uniform([0, -1], [2, 1], size=(100, 2))
        np.testing.assert_allclose(table(pts), 3 * pts[:, 0] - 2 * pts[:, 1] + 0.5, atol=1e-12)

    def test_out_of_grid_clamps(self):
        g = GridSpec(np.array([0.0]), np.array([1.0]), (3,))
        table = ValueTable(g, np.array([1.0, 2.0, 5.0]), 0.0, 0.1)
        assert table([-4.0]) == pytest.approx(1.0)
        assert table([9.0]) == pytest.approx(5.0)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(3)
        _, w = interp_weights(DI_GRID, rng.uniform(-3, 3, size=(200, 2)))
        np.testing.assert_allclose(w.sum(axis=1), 1.0)
        assert np.all(w >= 0)

    def test_invalid_grid(self):
        with pytest.raises(ValueError):
            GridSpec(np.array([1.0]), np.array([0.0]), (3,))
        with pytest.raises(ValueError):
            GridSpec(np.array([0.0]), np.array([1.0]), (1,))


class TestValueIteration:
    def test_origin_is_max(self, di_table, di_table_undiscounted, small_table):
        for t in (di_table, di_table_undiscounted, small_table):
            assert t([0.0, 0.0]) == pytest.approx(1.4, abs=1e-8)

    def test_braking_node(self, di_table_undiscounted):
        # node (1.4, 0.2) lies on the 101x101 grid
        assert di_table_undiscounted([1.4, 0.2]) == pytest.approx(-0.02, abs=1e-3)

    def test_undiscounted_matches_braking_closed_form(self, di_table_undiscounted):
        rng = np.random.default_rng(0)
        pts = rng.uniform([-1.2, -1.2], [1.2, 1.2], size=(300, 2))
        exact = np.array([braking_value(p, v) for p, v in pts])
        # braking paths that overshoot the grid edge (|p| > 1.5) see clamped lookups
        keep = exact >= -0.1
        err = np.abs(di_table_undiscounted(pts[keep]) - exact[keep])
        assert np.median(err) < 0.02
        assert np.max(err) < 0.1

    def test_large_lambda_gives_c(self, di_plant):
        t = value_iteration(di_plant, SMALL_GRID, 100.0 / di_plant.dt, tol=1e-12)
        c = constraint(di_plant, SMALL_GRID.nodes())
        np.testing.assert_allclose(t.flat, c, atol=1e-12)

    def test_nonconvergence_carries_residual(self, di_plant):
        with pytest.raises(NonConvergence) as exc:
            value_iteration(di_plant, SMALL_GRID, 1e-6, tol=1e-12, max_iters=3)
        assert exc.value.residual > 0

    def test_negative_lambda_rejected(self, di_plant):
        with pytest.raises(ValueError):
            value_iteration(di_plant, SMALL_GRID, -1.0)

    def test_ordering_corollary(self, di_table, di_plant):
        model = di_table.model
        Q = np.minimum(model.c[:, None], discounted_int(model.c[:, None], di_table.lam, di_plant.dt)
                       + np.exp(-di_table.lam * di_plant.dt) * model.lookup_next(di_table.flat))
        assert np.all(Q <= di_table.flat[:, None] + 1e-9)
        assert np.all(di_table.flat <= model.c + 1e-9)

    def test_csv_roundtrip(self, small_table, tmp_path):
        path = tmp_path / "v.csv"
        write_table_csv(path, small_table)
        assert path.read_text().splitlines()[0] == "x0,x1,V"
        back = read_table_csv(path)
        assert back.grid.same_as(small_table.grid)
        assert back.flat.tobytes() == small_table.flat.tobytes()
        assert back.lam == small_table.lam


class TestTabularQ:
    def test_argmax_control_recovers_v(self, di_table, di_plant):
        model = di_table.model
        rng = np.random.default_rng(1)
        for k in rng.choice(model.N, 30, replace=False):
            x = model.nodes[k]
            u = model.controls[di_table.policy[k]]
            assert tabular_q(di_table, di_plant, x, u) == pytest.approx(di_table.flat[k], abs=1e-9)

    def test_q_below_c(self, di_table, di_plant):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.uniform([-1.4, -2], [1.4, 2])
            u = rng.uniform(-1, 1, size=1)
            assert tabular_q(di_table, di_plant, x, u) <= constraint(di_plant, x) + 1e-12

    def test_accelerating_worse_than_braking(self, di_table_undiscounted, di_plant):
        x = [1.4, 0.2]
        assert tabular_q(di_table_undiscounted, di_plant, x, [1.0]) < tabular_q(di_table_undiscounted, di_plant, x, [-1.0])


class TestAdvantage:
    def test_closed_form_substitution(self):
        assert advantage_closed_form(1.0, 0.8, -0.1, 0.5) == pytest.approx(0.0, abs=1e-15)

    def test_first_case_negative(self, di_table, di_plant):
        # at rest inside the interval V = c; pushing outward lowers V
        for method in ("gradient", "transition"):
            x = np.array([0.6, 0.0])
            assert di_table(x) == pytest.approx(constraint(di_plant, x), abs=1e-9)
            q = tabular_advantage(di_table, di_plant, x, [1.0], derivative=method)
            assert q < 0

    def test_unknown_method(self, di_table, di_plant):
        with pytest.raises(ValueError):
            tabular_advantage(di_table, di_plant, [0.0, 0.0], [1.0], derivative="spline")

    def test_pointwise_matches_table(self, di_table, di_plant):
        adv = advantage_table(di_table, di_plant, "transition")
        model = di_table.model
        for k in (5000, 5101, 2222):
            for j in (0, 10, 20):
                q = tabular_advantage(di_table, di_plant, model.nodes[k], model.controls[j], "transition")
                assert q == pytest.approx(adv.values[k, j], abs=1e-12)

    def test_pde_residual_lemma(self, di_table, di_plant):
        """|min{c - V, max_u dV.(f+gu) + lam (c - V)}| <= 5e-2 * spacing on interior nodes."""
        adv = advantage_table(di_table, di_plant, "transition")
        mask = interior_mask(di_table)
        resid = np.abs(adv.values.max(axis=1))[mask]
        assert resid.max() <= 5e-2 * DI_GRID.spacing.min()

    def test_all_entries_nonpositive(self, di_table, di_plant):
        adv = advantage_table(di_table, di_plant, "transition")
        assert adv.values.max() <= 1e-12

    def test_gradient_form_on_smooth_region(self, di_table, di_plant):
        """Away from kinks the gradient form agrees with the transition form."""
        rng = np.random.default_rng(4)
        agree = 0
        for x in rng.uniform([-0.5, -0.3], [0.5, 0.3], size=(40, 2)):
            g = tabular_advantage(di_table, di_plant, x, [0.0], "gradient")
            t = tabular_advantage(di_table, di_plant, x, [0.0], "transition")
            agree += abs(g - t) < 5e-2
        assert agree >= 15

    def test_value_gradient_linear(self):
        g = GridSpec(np.array([0.0, 0.0]), np.array([1.0, 1.0]), (11, 11))
        nodes = g.nodes()
        table = ValueTable(g, (2 * nodes[:, 0] - nodes[:, 1]).reshape(g.cells), 0.0, 0.1)
        np.testing.assert_allclose(value_gradient(table, [[0.5, 0.5]])[0], [2.0, -1.0], atol=1e-12)


def _random_tables(rng, shape, scale=1.0):
    return rng.normal(0, scale, size=shape), rng.normal(0, scale, size=shape)


class TestBellmanOperators:
    @pytest.fixture(scope="class")
    @classmethod
    def model(cls):
        return GridModel.build(make_plant("double_integrator", 0.1), SMALL_GRID)

    @pytest.mark.parametrize("lam_dt", [0.01, 0.1, 1.0])
    def test_value_contraction(self, model, lam_dt):
        rng = np.random.default_rng(11)
        dt = model.plant.dt
        lam = lam_dt / dt
        q = TabularAdvantage(-np.abs(rng.normal(size=(model.N, model.K))), model.controls,
                             rng.integers(0, model.K, model.N))
        for _ in range(20):
            a, b = _random_tables(rng, model.N, scale=rng.uniform(0.1, 3))
            ta = ValueTable(SMALL_GRID, a.reshape(SMALL_GRID.cells), lam, dt)
            tb = ValueTable(SMALL_GRID, b.reshape(SMALL_GRID.cells), lam, dt)
            out = np.abs(bellman_v_pointwise(ta, q, model) - bellman_v_pointwise(tb, q, model)).max()
            assert out / np.abs(a - b).max() <= np.exp(-lam_dt) + 1e-9

    @pytest.mark.parametrize("lam_dt", [0.01, 0.1, 1.0])
    def test_derivative_contraction(self, model, lam_dt):
        rng = np.random.default_rng(12)
        dt = model.plant.dt
        lam = lam_dt / dt
        vt = ValueTable(SMALL_GRID, rng.normal(size=SMALL_GRID.cells), lam, dt)
        for _ in range(20):
            a, b = _random_tables(rng, (model.N, model.K), scale=rng.uniform(0.1, 5))
            out = np.abs(bellman_dv_pointwise(a, vt, model) - bellman_dv_pointwise(b, vt, model)).max()
            assert out / np.abs(a - b).max() <= np.exp(-lam_dt) + 1e-9

    def test_shift_without_clipping(self, model):
        rng = np.random.default_rng(13)
        dt = model.plant.dt
        base = model.c - 10.0 + rng.uniform(-0.5, 0.5, model.N)
        q = TabularAdvantage(np.zeros((model.N, model.K)), model.controls, np.zeros(model.N, dtype=int))
        t1 = ValueTable(SMALL_GRID, (base + 0.7).reshape(SMALL_GRID.cells), 0.0, dt)
        t2 = ValueTable(SMALL_GRID, base.reshape(SMALL_GRID.cells), 0.0, dt)
        d = apply_bellman_v(t1, q, model.plant).flat - apply_bellman_v(t2, q, model.plant).flat
        np.testing.assert_allclose(d, 0.7, atol=1e-12)

    def test_heavy_discount_gives_c_minus_q(self, model):
        rng = np.random.default_rng(14)
        dt = model.plant.dt
        qv = -np.abs(rng.normal(size=(model.N, model.K)))
        q = TabularAdvantage(qv, model.controls, rng.integers(0, model.K, model.N))
        t = ValueTable(SMALL_GRID, model.c.reshape(SMALL_GRID.cells), 1e4 / dt, dt)
        t.model = model
        out = apply_bellman_v(t, q, model.plant).flat
        expect = model.c - dt * qv[np.arange(model.N), q.behavior]
        np.testing.assert_allclose(out, expect, atol=1e-9)

    def test_shape_mismatch(self, model):
        t = ValueTable(SMALL_GRID, np.zeros(SMALL_GRID.cells), 0.1, 0.1)
        bad = TabularAdvantage(np.zeros((3, 3)), model.controls, np.zeros(3, dtype=int))
        with pytest.raises(ValueError):
            bellman_v_pointwise(t, bad, model)


class TestLimits:
    def test_discount_limit_monotone(self, di_plant):
        v0 = value_iteration(di_plant, SMALL_GRID, 1e-6 / di_plant.dt, tol=1e-10)
        dists = []
        for lam_dt in (0.1, 0.01, 0.001):
            t = value_iteration(di_plant, SMALL_GRID, lam_dt / di_plant.dt, tol=1e-10)
            dists.append(np.abs(t.flat - v0.flat).max())
        assert dists[0] >= dists[1] >= dists[2]

    def test_horizon_limit_nonoptimal_input(self, di_table, di_plant):
        """For a fixed input the gap |Q_s - V| shrinks linearly with s."""
        rng = np.random.default_rng(5)
        pts = rng.uniform([-1.2, -1.5], [1.2, 1.5], size=(200, 2))
        gaps = np.array([[abs(tabular_q(di_table, di_plant, x, [1.0], s) - di_table(x)) for s in (0.1, 0.05, 0.025)]
                         for x in pts]).mean(axis=0)
        assert gaps[0] > gaps[1] > gaps[2]
        np.testing.assert_allclose(gaps[:-1] / gaps[1:], 2.0, rtol=0.1)

    def test_horizon_limit_optimal_input(self, di_table, di_plant):
        """At the optimal sampled input, Q_s stays at V up to interpolation error for every s."""
        rng = np.random.default_rng(6)
        controls = di_table.model.controls
        pts = rng.uniform([-1.2, -1.5], [1.2, 1.5], size=(100, 2))
        # skip the kink locus p = -v|v|/4, where bilinear interpolation error is O(spacing)
        pts = pts[np.abs(pts[:, 0] + pts[:, 1] * np.abs(pts[:, 1]) / 4) > 2 * DI_GRID.spacing.max()]
        for x in pts:
            qs = [tabular_q(di_table, di_plant, x, u) for u in controls]
            u = controls[int(np.argmax(qs))]
            for s in (0.1, 0.05, 0.025):
                assert abs(tabular_q(di_table, di_plant, x, u, s) - di_table(x)) <= 5e-3

    @pytest.mark.xfail(strict=True, reason="at the optimal input the gap sits at the interpolation floor "
                                           "(~3e-4) for all s, so pointwise monotonicity is noise-limited")
    def test_horizon_limit_pointwise_monotone(self, di_table, di_plant):
        rng = np.random.default_rng(0)
        controls = di_table.model.controls
        for x in rng.uniform([-1.2, -1.5], [1.2, 1.5], size=(200, 2)):
            qs = [tabular_q(di_table, di_plant, x, u) for u in controls]
            u = controls[int(np.argmax(qs))]
            g = [abs(tabular_q(di_table, di_plant, x, u, s) - di_table(x)) for s in (0.1, 0.05, 0.025)]
            assert g[0] >= g[1] >= g[2]
