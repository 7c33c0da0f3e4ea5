"""Forward model, jacobian, rescaling, and sensitivity-table tests."""

import math

import numpy as np
import pytest

from pila import diffcore as dc
from pila import mogi
from pila.rng import substream

from oracles import mogi_scalar_oracle


BOUNDS = mogi.VariableBounds()


def single_station(x_km, y_km):
    return mogi.StationGeometry(("A",), np.array([[x_km, y_km]]))


class TestForward:
    def test_hand_oracle_single_station(self):
        # nu=0.25, dV=4e6 m^3, depth 10 km, station 5 km due east:
        # independently derived with 40-digit arithmetic before the build
        geom = single_station(5.0, 0.0)
        u = mogi.forward(mogi.MogiParams(0.0, 0.0, 10.0, 4e6), geom)
        np.testing.assert_allclose(u[0], 3.416460208402450, rtol=1e-12)
        assert u[1] == 0.0
        np.testing.assert_allclose(u[2], 6.832920416804900, rtol=1e-12)

    def test_zero_volume_change_is_zero_field(self):
        geom = mogi.default_station_geometry(5)
        u = mogi.forward(mogi.MogiParams(1.0, -2.0, 7.5, 0.0), geom)
        np.testing.assert_array_equal(u, np.zeros(15))

    def test_station_above_source(self):
        geom = single_station(1.25, -3.5)
        params = mogi.MogiParams(1.25, -3.5, 10.0, 4e6)
        u = mogi.forward(params, geom)
        assert u[0] == 0.0 and u[1] == 0.0
        alpha = 0.75 * 4e6 / math.pi
        np.testing.assert_allclose(u[2], alpha / 10000.0 ** 2 * 1000.0, rtol=1e-12)

    def test_matches_scalar_oracle_on_random_draws(self):
        rng = substream(42, "forward-oracle")
        geom = mogi.default_station_geometry(4)
        lo, hi = BOUNDS.as_arrays()
        for _ in range(50):
            params = mogi.MogiParams.from_vector(rng.uniform(lo, hi))
            got = mogi.forward(params, geom)
            want = mogi_scalar_oracle(params, geom)
            np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_forward_batch_matches_forward(self):
        rng = substream(43, "forward-batch")
        geom = mogi.default_station_geometry(6)
        lo, hi = BOUNDS.as_arrays()
        z = rng.uniform(lo, hi, size=(5, 4))
        batch = mogi.forward_batch(z, geom)
        for i in range(5):
            np.testing.assert_allclose(
                batch[i], mogi.forward(mogi.MogiParams.from_vector(z[i]), geom),
                rtol=1e-12)

    def test_invalid_depth_rejected(self):
        with pytest.raises(ValueError):
            mogi.MogiParams(0.0, 0.0, -1.0, 1e6)

    def test_empty_geometry_rejected(self):
        geom = mogi.StationGeometry((), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            mogi.forward(mogi.MogiParams(0.0, 0.0, 5.0, 1e6), geom)


class TestPhysicalProperties:
    def test_linearity_in_volume_change_exact(self):
        geom = mogi.default_station_geometry(7)
        base = mogi.forward(mogi.MogiParams(2.0, 1.0, 9.0, 1.0), geom)
        for k in (-3.0, 0.5, 2.0e6):
            scaled = mogi.forward(mogi.MogiParams(2.0, 1.0, 9.0, k), geom)
            np.testing.assert_allclose(scaled, k * base, rtol=1e-12)

    def test_rotational_equivariance(self):
        rng = substream(5, "rotation")
        coords = rng.uniform(-6, 6, size=(8, 2))
        params = mogi.MogiParams(0.0, 0.0, 8.0, 5e6)
        theta = 0.7331
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        geom = mogi.StationGeometry(tuple(f"S{i}" for i in range(8)), coords)
        geom_rot = mogi.StationGeometry(geom.names, coords @ rot.T)
        u = mogi.forward(params, geom)
        u_rot = mogi.forward(params, geom_rot)
        horizontal = np.stack([u[:8], u[8:16]], axis=1)
        expected = horizontal @ rot.T
        np.testing.assert_allclose(u_rot[:8], expected[:, 0], atol=1e-12)
        np.testing.assert_allclose(u_rot[8:16], expected[:, 1], atol=1e-12)
        np.testing.assert_allclose(u_rot[16:], u[16:], atol=1e-12)

    def test_horizontal_motion_points_outward_for_inflation(self):
        geom = mogi.default_station_geometry(12)
        params = mogi.MogiParams(2.0, 1.5, 9.35, 3.7e6)
        u = mogi.forward(params, geom)
        n = len(geom)
        for i in range(n):
            radial = geom.coords_km[i] - np.array([params.xm_km, params.ym_km])
            assert np.dot([u[i], u[n + i]], radial) > 0

    def test_magnitude_decays_with_horizontal_distance(self):
        params = mogi.MogiParams(0.0, 0.0, 9.35, 3.7e6)
        mags = []
        for dist in (1.0, 3.0, 6.0, 12.0, 20.0):
            u = mogi.forward(params, single_station(dist, 0.0))
            mags.append(np.linalg.norm(u))
        assert all(a > b for a, b in zip(mags, mags[1:]))


class TestJacobian:
    def test_volume_column_is_field_over_volume(self):
        geom = mogi.default_station_geometry(6)
        params = mogi.MogiParams(1.0, -0.5, 11.0, 4.2e6)
        u = mogi.forward(params, geom)
        jac = mogi.jacobian(params, geom)
        np.testing.assert_allclose(jac[:, 3], u / params.dv_m3, rtol=1e-12)

    def test_matches_finite_difference(self):
        geom = mogi.default_station_geometry(5)
        rng = substream(9, "jac-fd")
        lo, hi = BOUNDS.as_arrays()
        for _ in range(10):
            vec = rng.uniform(lo, hi)
            jac = mogi.jacobian(mogi.MogiParams.from_vector(vec), geom)
            for out_dim in (0, 7, 14):
                def f(v, out_dim=out_dim):
                    return mogi.forward(mogi.MogiParams.from_vector(v), geom)[out_dim]

                fd = dc.finite_difference(f, vec)
                np.testing.assert_allclose(
                    jac[out_dim], fd, rtol=1e-5,
                    atol=1e-8 * max(1.0, np.abs(fd).max()))

    def test_east_depth_derivative_vs_finite_difference(self):
        geom = single_station(5.0, 0.0)
        params = mogi.MogiParams(0.0, 0.0, 10.0, 4e6)
        jac = mogi.jacobian(params, geom)

        def east_of_depth(v):
            return mogi.forward(mogi.MogiParams(0.0, 0.0, v[0], 4e6), geom)[0]

        fd = dc.finite_difference(east_of_depth, np.array([10.0]))
        np.testing.assert_allclose(jac[0, 2], fd[0], rtol=1e-5)

    def test_finite_inside_bounds(self):
        geom = mogi.default_station_geometry(12)
        rng = substream(10, "jac-finite")
        lo, hi = BOUNDS.as_arrays()
        for _ in range(30):
            jac = mogi.jacobian(
                mogi.MogiParams.from_vector(rng.uniform(lo, hi)), geom)
            assert np.isfinite(jac).all()

    def test_agrees_with_tape_backward(self):
        geom = mogi.default_station_geometry(4)
        vec = np.array([1.5, 0.5, 9.0, 3e6])
        jac = mogi.jacobian(mogi.MogiParams.from_vector(vec), geom)
        z = dc.Tensor(vec[None, :])
        xf = mogi.decode_tape(z, geom)
        for out_dim in range(geom.n_obs):
            grads = dc.backward(dc.tsum(dc.slice_last(xf, out_dim, out_dim + 1)), [z])
            np.testing.assert_allclose(grads[z].data[0], jac[out_dim], rtol=1e-10)


class TestRescale:
    def test_endpoints_and_midpoint(self):
        assert mogi.rescale(np.array([0, 0, 0, 0]), BOUNDS)[2] == 2.0
        assert mogi.rescale(np.array([1, 1, 1, 1]), BOUNDS)[2] == 20.0
        assert mogi.rescale(np.array([0.5, 0.5, 0.5, 0.5]), BOUNDS)[2] == 11.0

    def test_affine_and_monotone(self):
        rng = substream(3, "rescale")
        eta = rng.random(4)
        delta = 0.1 * rng.random(4)
        lo, hi = BOUNDS.as_arrays()
        a = mogi.rescale(eta, BOUNDS)
        b = mogi.rescale(np.clip(eta + delta, 0, 1), BOUNDS)
        assert np.all(b >= a)
        np.testing.assert_allclose(b - a, (np.clip(eta + delta, 0, 1) - eta) * (hi - lo),
                                   rtol=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            mogi.rescale(np.array([0.5, 0.5, 1.2, 0.5]), BOUNDS)

    def test_tape_version_matches(self):
        rng = substream(4, "rescale-tape")
        eta = rng.random((6, 4))
        got = mogi.rescale_tape(dc.Tensor(eta), BOUNDS).data
        for i in range(6):
            np.testing.assert_allclose(got[i], mogi.rescale(eta[i], BOUNDS), rtol=1e-14)

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            mogi.VariableBounds(depth=(5.0, 5.0))


class TestGeometryCsv:
    def test_roundtrip(self, tmp_path):
        geom = mogi.default_station_geometry(5)
        path = tmp_path / "geom.csv"
        mogi.write_geometry_csv(path, geom)
        back = mogi.read_geometry_csv(path)
        assert back.names == geom.names
        np.testing.assert_allclose(back.coords_km, geom.coords_km, rtol=1e-10)

    def test_duplicate_station_rejected(self):
        with pytest.raises(ValueError):
            mogi.StationGeometry(("A", "A"), np.zeros((2, 2)))

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("name,x,y\nA,1,2\n")
        with pytest.raises(ValueError):
            mogi.read_geometry_csv(path)

    def test_flattening_order_is_east_north_vertical(self):
        geom = mogi.StationGeometry(("P", "Q"), np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert geom.obs_labels() == ["P_e", "Q_e", "P_n", "Q_n", "P_v", "Q_v"]


class TestSensitivityProfile:
    def test_constant_along_volume_sweep(self):
        geom = mogi.default_station_geometry(3)
        grid = mogi.GridSpec(sweep={"dv": np.linspace(-8e6, 8e6, 5)},
                             fixed={"depth": 9.35})
        header, rows = mogi.sensitivity_profile(BOUNDS, geom, grid)
        by_dim = {}
        for row in rows:
            by_dim.setdefault(row[header.index("output_dim")], []).append(
                row[header.index("standardized_gradient")])
        for grads in by_dim.values():
            np.testing.assert_allclose(grads, grads[0], rtol=1e-10)

    def test_vertical_gradient_decays_with_depth(self):
        # directly above the source u_v = alpha/d^2, so |du_v/d depth| = 2
        # alpha/d^3 shrinks as the source deepens
        geom = single_station(2.51, 0.91)
        grid = mogi.GridSpec(sweep={"depth": np.array([5.0, 10.0])},
                             fixed={"xm": 2.51, "ym": 0.91, "dv": 3.7e6})
        header, rows = mogi.sensitivity_profile(BOUNDS, geom, grid)
        vert = [row for row in rows if row[header.index("output_dim")] == "A_v"]
        shallow, deep = (row[header.index("standardized_gradient")] for row in vert)
        assert abs(deep) < abs(shallow)
        lo, hi = BOUNDS.as_arrays()
        alpha = 0.75 * 3.7e6 / math.pi
        for depth, got in zip((5.0, 10.0), (shallow, deep)):
            # mm output, per-km depth, chain-ruled to the normalized variable
            want = -2.0 * alpha / (depth * 1000.0) ** 3 * 1000.0 * 1000.0 * (hi[2] - lo[2])
            np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_rows_match_jacobian_chain_rule(self):
        geom = mogi.default_station_geometry(4)
        std = np.linspace(1.0, 4.0, geom.n_obs)
        grid = mogi.GridSpec(sweep={"depth": np.array([6.0, 12.0])},
                             fixed={"xm": 1.0, "ym": 0.5, "dv": 2e6})
        header, rows = mogi.sensitivity_profile(BOUNDS, geom, grid, output_std=std)
        lo, hi = BOUNDS.as_arrays()
        labels = geom.obs_labels()
        for depth in (6.0, 12.0):
            jac = mogi.jacobian(mogi.MogiParams(1.0, 0.5, depth, 2e6), geom)
            expected = jac[:, 2] * (hi[2] - lo[2]) / std
            got = [row[header.index("standardized_gradient")] for row in rows
                   if row[0] == depth]
            np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-10)
            assert [row[header.index("output_dim")] for row in rows
                    if row[0] == depth] == labels

    def test_two_variable_grid_shape(self):
        geom = mogi.default_station_geometry(3)
        grid = mogi.GridSpec(sweep={"depth": np.linspace(2, 20, 4),
                                    "dv": np.linspace(-9e6, 9e6, 3)})
        header, rows = mogi.sensitivity_profile(BOUNDS, geom, grid)
        assert len(rows) == 4 * 3 * 2 * geom.n_obs
        assert header[:2] == ["depth_value", "dv_value"]

    def test_unknown_variable_lists_valid_names(self):
        with pytest.raises(mogi.UnknownVariableError) as err:
            mogi.GridSpec(sweep={"vol": np.array([1.0])})
        message = str(err.value)
        for name in mogi.VARIABLE_NAMES:
            assert name in message
