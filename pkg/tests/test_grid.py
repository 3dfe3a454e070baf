import numpy as np
import pytest

from voltcoord.grid import (
    DEFAULT_PV_TABLE,
    GridError,
    Injections,
    NetworkModel,
    PvSite,
    build_ieee33,
    load_network_csv,
    save_network_csv,
    solve_power_flow,
    validate_network,
)

from oracles import newton_raphson_flow, two_bus_exact

# A second, independently keyed transcription of the published 33-bus data
# (per-bus dicts keyed by the conventional 1-based numbering).
LOADS_1BASED = {
    2: (100, 60), 3: (90, 40), 4: (120, 80), 5: (60, 30), 6: (60, 20),
    7: (200, 100), 8: (200, 100), 9: (60, 20), 10: (60, 20), 11: (45, 30),
    12: (60, 35), 13: (60, 35), 14: (120, 80), 15: (60, 10), 16: (60, 20),
    17: (60, 20), 18: (90, 40), 19: (90, 40), 20: (90, 40), 21: (90, 40),
    22: (90, 40), 23: (90, 50), 24: (420, 200), 25: (420, 200), 26: (60, 25),
    27: (60, 25), 28: (60, 20), 29: (120, 70), 30: (200, 600), 31: (150, 70),
    32: (210, 100), 33: (60, 40),
}
LINES_1BASED = {
    (1, 2): (0.0922, 0.0470), (2, 3): (0.4930, 0.2511), (3, 4): (0.3660, 0.1864),
    (4, 5): (0.3811, 0.1941), (5, 6): (0.8190, 0.7070), (6, 7): (0.1872, 0.6188),
    (7, 8): (0.7114, 0.2351), (8, 9): (1.0300, 0.7400), (9, 10): (1.0440, 0.7400),
    (10, 11): (0.1966, 0.0650), (11, 12): (0.3744, 0.1238), (12, 13): (1.4680, 1.1550),
    (13, 14): (0.5416, 0.7129), (14, 15): (0.5910, 0.5260), (15, 16): (0.7463, 0.5450),
    (16, 17): (1.2890, 1.7210), (17, 18): (0.7320, 0.5740), (2, 19): (0.1640, 0.1565),
    (19, 20): (1.5042, 1.3554), (20, 21): (0.4095, 0.4784), (21, 22): (0.7089, 0.9373),
    (3, 23): (0.4512, 0.3083), (23, 24): (0.8980, 0.7091), (24, 25): (0.8960, 0.7011),
    (6, 26): (0.2030, 0.1034), (26, 27): (0.2842, 0.1447), (27, 28): (1.0590, 0.9337),
    (28, 29): (0.8042, 0.7006), (29, 30): (0.5075, 0.2585), (30, 31): (0.9744, 0.9630),
    (31, 32): (0.3105, 0.3619), (32, 33): (0.3410, 0.5302),
}


@pytest.fixture(scope="module")
def model():
    return build_ieee33()


def base_injections(model, scale=1.0, pv_kw=None, pv_kvar=None, tap=0):
    p = model.bus_p_kw * scale
    q = model.bus_q_kvar * scale
    if pv_kw is not None:
        p = p.copy()
        np.add.at(p, model.pv_buses, -pv_kw)
    if pv_kvar is not None:
        q = q.copy()
        np.add.at(q, model.pv_buses, -pv_kvar)
    return Injections(p, q, tap)


class TestBuildIeee33:
    def test_shape_and_pv_sites(self, model):
        assert model.n_bus == 33
        assert model.n_line == 32
        assert model.n_pv == 7
        assert set(model.pv_buses.tolist()) == {9, 12, 15, 21, 24, 29, 32}
        assert np.allclose(model.pv_q_max_kvar, 0.4 * model.pv_p_max_kw)

    def test_empty_pv_table(self):
        m = build_ieee33(pv_table=[])
        assert m.n_pv == 0
        assert validate_network(m) == []

    def test_data_matches_independent_transcription(self, model):
        for bus, (p, q) in LOADS_1BASED.items():
            assert model.bus_p_kw[bus - 1] == p
            assert model.bus_q_kvar[bus - 1] == q
        assert model.bus_p_kw[0] == 0 and model.bus_q_kvar[0] == 0
        assert model.bus_p_kw.sum() == sum(p for p, _ in LOADS_1BASED.values())
        assert model.bus_q_kvar.sum() == sum(q for _, q in LOADS_1BASED.values())
        got = {
            (int(model.line_from[k]) + 1, int(model.line_to[k]) + 1): (
                model.line_r_ohm[k],
                model.line_x_ohm[k],
            )
            for k in range(model.n_line)
        }
        assert got == LINES_1BASED

    def test_duplicate_pv_bus_rejected(self):
        with pytest.raises(GridError, match="duplicate"):
            build_ieee33([PvSite(9, 100, 40), PvSite(9, 100, 40)])

    def test_pv_bus_out_of_range_rejected(self):
        with pytest.raises(GridError, match="out of range"):
            build_ieee33([PvSite(33, 100, 40)])
        with pytest.raises(GridError, match="out of range"):
            build_ieee33([PvSite(0, 100, 40)])


class TestValidateNetwork:
    def test_well_formed(self, model):
        assert validate_network(model) == []

    def test_missing_line_reports_disconnected_buses(self, model):
        keep = np.arange(model.n_line) != 16  # drop line 17->18 (1-based)
        broken = NetworkModel(
            bus_p_kw=model.bus_p_kw,
            bus_q_kvar=model.bus_q_kvar,
            line_from=model.line_from[keep],
            line_to=model.line_to[keep],
            line_r_ohm=model.line_r_ohm[keep],
            line_x_ohm=model.line_x_ohm[keep],
            pv_sites=model.pv_sites,
        )
        report = validate_network(broken)
        assert "disconnected bus 17" in report

    def test_duplicated_line_reports_cycle(self, model):
        dup = NetworkModel(
            bus_p_kw=model.bus_p_kw,
            bus_q_kvar=model.bus_q_kvar,
            line_from=np.append(model.line_from, model.line_from[5]),
            line_to=np.append(model.line_to, model.line_to[5]),
            line_r_ohm=np.append(model.line_r_ohm, model.line_r_ohm[5]),
            line_x_ohm=np.append(model.line_x_ohm, model.line_x_ohm[5]),
            pv_sites=model.pv_sites,
        )
        assert any("cycle detected" in p for p in validate_network(dup))

    def test_negative_impedance_reported(self, model):
        bad_r = model.line_r_ohm.copy()
        bad_r[3] = -0.1
        bad = NetworkModel(
            bus_p_kw=model.bus_p_kw,
            bus_q_kvar=model.bus_q_kvar,
            line_from=model.line_from,
            line_to=model.line_to,
            line_r_ohm=bad_r,
            line_x_ohm=model.line_x_ohm,
            pv_sites=model.pv_sites,
        )
        assert any("negative impedance" in p for p in validate_network(bad))


class TestSolvePowerFlow:
    def test_no_load_flat_voltage(self, model):
        inj = Injections(np.zeros(33), np.zeros(33), 0)
        res = solve_power_flow(model, inj)
        assert res.converged
        assert res.iterations <= 2
        assert np.allclose(res.v_abs, 1.0)
        assert res.loss_pu == 0.0

    def test_two_bus_closed_form(self):
        # slack 1.0 feeding one line of 0.1 + j0.1 pu into a 0.1 + j0 pu draw
        m = NetworkModel(
            bus_p_kw=np.array([0.0, 100.0]),
            bus_q_kvar=np.array([0.0, 0.0]),
            line_from=np.array([0]),
            line_to=np.array([1]),
            line_r_ohm=np.array([0.1 * 12.66**2]),
            line_x_ohm=np.array([0.1 * 12.66**2]),
            pv_sites=(),
        )
        res = solve_power_flow(m, Injections(m.bus_p_kw, m.bus_q_kvar, 0), tolerance=1e-12)
        v2_exact, loss_exact = two_bus_exact(1.0, 0.1, 0.1, 0.1, 0.0)
        assert res.converged
        assert abs(res.v_abs[1] - v2_exact) < 1e-10
        assert abs(res.loss_pu - loss_exact) < 1e-10

    def test_base_case_against_newton_raphson(self, model):
        inj = base_injections(model)
        res = solve_power_flow(model, inj)
        ref = newton_raphson_flow(model, inj)
        assert res.converged
        assert np.max(np.abs(res.v - ref["v"])) < 1e-6
        assert abs(res.loss_pu - ref["loss_pu"]) / ref["loss_pu"] < 1e-3
        # published sanity anchors, not ground truth
        assert abs(res.loss_pu * 1000 - 202.7) < 2.0
        assert abs(res.v_abs.min() - 0.913) < 0.002
        assert res.v_abs.argmin() == 17

    def test_power_balance(self, model):
        inj = base_injections(model, scale=0.8, pv_kw=model.pv_p_max_kw * 0.5)
        res = solve_power_flow(model, inj, tolerance=1e-10)
        source_p = (res.v0 * np.conj(res.i0)).real
        drawn_p = inj.p_kw.sum() / 1000.0
        assert abs(source_p - drawn_p - res.loss_pu) < 10 * 1e-10 + 1e-9

    def test_loss_non_negative(self, model):
        rng = np.random.default_rng(3)
        for _ in range(10):
            inj = base_injections(
                model,
                scale=rng.uniform(0.3, 1.0),
                pv_kw=rng.uniform(0, model.pv_p_max_kw),
                pv_kvar=rng.uniform(-model.pv_q_max_kvar, model.pv_q_max_kvar),
                tap=int(rng.integers(-8, 9)),
            )
            assert solve_power_flow(model, inj).loss_pu >= 0.0

    def test_tap_monotonicity(self, model):
        prev = solve_power_flow(model, base_injections(model, tap=-8)).v_abs
        for tap in range(-7, 9):
            cur = solve_power_flow(model, base_injections(model, tap=tap)).v_abs
            assert np.all(cur > prev)
            prev = cur

    def test_var_monotonicity(self, model):
        base = solve_power_flow(model, base_injections(model)).v_abs
        for site in range(model.n_pv):
            for frac in (0.25, 0.5, 1.0):
                pv_kvar = np.zeros(model.n_pv)
                pv_kvar[site] = frac * model.pv_q_max_kvar[site]
                res = solve_power_flow(model, base_injections(model, pv_kvar=pv_kvar))
                bus = model.pv_buses[site]
                assert res.v_abs[bus] >= base[bus] - 1e-12

    def test_pure_function_bit_identical(self, model):
        inj = base_injections(model, scale=0.77)
        a = solve_power_flow(model, inj)
        b = solve_power_flow(model, inj)
        assert np.array_equal(a.v, b.v)
        assert a.loss_pu == b.loss_pu
        assert a.i0 == b.i0

    def test_nan_input_fatal(self, model):
        p = model.bus_p_kw.copy()
        p[5] = np.nan
        with pytest.raises(GridError, match="non-finite"):
            solve_power_flow(model, Injections(p, model.bus_q_kvar, 0))

    def test_non_convergence_flagged(self, model):
        inj = base_injections(model)
        res = solve_power_flow(model, inj, tolerance=1e-15, max_iter=2)
        assert not res.converged
        assert res.iterations == 2

    def test_tap_out_of_range_rejected(self, model):
        with pytest.raises(GridError, match="tap"):
            solve_power_flow(model, base_injections(model, tap=9))


class TestOracleEquivalence:
    def test_random_injections_match_newton_raphson(self, model):
        rng = np.random.default_rng(42)
        for _ in range(100):
            inj = base_injections(
                model,
                scale=rng.uniform(0.3, 1.0),
                pv_kw=rng.uniform(0, model.pv_p_max_kw),
                pv_kvar=rng.uniform(-model.pv_q_max_kvar, model.pv_q_max_kvar),
                tap=int(rng.integers(-8, 9)),
            )
            res = solve_power_flow(model, inj, tolerance=1e-10)
            ref = newton_raphson_flow(model, inj)
            assert res.converged
            assert np.max(np.abs(res.v - ref["v"])) < 1e-6
            if ref["loss_pu"] > 1e-9:
                assert abs(res.loss_pu - ref["loss_pu"]) / ref["loss_pu"] < 1e-3


class TestNetworkCsv:
    def test_round_trip(self, model, tmp_path):
        path = tmp_path / "net.csv"
        save_network_csv(str(path), model)
        back = load_network_csv(str(path))
        assert np.array_equal(back.bus_p_kw, model.bus_p_kw)
        assert np.array_equal(back.bus_q_kvar, model.bus_q_kvar)
        assert np.array_equal(back.line_from, model.line_from)
        assert np.array_equal(back.line_r_ohm, model.line_r_ohm)
        assert back.pv_sites == model.pv_sites

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("BUS,id,p_kw,q_kvar\n0,0.0,0.0\n1,oops,0.0\n")
        with pytest.raises(GridError, match="bad.csv:3"):
            load_network_csv(str(path))

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "hdr.csv"
        path.write_text("0,0.0,0.0\n")
        with pytest.raises(GridError, match="section header"):
            load_network_csv(str(path))
