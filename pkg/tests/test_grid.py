import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dlrmarket.data import fixture_path, fixtures
from dlrmarket.errors import SchemaError, SingularNetwork, UnbalancedInjection, ValidationError
from dlrmarket.grid import case_from_dict, import_matpower, load_case, nodal_flows, ptdf

WEATHER = [{"wind_speed_m_s": 2.0, "ambient_temp_C": 25.0}]


def tri(**over):
    raw = {
        "schema_version": 1, "slack": "c", "horizon": 1,
        "nodes": [{"id": "a"}, {"id": "b"}, {"id": "c", "load": 90.0}],
        "edges": [
            {"id": "ab", "from": "a", "to": "b", "susceptance": 10.0, "static_rating": 100.0},
            {"id": "ac", "from": "a", "to": "c", "susceptance": 10.0, "static_rating": 100.0},
            {"id": "bc", "from": "b", "to": "c", "susceptance": 10.0, "static_rating": 100.0},
        ],
        "generators": [{"id": "g", "node": "a", "c1": 1.0, "c2": 0.0, "p_min": 0.0, "p_max": 200.0}],
        "weather": {"default": WEATHER},
    }
    raw.update(over)
    return raw


class TestPtdf:
    def test_triangle_by_hand(self):
        # a->c injection: direct path gets 2/3, the two-hop path 1/3
        m = ptdf(case_from_dict(tri()))
        col = m.S[:, 0]
        assert np.allclose(col, [1 / 3, 2 / 3, 1 / 3])
        assert np.all(m.S[:, m.slack] == 0)
        assert m.edge_ids == ("ab", "ac", "bc")

    def test_congested_fixture(self, congested):
        case, _ = congested
        m = ptdf(case)
        inj = np.array([300.0, 0.0, -300.0])
        f = nodal_flows(m, inj)
        assert f[case.edge_index("L13")] == pytest.approx(200.0)
        assert f[case.edge_index("L12")] == pytest.approx(100.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 3, elements=st.floats(-500, 500)))
    def test_kcl(self, x):
        case = case_from_dict(tri())
        m = ptdf(case)
        inj = x - x.mean()
        f = nodal_flows(m, inj)
        # incidence: node balance equals the injection
        A = np.array([[1, -1, 0], [1, 0, -1], [0, 1, -1]], dtype=float)
        assert np.allclose(A.T @ f, inj, atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 3, elements=st.floats(-500, 500)), st.floats(-100, 100))
    def test_mean_referenced(self, x, shift):
        m = ptdf(case_from_dict(tri()))
        inj = x - x.mean()
        M = m.mean_referenced()
        assert np.allclose(M.sum(axis=1), 0.0)
        assert np.allclose(M @ inj, m.S @ inj, atol=1e-9)
        assert np.allclose(M @ (inj + shift), M @ inj, atol=1e-9)

    def test_unbalanced(self):
        m = ptdf(case_from_dict(tri()))
        with pytest.raises(UnbalancedInjection):
            nodal_flows(m, [1.0, 0.0, 0.0])

    def test_island(self):
        raw = tri()
        raw["nodes"].append({"id": "d"})
        with pytest.raises(SingularNetwork):
            case_from_dict(raw)


class TestCaseLoading:
    def test_fixtures_load(self):
        names = fixtures()
        assert {"case2_minimal", "case3_congested", "case3_transient", "case3_zero_uncertainty"} <= set(names)
        for n in names:
            load_case(fixture_path(n))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_case(tmp_path / "nope.json")

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(SchemaError):
            load_case(p)

    def test_schema_error_names_field(self):
        raw = tri()
        raw["generators"][0]["c1"] = "cheap"
        with pytest.raises(SchemaError, match="generators/0/c1"):
            case_from_dict(raw)

    def test_version(self):
        with pytest.raises(SchemaError):
            case_from_dict(tri(schema_version=2))

    @pytest.mark.parametrize("mutate,msg", [
        (lambda r: r.update(slack="zz"), "slack"),
        (lambda r: r["edges"][0].update(to="zz"), "unknown node"),
        (lambda r: r["edges"][0].update(susceptance=-1.0), "susceptance"),
        (lambda r: r["generators"][0].update(p_min=300.0), "p_min"),
        (lambda r: r["generators"][0].update(c2=-0.1), "c2"),
        (lambda r: r["edges"][0].update(site="elsewhere"), "no weather"),
        (lambda r: r["nodes"][2].update(load=[1.0, 2.0]), "series length"),
        (lambda r: r["edges"][0].update(conductor="falcon"), "unknown conductor"),
        (lambda r: r.update(uncertainty={"std": {}}), "missing sites"),
        (lambda r: r.update(uncertainty={"std": {"default": [1, 1, 1]}, "rating_std_override": {"xx": 1.0}}),
         "unknown edge"),
    ])
    def test_validation(self, mutate, msg):
        raw = copy.deepcopy(tri())
        mutate(raw)
        with pytest.raises(ValidationError, match=msg):
            case_from_dict(raw)

    def test_weather_csv_reference(self, tmp_path):
        (tmp_path / "w.csv").write_text(
            "timestamp,wind_speed_m_s,wind_dir_deg,ambient_C,solar_W_m2,air_density\n0,3,90,20,0,1.2\n")
        raw = tri()
        del raw["weather"]
        raw["weather_csv"] = "w.csv"
        (tmp_path / "c.json").write_text(json.dumps(raw))
        case = load_case(tmp_path / "c.json")
        assert case.weather["default"][0].wind_speed_m_s == 3.0

    def test_derived_cases(self, transient):
        case, _ = transient
        w = case.window(1, 3)
        assert w.horizon == 2 and w.loads().shape == (2, case.n_nodes)
        assert np.allclose(w.loads(), case.loads()[1:3])
        bumped = case.with_load_delta("b3", 2, 1.0)
        diff = bumped.loads() - case.loads()
        assert diff[2, case.node_index("b3")] == 1.0 and np.count_nonzero(diff) == 1
        s = case.with_uncertainty_scale(4.0)
        assert np.allclose(s.ambient.sigma_varsigma, 4 * case.ambient.sigma_varsigma)

    def test_wind_forecast_power_curve(self, congested):
        case, _ = congested
        f = case.wind_forecast()
        assert f.shape == (1, 1)
        assert 0 < f[0, 0] <= 200.0

    def test_initial_temperatures_default(self, congested):
        case, _ = congested
        T0 = case.initial_temperatures()
        # zero-current equilibrium sits above ambient by the solar rise
        assert np.all(T0 > 25.0) and np.all(T0 < 60.0)


MATPOWER = """function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	80	0	0	0	1	1	0	230	1	1.1	0.9;
	3	1	60	0	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	10	0	0	0	0	0	0	0	0	40	0	0;
	2	0	0	300	-300	1	100	0	250	10	0	0	0	0	0	0	0	0	40	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0	150	150	150	0	0	1	-360	360;
	2	3	0.01	0.2	0	0	0	0	0	0	1	-360	360;
	1	3	0.01	0.5	0	90	90	90	0	0	0	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.02	12	0;
	2	0	0	3	0.04	20	0;
];
"""


class TestMatpower:
    def test_import(self, tmp_path):
        p = tmp_path / "tiny.m"
        p.write_text(MATPOWER)
        raw = import_matpower(p)
        assert raw["slack"] == "1"
        assert [e["id"] for e in raw["edges"]] == ["l1", "l2"]  # l3 out of service
        assert raw["edges"][0]["susceptance"] == pytest.approx(1000.0)
        assert raw["edges"][1]["static_rating"] == 9999.0
        assert len(raw["generators"]) == 1  # second unit offline
        g = raw["generators"][0]
        assert (g["c2"], g["c1"], g["ramp_up"]) == (0.02, 12.0, 20.0)
        raw["weather"] = {"default": WEATHER}
        case = case_from_dict(raw)
        assert case.loads().tolist() == [[0.0, 80.0, 60.0]]

    def test_missing_blocks(self, tmp_path):
        p = tmp_path / "bad.m"
        p.write_text("mpc.baseMVA = 100;\nmpc.bus = [1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;];\n")
        with pytest.raises(SchemaError):
            import_matpower(p)
