import json
from dataclasses import replace

import numpy as np
import pytest

from aloha_opt.harness import (PRESETS, SWEEP_FIELDS, Scenario, ScenarioError, SweepSpec, canonical_scenario,
                               load_preset, load_scenario, pareto_violations, parse_scenario, read_rows,
                               run_point, run_preset, sweep, validate, write_rows)
from aloha_opt.mac_opt import make_solution, min_delay_constraint, solve_mac_centralized
from aloha_opt.topology import build


def _write(tmp_path, doc, name="s.json"):
    path = tmp_path / name
    path.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return path


def test_minimal_file(tmp_path):
    sc = parse_scenario(_write(tmp_path, {"nodes": 2, "links": [{"tx": 0, "rx": 1}]}))
    assert sc.topology.n_links == 1
    np.testing.assert_array_equal(sc.topology.energy, [1.0, 1.0])
    assert (sc.lam1, sc.lam2) == (1.0, 1.0)
    # no Dc given: four times the minimum, which is 1 for an isolated link
    assert sc.Dc == pytest.approx(4.0)


def test_dc_default_is_four_mindc(tmp_path):
    doc = {"nodes": 2, "links": [{"tx": 0, "rx": 1}, {"tx": 1, "rx": 0}]}
    assert parse_scenario(_write(tmp_path, doc)).Dc == pytest.approx(16.0, rel=1e-6)
    assert parse_scenario(_write(tmp_path, {**doc, "Dc": 30})).Dc == 30.0


def test_route_with_missing_link(tmp_path):
    doc = {"nodes": 3, "links": [{"tx": 0, "rx": 1}],
           "sessions": [{"id": 0, "route": [[0, 1], [1, 2]], "delay_limit": 50}]}
    with pytest.raises(ScenarioError, match="missing link"):
        parse_scenario(_write(tmp_path, doc))


def test_negative_energy(tmp_path):
    doc = {"nodes": [{"id": 0, "energy": -1}, {"id": 1}], "links": [{"tx": 0, "rx": 1}]}
    with pytest.raises(ScenarioError, match="energy"):
        parse_scenario(_write(tmp_path, doc))


def test_json_error_has_position(tmp_path):
    with pytest.raises(ScenarioError, match=r"s\.json:2:\d+"):
        parse_scenario(_write(tmp_path, '{"nodes": 2,\n "links": [}'))


@pytest.mark.parametrize("doc, field", [
    ({"nodes": 2}, "links"),
    ({"nodes": 2, "links": [{"tx": 0, "rx": 1}], "Dc": 0.5}, "Dc"),
    ({"nodes": 2, "links": [{"tx": 0, "rx": 1}], "lambda1": "x"}, "lambda1"),
    ({"nodes": 2, "links": [{"tx": 0, "rx": 1}], "lambda1": 0, "lambda2": 0}, "lambda"),
])
def test_field_errors(tmp_path, doc, field):
    with pytest.raises(ScenarioError, match=field):
        parse_scenario(_write(tmp_path, doc))


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        parse_scenario(tmp_path / "nope.json")


def test_load_scenario_variants():
    sc = load_scenario("canonical")
    assert sc.topology.n_links == 12
    assert load_scenario(sc) is sc
    assert load_scenario(None).topology.n_links == 12


@pytest.mark.parametrize("kw, msg", [
    (dict(axis="speed", values=[1, 2]), "axis"),
    (dict(axis="Dc", values=[]), "empty"),
    (dict(axis="Dc", values=[20, 10]), "increasing"),
    (dict(axis="Dc", values=[20, 30], solver="newton"), "not valid"),
    (dict(axis="Ds", values=[100], solver="distributed"), "not valid"),
    (dict(axis="network_size", values=[2.5, 3]), "integers"),
])
def test_sweep_spec_validation(kw, msg):
    with pytest.raises(ScenarioError, match=msg):
        SweepSpec("canonical", **kw)


def test_sweep_grid_from_dict():
    spec = SweepSpec.from_dict({"axis": "lambda_ratio", "grid": {"start": 0.01, "stop": 1, "num": 3, "log": True}})
    np.testing.assert_allclose(spec.values, [0.01, 0.1, 1.0])


@pytest.fixture(scope="module")
def lambda_rows():
    spec = SweepSpec("canonical", "lambda_ratio", np.geomspace(0.01, 10, 8), fixed={"lam2": 1.0, "Dc_multiplier": 4})
    return spec, sweep(spec, workers=2)


def test_lambda_sweep_energy_non_increasing(lambda_rows):
    _, rows = lambda_rows
    assert [r["index"] for r in rows] == list(range(len(rows)))
    assert all(r["status"] == "optimal" for r in rows)
    energy = [r["energy"] for r in rows]
    assert np.all(np.diff(energy) <= 1e-6)
    assert pareto_violations(rows) == []


def test_rows_are_rederivable(lambda_rows):
    spec, rows = lambda_rows
    top = canonical_scenario().topology
    for r in rows[::3]:
        sc = replace(canonical_scenario(), lam1=r["lam1"], lam2=r["lam2"], Dc=r["Dc"])
        sol = solve_mac_centralized(sc.mac())
        assert sol.objective == pytest.approx(r["objective"], rel=1e-6, abs=1e-8)
        np.testing.assert_allclose(sol.probs, json.loads(r["probs"]), atol=1e-6)
    assert top.n_links == len(json.loads(rows[0]["rates"]))


def test_sweep_deterministic_and_written(lambda_rows, tmp_path):
    spec, rows = lambda_rows
    again = sweep(replace(spec, values=spec.values[:3], out=str(tmp_path / "s.csv")), workers=1)
    for a, b in zip(again, rows[:3]):
        assert a["objective"] == b["objective"]
    back = read_rows(tmp_path / "s.csv")
    assert list(back[0].keys()) == list(SWEEP_FIELDS)
    assert len(back) == 3


def test_dc_sweep_objective_non_increasing():
    mindc = min_delay_constraint(canonical_scenario().topology)
    rows = sweep(SweepSpec("canonical", "Dc", mindc * np.array([0.5, 1.5, 2, 4, 8, 16])), workers=2)
    assert rows[0]["status"] == "infeasible"
    objs = [r["objective"] for r in rows[1:]]
    assert all(r["status"] == "optimal" for r in rows[1:])
    assert np.all(np.diff(objs) <= 1e-6)


def test_ds_sweep_flattens():
    rows = sweep(SweepSpec("canonical", "Ds", [40, 100, 400, 800, 1600]), workers=2)
    objs = np.array([r["objective"] for r in rows])
    assert np.all(np.diff(objs) <= 1e-6)
    assert abs(objs[-1] - objs[-2]) / abs(objs[-2]) < 0.01


def test_star_mindc_increasing():
    rows = sweep(SweepSpec("canonical", "network_size", range(3, 13), kind="star"), workers=2)
    m = [r["min_delay_constraint"] for r in rows]
    assert np.all(np.diff(m) > 0)


def test_failures_become_rows():
    spec = SweepSpec("/does/not/exist.json", "lambda_ratio", [0.1, 1.0])
    rows = [run_point(spec, i) for i in range(2)]
    assert all(r["status"].startswith("error: ScenarioError") for r in rows)


def test_pareto_detector():
    rows = [{"index": 0, "status": "optimal", "energy": 1.0, "rate_utility": -5.0},
            {"index": 1, "status": "optimal", "energy": 2.0, "rate_utility": -6.0}]
    assert pareto_violations(rows) == [(0, 1)]


def test_validate_unstable_operating_point():
    sc = canonical_scenario()
    top = sc.topology
    p = np.full(top.n_links, 0.1)
    bad = make_solution(sc.mac(), p, np.full(top.n_links, 0.5))
    res = validate(sc, bad)
    assert res.unstable and not res.passed
    assert res.rows == []


def test_validate_small_run_reports_rows():
    sc = canonical_scenario()
    sol = solve_mac_centralized(sc.mac())
    res = validate(sc, sol, {"slots": 100_000}, compare_dummy_off=True)
    assert {r.scope for r in res.rows} == {"link", "session", "network"}
    assert res.dummy_delta.shape == (sc.topology.n_sessions,)


@pytest.mark.slow
def test_validate_canonical_dc100():
    sc = replace(canonical_scenario(), Dc=100.0)
    sol = solve_mac_centralized(sc.mac())
    res = validate(sc, sol, {"slots": 10_000_000, "seed": 0}, delay_tol=0.10)
    assert res.passed, res.reasons


def test_presets_load():
    for name in PRESETS:
        doc = load_preset(name)
        assert doc["jobs"]
        for job in doc["jobs"]:
            if job["type"] == "sweep":
                SweepSpec.from_dict({k: v for k, v in job.items() if k not in ("type", "id")})
    with pytest.raises(ScenarioError):
        load_preset("fig9")


def test_run_preset_writes_csv_and_png(tmp_path):
    out = run_preset("fig2", tmp_path, workers=2)
    csvs = [p for p in out.values() if p.suffix == ".csv"]
    pngs = [p for p in out.values() if p.suffix == ".png"]
    assert csvs and pngs
    assert all(p.exists() and p.stat().st_size > 0 for p in csvs + pngs)


def test_write_rows_creates_parent(tmp_path):
    p = write_rows([{"a": 1}], tmp_path / "x" / "y.csv")
    assert p.read_text().splitlines() == ["a", "1"]


def test_scenario_projections():
    top = build(2, [(0, 1)])
    sc = Scenario(top, 1.0, 2.0, 10.0)
    assert sc.mac().lam2 == 2.0
    assert sc.mac(Dc=20.0).Dc == 20.0
