import json

import numpy as np
import pytest

from otthom.cli import main
from otthom.energy import MassDistribution
from otthom.generators import gen_lattice_nn
from otthom.graph import EmbeddedGraph, Orthotope


def _spec_file(tmp_path, **kw):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(kw))
    return str(path)


def test_gen_graph_and_determinism(tmp_path, capsys):
    spec = _spec_file(tmp_path, kind="latticeNN", n=2,
                      box={"lower": [0, 0], "upper": [4, 4]})
    out1 = tmp_path / "g1.json"
    out2 = tmp_path / "g2.json"
    assert main(["gen-graph", spec, str(out1)]) == 0
    assert main(["gen-graph", spec, str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    data = json.loads(out1.read_text())
    assert len(data["vertices"]) == 25


def test_gen_graph_seeded_random(tmp_path):
    spec = _spec_file(tmp_path, kind="randomConductance", n=2, seed=7, lam=1.0, Lam=4.0,
                      box={"lower": [0, 0], "upper": [4, 4]})
    out1 = tmp_path / "a.json"
    out2 = tmp_path / "b.json"
    assert main(["gen-graph", spec, str(out1)]) == 0
    assert main(["gen-graph", spec, str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_gen_graph_rejects_bad_spec(tmp_path):
    spec = _spec_file(tmp_path, kind="perturbedVoronoi", shiftBound=0.6,
                      box={"lower": [0, 0], "upper": [4, 4]})
    assert main(["gen-graph", spec, str(tmp_path / "x.json")]) == 2


def test_validate_command(tmp_path):
    g = gen_lattice_nn(2, Orthotope([0, 0], [4, 4]), R=2.0)
    path = tmp_path / "g.json"
    g.save(path)
    assert main(["validate", str(path), "--box", "[[0,0],[4,4]]"]) == 0


def test_cell_command(tmp_path, capsys):
    from otthom.graph import rescale_graph

    g = rescale_graph(gen_lattice_nn(2, Orthotope([-2, -2], [6, 6])), 0.25)
    path = tmp_path / "g.json"
    g.save(path)
    rc = main([
        "cell", str(path), "--box", "[[0,0],[1,1]]", "--v", "[1,0]", "--eps", "0.25",
    ])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["f_eps"] == pytest.approx(1.0, rel=1e-6)


def test_geodesic_command(tmp_path, capsys):
    g = gen_lattice_nn(1, Orthotope([0], [4]))
    gpath = tmp_path / "g.json"
    g.save(gpath)
    e = 1e-5
    m0 = np.full(5, e)
    m0[0] = 1 - 4 * e
    m1 = m0[::-1].copy()
    epath = tmp_path / "m.json"
    epath.write_text(json.dumps({"m0": m0.tolist(), "m1": m1.tolist()}))
    rc = main([
        "geodesic", str(gpath), str(epath), "--steps", "4",
        "--out", str(tmp_path / "curve.json"),
        "--report", str(tmp_path / "report.json"),
    ])
    assert rc == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["action"] > 0
    curve = json.loads((tmp_path / "curve.json").read_text())
    assert len(curve["times"]) == 5


def test_experiment_command_and_csv(tmp_path, capsys):
    rc = main(["experiment", "scaling-law", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out
    csv_path = tmp_path / "scaling-law.csv"
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("#")  # provenance/timestamp header
    assert "provenance" in lines[0]
    # identical apart from the header line on re-run
    rc2 = main(["experiment", "scaling-law", "--out", str(tmp_path)])
    assert rc2 == 0
    lines2 = csv_path.read_text().splitlines()
    assert lines[1:] == lines2[1:]


def test_malformed_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-graph", str(bad), str(tmp_path / "out.json")]) == 2
    assert main(["experiment", "no-such-experiment"]) == 2


def test_usage_error_exit_code():
    assert main(["definitely-not-a-command"]) == 2


def test_density_command(tmp_path, capsys):
    spec = _spec_file(tmp_path, kind="latticeNN", n=2)
    out = tmp_path / "model.json"
    rc = main([
        "density", spec, "--box", "[[0,0],[1,1]]", "--eps-list", "[0.25]",
        "--directions", "4", "--out", str(out),
    ])
    assert rc == 0
    model = json.loads(out.read_text())
    assert model["convex_certificate"] is True
    vals = np.array(model["values"])
    assert np.allclose(vals, 1.0, atol=1e-6)


def test_recover_command(tmp_path, capsys):
    cfg = tmp_path / "recover.json"
    cfg.write_text(json.dumps({
        "n": 2, "velocity": [0.0, 0.0], "width": 1.0, "T": 1.0,
        "h": 0.5, "delta": 0.5, "eta": 0.25, "eps": 0.125,
    }))
    out = tmp_path / "audit.json"
    rc = main(["recover", str(cfg), "--out", str(out)])
    assert rc == 0
    audit = json.loads(out.read_text())
    assert audit["continuity_residual"] <= 1e-8
    assert audit["action"] == pytest.approx(0.0, abs=1e-9)
