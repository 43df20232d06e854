import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from contact_topopt import io, render
from contact_topopt.cli import main

INSTANCES = Path(__file__).resolve().parent.parent / "instances"


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.setenv("CONTACT_TOPOPT_OUTDIR", str(tmp_path / "out"))
    for name in ("single_bar.json", "floor_truss.json"):
        shutil.copy(INSTANCES / name, tmp_path / name)
    return tmp_path


def test_single_bar_hand_solution(work):
    assert main(["truss-opt", str(work / "single_bar.json")]) == 0
    res = json.loads((work / "out" / "single_bar.truss-opt.json").read_text())
    f, l, E, v = 1000.0, 1000.0, 20000.0, 2e6
    x = v / l
    assert res["design"]["x"] == pytest.approx([x], rel=1e-7)
    assert res["objective"] == pytest.approx(f * f * l / (E * x), rel=1e-7)
    assert res["objective_J"] == pytest.approx(res["objective"] / 1000)
    assert res["units"]["energy"] == "N*mm"
    assert res["verification"]["pass"]


def test_tampered_result_fails_verification(work):
    assert main(["truss-opt", str(work / "floor_truss.json")]) == 0
    path = work / "out" / "floor_truss.truss-opt.json"
    assert main(["verify", str(path)]) == 0
    res = json.loads(path.read_text())
    for key, edit in (("reactions", lambda r: r["reactions"].__setitem__(0, 1e-1)),
                      ("objective", lambda r: r.__setitem__("objective", 0.9 * r["objective"]))):
        bad = json.loads(json.dumps(res))
        edit(bad)
        tampered = work / f"tampered-{key}.json"
        tampered.write_text(json.dumps(bad))
        assert main(["verify", str(tampered)]) == 3


def test_input_errors_exit_4(work):
    assert main(["truss-opt", str(work / "missing.json")]) == 4
    inst = json.loads((work / "floor_truss.json").read_text())
    inst["geometry"]["nx"] = 0
    (work / "bad.json").write_text(json.dumps(inst))
    assert main(["truss-opt", str(work / "bad.json")]) == 4
    assert main(["truss-opt", str(work / "floor_truss.json"), "--volume", "-1"]) == 4
    # design constraints need the mixed-integer command
    inst = json.loads((work / "floor_truss.json").read_text())
    inst["design"] = {"degree_max": 3}
    (work / "deg.json").write_text(json.dumps(inst))
    assert main(["truss-opt", str(work / "deg.json")]) == 4
    assert main(["truss-opt", str(work / "floor_truss.json"), "--degree-max", "3"]) == 4
    assert main(["truss-misocp", str(work / "floor_truss.json"), "--xmin", "2", "--xmax", "1"]) == 4
    (work / "garbage.json").write_text("{not json")
    assert main(["verify", str(work / "garbage.json")]) == 4


def test_nonoptimal_exit_2(work):
    # every member would need at least 10^4 mm^2 but the budget allows far less
    assert main(["truss-misocp", str(work / "floor_truss.json"), "--xmin", "10000",
                 "--xmax", "20000", "--volume", "1000"]) == 2
    res = json.loads((work / "out" / "floor_truss.truss-misocp.json").read_text())
    assert res["status"] == "primal-infeasible" and res["objective"] == np.inf


def test_round_trip_and_determinism(work):
    out1, out2 = work / "a.json", work / "b.json"
    assert main(["truss-misocp", str(work / "floor_truss.json"), "--xmin", "100",
                 "--xmax", "3000", "-o", str(out1)]) == 0
    assert main(["truss-misocp", str(work / "floor_truss.json"), "--xmin", "100",
                 "--xmax", "3000", "-o", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    res = io.load_result(out1)
    again = work / "c.json"
    io.write_json(res, again)
    assert io.load_result(again) == res
    assert again.read_bytes() == out1.read_bytes()
    # the embedded instance carries the overrides
    assert res["instance"]["design"] == {"xmin": 100.0, "xmax": 3000.0}


def test_instance_round_trip_full_precision(tmp_path):
    inst = io.load_instance(INSTANCES / "floor_truss.json")
    inst["budget"]["volume"] = 1.0 / 3.0 * 1e7
    inst["loads"][0]["force"] = [np.nextafter(0.1, 1.0), -1000.0]
    io.write_json(inst, tmp_path / "i.json")
    assert io.load_instance(tmp_path / "i.json") == inst


def test_overrides():
    inst = io.load_instance(INSTANCES / "floor_truss.json")
    out = io.apply_overrides(inst, gap=0.5, volume=3e6, degree_max=4, no_crossing=True,
                             mipgap=1e-4, workers=2)
    assert out["contact"]["gap"] == 0.5 and out["budget"] == {"volume": 3e6}
    assert out["design"] == {"degree_max": 4, "no_crossing": True}
    assert out["mip"] == {"mipgap": 1e-4, "workers": 2}
    assert inst.get("design") is None  # input untouched
    prob = io.build_truss(out)
    assert np.all(prob.contact.g == 0.5)


def test_render_zero_design_and_markers():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    members = np.array([[0, 1], [0, 2], [1, 2]])
    obstacle = {"point": [0.0, -0.1], "normal": [0.0, 1.0]}
    svg = render.truss_svg(nodes, members, np.zeros(3), [0, 1], [0.1, 0.1], [], obstacle)
    assert 'class="member"' not in svg and svg.count('class="node"') == 3
    assert svg.count('class="obstacle"') == 1 and 'class="contact"' not in svg
    # widths are linear in the area, thin members below the threshold are dropped
    svg = render.truss_svg(nodes, members, np.array([1.0, 0.5, 1e-6]), [0, 1], [0.1, 0.1],
                           [1], obstacle)
    assert 'stroke-width="10"' in svg and 'stroke-width="5"' in svg
    assert svg.count('class="member"') == 2
    # markers are exactly the given active rows, filled for trusses
    assert svg.count('class="contact"') == 1 and 'fill="black"/>' in svg
    dens = render.density_svg(nodes, [[0, 1, 2, 2]], [0.5], [0], [0.0], [0], obstacle)
    assert 'fill="none"' in dens and dens.count('class="contact"') == 1


def test_bilateral_result_marks_tensile_contacts(work):
    inst = json.loads((work / "floor_truss.json").read_text())
    inst["design"] = {"bilateral": True}
    inst["contact"]["gap"] = 0.5
    inst["loads"][0]["force"] = [0.0, 1000.0]
    (work / "bil.json").write_text(json.dumps(inst))
    code = main(["truss-opt", str(work / "bil.json"), "--svg", str(work / "bil.svg")])
    res = json.loads((work / "out" / "bil.truss-opt.json").read_text())
    tensile = [j for j, r in enumerate(res["reactions"]) if r > 1e-6]
    if tensile:
        # adhesion is flagged by the unilateral audit, yet the contacts are drawn
        assert code == 3 and not res["verification"]["pass"]
        assert set(tensile) <= set(res["active_contact"])
        assert (work / "bil.svg").read_text().count('class="contact"') == len(
            res["active_contact"])
    else:
        assert code == 0


def test_density_exports():
    rho = np.array([0.0, 0.25, 1.0, 0.5, 0.75, 1.0])
    csv = render.density_csv(rho, 3, 2)
    rows = [list(map(float, r.split(","))) for r in csv.strip().split("\n")]
    assert rows == [[0.0, 0.25, 1.0], [0.5, 0.75, 1.0]]
    pgm = render.density_pgm(rho, 3, 2)
    header, pix = pgm[:11], np.frombuffer(pgm[11:], dtype=np.uint8)
    assert header == b"P5\n3 2\n255\n"
    # top row first, 0 -> white
    assert pix.tolist() == [128, 64, 0, 255, 191, 0]


def test_generate_is_seeded(work):
    a, b = work / "g1.json", work / "g2.json"
    assert main(["generate", "--seed", "7", "-o", str(a)]) == 0
    assert main(["generate", "--seed", "7", "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["truss-opt", str(a), "-o", str(work / "g.json")]) in (0, 2)


def test_continuum_cli(tmp_path):
    inst = io.load_instance(INSTANCES / "cantilever_continuum.json")
    inst["geometry"] = {"nx": 6, "ny": 3}
    inst["supports"] = {"pinned": [[0, j] for j in range(4)]}
    inst["loads"] = [{"node": [6, 0], "force": [0.0, -1.0]}]
    inst["contact"]["nodes"] = [[i, 0] for i in range(2, 6)]
    inst["sequence"] = {"max_iter": 8}
    (tmp_path / "c.json").write_text(json.dumps(inst))
    out = tmp_path / "c.out.json"
    assert main(["continuum-opt", str(tmp_path / "c.json"), "-o", str(out), "--pgm",
                 str(tmp_path / "c.pgm"), "--csv", str(tmp_path / "c.csv")]) == 0
    res = io.load_result(out)
    assert len(res["design"]["rho"]) == 18 and res["stats"]["iterations"] <= 8
    assert main(["verify", str(out)]) == 0
    assert main(["render", str(out), "-o", str(tmp_path / "c.svg")]) == 0
    assert (tmp_path / "c.svg").read_text().startswith("<svg")
