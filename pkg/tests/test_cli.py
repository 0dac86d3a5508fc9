import json

import numpy as np
import pytest

from beolhomog.cli import main
from beolhomog.gdsii import LayoutDatabase, write_gdsii, write_gdsii_file
from beolhomog.macro import FluxMap, write_flux_map
from beolhomog.propmap import read_map
from beolhomog.synthetic import laminate_stack, slab_layout, synthetic_stack

RES = "0.5,0.5,0.2"


@pytest.fixture
def files(tmp_path):
    paths = {}
    paths["blank"] = tmp_path / "blank.gds"
    write_gdsii_file(slab_layout((20.0, 20.0), (99, 0)), paths["blank"])  # no stack layer covered
    paths["slab"] = tmp_path / "slab.gds"
    write_gdsii_file(slab_layout((20.0, 20.0), (1, 0), (2.0, 3.0, 7.5, 11.0)), paths["slab"])
    paths["empty"] = tmp_path / "empty.gds"
    write_gdsii_file(LayoutDatabase("EMPTY", 1e-6, 1e-9, ()), paths["empty"])
    paths["tech"] = tmp_path / "tech.json"
    paths["tech"].write_text(json.dumps(laminate_stack().to_dict()))
    paths["synth_tech"] = tmp_path / "synth.json"
    paths["synth_tech"].write_text(json.dumps(synthetic_stack().to_dict()))
    return paths


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_inspect_empty(files, capsys):
    rc, out, _ = run(capsys, "inspect", files["empty"])
    assert rc == 0 and "0 cells" in out


def test_inspect_rectangle(files, capsys):
    rc, out, _ = run(capsys, "inspect", files["slab"])
    assert rc == 0
    assert "layer 1/0: 1 polygons, bbox (2, 3) - (7.5, 11) um" in out


def test_inspect_corrupt(files, capsys, tmp_path):
    data = bytearray(files["slab"].read_bytes())
    bad = tmp_path / "bad.gds"
    bad.write_bytes(bytes(data[: len(data) - 7]))
    rc, _, err = run(capsys, "inspect", bad)
    assert rc == 3
    assert "offset" in err


def test_missing_file(capsys, tmp_path):
    rc, _, err = run(capsys, "inspect", tmp_path / "nope.gds")
    assert rc == 2


def test_homogenize_blank(files, capsys, tmp_path):
    out_json = tmp_path / "h.json"
    rc, out, _ = run(capsys, "homogenize", "--gds", files["blank"], "--tech", files["tech"], "--center", "10,10",
                     "--rve-size", "4", "--resolution", RES, "--dt", "1e-3", "--out", out_json)
    assert rc == 0
    assert "κ̄_xx=1.07, κ̄_yy=1.07, κ̄_zz=1.07" in out
    assert "rho_cp=2.2e+06" in out
    doc = json.loads(out_json.read_text())
    assert doc["header"][0] == "beol-homog 0.1.0 homogenize"
    assert doc["rho_cp"] == 2.2e6
    assert "0.001" in doc["kappa_transient"]


def test_homogenize_laminate_rule_of_mixtures(files, capsys, tmp_path):
    layout = tmp_path / "full.gds"
    write_gdsii_file(slab_layout((20.0, 20.0), (1, 0)), layout)
    rc, out, _ = run(capsys, "homogenize", "--gds", layout, "--tech", files["tech"], "--center", "10,10",
                     "--rve-size", "4", "--resolution", "1,1,0.3", "--out", tmp_path / "h.json")
    assert rc == 0
    k = np.array(json.loads((tmp_path / "h.json").read_text())["kappa_ss"])
    assert k[0, 0] == pytest.approx((174.0 + 1.07) / 2, rel=1e-8)


def test_map_blank_rows_and_rerun(files, capsys, tmp_path):
    args = ["map", "--gds", files["blank"], "--tech", files["tech"], "--grid", "2,2", "--rve-size", "4", "--die", "0,0,20,20",
            "--resolution", RES, "--dt", "1e-3", "--heatmaps", tmp_path / "hm"]
    assert run(capsys, *args, "--out", tmp_path / "a.csv")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b.csv")[0] == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = (tmp_path / "a.csv").read_text().splitlines()[4:]
    assert len(rows) == 4
    assert len({r.split(",", 4)[4] for r in rows}) == 1  # identical apart from indices and centres
    assert len(list((tmp_path / "hm").glob("heatmap_*.csv"))) == 7
    pmap = read_map(tmp_path / "a.csv")
    assert pmap.config["grid"] == [2, 2]
    assert "threads" not in pmap.config and "out" not in pmap.config


def test_config_file_and_precedence(files, capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gds": str(files["blank"]), "tech": str(files["tech"]), "grid": [1, 1], "die": [0, 0, 20, 20],
                               "rve_size": 4.0, "resolution": [0.5, 0.5, 0.2], "out": str(tmp_path / "c.csv")}))
    assert run(capsys, "map", "--config", cfg)[0] == 0
    assert read_map(tmp_path / "c.csv").grid_nx == 1
    assert run(capsys, "map", "--config", cfg, "--grid", "2,1")[0] == 0
    assert read_map(tmp_path / "c.csv").grid_nx == 2


def test_config_errors(files, capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "inspect", files["slab"], "--config", cfg)[0] == 2
    assert run(capsys, "map", "--gds", files["blank"], "--tech", files["tech"])[0] == 2  # --out missing
    rc, _, err = run(capsys, "map", "--gds", files["slab"], "--tech", files["tech"], "--grid", "9,9",
                     "--rve-size", "4", "--resolution", RES, "--out", tmp_path / "x.csv")
    assert rc == 2 and "do not fit" in err


def test_threads_env(files, capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("BEOL_HOMOG_THREADS", "zero")
    assert run(capsys, "inspect", files["slab"])[0] == 2


def test_ramp_fixture(capsys, tmp_path):
    rc, out, _ = run(capsys, "ramp", "--fixture", "laminate", "--rve-size", "1", "--resolution", "0.5,0.5,0.3",
                     "--t-ramp", "5e-4,5e-5,5e-6", "--out", tmp_path / "r")
    assert rc == 0
    files = sorted(p.name for p in (tmp_path / "r").iterdir())
    assert files == ["ramp_0.0005.csv", "ramp_5e-05.csv", "ramp_5e-06.csv"]
    text = (tmp_path / "r" / "ramp_5e-06.csv").read_text().splitlines()
    assert text[0] == "# beol-homog 0.1.0 ramp"
    assert "time_s,qbar_z,qavg_z,qss_z" in text
    table = [l.split() for l in out.splitlines()[1:]]
    overshoot = [float(r[1].rstrip("%")) for r in table]
    assert overshoot[0] < overshoot[1] < overshoot[2]


def test_simulate_uniform_slab(files, capsys, tmp_path):
    base = ["simulate", "--tech", files["tech"], "--material", "SiO2", "--die", "0,0,10,10", "--mesh", "2,2,4"]
    rc, out, _ = run(capsys, *base, "--flux", "1e6", "--steady", "--out", tmp_path / "s")
    assert rc == 0
    assert "T_max=315.05 K" in out
    assert (tmp_path / "s" / "steady.vtk").read_text().splitlines()[1] == "beol-homog 0.1.0 simulate"
    assert json.loads((tmp_path / "s" / "config.json").read_text())["config"]["flux"] == 1e6
    rc, out, _ = run(capsys, *base, "--flux", "1e6", "--dt", "1e-6", "--t-end", "5e-6", "--out", tmp_path / "t")
    assert rc == 0
    lines = (tmp_path / "t" / "series.csv").read_text().splitlines()
    assert lines[2] == "t,T_max,T_avg" and len(lines) == 3 + 6


def test_simulate_flux_map_doubles(files, capsys, tmp_path):
    fm = tmp_path / "f.csv"
    write_flux_map(FluxMap(np.array([[1e6, 0.0], [2e6, 5e5]])), fm)
    fm2 = tmp_path / "f2.csv"
    write_flux_map(FluxMap(np.array([[2e6, 0.0], [4e6, 1e6]])), fm2)
    base = ["simulate", "--tech", files["tech"], "--material", "SiO2", "--die", "0,0,10,10", "--mesh", "4,4,3", "--steady"]
    assert run(capsys, *base, "--flux-map", fm, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *base, "--flux-map", fm2, "--out", tmp_path / "b")[0] == 0
    from beolhomog.vtk import read_structured_points

    a = read_structured_points(tmp_path / "a" / "steady.vtk")["point"]["temperature"]
    b = read_structured_points(tmp_path / "b" / "steady.vtk")["point"]["temperature"]
    np.testing.assert_allclose(b - 300, 2 * (a - 300), rtol=1e-8)


def test_simulate_untabulated_dt(files, capsys, tmp_path):
    assert run(capsys, "map", "--gds", files["blank"], "--tech", files["tech"], "--grid", "2,2", "--rve-size", "4",
               "--die", "0,0,20,20", "--resolution", RES, "--dt", "1e-3", "--out", tmp_path / "m.csv")[0] == 0
    rc, _, err = run(capsys, "simulate", "--map", tmp_path / "m.csv", "--flux", "1e6", "--dt", "2e-3", "--t-end", "4e-3",
                     "--transient-kappa", "--mesh", "2,2,2", "--out", tmp_path / "o")
    assert rc == 2


def test_validate_homogeneous(files, capsys, tmp_path):
    rc, out, _ = run(capsys, "validate", "--gds", files["blank"], "--tech", files["tech"], "--window", "0,0,10,10",
                     "--rve-sizes", "5", "--resolution", "1,1,0.3", "--macro-mesh", "2,2,4", "--out", tmp_path / "v.csv")
    assert rc == 0
    head = out.splitlines()[0]
    for col in ("Model", "T_top,avg (K)", "T_bot,avg (K)", "Error (%)"):
        assert col in head
    assert out.splitlines()[2].split()[-1] in ("0.00", "-0.00")
    assert (tmp_path / "v.csv").read_text().startswith("# beol-homog 0.1.0 validate")


def test_synth(capsys, tmp_path):
    rc, _, _ = run(capsys, "synth", "--size", "20,20", "--seed", "3", "--out-gds", tmp_path / "s.gds",
                   "--out-tech", tmp_path / "s.json")
    assert rc == 0
    rc, out, _ = run(capsys, "inspect", tmp_path / "s.gds")
    assert rc == 0 and "layer 68/20" in out
