import io
from pathlib import Path

import pytest

from freebrw import cli
from freebrw.errors import ValidationError

GOLDEN = Path(__file__).parent / "golden"

MINIMAL = """
[factor]
kind = cyclic 3
[factor]
kind = cyclic 2
[weights]
alpha = 0.5, 0.5
"""


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def kv(text):
    return dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)


# parsing

def test_minimal_config():
    cfg = cli.parse_config(MINIMAL)
    assert cfg.r == 2 and cfg.spec.r == 2
    assert cfg.spec.metric_base == 0.5 and cfg.nu is None


def test_weights_must_sum_to_one():
    with pytest.raises(ValidationError, match="line 7: weights must sum to 1"):
        cli.parse_config(MINIMAL.replace("0.5, 0.5", "0.6, 0.6"))


def test_excluded_case():
    with pytest.raises(ValidationError, match="excluded"):
        cli.parse_config(MINIMAL.replace("cyclic 3", "cyclic 2"))


@pytest.mark.parametrize("text,msg", [
    (MINIMAL + "[bogus]\n", "line 8: unknown section"),
    (MINIMAL + "colour = red\n", "line 8: unknown key"),
    (MINIMAL + "nonsense\n", "line 8: expected 'key = value'"),
    ("alpha = 1\n" + MINIMAL, "line 1: key outside"),
    (MINIMAL.replace("cyclic 3", "cyclic x"), "line 3"),
    (MINIMAL.replace("cyclic 3", "torus 3"), "unknown factor kind"),
    (MINIMAL + "[offspring]\nkind = geometric\nmean = 0.9\n", "line 9"),
    (MINIMAL + "[weights]\n", "duplicate section"),
])
def test_errors_cite_location(text, msg):
    with pytest.raises(ValidationError, match=msg):
        cli.parse_config(text)


def test_table_factor(tmp_path):
    (tmp_path / "z4.txt").write_text("0 1 2 3\n1 2 3 0\n2 3 0 1\n3 0 1 2\n")
    text = MINIMAL.replace("kind = cyclic 3", "kind = table z4.txt\npmf = 1:0.5, 3:0.5")
    path = tmp_path / "z4.cfg"
    path.write_text(text)
    cfg = cli.load_config(path)
    assert cfg.spec.factor(1).order == 4


def test_uniform_weights():
    cfg = cli.parse_config(MINIMAL.replace("0.5, 0.5", "uniform"))
    assert list(cfg.spec.weights) == [0.5, 0.5]


@pytest.mark.parametrize("path", cli.bundled_configs(), ids=lambda p: p.stem)
def test_bundled_configs_parse(path):
    code, out, _ = run("check", str(path))
    assert code == 0 and kv(out)["valid"] == "true"


def test_amalgam_transversals(tmp_path):
    base = (cli.CONFIG_DIR / "z6_z2_z6.cfg").read_text()
    path = tmp_path / "t.cfg"
    path.write_text(base.replace("[solver]", "transversal1 = 0, 4, 5\ntransversal2 = 0, 1, 5\n[solver]"))
    code, out, _ = run("amalgam-dim", str(path))
    code0, out0, _ = run("amalgam-dim", "z6_z2_z6.cfg")
    assert code == code0 == 0
    assert float(kv(out)["HD_H_Lambda"]) == pytest.approx(float(kv(out0)["HD_H_Lambda"]), abs=1e-11)
    path.write_text(base.replace("[solver]", "transversal1 = 0, 4, 5\n[solver]"))
    with pytest.raises(ValidationError, match="every factor"):
        cli.load_config(path)


# commands

def test_dim_omega():
    code, out, _ = run("dim-omega", "z3_z2.cfg")
    assert code == 0
    assert float(kv(out)["HD_Omega"]) == pytest.approx(0.5, abs=1e-9)


def test_sweep_single_point(tmp_path):
    target = tmp_path / "s.csv"
    code, _, _ = run("sweep", "z3_z2.cfg", "--grid", "1:1:1", "--out", str(target))
    assert code == 0
    data = target.read_bytes()
    assert b"\r" not in data
    header, row = data.decode().strip().split("\n")
    assert header == "lambda,z_star,phi,hd_omega,phase_flags,R"
    assert row.split(",")[2] == "0"


def test_sweep_parallel_matches_serial(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("sweep", "z3_z2.cfg", "--grid", "1:1.012:8", "--jobs", "1", "--out", str(a))
    run("sweep", "z3_z2.cfg", "--grid", "1:1.012:8", "--jobs", "3", "--out", str(b))
    assert a.read_bytes() == b.read_bytes()


def test_dim_and_phase():
    code, out, _ = run("dim", "z3_z2.cfg", "--lambda", "1.01")
    d = kv(out)
    assert code == 0 and d["regime"] == "transient"
    assert float(d["phi"]) <= 0.25
    code, out, _ = run("phase", "free2_z2.cfg", "--lambda", "1.2")
    assert kv(out)["factor_1"] == "nonempty" and kv(out)["factor_2"] == "finite"


def test_finite_and_amalgam_dims():
    code, out, _ = run("finite-dim", "z3_z2.cfg", "--lambda", "1.0")
    assert code == 0 and float(kv(out)["HD_fin_Omega"]) == pytest.approx(0.5, abs=1e-10)
    code, out, _ = run("amalgam-dim", "z6_z2_z6.cfg")
    assert code == 0 and kv(out)["HD_H_Omega"] == "1"


def test_oracle_command():
    code, out, _ = run("oracle", "z3_z2.cfg", "--lambda", "0.5", "--terms", "30", "--word", "1:1.2:1; xi2")
    d = kv(out)
    assert code == 0
    assert abs(float(d["1:1.2:1.gap"])) < 1e-10 and abs(float(d["xi2.gap"])) < 1e-10


def test_truncation_command():
    code, out, _ = run("truncation", "ladder_ladder.cfg", "--depths", "2,4")
    lines = out.strip().split("\n")
    assert code == 0 and lines[0] == "depth,z_star,gap" and len(lines) == 3


def test_marginal_tv():
    code, out, _ = run("simulate", "z3_z3_z3.cfg", "--mode", "marginal", "--generation", "3",
                       "--particles", "1000000", "--seed", "2")
    d = kv(out)
    assert code == 0 and float(d["tv_distance"]) < 0.01


def test_error_exit_codes(tmp_path):
    path = tmp_path / "minimal.cfg"
    path.write_text(MINIMAL)
    code, _, err = run("dim", str(path))
    assert code == 1 and "--lambda" in err
    code, _, err = run("amalgam-dim", "z3_z2.cfg")
    assert code == 1
    code, _, err = run("dim", "no_such_file.cfg", "--lambda", "1")
    assert code == 1 and "cannot read" in err


# golden outputs

@pytest.mark.parametrize("path", cli.bundled_configs(), ids=lambda p: p.stem)
def test_golden_roundtrip(path, tmp_path):
    target = tmp_path / f"{path.stem}.csv"
    code, _, err = run("run", str(path), "--out", str(target))
    assert code == 0, err
    assert target.read_bytes() == (GOLDEN / f"{path.stem}.csv").read_bytes()
