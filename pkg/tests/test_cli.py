import csv
import io

import pytest

from gsmp import plots
from gsmp.cli import ConfigError, fit_slope, load_config, main, run


def _config(tmp_path, body: str, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(body)
    return path


LQ_SMALL = """
[problem]
family = "lq"
[tree]
N = 3
grid = [0.5, 1.0]
[run]
kind = "{kind}"
seed = 0
samples = 20
{extra}
[output]
plots = {plots}
"""


def _run(tmp_path, body, out="out", threads=1):
    stream = io.StringIO()
    code = run(_config(tmp_path, body), threads=threads, out_dir=tmp_path / out, stream=stream)
    return code, stream.getvalue()


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_lq_demo_small(tmp_path):
    code, text = _run(tmp_path, LQ_SMALL.format(kind="lq-demo", extra="", plots="true"))
    assert code == 0, text
    out = tmp_path / "out"
    for name in ("lq_trace.csv", "smp_report.json", "lq_trace.svg"):
        assert (out / name).exists()
    assert "FAIL" not in text
    Js = [float(r["J"]) for r in _rows(out / "lq_trace.csv")]
    assert all(b <= a + 1e-12 for a, b in zip(Js, Js[1:]))


def test_threads_do_not_change_outputs(tmp_path):
    body = LQ_SMALL.format(kind="smp-check", extra="", plots="false")
    assert _run(tmp_path, body, "one", 1)[0] == 0
    assert _run(tmp_path, body, "two", 3)[0] == 0
    for name in ("descent.csv", "smp_report.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_failing_check_exits_one(tmp_path):
    body = LQ_SMALL.format(kind="smp-check", extra="optimize = false\ncontrol = 5.0", plots="false")
    code, text = _run(tmp_path, body)
    assert code == 1 and "FAIL  sufficient condition" in text


def test_derivative_check_single_volatility(tmp_path):
    body = """
[problem]
family = "meanfield-drift"
[tree]
N = 3
grid = [1.0]
[run]
kind = "derivative-check"
directions = 3
"""
    code, text = _run(tmp_path, body)
    assert code == 0, text
    assert text.count("PASS  direction") == 9
    for r in _rows(tmp_path / "out" / "derivative_check.csv"):
        assert float(r["left"]) == pytest.approx(float(r["right"]), abs=1e-12)


@pytest.mark.parametrize("kind,files", [
    ("gamma-sweep", ("gamma.csv", "convexity.csv", "gamma.svg", "convexity.svg")),
    ("selection-demo", ("selection.csv",)),
    ("lions-check", ("lions_check.csv",)),
    ("simulate", ("trajectory.csv", "tree.csv")),
])
def test_other_kinds(tmp_path, kind, files):
    body = f"""
[problem]
family = "additive"
[tree]
N = 2
grid = [0.5, 1.0]
[run]
kind = "{kind}"
seed = 3
tree_dump = true
[output]
plots = true
"""
    code, text = _run(tmp_path, body)
    assert code == 0, text
    for name in files:
        assert (tmp_path / "out" / name).exists(), name


@pytest.mark.parametrize("body,key", [
    ("[tree]\nN = 30\n", "tree.N"),
    ("[problem]\nfamily = 'quartic'\n", "problem.family"),
    ("[problem]\nfamily = 'meanfield-drift'\n[tree]\nN = 2\n[run]\nkind = 'smp-check'\n", "run.kind"),
    ("[run]\nkind = 'dance'\n", "run.kind"),
    ("[run]\nseed = -1\n", "run.seed"),
    ("[tolerances]\nsmp = 0.0\n", "tolerances.smp"),
    ("[tolerances]\nloose = 1.0\n", "tolerances.loose"),
    ("[tree]\ngrid = [1.0, 0.5]\n", "tree.grid"),
    ("[problem]\nx0 = 'one'\n", "problem.x0"),
    ("[problem]\nfamily = 'custom-polynomial'\nb = {z = 1.0}\n", "problem.b"),
    ("[tree]\nN = 3\n[run]\nkind = 'simulate'\ncontrol = 9.0\n", "run.control"),
    ("[tree]\nN = 6\ngrid = [0.5, 1.0]\n[run]\nkind = 'lions-check'\n", "tree.N"),
    ("not = [valid", "config"),
])
def test_config_errors_exit_two(tmp_path, capsys, body, key):
    code = run(_config(tmp_path, body), out_dir=tmp_path / "o", stream=io.StringIO())
    assert code == 2
    assert f"config error: {key}" in capsys.readouterr().err


def test_missing_config(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "absent.toml")
    assert info.value.key == "config"


def test_budget_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GSMP_NODE_BUDGET", "100")
    code = run(_config(tmp_path, "[tree]\nN = 4\n"), out_dir=tmp_path / "o", stream=io.StringIO())
    assert code == 2 and "tree.N" in capsys.readouterr().err


def test_custom_polynomial(tmp_path):
    body = """
[problem]
family = "custom-polynomial"
b = {x = 0.1, v = 1.0}
sigma = {"1" = 0.3}
Phi = {xx = 0.5, y = 0.5}
l = {xx = 0.5, vv = 0.5}
phi4 = {xx = 1.0}
[tree]
N = 2
[run]
kind = "smp-check"
samples = 8
"""
    code, text = _run(tmp_path, body)
    assert code == 0, text


# --------------------------------------------------------------------------- plot


def test_plot_empty_csv(tmp_path, capsys):
    src = tmp_path / "empty.csv"
    src.write_text("")
    assert main(["plot", str(src), "--kind", "gamma"]) == 2
    assert not (tmp_path / "empty.svg").exists()
    src.write_text("eps,gamma\n")
    assert main(["plot", str(src), "--kind", "gamma"]) == 2
    assert not (tmp_path / "empty.svg").exists()


def test_plot_schema_mismatch(tmp_path):
    src = tmp_path / "x.csv"
    src.write_text("a,b\n1,2\n")
    with pytest.raises(plots.SchemaError, match="needs"):
        plots.emit_plot(src, "descent")
    assert not (tmp_path / "x.svg").exists()


def test_convexity_plot_labels(tmp_path):
    src = tmp_path / "c.csv"
    src.write_text("lambda,F,right,left\n-1,1,4,1\n0,0,4,1\n1,4,4,1\n")
    out = tmp_path / "c.svg"
    assert main(["plot", str(src), "--kind", "convexity", "--out", str(out)]) == 0
    svg = out.read_text()
    assert "right slope 4" in svg and "left slope 1" in svg


def test_fit_slope():
    xs = [1e-2, 1e-3, 1e-4]
    assert fit_slope(xs, [3 * x for x in xs]) == pytest.approx(1.0)
    assert fit_slope(xs, [x * x for x in xs]) == pytest.approx(2.0)
    assert fit_slope(xs, [0.0, 0.0, 0.0]) == float("inf")
