import json
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from addsysid.benchmark import default_controller
from addsysid.cli import main
from addsysid.errors import ValidationError
from addsysid.io import read_dataset, read_json, write_dataset
from addsysid.riv import RivResult, SampledDataset


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = SampledDataset(0.01, rng.standard_normal((50, 2)), rng.standard_normal((50, 3)),
                        rng.standard_normal((50, 3)))
    write_dataset(tmp_path / "d.csv", ds)
    back = read_dataset(tmp_path / "d.csv")
    assert_array_equal(back.u, ds.u)
    assert_array_equal(back.y, ds.y)
    assert_array_equal(back.r, ds.r)
    assert_allclose(back.h, 0.01, rtol=1e-12)


@pytest.mark.parametrize("text,code", [
    ("x,u1,y1\n0,1,1\n1,1,1\n", "SCHEMA"),
    ("t,u1,y2\n0,1,1\n1,1,1\n", "SCHEMA"),
    ("t,u1,y1\n0,1,1\n0.1,1,oops\n", "SCHEMA"),
    ("t,u1,y1\n0,1,1\n0.1,1,1\n0.3,1,1\n", "NON_UNIFORM"),
    ("", "SCHEMA"),
])
def test_dataset_rejects(tmp_path, text, code):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ValidationError) as e:
        read_dataset(p)
    assert e.value.code == code


def test_read_json_invalid(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{nope")
    with pytest.raises(ValidationError):
        read_json(p)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_cli_open_loop_pipeline(workdir):
    cfg = _write(workdir / "sim.json", {"benchmark": {}, "N": 3000})
    data = str(workdir / "open.csv")
    assert main(["simulate", "--config", cfg, "--seed", "1", "--out", data]) == 0
    orders = _write(workdir / "orders.json", [[2, 0]] * 3)
    est = str(workdir / "est.json")
    assert main(["identify", "--data", data, "--orders", orders, "--loop", "open", "--out", est]) == 0
    res = RivResult.from_dict(read_json(est))
    assert list(res.model.orders) == [(2, 0)] * 3
    proj = str(workdir / "proj.json")
    assert main(["project", "--estimate", est, "--map", "modal", "--out", proj]) == 0
    d = read_json(proj)
    assert len(d["modes"]) == 3
    assert sorted(round(m["omega"], 0) for m in d["modes"]) == [3.0, 9.0, 13.0]


def test_cli_closed_loop_identify(workdir):
    cfg = _write(workdir / "simc.json", {"benchmark": {"loop_mode": "closed"}, "N": 3000})
    data = str(workdir / "closed.csv")
    assert main(["simulate", "--config", cfg, "--seed", "2", "--out", data]) == 0
    assert read_dataset(data).r is not None
    ctrl = _write(workdir / "ctrl.json", default_controller().to_dict())
    orders = _write(workdir / "orders.json", [[2, 0]] * 3)
    est = str(workdir / "estc.json")
    argv = ["identify", "--data", data, "--orders", orders, "--loop", "closed", "--out", est]
    assert main(argv) == 2  # controller missing
    assert main(argv + ["--controller", ctrl]) == 0


def test_cli_montecarlo_and_plot(workdir):
    cfg = _write(workdir / "mc.json", {"benchmark": {"snr_db": None},
                                       "mc": {"sample_sizes": [500], "runs": 2, "workers": 1}})
    out = str(workdir / "mse.csv")
    assert main(["montecarlo", "--config", cfg, "--out", out, "--plots", str(workdir / "plots")]) == 0
    lines = open(out).read().splitlines()
    assert lines[0] == "method,N,param,mse" and len(lines) == 7
    assert (workdir / "plots" / "mse.svg").exists()
    svg = str(workdir / "again.svg")
    assert main(["plot", "--in", out, "--out", svg]) == 0
    assert open(svg).read().count('id="series:') == 6


def test_cli_controller_command(workdir):
    out = str(workdir / "c.json")
    assert main(["controller", "--out", out]) == 0
    assert read_json(out)["h"] == 0.01


def test_cli_validation_exit_codes(workdir):
    bad = _write(workdir / "bad.json", {"benchmark": {"masses": [1, -1, 1]}})
    assert main(["simulate", "--config", bad, "--seed", "0", "--out", str(workdir / "x.csv")]) == 2
    assert main(["plot", "--in", str(workdir / "missing.csv"), "--out", str(workdir / "x.svg")]) == 2
    unknown = _write(workdir / "unk.json", {"benchmark": {}, "speed": 3})
    assert main(["montecarlo", "--config", unknown, "--out", str(workdir / "x.csv")]) == 2


def test_cli_numeric_exit_code(workdir):
    # an unstable initial model is a numeric failure, not a validation one
    rng = np.random.default_rng(3)
    ds = SampledDataset(0.1, rng.standard_normal((200, 1)), rng.standard_normal((200, 1)))
    write_dataset(workdir / "n.csv", ds)
    ones = _write(workdir / "o.json", [[1, 0]])
    est = str(workdir / "n.json")
    code = main(["identify", "--data", str(workdir / "n.csv"), "--orders", ones, "--loop", "open",
                 "--out", est])
    assert code in (0, 3)
    const = SampledDataset(0.1, np.ones((200, 1)), np.ones((200, 1)))
    write_dataset(workdir / "c.csv", const)
    init = _write(workdir / "i.json", {"init": {"n_y": 1, "n_u": 1,
                                              "subsystems": [{"a": [0.5], "b": [[[1.0]]]}]}})
    assert main(["identify", "--data", str(workdir / "c.csv"), "--orders", init, "--loop", "open",
                 "--out", est]) == 3


def test_cli_argparse_usage_error():
    proc = subprocess.run([sys.executable, "-m", "addsysid", "identify"], capture_output=True)
    assert proc.returncode == 2
