import csv
import json
from pathlib import Path

import numpy as np
import pytest

from tensorvb.cli import main
from tensorvb.io import read_factor, write_coo
from tensorvb.synth import SynthSpec, generate_cp_data

MODEL = """index i 8
index j 7
index k 6
index r 2
factor A i,r
factor B j,r
factor C k,r
observe X i,j,k = A,B,C
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cp.model").write_text(MODEL)
    X, _ = generate_cp_data(SynthSpec((8, 7, 6), 2, observed_fraction=0.5, noise_std_fraction=0.1, seed=0))
    write_coo(tmp_path / "x.coo", X)
    return tmp_path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fit_vb_writes_outputs(workdir):
    out = workdir / "run"
    assert main(["fit", str(workdir / "cp.model"), str(workdir / "x.coo"), "--algo", "vb",
                 "--iters", "20", "--out", str(out)]) == 0
    for name in "ABC":
        f = read_factor(out / f"factor_{name}.txt")
        assert f.has_vb
        f.check(rtol=1e-12)
    header = (out / "factor_A.txt").read_text().splitlines()
    assert header[0] == "# factor A indices: i=8 r=2"
    assert header[1].endswith("value C D E L")
    trace = _rows(out / "trace.csv")
    assert [int(r["iteration"]) for r in trace] == list(range(1, len(trace) + 1))
    m = json.loads((out / "manifest.json").read_text())
    assert m["args"]["algo"] == "vb" and m["args"]["iters"] == 20
    assert Path(m["inputs"]["data:X"]["path"]).is_absolute()
    assert set(m["outputs"]) == {"factor_A.txt", "factor_B.txt", "factor_C.txt", "trace.csv"}


def test_named_data_argument_and_env_override(workdir, monkeypatch):
    monkeypatch.setenv("TENSORVB_FIT_ALGO", "map-em")
    out = workdir / "run"
    assert main(["fit", str(workdir / "cp.model"), f"X={workdir / 'x.coo'}", "--iters", "3",
                 "--A", "2", "--B", "5", "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["args"]["algo"] == "map-em" and m["args"]["A"] == 2.0
    assert not read_factor(out / "factor_A.txt").has_vb


def test_fit_missing_data_file(workdir, capsys):
    code = main(["fit", str(workdir / "cp.model"), str(workdir / "missing.coo"), "--out", str(workdir / "o")])
    assert code == 1
    assert "missing.coo" in capsys.readouterr().err


def test_fit_bad_model_line(workdir, capsys):
    (workdir / "bad.model").write_text("index i 8\nfactor A i,q\nobserve X i = A\n")
    assert main(["fit", str(workdir / "bad.model"), str(workdir / "x.coo"), "--out", str(workdir / "o")]) == 1
    assert "bad.model:2:" in capsys.readouterr().err


def test_fit_data_shape_mismatch(workdir, capsys):
    (workdir / "y.coo").write_text("# indices: i=3 j=7 k=6\n0 0 0 1.0\n")
    assert main(["fit", str(workdir / "cp.model"), str(workdir / "y.coo"), "--out", str(workdir / "o")]) == 1
    assert "y.coo" in capsys.readouterr().err


def test_bad_flag_is_validation_failure(workdir):
    assert main(["fit", str(workdir / "cp.model"), str(workdir / "x.coo"), "--algo", "nope",
                 "--out", str(workdir / "o")]) == 1


def test_numeric_failure_exit_code(workdir, capsys):
    (workdir / "model1").write_text("index i 1\nindex j 2\nindex r 1\nfactor A i,r\nfactor B j,r\n"
                                    "observe X i,j = A,B\n")
    (workdir / "huge.coo").write_text("# indices: i=1 j=2\n0 0 1e308\n0 1 1e308\n")
    with np.errstate(all="ignore"):
        code = main(["fit", str(workdir / "model1"), str(workdir / "huge.coo"), "--algo", "em",
                     "--out", str(workdir / "o")])
    assert code == 2
    assert "numeric" in capsys.readouterr().err


def test_replay_reproduces(workdir):
    out = workdir / "run"
    main(["fit", str(workdir / "cp.model"), str(workdir / "x.coo"), "--algo", "vb", "--iters", "10",
          "--seed", "3", "--out", str(out)])
    assert main(["replay", str(out / "manifest.json"), "--out", str(workdir / "again"), "--check"]) == 0
    for name in ("factor_A.txt", "factor_B.txt", "factor_C.txt", "trace.csv", "manifest.json"):
        assert (out / name).read_bytes() == (workdir / "again" / name).read_bytes()


def test_eval_rows_and_summary(workdir):
    out = workdir / "ev"
    assert main(["eval", str(workdir / "cp.model"), str(workdir / "x.coo"), "--hide", "0.6",
                 "--repeats", "10", "--iters", "10", "--out", str(out)]) == 0
    rows = _rows(out / "results.csv")
    assert len(rows) == 11 and rows[-1]["seed"] == "summary"
    assert " ± " in rows[-1]["AUC"]
    aucs = np.array([float(r["AUC"]) for r in rows[:-1]])
    mean, sd = (float(v) for v in rows[-1]["AUC"].split(" ± "))
    assert mean == pytest.approx(aucs.mean(), abs=5e-5) and sd == pytest.approx(aucs.std(ddof=1), abs=5e-5)
    runs = sorted((out / "runs").iterdir())
    assert [p.name for p in runs] == [f"run_{k:02d}.json" for k in range(10)]


def test_eval_train_size(tmp_path):
    (tmp_path / "m").write_text("index i 10\nindex j 10\nindex k 10\nindex r 2\n"
                                "factor A i,r\nfactor B j,r\nfactor C k,r\nobserve X i,j,k = A,B,C\n")
    X, _ = generate_cp_data(SynthSpec((10, 10, 10), 2, seed=1, binarize=True, positive_fraction=0.3))
    write_coo(tmp_path / "x.coo", X)
    assert X.nnz == 1000
    assert main(["eval", str(tmp_path / "m"), str(tmp_path / "x.coo"), "--hide", "0.6", "--repeats", "2",
                 "--iters", "5", "--out", str(tmp_path / "ev")]) == 0
    run = json.loads((tmp_path / "ev" / "runs" / "run_00.json").read_text())
    assert run["train_entries"] == 400 and run["test_entries"] == 600


def test_eval_parallel_matches_serial(workdir):
    args = ["eval", str(workdir / "cp.model"), str(workdir / "x.coo"), "--repeats", "3", "--iters", "8"]
    assert main(args + ["--out", str(workdir / "a")]) == 0
    assert main(args + ["--jobs", "2", "--out", str(workdir / "b")]) == 0
    a, b = _rows(workdir / "a" / "results.csv"), _rows(workdir / "b" / "results.csv")
    assert [r["AUC"] for r in a] == [r["AUC"] for r in b]


def test_eval_degenerate_split(tmp_path, capsys):
    (tmp_path / "m").write_text("index i 2\nindex r 1\nfactor A i,r\nobserve X i = A\n")
    (tmp_path / "x.coo").write_text("# indices: i=2\n0 1.0\n")
    assert main(["eval", str(tmp_path / "m"), str(tmp_path / "x.coo"), "--hide", "0.9",
                 "--out", str(tmp_path / "ev")]) == 1
    assert "split" in capsys.readouterr().err


def _bench(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["bench", "--dims", "20", "--rank", "3", "--observed-frac", "0.2", "--iters", "15",
                 "--heldout", "500", "--out", str(out), *extra]) == 0
    return _rows(out / "trajectory.csv")


def test_bench_trajectory(tmp_path):
    a = _bench(tmp_path, "a", "--repeats", "2")
    assert list(a[0]) == ["repeat", "iteration", "elapsed_seconds", "rmse"]
    for rep in ("0", "1"):
        t = [float(r["elapsed_seconds"]) for r in a if r["repeat"] == rep]
        assert len(t) == 15 and all(np.diff(t) > 0)
    b = _bench(tmp_path, "b", "--repeats", "2")
    assert [r["rmse"] for r in a] == [r["rmse"] for r in b]


def test_bench_invalid_spec(tmp_path, capsys):
    assert main(["bench", "--dims", "3", "--observed-frac", "0.1", "--out", str(tmp_path / "b")]) == 1
    assert "100" in capsys.readouterr().err


def test_bench_time_scales_with_entries(tmp_path):
    def per_iteration(frac, name):
        out = tmp_path / name
        assert main(["bench", "--dims", "100", "--observed-frac", str(frac), "--iters", "15",
                     "--tol", "1e-300", "--heldout", "100", "--out", str(out)]) == 0
        return float(_rows(out / "summary.csv")[0]["median_iteration_seconds"])

    ratio = per_iteration(0.02, "big") / per_iteration(0.01, "small")
    assert 1.5 <= ratio <= 3.0


def test_convert(tmp_path, capsys):
    src = tmp_path / "raw.txt"
    src.write_text("1 1 1 5.0\n")
    assert main(["convert", str(src), "--reindex", "--indices", "i,j,k"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "0 0 0 5.0"
    src.write_text("2 1 1 1.0\n1 1 1 5.0\n2 1 1 1.0\n")
    out = tmp_path / "clean.coo"
    assert main(["convert", str(src), "--from", "coo-text", "--to", "coo-text", "--reindex",
                 "--out", str(out)]) == 0
    assert out.read_text().splitlines()[1:] == ["0 0 0 5.0", "1 0 0 1.0"]
    src.write_text("1 1 1 5.0\n1 1 1 4.0\n")
    assert main(["convert", str(src), "--out", str(out)]) == 1
    assert "raw.txt:2:" in capsys.readouterr().err


def test_synth_command(tmp_path):
    out = tmp_path / "s.coo"
    assert main(["synth", "--dims", "10,8,6", "--rank", "2", "--observed-frac", "0.5", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# indices: i=10 j=8 k=6" and len(lines) == 1 + 240
