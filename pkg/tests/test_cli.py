import json
import subprocess
import sys

import numpy as np
import pytest

from refloat.cli import EXIT_BREAKDOWN, EXIT_ERROR, EXIT_MAX_ITER, EXIT_OK, main
from refloat.matrix_io import SparseMatrixCoo, write_matrix_market
from refloat.streaming import deserialize


def _poisson_file(tmp_path, k=6, name="poisson.mtx"):
    n = k * k
    entries = []
    for i in range(k):
        for j in range(k):
            r = i * k + j
            entries.append((r, r, 4.0))
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if 0 <= i + di < k and 0 <= j + dj < k:
                    entries.append((r, (i + di) * k + j + dj, -1.0))
    path = tmp_path / name
    write_matrix_market(SparseMatrixCoo.from_entries(n, n, entries), path)
    return path


def test_convert_writes_container_and_reports(tmp_path, capsys):
    mtx = _poisson_file(tmp_path)
    out = tmp_path / "conv"
    assert main(["convert", "--matrix", str(mtx), "--block-bits", "3", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "refloat_bits" in text and "ratio" in text
    blocked = deserialize(out / "matrix.rfc")
    assert blocked.config.b == 3 and blocked.nnz == 36 + 4 * 30
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "convert" and manifest["refloat"]["b"] == 3


def test_convert_empty_matrix_ratio_na(tmp_path, capsys):
    path = tmp_path / "empty.mtx"
    path.write_text("%%MatrixMarket matrix coordinate real general\n3 3 0\n")
    assert main(["convert", "--matrix", str(path)]) == EXIT_OK
    assert "n/a" in capsys.readouterr().out


def test_solve_trace_and_exit_codes(tmp_path, capsys):
    mtx = _poisson_file(tmp_path)
    out = tmp_path / "s"
    assert main(["solve", "--matrix", str(mtx), "--out", str(out)]) == EXIT_OK
    assert "status=converged" in capsys.readouterr().out
    rows = (out / "trace.csv").read_text().splitlines()
    assert rows[0] == "iteration,residual_norm"
    assert rows[1].startswith("0,")
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[1].startswith("converged,")
    code = main(["solve", "--matrix", str(mtx), "--max-iter", "1", "--tol", "1e-30"])
    assert code == EXIT_MAX_ITER


def test_solve_breakdown_exit(tmp_path):
    path = tmp_path / "indef.mtx"
    write_matrix_market(SparseMatrixCoo.from_dense(np.diag([1.0, -1.0])), path)
    assert main(["solve", "--matrix", str(path), "--rhs", "ones-rhs"]) == EXIT_BREAKDOWN


def test_solve_identity_one_iteration(tmp_path, capsys):
    path = tmp_path / "eye.mtx"
    write_matrix_market(SparseMatrixCoo.from_dense(np.eye(5)), path)
    assert main(["solve", "--matrix", str(path), "--method", "bicgstab", "--backend", "refloat"]) == EXIT_OK
    assert "iterations=1 " in capsys.readouterr().out


@pytest.mark.parametrize(
    "flags,expect",
    [
        ([], ["crossbars_per_engine", " 48", "cycles_per_block_mvm", " 28"]),
        (["--mat-exp", "11", "--mat-frac", "52", "--vec-exp", "11", "--vec-frac", "52"], [" 8404", " 4201"]),
        (["--compare-escma"], [" 472", " 118", " 233", " 2221"]),
    ],
)
def test_cost_outputs(capsys, flags, expect):
    assert main(["cost", "--blocks", "209263"] + flags) == EXIT_OK
    text = capsys.readouterr().out
    for token in expect:
        assert token in text


def test_cost_from_container(tmp_path, capsys):
    mtx = _poisson_file(tmp_path)
    out = tmp_path / "c"
    main(["convert", "--matrix", str(mtx), "--block-bits", "2", "--out", str(out)])
    capsys.readouterr()
    assert main(["cost", "--matrix", str(out / "matrix.rfc"), "--out", str(out / "cost")]) == EXIT_OK
    rows = (out / "cost" / "cost.csv").read_text().splitlines()
    assert rows[0] == "quantity,refloat"
    assert any(r.startswith("blocks_required,") for r in rows)


def test_study_csv(tmp_path):
    mtx = _poisson_file(tmp_path)
    out = tmp_path / "st"
    code = main(["study", "--matrix", str(mtx), "--exp-bits", "11,2", "--frac-bits", "52,10",
                 "--max-iter", "200", "--out", str(out)])
    assert code == EXIT_OK
    rows = (out / "study.csv").read_text().splitlines()
    assert rows[0] == "exponent_bits,fraction_bits,iterations"
    assert len(rows) == 5
    assert rows[1].split(",")[:2] == ["11", "52"]


@pytest.mark.parametrize("cmd", [
    ["solve", "--backend", "refloat", "--rhs", "seeded-random", "--seed", "4"],
    ["study", "--exp-bits", "11,5", "--frac-bits", "52,8", "--max-iter", "300"],
    ["convert"],
])
def test_replay_is_byte_identical(tmp_path, cmd):
    mtx = _poisson_file(tmp_path)
    first = tmp_path / "a"
    main([cmd[0], "--matrix", str(mtx)] + cmd[1:] + ["--out", str(first)])
    second = tmp_path / "b"
    main(["replay", str(first / "manifest.json"), "--out", str(second)])
    files = sorted(p.name for p in first.iterdir())
    assert files == sorted(p.name for p in second.iterdir())
    for name in files:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["convert", "--matrix", str(tmp_path / "missing.mtx")]) == EXIT_ERROR
    bad = tmp_path / "bad.mtx"
    bad.write_text("%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1 0\n")
    assert main(["solve", "--matrix", str(bad)]) == EXIT_ERROR
    assert "line 1" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["solve"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "refloat", "cost", "--blocks", "10"], capture_output=True, text=True)
    assert res.returncode == 0 and "rounds" in res.stdout
