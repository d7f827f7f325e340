import subprocess
import sys

import numpy as np
import pytest

from gap_nrl.cli import PRESETS, main
from gap_nrl.model import GapParams, load_checkpoint, save_checkpoint


def _clique_edges(sizes=(6, 6, 6)):
    lines, start = [], 0
    for k in sizes:
        lines += [f"n{start + u} n{start + v}" for u in range(k) for v in range(u + 1, k)]
        start += k
    lines.append("n0 n6")
    return "\n".join(lines) + "\n"


@pytest.fixture
def edges(tmp_path):
    p = tmp_path / "edges.txt"
    p.write_text(_clique_edges())
    return p


@pytest.fixture
def split_dir(tmp_path, edges):
    out = tmp_path / "split"
    assert main(["split", "--edges", str(edges), "--ratio", "0.6", "--valid-fraction", "0.2",
                 "--seed", "1", "--out", str(out)]) == 0
    return out


SMALL = ["--neighborhood", "8", "--dim", "8", "--dropout", "0", "--lr", "0.01", "--batch-size", "16",
         "--max-epochs", "4", "--patience", "10"]


def test_split_rejects_bad_ratio(tmp_path, edges, capsys):
    assert main(["split", "--edges", str(edges), "--ratio", "1.5", "--out", str(tmp_path / "s")]) == 2
    assert "ratio" in capsys.readouterr().err


def test_split_unreadable_edges(tmp_path):
    assert main(["split", "--edges", str(tmp_path / "nope"), "--ratio", "0.5", "--out", str(tmp_path / "s")]) == 3


def test_split_is_idempotent(tmp_path, edges, split_dir):
    again = tmp_path / "again"
    main(["split", "--edges", str(edges), "--ratio", "0.6", "--valid-fraction", "0.2", "--seed", "1",
          "--out", str(again)])
    for name in ("split.manifest", "train.edges", "id_map.txt"):
        assert (split_dir / name).read_bytes() == (again / name).read_bytes()


def test_train_missing_split_is_usage_error(tmp_path):
    assert main(["train", "--split", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2


def test_preset_values():
    assert PRESETS["cora"] == {"neighborhood": 100, "dropout": 0.5, "lr": 1e-4, "dim": 200}
    assert PRESETS["email"]["neighborhood"] == 100 and PRESETS["email"]["dropout"] == 0.8


def test_train_writes_artifacts_and_resolved_config(tmp_path, split_dir, capsys):
    run = tmp_path / "run"
    assert main(["train", "--split", str(split_dir), "--preset", "email", *SMALL, "--out", str(run)]) == 0
    for name in ("checkpoint.gap", "history.tsv", "train.log", "resolved.conf", "id_map.txt"):
        assert (run / name).is_file()
    resolved = dict(line.split(" = ") for line in (run / "resolved.conf").read_text().splitlines())
    assert resolved["neighborhood"] == "8" and resolved["dropout"] == "0.0"
    assert len((run / "history.tsv").read_text().splitlines()) == 5
    assert "epochs 4" in capsys.readouterr().out


def test_config_file_and_flag_precedence(tmp_path, split_dir):
    conf = tmp_path / "c.conf"
    conf.write_text(f"# comment\nsplit = {split_dir}\npreset = cora\nneighborhood = 5\ndim = 6\n"
                    "max-epochs = 2\nbatch-size = 32\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--dim", "4", "--out", str(run)]) == 0
    resolved = dict(line.split(" = ") for line in (run / "resolved.conf").read_text().splitlines())
    assert resolved["neighborhood"] == "5"  # file beats preset
    assert resolved["dim"] == "4"  # flag beats file
    assert resolved["dropout"] == "0.5" and resolved["lr"] == "0.0001"  # from preset
    params, L = load_checkpoint(run / "checkpoint.gap")
    assert params.dim == 4 and L == 5


def test_unknown_config_key(tmp_path, split_dir):
    conf = tmp_path / "c.conf"
    conf.write_text(f"split = {split_dir}\nlearning_rate = 3\n")
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "r")]) == 2


def test_resolved_config_replays_run(tmp_path, split_dir):
    first = tmp_path / "first"
    main(["train", "--split", str(split_dir), *SMALL, "--dropout", "0.3", "--out", str(first)])
    second = tmp_path / "second"
    assert main(["train", "--config", str(first / "resolved.conf"), "--out", str(second)]) == 0
    for name in ("checkpoint.gap", "history.tsv", "resolved.conf"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def _write_one_hot_run(run, n, groups):
    k = max(groups) + 1
    emb = np.zeros((n + 1, k))
    emb[np.arange(n), groups] = 1.0
    run.mkdir()
    save_checkpoint(run / "checkpoint.gap", GapParams(emb, np.eye(k)), 8)


def test_eval_lp_perfect_fixture(tmp_path, capsys):
    (tmp_path / "e.txt").write_text(_clique_edges().replace("n0 n6\n", ""))
    split = tmp_path / "split"
    main(["split", "--edges", str(tmp_path / "e.txt"), "--ratio", "0.6", "--out", str(split)])
    capsys.readouterr()
    labels = [line.split()[0] for line in (split / "id_map.txt").read_text().splitlines()]
    groups = [int(lab[1:]) // 6 for lab in labels]
    run = tmp_path / "run"
    _write_one_hot_run(run, len(labels), groups)
    assert main(["eval-lp", "--split", str(split), "--run", str(run), "--out", str(tmp_path / "ev")]) == 0
    assert capsys.readouterr().out.strip() == "auc 1.0"
    assert (tmp_path / "ev" / "report.txt").read_text().startswith("metric=auc value=1.0")


def test_eval_rejects_mismatched_id_map(tmp_path, split_dir):
    run = tmp_path / "run"
    main(["train", "--split", str(split_dir), *SMALL, "--max-epochs", "1", "--out", str(run)])
    text = (run / "id_map.txt").read_text().replace("n0 ", "zz ", 1)
    (run / "id_map.txt").write_text(text)
    assert main(["eval-lp", "--split", str(split_dir), "--run", str(run), "--out", str(tmp_path / "e")]) == 3


def test_eval_rejects_wrong_node_count(tmp_path, split_dir):
    run = tmp_path / "run"
    _write_one_hot_run(run, 5, [0, 0, 1, 1, 1])
    assert main(["eval-lp", "--split", str(split_dir), "--run", str(run), "--out", str(tmp_path / "e")]) == 3


def test_eval_cluster_infers_k(tmp_path, split_dir, capsys):
    run = tmp_path / "run"
    main(["train", "--split", str(split_dir), *SMALL, "--out", str(run)])
    lab = tmp_path / "labels.txt"
    lab.write_text("".join(f"n{i} {i // 6}\n" for i in range(18)))
    capsys.readouterr()
    assert main(["eval-cluster", "--split", str(split_dir), "--run", str(run), "--labels", str(lab),
                 "--out", str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "k 3" and out[1].startswith("nmi ") and out[2].startswith("ami ")


def test_sweep_rows_and_determinism(tmp_path, split_dir):
    rows = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["sweep", "--split", str(split_dir), *SMALL, "--values", "2,6", "--out", str(out)]) == 0
        rows.append((out / "sweep.tsv").read_text())
    lines = rows[0].splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("neighborhood\t2\tauc\t") and lines[1].startswith("neighborhood\t6\tauc\t")
    assert rows[0] == rows[1]


def test_sweep_empty_values(tmp_path, split_dir):
    assert main(["sweep", "--split", str(split_dir), "--values", ",", "--out", str(tmp_path / "s")]) == 2


def test_ablate_mlp_smoke(tmp_path, split_dir, capsys):
    assert main(["ablate-mlp", "--split", str(split_dir), *SMALL, "--out", str(tmp_path / "ab")]) == 0
    out = dict(line.split() for line in capsys.readouterr().out.splitlines())
    assert set(out) == {"gap_auc", "mlp_auc", "difference"}
    assert float(out["difference"]) == pytest.approx(float(out["gap_auc"]) - float(out["mlp_auc"]))


def test_outputs_byte_identical_with_pinned_clock(tmp_path, split_dir, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    reports = []
    for name in ("a", "b"):
        run = tmp_path / f"run_{name}"
        main(["train", "--split", str(split_dir), *SMALL, "--out", str(run)])
        main(["eval-lp", "--split", str(split_dir), "--run", str(run), "--out", str(run / "ev")])
        reports.append((run / "ev" / "report.txt").read_bytes())
    assert reports[0] == reports[1]
    assert b"timestamp=2023-11-14T22:13:20Z" in reports[0]


def test_console_entry_point(tmp_path, edges):
    res = subprocess.run([sys.executable, "-m", "gap_nrl.cli", "split", "--edges", str(edges),
                          "--ratio", "0.5", "--out", str(tmp_path / "s")], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("nodes 18 edges 46")
