import csv
import json

import numpy as np
import pytest

from quantaudit.cli import main
from quantaudit.evalset import build_evalset, save_evalset
from quantaudit.schedules import CosineWarmup, lr_at
from quantaudit.toylab.corpus import synth_corpus
from quantaudit.toylab.model import TinyLMConfig
from quantaudit.toylab.train import RunConfig, train

CFG = TinyLMConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32,
                   vocab_size=32, seq_len=16)
SCHED = CosineWarmup(eta_max=1e-3, eta_min=1e-4, warmup_steps=5, total_steps=1_000)

REFERENCE_STEPS = [1_000, 7_000, 10_000, 30_000, 70_000,
                   77_000, 83_000, 100_000, 120_000, 143_000]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    run = RunConfig(seed=0, total_steps=20, schedule=SCHED, checkpoint_every=10,
                    corpus_length=10_000, val_reserve=1_500)
    result = train(run, CFG, root / "ckpts")
    corpus = synth_corpus(run.corpus_seed, run.corpus_length, CFG.vocab_size)
    es = build_evalset(corpus[-1_500:], n_batches=2, rows=2, seq_len=16, seed=0,
                       vocab_size=CFG.vocab_size)
    es_path = save_evalset(es, root / "eval.bin")
    return root, result.checkpoints[-1], es_path


# ---------------------------------------------------------------------------
# schedule

def test_schedule_csv_matches_direct_evaluation(tmp_path):
    out = tmp_path / "curve.csv"
    rc = main(["schedule", "--end", "143001", "--stride", "1000",
               "--output", str(out)])
    assert rc == 0
    rows = {int(r["step"]): float(r["lr"]) for r in csv.DictReader(open(out))}
    spec = CosineWarmup()
    for step in REFERENCE_STEPS:
        assert rows[step] == pytest.approx(lr_at(spec, step), rel=1e-12)


def test_schedule_oli_has_phase_tags(tmp_path):
    out = tmp_path / "oli.csv"
    rc = main(["schedule", "--kind", "oli", "--fork-step", "100",
               "--start", "100", "--end", "850", "--stride", "75",
               "--output", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out)))
    tags = {r["phase_tag"] for r in rows}
    assert tags == {"bump", "cool"}
    assert rows[0]["phase_tag"] == "bump"


# ---------------------------------------------------------------------------
# probe / audit / phases

def test_probe_json(workspace, tmp_path, capsys):
    _, ckpt, es_path = workspace
    rc = main(["probe", "--ckpt", str(ckpt), "--evalset", str(es_path)])
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["step"] == 20
    assert rec["scheme"] == "int4"
    assert rec["gap_pct"] == pytest.approx(
        100 * (rec["ppl_q"] - rec["ppl_fp"]) / rec["ppl_fp"], rel=1e-9)


def test_probe_csv_matches_json(workspace, tmp_path):
    _, ckpt, es_path = workspace
    jout, cout = tmp_path / "p.json", tmp_path / "p.csv"
    assert main(["probe", "--ckpt", str(ckpt), "--evalset", str(es_path),
                 "--scheme", "int8", "--output", str(jout)]) == 0
    assert main(["probe", "--ckpt", str(ckpt), "--evalset", str(es_path),
                 "--scheme", "int8", "--format", "csv", "--output", str(cout)]) == 0
    rec = json.loads(jout.read_text())
    row = next(csv.DictReader(open(cout)))
    assert float(row["gap_pct"]) == rec["gap_pct"]
    assert float(row["ppl_fp"]) == rec["ppl_fp"]


def test_audit_then_phases(workspace, tmp_path):
    root, _, es_path = workspace
    audit_out = tmp_path / "audit"
    rc = main(["audit", "--root", str(root / "ckpts"), "--evalset", str(es_path),
               "--out", str(audit_out), "--with-kurtosis",
               "--eta-max", "1e-3", "--eta-min", "1e-4",
               "--warmup-steps", "5", "--total-steps", "1000"])
    assert rc == 0
    assert (audit_out / "config.json").is_file()
    assert json.loads((audit_out / "failures.json").read_text()) == []
    rows = list(csv.DictReader(open(audit_out / "trajectory.csv")))
    assert [int(r["step"]) for r in rows] == [0, 10, 20]
    assert all(r["kurtosis"] != "" for r in rows)

    phases_out = tmp_path / "phases"
    rc = main(["phases", "--trajectory", str(audit_out / "trajectory.csv"),
               "--out", str(phases_out)])
    assert rc == 0
    report = json.loads((phases_out / "phases.json").read_text())
    assert "min_ppl_step" in report
    labeled = list(csv.DictReader(open(phases_out / "trajectory_labeled.csv")))
    assert "phase" in labeled[0]
    assert report["partial"] or all(r["phase"] != "" for r in labeled)


# ---------------------------------------------------------------------------
# stats

def _write_csv(path, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        names = list(columns)
        writer.writerow(names)
        for row in zip(*columns.values()):
            writer.writerow([repr(float(v)) for v in row])


def test_stats_pearson_and_welch(tmp_path, capsys):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(50)
    path = tmp_path / "d.csv"
    _write_csv(path, {"x": x, "y": 3 * x + 1, "a": x, "b": x + 10})

    assert main(["stats", "pearson", "--csv", str(path), "--x", "x", "--y", "y"]) == 0
    assert json.loads(capsys.readouterr().out)["r"] == pytest.approx(1.0)

    assert main(["stats", "welch", "--csv", str(path), "--a", "a", "--b", "b"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["t"] < 0 and rec["p_two_sided"] < 1e-6


def test_stats_wins(tmp_path, capsys):
    path = tmp_path / "w.csv"
    _write_csv(path, {"challenger": np.ones(3), "baseline": np.full(3, 2.0)})
    assert main(["stats", "wins", "--csv", str(path),
                 "--challenger", "challenger", "--baseline", "baseline"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert (rec["wins"], rec["ties"], rec["total"]) == (9, 0, 9)


def test_stats_kurtosis_on_checkpoint(workspace, capsys):
    _, ckpt, _ = workspace
    assert main(["stats", "kurtosis", "--ckpt", str(ckpt)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["n"] > 0 and np.isfinite(rec["excess_kurtosis"])


# ---------------------------------------------------------------------------
# fork + report

def test_fork_and_report(workspace, tmp_path):
    _, ckpt, es_path = workspace
    fork_out = tmp_path / "fork"
    rc = main(["fork", "--base-ckpt", str(ckpt), "--evalset", str(es_path),
               "--out", str(fork_out), "--steps", "10", "--cadence", "10",
               "--seeds", "0", "--conditions", "cosine,oli",
               "--bump-len", "5", "--cool-len", "15"])
    assert rc == 0
    assert (fork_out / "summary.json").is_file()

    report_out = tmp_path / "report"
    rc = main(["report", "--fork-dir", str(fork_out), "--out", str(report_out)])
    assert rc == 0
    rows = list(csv.DictReader(open(report_out / "fork_comparison.csv")))
    assert {r["condition"] for r in rows} == {"cosine", "oli"}
    assert any(r["phase_tag"] in ("bump", "cool")
               for r in rows if r["condition"] == "oli")
    assert "not" in (report_out / "report_notes.txt").read_text().lower()


def test_report_trajectory_series(workspace, tmp_path):
    root, _, es_path = workspace
    audit_out = tmp_path / "audit"
    main(["audit", "--root", str(root / "ckpts"), "--evalset", str(es_path),
          "--out", str(audit_out), "--with-kurtosis",
          "--eta-max", "1e-3", "--eta-min", "1e-4",
          "--warmup-steps", "5", "--total-steps", "1000"])
    report_out = tmp_path / "report"
    rc = main(["report", "--trajectory", str(audit_out / "trajectory.csv"),
               "--out", str(report_out)])
    assert rc == 0
    series = {r["series"] for r in csv.DictReader(open(report_out / "trajectory_series.csv"))}
    assert series == {"ppl_fp32", "gap_int4_pct", "gap_int8_pct", "lr_frac"}
    assert (report_out / "kurtosis_vs_gap.csv").is_file()


# ---------------------------------------------------------------------------
# failure modes

def test_missing_input_exits_nonzero(tmp_path, capsys):
    rc = main(["probe", "--ckpt", str(tmp_path / "nope"),
               "--evalset", str(tmp_path / "nope.bin")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "nope" in err


def test_bad_trajectory_csv_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,trajectory\n1,2,3\n")
    rc = main(["phases", "--trajectory", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error" in capsys.readouterr().err
