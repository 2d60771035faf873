import csv
import json

import pytest
import yaml

from stairlab.cli import PLOT_COLUMNS, main
from stairlab.tasks import RandomWalkSpec, read_episodes

from oracles import random_walk_replay


def write_cfg(path, **over):
    data = {
        "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "max_rel_pos": 16},
        "variant": {"variant": "staircase", "N": 2, "C": 4},
        "task": {"kind": "random_walk", "seq_len": 12, "grid_w": 3, "grid_h": 3, "eval_episodes": 8},
        "train": {"total_steps": 4, "eval_every": 2, "batch_size": 4, "warmup_steps": 1},
    }
    for k, v in over.items():
        data[k] = {**data[k], **v}
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_gen_data_replayable_and_deterministic(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml")
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    assert main(["gen-data", cfg, "--count", "50", "--seed", "3", "--out", str(a)]) == 0
    assert main(["gen-data", cfg, "--count", "50", "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    meta, eps = read_episodes(a)
    assert len(eps) == 50
    spec = RandomWalkSpec(3, 3, 12)
    assert all(random_walk_replay(spec, ep.inputs) == ep.targets for ep in eps)
    manifest = json.loads((tmp_path / "a.tsv.manifest.json").read_text())
    assert manifest["resolved_config"]["task"]["grid_w"] == 3 and manifest["code_hash"]


def test_gen_data_zero_count(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml")
    out = tmp_path / "z.tsv"
    assert main(["gen-data", cfg, "--count", "0", "--out", str(out)]) == 0
    assert read_episodes(out)[1] == []
    assert (tmp_path / "z.tsv.manifest.json").exists()


def test_gen_data_unwritable(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml")
    assert main(["gen-data", cfg, "--count", "1", "--out", str(tmp_path / "nope" / "x.tsv")]) == 2
    assert "cannot write" in capsys.readouterr().err


def test_train_rejects_cached_m_equal_n(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", variant={"variant": "cached_staircase", "N": 2, "M": 2})
    assert main(["train", cfg, "--out", str(tmp_path / "run")]) == 1
    assert "cached_staircase requires M < N" in capsys.readouterr().err


def test_train_unknown_key(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", train={"learning_rate": 1})
    assert main(["train", cfg, "--out", str(tmp_path / "run")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_train_resume_and_eval(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml")
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", cfg, "--out", str(full)]) == 0
    # interrupted run: same config, stopped after the first checkpoint
    from stairlab import config
    from stairlab.harness import train

    train(config.load(cfg), out_dir=part, stop_after=2)
    assert main(["train", cfg, "--out", str(part), "--resume"]) == 0
    rows = lambda p: [r[:6] for r in csv.reader(open(p / "metrics.csv"))]
    assert rows(part) == rows(full)
    manifest = json.loads((full / "manifest.json").read_text())
    assert manifest["command"][0] and manifest["started"] <= manifest["finished"]
    assert yaml.safe_load((full / "resolved_config.yaml").read_text())["train"]["total_steps"] == 4

    ckpt = sorted(full.glob("ckpt-*.ckpt"))[-1]
    capsys.readouterr()
    assert main(["eval", str(ckpt), "--split", "valid", "--metrics", str(tmp_path / "m.csv")]) == 0
    assert "error" in capsys.readouterr().out
    assert (tmp_path / "m.csv").read_text().startswith("step,split,loss")


def test_eval_vocab_mismatch_prints_both_hashes(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml")
    out = tmp_path / "run"
    assert main(["train", cfg, "--out", str(out)]) == 0
    other = write_cfg(tmp_path / "o.yaml", task={"grid_w": 5, "grid_h": 5})
    data = tmp_path / "other.tsv"
    assert main(["gen-data", other, "--count", "4", "--out", str(data)]) == 0
    ckpt = sorted(out.glob("ckpt-*.ckpt"))[-1]
    capsys.readouterr()
    assert main(["eval", str(ckpt), "--data", str(data)]) == 1
    err = capsys.readouterr().err
    meta = read_episodes(data)[0]
    assert "vocabulary mismatch" in err and meta["spec"] in err


def test_verify_passes_and_fault_fails(capsys):
    assert main(["verify", "--suite", "equivalence"]) == 0
    assert "max logit delta 0" in capsys.readouterr().out
    assert main(["verify", "--suite", "causality", "--inject-mask-fault"]) == 3
    out = capsys.readouterr().out
    assert "FAIL  causality" in out and "t'=" in out


def test_verify_unknown_suite():
    assert main(["verify", "--suite", "nope"]) == 1


def test_cost_grid_and_check(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", variant={"variant": "cached_staircase", "N": 9, "C": 32, "M": 1})
    out_csv = tmp_path / "cost.csv"
    assert main(["cost", cfg, "--T", "400", "--N", "9,5,3", "--C", "32", "--csv", str(out_csv)]) == 0
    rows = list(csv.DictReader(open(out_csv)))
    assert len(rows) == 3
    assert main(["cost", cfg, "--T", "40", "--N", "4", "--C", "2", "--check"]) == 0
    assert "True" in capsys.readouterr().out


def test_sequential_steps_fall_as_c_grows(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", variant={"variant": "cached_staircase", "N": 9, "C": 32, "M": 1})
    calls = []
    for N, C in ((9, 32), (5, 64), (3, 128)):
        out_csv = tmp_path / f"{C}.csv"
        assert main(["cost", cfg, "--T", "4096", "--N", str(N), "--C", str(C), "--csv", str(out_csv)]) == 0
        row = next(csv.DictReader(open(out_csv)))
        calls.append(int(row["core_calls"]))
    assert calls[0] > calls[1] > calls[2]


def _fake_run(root, name, variant, N, err, ppl=3.0):
    d = root / name
    d.mkdir()
    write_cfg(d / "resolved_config.yaml", variant={"variant": variant, "N": N, "S": 8, "C": 4})
    (d / "metrics.csv").write_text(
        "step,split,loss,ppl,bpc,error_rate,batch_time_ms,qk_pairs,ff_tokens\n"
        f"10,valid,1.0,{ppl},1.4,{err},1.0,0,0\n10,test,1.0,{ppl},1.4,{err},0.0,0,0\n"
    )
    return str(d / "metrics.csv")


def test_export_plots_aggregates(tmp_path):
    paths = [
        _fake_run(tmp_path, "a", "ladder", 2, 0.1),
        _fake_run(tmp_path, "b", "ladder", 2, 0.3),
        _fake_run(tmp_path, "c", "ladder", 4, 0.05),
    ]
    out = tmp_path / "plots"
    assert main(["export-plots", *paths, "--out", str(out)]) == 0
    with open(out / "error_vs_recurrence.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == PLOT_COLUMNS
        rows = list(reader)
    assert rows[0]["recurrent_steps"] == "2"
    assert float(rows[0]["metric_mean"]) == pytest.approx(0.2)
    assert float(rows[0]["metric_std"]) == pytest.approx(0.1414213562, abs=1e-9)
    assert float(rows[1]["metric_std"]) == 0.0
    assert (out / "ppl_vs_recurrence.csv").exists()


def test_export_plots_empty_and_schema(tmp_path, capsys):
    assert main(["export-plots", "--out", str(tmp_path)]) != 0
    d = tmp_path / "bad"
    d.mkdir()
    write_cfg(d / "resolved_config.yaml")
    (d / "metrics.csv").write_text("step,split,loss\n1,test,1\n")
    capsys.readouterr()
    assert main(["export-plots", str(d / "metrics.csv"), "--out", str(tmp_path / "o")]) == 1
    assert "ppl" in capsys.readouterr().err


def test_make_corpus(tmp_path):
    out = tmp_path / "c.txt"
    assert main(["make-corpus", "--out", str(out), "--bytes", "5000"]) == 0
    first = out.read_bytes()
    assert len(first) == 5000
    assert main(["make-corpus", "--out", str(out), "--bytes", "5000"]) == 0
    assert out.read_bytes() == first
