import csv
import json

import numpy as np
import pytest

from metapoison import cli
from metapoison import config as C
from metapoison.perturbation import load_poison_set

SMALL = {
    "dataset": {"n_per_class": 20, "validation_per_class": 10, "test_per_class": 5},
    "arch": {"widths": [8]},
    "craft": {"steps": 2, "ensemble": 2, "epoch_range": 2, "batch_size": 20},
    "attack": {"targets": [0], "budget": 0.1},
    "victim": {"epochs": 3, "batch_size": 20, "seeds": [0, 1, 2]},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def _craft(cfg_file, out, *extra):
    assert cli.main(["craft", "--config", str(cfg_file), "--out", str(out), *extra]) == 0
    return next(p for p in out.iterdir() if p.is_dir())


def test_presets():
    full = C.load(preset="full")
    assert (full["craft"]["steps"], full["craft"]["ensemble"], full["craft"]["unroll"],
            full["craft"]["outer_lr"]) == (60, 24, 2, 200.0)
    assert full["victim"]["epochs"] == 200
    desk = C.load()
    assert desk["craft"]["steps"] == 30 and len(desk["victim"]["seeds"]) == 20


def test_schema_error_names_field(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"craft": {"ensemble": "six"}}))
    assert cli.main(["craft", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "craft/ensemble" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["steps=3", "craft.steps", "=1"])
def test_bad_assignment(text):
    with pytest.raises(C.ConfigError):
        C.parse_assignment(text)


def test_assignment_json_value():
    assert C.parse_assignment("craft.steps=3") == {"craft": {"steps": 3}}
    assert C.parse_assignment("attack.scheme=self_conceal") == {"attack": {"scheme": "self_conceal"}}


def test_class_range_checked():
    with pytest.raises(C.ConfigError) as info:
        C.load(overrides={"attack": {"y_adv": 5}})
    assert info.value.path == "attack/y_adv"


def test_config_hash_stable():
    a, b = C.load(), C.load()
    assert C.config_hash(a) == C.config_hash(b)
    assert C.config_hash(C.load(overrides={"craft": {"steps": 5}})) != C.config_hash(a)


def test_infeasible_budget_exit_3(cfg_file, tmp_path):
    code = cli.main(["craft", "--config", str(cfg_file), "--out", str(tmp_path / "o"),
                     "--set", "attack.budget=0.9"])
    assert code == 3


def test_unknown_axis_exit_2(cfg_file, tmp_path):
    code = cli.main(["ablate", "--config", str(cfg_file), "--out", str(tmp_path), "--axis", "depth",
                     "--grid", "1,2"])
    assert code == 2


def test_unknown_subcommand_exit_2():
    assert cli.main(["transmogrify"]) == 2


def test_zero_steps_leaves_bases(cfg_file, tmp_path):
    run = _craft(cfg_file, tmp_path, "--steps", "0")
    ps, manifest = load_poison_set(run / "poisons" / "t0")
    assert ps.rendered.tobytes() == ps.bases.tobytes()
    assert not ps.g.any() and not ps.delta.any()
    assert manifest["target_index"] == 0


def test_craft_rerun_identical(cfg_file, tmp_path):
    a = _craft(cfg_file, tmp_path / "a")
    b = _craft(cfg_file, tmp_path / "b")
    assert a.name == b.name
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    rows = list(csv.reader(open(a / "trace_t0.csv")))
    assert len(rows) == 1 + 2 + 1


def test_victim_arms_and_tally(cfg_file, tmp_path):
    run = _craft(cfg_file, tmp_path)
    for extra, arm in [([], "metapoison"), (["--budget", "0"], "control"), (["--fc"], "fc")]:
        summary = cli.victim_run(run, seeds=2, n_targets=1, budget=0 if arm == "control" else None,
                                 fc=arm == "fc")
        assert summary["arm"] == arm and summary["attempts"] == 2
        rep = json.loads((tmp_path / summary["report_dir"] / "report.json").read_text())
        assert len(rep["rows"]) == 2
    assert cli.main(["victim", str(run), "--seeds", "2", "--targets", "1"]) == 0


def test_victim_missing_artifact(tmp_path):
    assert cli.main(["victim", str(tmp_path / "nowhere")]) == 2


def test_victim_refuses_tampered_config(cfg_file, tmp_path):
    run = _craft(cfg_file, tmp_path)
    cfg = json.loads((run / "config.json").read_text())
    cfg["craft"]["steps"] = 7
    (run / "config.json").write_text(json.dumps(cfg))
    assert cli.main(["victim", str(run), "--seeds", "1"]) == 2


def test_victim_refuses_tampered_poisons(cfg_file, tmp_path):
    run = _craft(cfg_file, tmp_path)
    path = run / "poisons" / "t0" / "delta.f32"
    raw = bytearray(path.read_bytes())
    raw[0] ^= 1
    path.write_bytes(bytes(raw))
    assert cli.main(["victim", str(run), "--seeds", "1"]) == 2


def test_victim_budget_too_large(cfg_file, tmp_path):
    run = _craft(cfg_file, tmp_path)
    assert cli.main(["victim", str(run), "--seeds", "1", "--budget", "0.5"]) == 2


def test_featviz_csv(cfg_file, tmp_path):
    run = _craft(cfg_file, tmp_path)
    out = tmp_path / "f.csv"
    assert cli.main(["featviz", str(run), "--epochs", "0,2", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["group", "epoch", "layer", "x", "y"]
    assert {r[1] for r in rows[1:]} == {"0", "2"}
    assert cli.main(["featviz", str(run), "--epochs", "9"]) == 2


def test_ablate_sweep(cfg_file, tmp_path):
    code = cli.main(["ablate", "--config", str(cfg_file), "--out", str(tmp_path), "--axis",
                     "craft_steps", "--grid", "0,2"])
    assert code == 0
    sweep = next(tmp_path.glob("ablate_*")) / "sweep.csv"
    rows = list(csv.reader(open(sweep)))
    assert rows[0][:4] == ["axis", "value", "successes", "attempts"]
    assert [r[1] for r in rows[1:]] == ["0", "2"]
    assert all(int(r[3]) == 3 for r in rows[1:])
    lo, hi = float(rows[1][5]), float(rows[1][6])
    assert 0 <= lo <= float(rows[1][4]) <= hi <= 1


def test_ablate_bad_grid(cfg_file, tmp_path):
    assert cli.main(["ablate", "--config", str(cfg_file), "--out", str(tmp_path), "--axis", "K",
                     "--grid", "one"]) == 2
