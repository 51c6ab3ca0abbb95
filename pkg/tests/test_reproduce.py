import json

import pytest

from lenctl import reproduce
from lenctl.config import load_config
from lenctl.experiments import Workspace
from lenctl.reproduce import lambda_tag, run_all, validation_trajectories

from .test_cli import TINY


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = load_config(text=TINY)
    ws = Workspace(tmp_path_factory.mktemp("desk"))
    return cfg, ws, run_all(cfg, ws, seeds=[0, 1])


def test_run_all_covers_every_table(tiny_run):
    cfg, ws, res = tiny_run
    assert res["seeds"] == [0, 1] and res["digest"] == cfg.digest()
    assert set(res["settings"]) == {"Prompt", "PromptRL", "PromptFilter", "PromptRLFilter"}
    assert set(res["generalization"]) == {"In-sample", "Out-sample"}
    assert set(res["rl"]) == {"0", "1"} == set(res["ablation"]["runs"])
    for rows in res["per_seed"].values():
        n = len(rows["Prompt"]["item_errors"])
        assert n == 4 * cfg.eval.n_docs
        # filtering is pointwise never worse on the same items
        assert all(f <= s for s, f in zip(rows["Prompt"]["item_errors"], rows["PromptFilter"]["item_errors"]))
    assert (ws.rl_dir(0, lambda_tag(0.01)) / "policy.ckpt").exists()
    assert json.loads((ws.root / "results.json").read_text()) == res


def test_run_all_reuses_cache(tiny_run, monkeypatch):
    cfg, ws, res = tiny_run

    def boom(*a, **k):
        raise AssertionError("stage rerun despite cached results")

    monkeypatch.setattr(reproduce, "train_rl_stage", boom)
    monkeypatch.setattr(reproduce, "evaluate_settings", boom)
    assert run_all(cfg, ws, seeds=[0, 1]) == res


def test_validation_trajectories_average_common_steps(tmp_path):
    ws = Workspace(tmp_path)
    runs = {("", 0): [(1, 5.0, 50.0), (2, 3.0, 52.0), (3, 1.0, 40.0)], ("x", 0): [(1, 7.0, 48.0), (2, 5.0, 46.0)]}
    for (tag, seed), vals in runs.items():
        d = ws.rl_dir(seed, tag)
        d.mkdir(parents=True)
        recs = [{"step": 0, "control_error": 9.0, "rougeL": 55.0}]
        recs += [{"iter": s} for s, _, _ in vals] + [{"step": s, "control_error": e, "rougeL": r} for s, e, r in vals]
        (d / "log.jsonl").write_text("\n".join(json.dumps(r) for r in recs))
    out = validation_trajectories(ws, [0], {"default": "", "low": "x"})
    assert out["through_step"] == 2
    assert out["default"] == {"control_error": 4.0, "rougeL": 51.0}
    assert out["low"] == {"control_error": 6.0, "rougeL": 47.0}
