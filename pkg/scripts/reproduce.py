#!/usr/bin/env python3
"""Run the whole desk pipeline and print the result tables.

Usage: scripts/reproduce.py [--config configs/desk.ini] [--workdir artifacts/desk] [--seeds 0,1,2] [--no-ablation]
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

import torch

from lenctl.config import load_config
from lenctl.experiments import Workspace
from lenctl.reproduce import run_all

ROOT = Path(__file__).resolve().parents[1]


def table(title: str, rows: dict[str, dict], cols=("control_error", "rouge1", "rouge2", "rougeL")) -> None:
    print(f"\n{title}")
    print(f"{'':18s}" + "".join(f"{c:>15s}" for c in cols))
    for name, r in rows.items():
        print(f"{name:18s}" + "".join(f"{r[c]:15.2f}" for c in cols))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.ini"))
    ap.add_argument("--workdir", default=str(ROOT / "artifacts" / "desk"))
    ap.add_argument("--seeds")
    ap.add_argument("--no-ablation", action="store_true")
    ap.add_argument("--json", action="store_true", help="dump results.json to stdout instead of tables")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    res = run_all(cfg, Workspace(Path(args.workdir)), seeds, ablation=not args.no_ablation)
    if args.json:
        print(json.dumps(res, indent=2))
        return
    print(f"seeds {res['seeds']}")
    table("MU rows per setting", {k: v["MU"] for k, v in res["settings"].items()})
    table("Generalization (RL, N=1)", res["generalization"])
    print(f"\nPrompt on out-sample templates: {res['prompt_out_sample']['control_error']:.2f}")
    print("reference baseline: " + ", ".join(f"{k} {v:.2f}" for k, v in res["reference_baseline"].items()))
    spe = res["spe"]
    print(f"extractor: in-sample {spe['in_sample']['accuracy']:.4f}, out-sample {spe['out_sample']['accuracy']:.4f}")
    if "ablation" in res:
        ab = res["ablation"]
        table("sft_lambda ablation (PromptRL)", {f"lambda={ab['low_lambda']:g}": ab["low"],
                                                 f"lambda={ab['default_lambda']:g}": ab["default"]})
        v = ab["validation"]
        print(f"validation means through step {v['through_step']}: "
              f"lambda={ab['low_lambda']:g} error {v['low']['control_error']:.2f} rougeL {v['low']['rougeL']:.2f}; "
              f"lambda={ab['default_lambda']:g} error {v['default']['control_error']:.2f} rougeL {v['default']['rougeL']:.2f}")


if __name__ == "__main__":
    main()
