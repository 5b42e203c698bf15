"""Measure the toy benchmark and print a candidate calibration block.

The calibration file is frozen once written. This script never edits it: it
prints the measurements as YAML and checks each frozen threshold against the
worst seed, so a new calibration version can be proposed by hand.

    python3 scripts/calibrate.py --seeds 0 1 2
"""

import argparse
import math

import yaml

from revertlab.config import RunConfig
from revertlab.experiments import mi_scan, prepare_benchmark, run_attack
from revertlab.revertlm import PurifierConfig, load_calibration
from revertlab.tinylm import TapPoint


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    args = p.parse_args()
    cal = load_calibration()
    seeds = args.seeds or cal["seeds"]

    m = {k: {} for k in ("victim_val_ce", "rouge_l", "cos_count", "rouge_l_none", "attention", "ffn", "mi_pearson")}
    ln_v = None
    for s in seeds:
        bench = prepare_benchmark(RunConfig(seed=s))
        ln_v = math.log(len(bench.corpus.vocab))
        m["victim_val_ce"][s] = round(bench.victim_val_ce, 4)
        sc = run_attack(bench, TapPoint(0, "block_out")).scores()
        m["rouge_l"][s], m["cos_count"][s] = round(sc["rouge_l"], 4), round(sc["cos_count"], 4)
        none = run_attack(bench, TapPoint(0, "block_out"), purifier=PurifierConfig("none")).scores()
        m["rouge_l_none"][s] = round(none["rouge_l"], 4)
        m["attention"][s] = round(run_attack(bench, TapPoint(0, "attention_out")).scores()["rouge_l"], 4)
        m["ffn"][s] = round(run_attack(bench, TapPoint(0, "ffn_out")).scores()["rouge_l"], 4)
        m["mi_pearson"][s] = round(mi_scan(bench)["pearson_block_out"], 4)
        print(f"seed {s} done", flush=True)

    print(yaml.safe_dump({"measured": m}, sort_keys=False))
    th = cal["thresholds"]
    checks = {
        "rouge_l_min": min(m["rouge_l"].values()) >= th["rouge_l_min"],
        "cos_count_min": min(m["cos_count"].values()) >= th["cos_count_min"],
        "victim_val_ce": max(m["victim_val_ce"].values()) < th["victim_val_ce_max_frac_of_ln_v"] * ln_v,
    }
    for k, ok in checks.items():
        print(f"{k}: {'holds' if ok else 'VIOLATED'} on every seed")


if __name__ == "__main__":
    main()
