"""Command-line entry point: ``revertlab <subcommand> [--config PATH] ...``.

Every run owns one output directory.  It holds a ``manifest.json`` listing
the resolved config, its hash, timestamps and every file written, plus a
``report.json`` with the metric aggregates.  Rerunning a subcommand with
``--config <run>/manifest.json`` into a fresh directory reproduces
``report.json`` bitwise on the same backend.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusError, corpus_stats, save_corpus
from .evalkit import write_inversions
from .experiments import (
    MissingArtifact,
    build_corpus,
    depth_sweep,
    estimates_table,
    evaluate_attacker,
    mi_scan,
    prepare_benchmark,
    purifier_ablation,
    run_attack,
    sublayer_sweep,
)
from .miprobe import write_plot_data
from .revertlm import AttackDivergence, AttackerModel, AttackerVictimMismatch
from .splitproto import CaptureSet, FrameError
from .tinylm import TapError, TapPoint, VictimDivergence

log = logging.getLogger("revertlab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4
MANIFEST_VERSION = 1


def provenance() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class Run:
    """One output directory and the files written into it."""

    command: str
    config: RunConfig
    out: Path
    artifacts: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(name)
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return p

    def write_table(self, name: str, rows: list[dict]) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return p

    def finish(self, report: dict) -> dict:
        self.write_json("report.json", report)
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": self.command,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "started": self.started,
            "finished": time.time(),
            "provenance": provenance(),
            "artifacts": sorted(set(self.artifacts)),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def _jsonable(x):
    if isinstance(x, TapPoint):
        return str(x)
    if isinstance(x, bytes):
        return x.hex()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _open_run(command: str, cfg: RunConfig) -> Run:
    out = Path(cfg.output_dir)
    if (out / "manifest.json").exists():
        raise ConfigError(f"{out} already holds a finished run; choose another --out")
    out.mkdir(parents=True, exist_ok=True)
    return Run(command, cfg, out)


def _bench(cfg: RunConfig):
    if not cfg.victim.checkpoint:
        raise MissingArtifact("no victim checkpoint configured (victim.checkpoint or REVERTLAB_VICTIM)")
    return prepare_benchmark(cfg)


# --- subcommands -----------------------------------------------------------------


def cmd_synth_data(run: Run) -> dict:
    corpus = build_corpus(run.config)
    for name in save_corpus(corpus, run.out / "corpus").values():
        run.artifacts.append(str(Path(name).relative_to(run.out)))
    sizes = {s: len(corpus.split(s)) for s in ("train", "val", "test", "aux")}
    return {"stats": corpus_stats(corpus), "split_sizes": sizes}


def cmd_train_victim(run: Run) -> dict:
    cfg = run.config.replace(victim=dataclasses.replace(run.config.victim, checkpoint=None))
    bench = prepare_benchmark(cfg, checkpoint_out=run.path("victim.ckpt"))
    return {
        "val_ce": bench.victim_val_ce,
        "initial_val_ce": bench.victim_initial_ce,
        "model_id": bench.victim.model_id().hex(),
    }


def cmd_capture(run: Run) -> dict:
    bench = _bench(run.config)
    out = {}
    for tap in run.config.tap_points():
        cs = bench.captures(tap)
        d = f"captures/{tap.block_index}_{tap.position}"
        cs.write(run.out / d)
        run.artifacts.extend(f"{d}/frame_{i:06d}.slrf" for i in range(len(cs)))
        run.artifacts.append(f"{d}/manifest.json")
        out[str(tap)] = {"n_frames": len(cs), "nbytes": cs.nbytes()}
    return {"captures": out, "model_id": bench.victim.model_id().hex()}


def _preload_captures(bench, path: str | None) -> None:
    if not path:
        return
    if not Path(path, "manifest.json").exists():
        raise MissingArtifact(f"no capture manifest in {path}")
    cs = CaptureSet.read(path)
    if cs.model_id != bench.victim.model_id():
        raise MissingArtifact(f"captures in {path} come from a different victim")
    bench._captures[cs.tap] = cs


def cmd_attack_train(run: Run) -> dict:
    cfg = run.config
    bench = _bench(cfg)
    _preload_captures(bench, cfg.attacker.captures)
    tap = cfg.tap_points()[0]
    outcome = run_attack(bench, tap)
    outcome.attacker.save(run.path("attacker.ckpt"), cfg.recipe, {"tap": str(tap)})
    write_inversions(outcome.inversions, run.path("inversions.tsv"))
    outcome.report.write(run.path("pairs.csv"))
    return {
        "tap": str(tap),
        "purifier": outcome.variant,
        "scores": outcome.scores(),
        "purifier_heldout_mse": outcome.purifier_fit.heldout_mse,
        "step2_val_ce": outcome.step2.val_ce_after,
        "step3_val_ce": outcome.step3.val_ce_after,
        "step3_reverted": outcome.step3.reverted,
    }


def cmd_attack_eval(run: Run) -> dict:
    cfg = run.config
    if not cfg.attacker.checkpoint or not Path(cfg.attacker.checkpoint).exists():
        raise MissingArtifact(f"attacker checkpoint {cfg.attacker.checkpoint!r} not found")
    bench = _bench(cfg)
    attacker = AttackerModel.load(cfg.attacker.checkpoint)
    tap = TapPoint.parse(attacker.meta.get("tap", cfg.taps[0]))
    _preload_captures(bench, cfg.attacker.captures)
    report, report_count, rows = evaluate_attacker(bench, attacker, bench.captures(tap))
    write_inversions(rows, run.path("inversions.tsv"))
    report.write(run.path("pairs.csv"))
    return {"tap": str(tap), "scores": {**report.summary(), "cos_count": report_count.cos_sim}}


def cmd_mi_scan(run: Run) -> dict:
    res = mi_scan(_bench(run.config))
    write_plot_data(res["estimates"], run.path("mi_plane.csv"))
    return {
        "estimates": estimates_table(res["estimates"]),
        "pearson_block_out": res["pearson_block_out"],
        "monotonicity": res["monotonicity"],
    }


def cmd_sublayer_sweep(run: Run) -> dict:
    res = sublayer_sweep(_bench(run.config))
    run.write_table("sublayer_table.csv", res["table"])
    return res


def cmd_depth_sweep(run: Run) -> dict:
    res = depth_sweep(_bench(run.config))
    run.write_table("depth_curve.csv", res["rows"])
    return res


def cmd_purifier_ablation(run: Run) -> dict:
    res = purifier_ablation(_bench(run.config))
    run.write_table("purifier_table.csv", res["rows"])
    return res


def cmd_report(run: Run, sources: list[str]) -> dict:
    """Collect ``report.json`` of finished runs into one summary."""
    if not sources:
        raise ConfigError("report needs at least one --from run directory")
    runs = {}
    for src in sources:
        m, r = Path(src, "manifest.json"), Path(src, "report.json")
        if not m.exists() or not r.exists():
            raise MissingArtifact(f"{src} is not a finished run")
        manifest = json.loads(m.read_text())
        runs[src] = {
            "command": manifest["command"],
            "config_hash": manifest["config_hash"],
            "report": json.loads(r.read_text()),
        }
    lines = ["| run | command | config hash |", "|---|---|---|"]
    lines += [f"| {k} | {v['command']} | {v['config_hash'][:12]} |" for k, v in runs.items()]
    run.path("summary.md").write_text("\n".join(lines) + "\n")
    return {"runs": runs}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-victim": cmd_train_victim,
    "capture": cmd_capture,
    "attack-train": cmd_attack_train,
    "attack-eval": cmd_attack_eval,
    "mi-scan": cmd_mi_scan,
    "sublayer-sweep": cmd_sublayer_sweep,
    "depth-sweep": cmd_depth_sweep,
    "purifier-ablation": cmd_purifier_ablation,
    "report": cmd_report,
}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revertlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML/JSON config, or a previous run's manifest.json")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory (must not hold a finished run)")
        s.add_argument("--tap", help="BLOCK:POSITION, e.g. 0:block_out")
        s.add_argument("--purifier", choices=["none", "linear_projection", "linear_with_tester", "autoencoder"])
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            s.add_argument("--from", dest="sources", nargs="+", default=[])
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["output_dir"] = args.out
    if args.tap is not None:
        try:
            TapPoint.parse(args.tap)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        kw["taps"] = (args.tap,)
        kw["ablation_tap"] = args.tap
    if args.purifier is not None:
        kw["purifier"] = dataclasses.replace(cfg.purifier, variant=args.purifier)
    return cfg.replace(**kw) if kw else cfg


def main(argv: list[str] | None = None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run = _open_run(args.command, cfg)
        fn = COMMANDS[args.command]
        report = fn(run, args.sources) if args.command == "report" else fn(run)
        run.finish(report)
    except (ConfigError, TapError, CorpusError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VictimDivergence, AttackDivergence) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MissingArtifact, FrameError, AttackerVictimMismatch) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    print(run.out / "report.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
