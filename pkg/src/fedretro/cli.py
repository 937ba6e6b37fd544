"""Command-line entry point: ``fedretro {synth,run,eval,contaminate,partition}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

from .data import ReactionDataset, generate_synthetic, load_reactions, partition_clients, save_reactions
from .experiment import (SCHEMA_VERSION, ConfigError, ExperimentConfig, ModeResult, build_clients,
                         dataset_digest, prepare_dataset, run_mode, source_dataset, train_forward_model, versions)
from .federation import pooled_size
from .learner import ParamVector
from .metrics import EvalResult

log = logging.getLogger("fedretro")


class ManifestMismatch(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(exp: ExperimentConfig, out) -> Path:
    """Write the configured synthetic corpus in the wire format."""
    d = exp.data
    counts = d.n_per_family if len(d.n_per_family) == d.families else d.n_per_family * d.families
    ds = generate_synthetic(counts, d.families, seed=exp.run.seed, max_scaffold_atoms=d.max_scaffold_atoms)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_reactions(ds, out)
    return out


def _split_files(ds: ReactionDataset, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        save_reactions(ReactionDataset(tuple(ds.split(split))), root / f"{split}.tsv")


def cmd_partition(exp: ExperimentConfig, out, contaminated: bool = False) -> list[Path]:
    """Write one directory per client holding train/val/test files."""
    clean, used = prepare_dataset(exp)
    parts = partition_clients(used if contaminated else clean, exp.partition.spec(), exp.federation.K, seed=exp.run.seed)
    dirs = []
    for k, p in enumerate(parts):
        d = Path(out) / f"client_{k:02d}"
        _split_files(p, d)
        dirs.append(d)
    return dirs


def cmd_contaminate(exp: ExperimentConfig, out) -> list[Path]:
    """Like ``partition`` but with the configured train/val contamination applied.

    Contaminated lines need not parse, so reloading them with ``load_reactions``
    drops them; the in-memory path used by ``run`` keeps them.
    """
    if exp.contamination.fraction <= 0:
        raise ConfigError("contamination.fraction must be positive for this command")
    return cmd_partition(exp, out, contaminated=True)


def _summary_csv(modes: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "client", "metric", "k", "value"])
    for mode, block in modes.items():
        for cid, res in enumerate(block["clients"]):
            for metric in ("topk", "maxfrag_topk"):
                for k, v in res[metric].items():
                    w.writerow([mode, cid, metric, k, repr(v)])
            if "roundtrip_top1" in res:
                w.writerow([mode, cid, "roundtrip", 1, repr(res["roundtrip_top1"])])
    return buf.getvalue()


def _curve_csv(modes: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "round", "client", "phase", "train_loss", "proxy_top1"])
    for mode, block in modes.items():
        for rep in block.get("rounds", []):
            for cid, loss in enumerate(rep["train_loss"]):
                proxy = rep["proxy_top1"][cid] if rep.get("proxy_top1") else ""
                w.writerow([mode, rep["round"], cid, rep["phase"], "" if loss is None else repr(loss),
                            "" if proxy == "" else repr(proxy)])
    return buf.getvalue()


def cmd_run(exp: ExperimentConfig, out, threads: int = 1, modes: Sequence[str] | None = None) -> dict:
    """Train and evaluate the requested modes; writes report.json, summary.csv, curves.csv, timing.json."""
    modes = tuple(modes or exp.run.modes)
    exp = exp.replace(run={"modes": modes})
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    timing = {}

    raw = source_dataset(exp)
    save_reactions(raw, out / "dataset.tsv")
    clean, used = prepare_dataset(exp, raw)
    clients = build_clients(exp, used)

    forward = forward_label = None
    if exp.metrics.roundtrip:
        t = time.perf_counter()
        forward = train_forward_model(exp, clients)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        forward.save(out / "checkpoints" / "forward.fpv")
        forward_label = "checkpoints/forward.fpv (pooled forward task, simulator privilege)"
        timing["forward_model"] = time.perf_counter() - t

    blocks = {}
    for mode in modes:
        t = time.perf_counter()
        result = run_mode(exp, clients, mode, threads, out / "checkpoints")
        evals = result.evaluate(clients, exp, threads, forward, forward_label)
        block = {
            "clients": [e.to_dict() for e in evals],
            "mean_topk": {str(k): _mean(e.topk[k] for e in evals) for k in exp.metrics.ks},
            "rounds": [r.to_dict() for r in result.rounds],
        }
        if mode == "central":
            block["privacy_violating"] = True
            block["pooled_train_size"] = pooled_size(clients)
        blocks[mode] = block
        timing[mode] = time.perf_counter() - t
        log.info("%s mean top-1 %.4f", mode, block["mean_topk"].get("1", float("nan")))

    report = {
        "schema_version": SCHEMA_VERSION,
        "versions": versions(),
        "config": exp.to_dict(),
        "data": {
            "records": len(raw),
            "diagnostics": dict(sorted(raw.diagnostics.items())),
            "split_counts": clean.split_counts(),
            "sha256": dataset_digest(used),
            "contaminated": int(used.diagnostics.get("contaminated", 0)),
            "clients": [{"id": c.id, "N": c.N, "n_proxy": c.n_proxy, "n_test": c.n_test,
                         "data_sha256": c.data_digest()} for c in clients],
        },
        "modes": blocks,
    }
    (out / "report.json").write_text(_dump(report))
    (out / "summary.csv").write_text(_summary_csv(blocks))
    (out / "curves.csv").write_text(_curve_csv(blocks))
    timing["total"] = time.perf_counter() - t_start
    (out / "timing.json").write_text(_dump(timing))
    return report


def cmd_eval(checkpoint_dir, dataset, ks: Sequence[int] | None = None, threads: int = 1) -> list[EvalResult]:
    """Re-evaluate saved per-client models on the test splits of ``dataset``.

    ``checkpoint_dir`` is one mode directory written by ``run``; its
    experiment echo rebuilds the exact split and partition, and the client
    data digests must match the manifest.
    """
    root = Path(checkpoint_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        exp = ExperimentConfig.from_dict(json.loads((root / "experiment.json").read_text()))
    except FileNotFoundError as exc:
        raise ManifestMismatch(f"no checkpoint manifest under {root}") from exc
    raw = load_reactions(dataset)
    _, used = prepare_dataset(exp, raw)
    clients = build_clients(exp, used)
    want = [c["data_sha256"] for c in manifest["clients"]]
    have = [c.data_digest() for c in clients]
    if want != have:
        raise ManifestMismatch("dataset does not reproduce the client splits recorded in the checkpoint")
    rdir = root / f"round_{manifest['completed_round']:03d}"
    models = [ParamVector.load(rdir / f"client_{k:02d}.fpv") for k in range(len(clients))]
    forward = forward_label = None
    fpath = root.parent / "forward.fpv"
    if exp.metrics.roundtrip and fpath.exists():
        forward = ParamVector.load(fpath)
        forward_label = "checkpoints/forward.fpv (pooled forward task, simulator privilege)"
    return ModeResult(manifest.get("mode", root.name), models).evaluate(
        clients, exp, threads, forward, forward_label, ks=ks)


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

def _threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("FEDRETRO_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FEDRETRO_THREADS must be an integer, got {env!r}")
    return 1


def _load_config(args) -> ExperimentConfig:
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        exp = exp.replace(run={"seed": args.seed})
    return exp


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedretro", description="Federated retrosynthesis simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
        sp.add_argument("--out", required=True, help=out_help)

    s = sub.add_parser("synth", help="write a synthetic reaction file")
    common(s, "output file")
    s = sub.add_parser("run", help="train and evaluate")
    common(s, "output directory")
    s.add_argument("--threads", type=int, help="worker threads (default: $FEDRETRO_THREADS or 1)")
    s.add_argument("--modes", help="comma-separated subset of local,central,fedavg,ckif")
    s = sub.add_parser("eval", help="evaluate a checkpoint without training")
    s.add_argument("--checkpoint", required=True, help="checkpoints/<mode> directory of a run")
    s.add_argument("--dataset", required=True, help="dataset file used by the run")
    s.add_argument("--ks", default="1,3,5,10")
    s.add_argument("--threads", type=int)
    s = sub.add_parser("partition", help="write per-client split files")
    common(s, "output directory")
    s = sub.add_parser("contaminate", help="write per-client split files with contamination")
    common(s, "output directory")
    s.add_argument("--fraction", type=float, help="overrides [contamination] fraction")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            print(cmd_synth(_load_config(args), args.out))
        elif args.command == "run":
            exp = _load_config(args)
            modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
            if modes:
                exp = exp.replace(run={"modes": tuple(modes)})
            report = cmd_run(exp, args.out, _threads(args.threads))
            print(_dump({m: b["mean_topk"] for m, b in report["modes"].items()}), end="")
        elif args.command == "eval":
            res = cmd_eval(args.checkpoint, args.dataset, _int_list(args.ks), _threads(args.threads))
            print(_dump([r.to_dict() for r in res]), end="")
        elif args.command == "partition":
            for d in cmd_partition(_load_config(args), args.out):
                print(d)
        elif args.command == "contaminate":
            exp = _load_config(args)
            if args.fraction is not None:
                exp = exp.replace(contamination={"fraction": args.fraction})
            for d in cmd_contaminate(exp, args.out):
                print(d)
    except ConfigError as exc:
        print(f"fedretro: config error: {exc}", file=sys.stderr)
        return 2
    except (ManifestMismatch, ValueError, OSError) as exc:
        print(f"fedretro: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
