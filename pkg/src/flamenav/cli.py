"""Command line entry point: ``flamenav <command> ...``.

Every artifact carries the configuration that produced it and the sha256 of
each input file.  Failures print a JSON object on stderr and exit with 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .metrics import MetricReport
from .model import FlameModel
from .pipeline import (
    ConfigError,
    RunConfig,
    evaluate,
    make_datasets,
    make_worlds,
    split_records,
    train_phases,
    worlds_hash,
)
from .rollout import DecodeConfig, episode_for_record, trace_lines
from .seeding import content_hash
from .synth import dataset_header, read_jsonl, write_jsonl
from .training import PHASES, curve_json
from .world import world_from_dict, world_to_dict

log = logging.getLogger("flamenav")

OUT_ENV = "FLAMENAV_OUT"
WORLDS_FORMAT = "flamenav-worlds"
WORLDS_VERSION = 1


class CliError(Exception):
    pass


# ---------------------------------------------------------------- file glue


def out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def out_path(arg: str | None, default: str) -> Path:
    p = Path(arg) if arg else out_dir() / default
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def file_hash(path) -> str:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing file: {p}")
    return content_hash(p.read_bytes())


def write_worlds(path: Path, worlds, cfg: RunConfig) -> str:
    doc = {
        "format": WORLDS_FORMAT,
        "version": WORLDS_VERSION,
        "config": {"seed": cfg.seed, "n_worlds": cfg.n_worlds, "world": cfg.world.to_dict()},
        "worlds": [world_to_dict(g) for g in worlds],
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    path.write_text(text)
    return content_hash(text.encode())


def read_worlds(path) -> list:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing file: {p}")
    doc = json.loads(p.read_text())
    if doc.get("format") != WORLDS_FORMAT:
        raise CliError(f"{p}: not a worlds file")
    if doc.get("version") != WORLDS_VERSION:
        raise CliError(f"{p}: worlds file version {doc.get('version')} != {WORLDS_VERSION}")
    return [world_from_dict(d) for d in doc["worlds"]]


def read_dataset(path, kind: str | None = None) -> tuple[dict, list[dict]]:
    if not Path(path).exists():
        raise CliError(f"missing file: {path}")
    header, records = read_jsonl(path)
    if kind and header.get("kind") != kind:
        raise CliError(f"{path}: dataset kind {header.get('kind')!r} does not match phase {kind!r}")
    return header, records


def load_model(path) -> tuple[FlameModel, dict]:
    if not Path(path).exists():
        raise CliError(f"missing file: {path}")
    return FlameModel.load(path)


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ------------------------------------------------------------------- config


def parse_stride(text: str) -> int | None:
    return None if text.lower() in ("full", "none", "inf") else int(text)


def base_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise CliError(f"missing file: {p}")
        cfg = RunConfig.from_dict(json.loads(p.read_text()))
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    return cfg.merged(over) if over else cfg


def decode_from(args, cfg: RunConfig) -> DecodeConfig:
    d = cfg.decode.to_dict()
    for flag, key in (("temperature", "temperature"), ("paths", "paths"), ("max_steps", "max_steps"), ("decode_seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "rationale", False):
        d["rationale_mode"] = True
    return DecodeConfig(**d)


# ----------------------------------------------------------------- commands


def cmd_world(args) -> dict:
    cfg = base_config(args)
    over = {k: getattr(args, k) for k in ("width", "height") if getattr(args, k) is not None}
    if over:
        cfg = cfg.merged({"world": over})
    if args.count is not None:
        cfg = cfg.merged({"n_worlds": args.count})
    path = out_path(args.out, "worlds.json")
    digest = write_worlds(path, make_worlds(cfg), cfg)
    return {"worlds": str(path), "sha256": digest}


def cmd_synth(args) -> dict:
    cfg = base_config(args)
    over = {k: getattr(args, k) for k in ("n_p1", "n_p2", "n_nav") if getattr(args, k) is not None}
    if over:
        cfg = cfg.merged(over)
    worlds = read_worlds(args.worlds)
    inputs = {"worlds": file_hash(args.worlds)}
    data = make_datasets(cfg, worlds)
    outdir = Path(args.out) if args.out else out_dir()
    outdir.mkdir(parents=True, exist_ok=True)
    result = {}
    for kind, records in data.items():
        header = dataset_header(kind, cfg.to_dict(), inputs["worlds"])
        path = outdir / f"{kind}.jsonl"
        result[kind] = {"path": str(path), "sha256": write_jsonl(path, header, records), "records": len(records)}
    return result


def expected_history(phase: str, skip: set[str]) -> list[str]:
    return [p for p in PHASES[: PHASES.index(phase)] if p not in skip]


def cmd_train(args) -> dict:
    cfg = base_config(args)
    skip = set(cfg.skip) | {p for p, flag in (("p1", args.no_p1), ("p2", args.no_p2)) if flag}
    phase_over = {}
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
        v = getattr(args, flag)
        if v is not None:
            phase_over[key] = v
    if args.rationales:
        if args.phase != "nav":
            raise CliError("--rationales only applies to the nav phase")
        phase_over["with_rationales"] = True
    over: dict = {"skip": sorted(skip, key=PHASES.index)}
    if phase_over:
        over[args.phase] = phase_over
    if args.stride is not None:
        over["model"] = {"stride": parse_stride(args.stride)}
    cfg = cfg.merged(over)
    if args.phase in skip:
        raise CliError(f"phase {args.phase} is listed as skipped")
    worlds = read_worlds(args.worlds)
    _, records = read_dataset(args.data, args.phase)
    inputs = {"worlds": file_hash(args.worlds), "data": file_hash(args.data)}
    model, history = None, []
    if args.init:
        inputs["init"] = file_hash(args.init)
        model, meta = load_model(args.init)
        history = list(meta.get("history", []))
        if args.stride is not None and model.cfg.stride != cfg.model.stride:
            model = FlameModel(model.cfg.replace(stride=cfg.model.stride), model.vocab, model.params)
    need = expected_history(args.phase, skip)
    if history != need:
        raise CliError(f"phase {args.phase} needs prior phases {need}; checkpoint history is {history}")
    data = {args.phase: records}
    run = train_phases(cfg, worlds, data, model, history, phases=[args.phase])
    path = out_path(args.out, f"{args.phase}.ckpt")
    meta = {"history": run.history, "config": cfg.to_dict(), "inputs": inputs, "curve": run.curves[args.phase]}
    run.model.save(path, meta)
    out_path(str(path) + ".curve.json", "").write_text(curve_json(run.curves[args.phase]))
    return {"checkpoint": str(path), "history": run.history, "seconds": round(run.seconds[args.phase], 2)}


def _report_with_provenance(rep: MetricReport, inputs: dict) -> MetricReport:
    return replace(rep, config={**rep.config, "inputs": inputs})


def cmd_eval(args) -> dict:
    cfg = base_config(args)
    if args.limit is not None:
        cfg = cfg.merged({"n_dev": args.limit})
    dec = decode_from(args, cfg)
    model, meta = load_model(args.ckpt)
    worlds = read_worlds(args.worlds)
    _, records = read_dataset(args.data, "nav")
    inputs = {"checkpoint": file_hash(args.ckpt), "worlds": file_hash(args.worlds), "data": file_hash(args.data)}
    rep = evaluate(cfg, model, worlds, records, args.split, dec)
    rep = _report_with_provenance(rep, {**inputs, "history": meta.get("history", [])})
    path = out_path(args.out, f"report_{args.split}.json")
    path.write_text(rep.to_json() + "\n")
    return {"report": str(path), "tc": rep.tc, "spd": rep.spd, "ndtw": rep.ndtw, "rc": rep.rc, "ra": rep.ra}


def cmd_trace(args) -> dict:
    cfg = base_config(args)
    dec = decode_from(args, cfg)
    model, _ = load_model(args.ckpt)
    worlds = {g.world_id: g for g in read_worlds(args.worlds)}
    _, records = read_dataset(args.data, "nav")
    rec = next((r for r in records if r["route_id"] == args.route_id), None)
    if rec is None:
        raise CliError(f"route {args.route_id!r} not found in {args.data}")
    ep = episode_for_record(model, worlds[rec["world_id"]], rec, dec)
    head = {
        "route_id": rec["route_id"],
        "instruction": rec["instruction"],
        "decode": dec.to_dict(),
        "inputs": {"checkpoint": file_hash(args.ckpt), "worlds": file_hash(args.worlds), "data": file_hash(args.data)},
    }
    path = out_path(args.out, "trace.jsonl")
    path.write_text(json.dumps(head, sort_keys=True) + "\n" + trace_lines(ep.trace))
    return {"trace": str(path), "steps": len(ep.trace)}


# -------------------------------------------------------------------- sweep


def _stride_point(job: dict) -> dict:
    cfg = RunConfig.from_dict(job["config"])
    worlds = read_worlds(job["worlds"])
    data = {k: read_dataset(p, k)[1] for k, p in job["data"].items()}
    run = train_phases(cfg, worlds, data)
    rep = evaluate(cfg, run.model, worlds, data["nav"], "dev")
    return {"tc": rep.tc, "spd": rep.spd, "ndtw": rep.ndtw, "rc": rep.rc, "ra": rep.ra}


def _decode_point(job: dict) -> dict:
    cfg = RunConfig.from_dict(job["config"])
    model, _ = load_model(job["ckpt"])
    worlds = read_worlds(job["worlds"])
    records = read_dataset(job["data"]["nav"], "nav")[1]
    rep = evaluate(cfg, model, worlds, records, "dev", cfg.decode)
    return {"tc": rep.tc, "spd": rep.spd, "ndtw": rep.ndtw, "rc": rep.rc, "ra": rep.ra}


def _csv_list(text: str, conv) -> list:
    return [conv(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args) -> dict:
    cfg = base_config(args)
    if args.limit is not None:
        cfg = cfg.merged({"n_dev": args.limit})
    d = Path(args.data_dir)
    data = {k: str(d / f"{k}.jsonl") for k in PHASES}
    inputs = {"worlds": file_hash(args.worlds), **{k: file_hash(p) for k, p in data.items() if k == "nav" or args.grid == "stride"}}
    seeds = _csv_list(args.seeds, int)
    jobs, rows = [], []
    if args.grid == "stride":
        for stride in _csv_list(args.strides, parse_stride):
            for seed in seeds:
                c = cfg.merged({"seed": seed, "model": {"stride": stride}})
                jobs.append({"config": c.to_dict(), "worlds": args.worlds, "data": data})
                rows.append({"stride": "full" if stride is None else stride, "seed": seed})
        fn = _stride_point
    else:
        if not args.ckpt:
            raise CliError("the decode grid needs --ckpt")
        inputs["checkpoint"] = file_hash(args.ckpt)
        for t in _csv_list(args.temperatures, float):
            for p in _csv_list(args.paths, int):
                for seed in seeds:
                    dec = {"temperature": t, "paths": p, "rationale_mode": p > 1 or args.rationale, "seed": seed}
                    c = cfg.merged({"decode": dec})
                    jobs.append({"config": c.to_dict(), "ckpt": args.ckpt, "worlds": args.worlds, "data": data})
                    rows.append({"temperature": t, "paths": p, "seed": seed})
        fn = _decode_point
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(fn, jobs))
    else:
        results = [fn(j) for j in jobs]
    buf = io.StringIO()
    fields = list(rows[0]) + ["tc", "spd", "ndtw", "rc", "ra", "config"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row, res, job in zip(rows, results, jobs):
        w.writerow({**row, **res, "config": json.dumps({"run": job["config"], "inputs": inputs}, sort_keys=True)})
    path = out_path(args.out, f"sweep_{args.grid}.csv")
    path.write_text(buf.getvalue())
    return {"csv": str(path), "rows": len(rows)}


# ---------------------------------------------------------------------- run


def cmd_run(args) -> dict:
    """The whole pipeline into one directory."""
    cfg = base_config(args)
    outdir = Path(args.out) if args.out else out_dir()
    outdir.mkdir(parents=True, exist_ok=True)
    worlds = make_worlds(cfg)
    inputs = {"worlds": write_worlds(outdir / "worlds.json", worlds, cfg)}
    data = make_datasets(cfg, worlds)
    for kind, records in data.items():
        inputs[kind] = write_jsonl(outdir / f"{kind}.jsonl", dataset_header(kind, cfg.to_dict(), inputs["worlds"]), records)
    run = train_phases(cfg, worlds, data)
    run.model.save(outdir / "model.ckpt", {"history": run.history, "config": cfg.to_dict(), "inputs": inputs})
    (outdir / "curves.json").write_text(curve_json([row for p in run.history for row in run.curves[p]]))
    rep = evaluate(cfg, run.model, worlds, data["nav"])
    rep = _report_with_provenance(rep, {**inputs, "checkpoint": file_hash(outdir / "model.ckpt"), "history": run.history})
    (outdir / "report_dev.json").write_text(rep.to_json() + "\n")
    dump_json(outdir / "timings.json", {k: round(v, 2) for k, v in run.seconds.items()})
    return {"dir": str(outdir), "tc": rep.tc, "ndtw": rep.ndtw, "spd": rep.spd, "worlds_hash": worlds_hash(worlds)}


# ------------------------------------------------------------------- parser


def _decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--temperature", type=float)
    p.add_argument("--paths", type=int, help="reasoning paths to vote over (needs --rationale)")
    p.add_argument("--rationale", action="store_true", help="generate rationales at key locations")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--decode-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flamenav", description="Toy street-navigation agent: worlds, data, training, evaluation.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration (same schema as embedded configs)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help=f"output path (default: ${OUT_ENV} or the current directory)")

    p = sub.add_parser("world", help="generate grid worlds")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(fn=cmd_world)

    p = sub.add_parser("synth", help="synthesize p1/p2/nav datasets from a worlds file")
    common(p)
    p.add_argument("--worlds", required=True)
    p.add_argument("--n-p1", type=int)
    p.add_argument("--n-p2", type=int)
    p.add_argument("--n-nav", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run one training phase")
    common(p)
    p.add_argument("--phase", required=True, choices=PHASES)
    p.add_argument("--worlds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="checkpoint from the previous phase")
    p.add_argument("--no-p1", action="store_true", help="ablation: phase 1 was skipped")
    p.add_argument("--no-p2", action="store_true", help="ablation: phase 2 was skipped")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--stride", help="cross-attention stride (integer or 'full')")
    p.add_argument("--rationales", action="store_true", help="supervise rationale tokens in the nav phase")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--worlds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    p.add_argument("--limit", type=int, help="episodes to evaluate")
    _decode_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="stride or decoding grid, one CSV row per point")
    common(p)
    p.add_argument("--grid", required=True, choices=("stride", "decode"))
    p.add_argument("--worlds", required=True)
    p.add_argument("--data-dir", required=True, help="directory holding p1/p2/nav .jsonl")
    p.add_argument("--ckpt", help="checkpoint for the decode grid")
    p.add_argument("--strides", default="1,2,4,8")
    p.add_argument("--temperatures", default="0,1.0")
    p.add_argument("--paths", default="1,8")
    p.add_argument("--rationale", action="store_true")
    p.add_argument("--seeds", default="0")
    p.add_argument("--limit", type=int)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("trace", help="step-by-step trace of one episode")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--worlds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--route-id", required=True)
    _decode_flags(p)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("run", help="world -> synth -> p1 -> p2 -> nav -> eval in one directory")
    common(p)
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.fn(args)
    except (CliError, ConfigError, ValueError, OSError, KeyError, FloatingPointError) as e:
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
