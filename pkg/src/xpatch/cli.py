"""Command-line entry point: one subcommand per pipeline stage plus ``run``.

Exit codes: 0 success, 2 validation failure, 3 missing input, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, toy
from . import divergence as dv
from . import report as rp
from .crosscoder import load_crosscoder
from .errors import MissingInput, NumericalError, ValidationError
from .model import PairedCheckpoints, load_checkpoint, save_checkpoint

log = logging.getLogger("xpatch")


def _readout(s: str) -> str:
    v = s.replace("-", "_")
    if v not in ("common_it", "common_pt", "native"):
        raise argparse.ArgumentTypeError(f"invalid readout {s!r}")
    return v


def _pair(args) -> PairedCheckpoints:
    for p in (args.pt, args.it):
        if p is None or not Path(p).exists():
            raise MissingInput(f"checkpoint {p} not found")
    info = {}
    if getattr(args, "info", None):
        info = json.loads(Path(args.info).read_text(encoding="utf-8"))
    return PairedCheckpoints(load_checkpoint(args.pt), load_checkpoint(args.it), info)


def _events(path):
    if path is None or not Path(path).exists():
        raise MissingInput(f"events file {path} not found")
    return dv.read_events(path)[1]


def _setup(args, pair: PairedCheckpoints | None, extra_inputs=()):
    """Fresh output directory, the effective config and its provenance block."""
    skip = ("func", "command", "out", "verbose", "crosscoder_path")
    cfg = rp.load_config({k: v for k, v in vars(args).items() if k not in skip and v is not None})
    cfg["readout"] = args.readout
    cfg["boundary"] = args.boundary
    cfg["seed"] = args.seed
    cfg["n_boot"] = args.bootstrap
    out = rp.prepare_out(args.out)
    inputs = {}
    if pair is not None:
        inputs.update(pt=pair.pt.content_hash, it=pair.it.content_hash)
    for name, path in extra_inputs:
        if path is not None:
            inputs[name] = rp.container.sha256_file(path)
    prov = {"toolkit_version": __version__, "config_sha256": rp.config_hash(cfg), "inputs": inputs,
            "seed": args.seed}
    rp.write_json(out / "run.json", {"provenance": prov, "config": cfg})
    return cfg, prov, out


# ---------------------------------------------------------------- commands


def cmd_gen_toy(args) -> None:
    pair = toy.gen_toy_pair(args.mode, seed=args.seed, noise=args.noise)
    out = rp.prepare_out(args.out)
    save_checkpoint(pair.pt, out / "pt.xpck")
    save_checkpoint(pair.it, out / "it.xpck")
    rp.write_json(out / "toy_info.json", pair.info)
    if args.mode == "gated_coupling":
        dv.save_manifest(toy.toy_manifest(pair.info, args.n_prompts, args.seed), out / "manifest.jsonl")


def cmd_diverge(args) -> None:
    pair = _pair(args)
    if args.manifest is None or not Path(args.manifest).exists():
        raise MissingInput(f"manifest {args.manifest} not found")
    _, prov, out = _setup(args, pair, [("manifest", args.manifest)])
    col = dv.collect_first_divergences(pair, dv.load_manifest(args.manifest), args.max_new)
    dv.write_events(out / "events.jsonl", col.events, {**prov, "max_new": args.max_new})
    rp.write_jsonl(out / "exclusions.jsonl", col.exclusions, prov)


def cmd_factorial(args) -> None:
    pair = _pair(args)
    events = _events(args.events)
    cfg, prov, out = _setup(args, pair, [("events", args.events)])
    cfg["readouts"] = [args.readout]
    rp.stage_factorial(pair, events, cfg, prov, out)
    rp.emit_report(out)


def cmd_controls(args) -> None:
    pair = _pair(args)
    events = _events(args.events)
    manifest = dv.load_manifest(args.manifest) if args.manifest else []
    cfg, prov, out = _setup(args, pair, [("events", args.events), ("manifest", args.manifest)])
    if not manifest:
        cfg["controls"]["horizons"] = []
    rp.stage_controls(pair, events, manifest, cfg, prov, out)


def cmd_bridge_continuation(args) -> None:
    pair = _pair(args)
    events = _events(args.events)
    cfg, prov, out = _setup(args, pair, [("events", args.events)])
    cfg["bridges"]["horizons"] = args.horizons
    cfg["bridges"]["variants"] = args.variants
    result = {"provenance": prov}
    for v in args.variants:
        r = rp.bridges.constrained_continuation(pair, events, args.horizons, v, args.readout, args.boundary,
                                                args.seed, args.bootstrap)
        rp.write_jsonl(out / f"continuation_{v}.jsonl", r.pop("per_event"), prov)
        result[v] = r
    rp.write_json(out / "bridge_continuation.json", result)


def cmd_bridge_forced(args) -> None:
    pair = _pair(args)
    events = _events(args.events)
    _, prov, out = _setup(args, pair, [("events", args.events)])
    fb = rp.bridges.forced_token_bridge(pair, events, budget=args.budget, n_boot=args.bootstrap, seed=args.seed)
    rp.write_jsonl(out / "bridge_forced_scores.jsonl", fb["score_rows"], prov)
    rp.write_jsonl(out / "bridge_forced_diffs.jsonl", fb["diff_rows"], prov)
    rp.write_json(out / "bridge_forced.json", {"provenance": prov, "summary": fb["summary"],
                                               "excluded": fb["excluded"]})


def cmd_crosscoder_train(args) -> None:
    pair = _pair(args)
    events = _events(args.events)
    cfg, prov, out = _setup(args, pair, [("events", args.events)])
    cfg["crosscoder"].update(n_features=args.features, k=args.k, steps=args.steps, lr=args.lr,
                             layer_set=args.layer_set)
    _, metrics = rp.stage_crosscoder_train(pair, events, cfg, prov, out)
    rp.write_json(out / "crosscoder_train.json", {"provenance": prov, "metrics": metrics})


def cmd_crosscoder_analyze(args) -> None:
    pair = _pair(args)
    events = _events(args.events)
    path = args.crosscoder_path
    if path is None or not Path(path).exists():
        raise MissingInput(f"crosscoder {path} not found")
    model = load_crosscoder(path)
    cfg, prov, out = _setup(args, pair, [("events", args.events), ("crosscoder", path)])
    cfg["crosscoder"]["top_n"] = args.top_n
    rp.stage_crosscoder_analyze(model, pair, events, cfg, prov, out)


def cmd_closure(args) -> None:
    pair = _pair(args)
    events = _events(args.events)
    cfg, prov, out = _setup(args, pair, [("events", args.events)])
    cfg["closure"]["ranks"] = args.ranks
    rp.stage_closure(pair, events, cfg, prov, out)


def cmd_stage_sweep(args) -> None:
    pair = _pair(args)
    events = _events(args.events)
    stages = {}
    for spec in args.stage or []:
        name, _, path = spec.partition("=")
        if not path or not Path(path).exists():
            raise MissingInput(f"stage checkpoint {spec!r} not found")
        stages[name] = path
    cfg, prov, out = _setup(args, pair, [("events", args.events)] + [(f"stage:{k}", v) for k, v in stages.items()])
    if stages:
        cfg["stage_sweep"]["checkpoints"] = stages
    rp.stage_sweep(pair, events, cfg, prov, out)


def cmd_report(args) -> None:
    if not (Path(args.run) / "factorial.jsonl").exists():
        raise rp.NoResults(f"{args.run} has no factorial results")
    out = rp.prepare_out(args.out)
    rp.emit_report(args.run, out)


def cmd_run(args) -> None:
    rp.run_pipeline(args.config, args.out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xpatch", description="Cross-patching factorial toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, pair=True, events=True):
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        if pair:
            p.add_argument("--pt")
            p.add_argument("--it")
            p.add_argument("--info", help="optional JSON metadata for the pair")
            p.add_argument("--manifest")
            p.add_argument("--boundary", type=int)
            p.add_argument("--readout", type=_readout, default="common_it")
            p.add_argument("--bootstrap", type=int, default=rp.stats.DEFAULT_RESAMPLES)
        if events:
            p.add_argument("--events")
        return p

    p = add("gen-toy", cmd_gen_toy, pair=False, events=False)
    p.add_argument("--mode", choices=toy.MODES, default="gated_coupling")
    p.add_argument("--noise", type=float, default=toy.NOISE)
    p.add_argument("--n-prompts", type=int, default=200)

    p = add("diverge", cmd_diverge, events=False)
    p.add_argument("--max-new", type=int, default=128)

    add("factorial", cmd_factorial)
    add("controls", cmd_controls)

    p = add("bridge-continuation", cmd_bridge_continuation)
    p.add_argument("--horizons", type=int, nargs="+", default=list(rp.bridges.DEFAULT_HORIZONS))
    p.add_argument("--variants", nargs="+", choices=rp.bridges.VARIANTS, default=["standard"])

    p = add("bridge-forced", cmd_bridge_forced)
    p.add_argument("--budget", type=int, default=16)

    p = add("crosscoder-train", cmd_crosscoder_train)
    p.add_argument("--layer-set", type=int, nargs="+")
    p.add_argument("--features", type=int, default=128)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--lr", type=float, default=0.01)

    p = add("crosscoder-analyze", cmd_crosscoder_analyze)
    p.add_argument("--crosscoder", dest="crosscoder_path")
    p.add_argument("--top-n", type=int, default=200)

    p = add("closure", cmd_closure)
    p.add_argument("--ranks", type=int, nargs="+", default=[0, 1, 2, 4, 8])

    p = add("stage-sweep", cmd_stage_sweep)
    p.add_argument("--stage", action="append", help="NAME=checkpoint path; repeatable")

    p = add("report", cmd_report, pair=False, events=False)
    p.add_argument("--run", required=True)

    p = add("run", cmd_run, pair=False, events=False)
    p.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        log.error("validation failure: %s", exc)
        return 2
    except MissingInput as exc:
        log.error("missing input: %s", exc)
        return 3
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc)
        return 3
    except NumericalError as exc:
        log.error("numerical error: %s", exc)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
