"""Run directories: stage orchestration, artifact writers and the summary report.

Every artifact carries a provenance block (toolkit version, config hash,
input content hashes, seed).  Nothing time-dependent is written, so a rerun
on identical inputs reproduces every file byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import (
    __version__,
    bridges,
    container,
    controls,
    crosscoder,
    geometry,
    stats,
    toy,
)
from . import divergence as dv
from . import factorial as fx
from .errors import (
    EmptyInput,
    MissingInput,
    NoResults,
    StageDependencyUnmet,
    ValidationError,
)
from .model import PairedCheckpoints, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("diverge", "factorial", "controls", "bridges", "crosscoder", "closure", "stage_sweep", "report")
DEPENDS = {
    "diverge": (),
    "factorial": ("diverge",),
    "controls": ("factorial",),
    "bridges": ("factorial",),
    "crosscoder": ("factorial",),
    "closure": ("factorial",),
    "stage_sweep": ("diverge",),
    "report": ("factorial",),
}

DEFAULTS = {
    "seed": 0,
    "max_new": 128,
    "readout": "common_it",
    "readouts": ["common_it", "common_pt", "native"],
    "boundary": None,
    "n_boot": stats.DEFAULT_RESAMPLES,
    "n_perms": stats.DEFAULT_PERMS,
    "controls": {"n_draws": 20, "alphas": list(controls.DEFAULT_ALPHAS), "horizons": [4, 8, 16]},
    "bridges": {"horizons": list(bridges.DEFAULT_HORIZONS), "budget": 16,
                "variants": ["standard", "shuffled_tail", "same_forced", "tail_only_view"]},
    "crosscoder": {"n_features": 128, "k": 4, "lr": 0.01, "steps": 1500, "batch_size": 256, "layer_set": None,
                   "heldout_fraction": 0.3, "top_n": 200},
    "closure": {"ranks": [0, 1, 2, 4, 8], "heldout_fraction": 0.3},
    "stage_sweep": {"interpolation": [0.25, 0.75, 1.0]},
}


# ---------------------------------------------------------------- serialization


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def write_jsonl(path, rows, header: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(jsonable({"header": header}), sort_keys=True) + "\n")
        for r in rows:
            fh.write(json.dumps(jsonable(r), sort_keys=True) + "\n")


def read_jsonl(path) -> tuple[dict, list[dict]]:
    header, rows = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "header" in d and len(d) == 1:
            header = d["header"]
        else:
            rows.append(d)
    return header, rows


def write_csv(path, columns, rows, provenance: dict) -> None:
    buf = io.StringIO()
    buf.write("# provenance " + json.dumps(jsonable(provenance), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return v


# ---------------------------------------------------------------- config


def load_config(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        cfg = json.loads(json.dumps(path_or_dict))
    else:
        p = Path(path_or_dict)
        if not p.exists():
            raise MissingInput(f"config {p} not found")
        try:
            cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
    merged = json.loads(json.dumps(DEFAULTS))
    for k, v in cfg.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k].update(v)
        else:
            merged[k] = v
    stages = merged.get("stages", list(STAGES))
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValidationError(f"unknown stages {unknown}")
    merged["stages"] = [s for s in STAGES if s in stages]
    return merged


def config_hash(cfg: dict) -> str:
    return container.sha256_bytes(container.canonical_json(jsonable(cfg)))


def check_stages(stages) -> None:
    have = set(stages)
    for s in stages:
        for dep in DEPENDS[s]:
            if dep not in have:
                raise StageDependencyUnmet(f"stage {s!r} needs {dep!r}")


def prepare_out(out) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise ValidationError(f"output directory {out} is not empty; runs never modify an existing directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- inputs


def resolve_pair(cfg: dict, out: Path) -> PairedCheckpoints:
    """Load the configured pair, or generate a toy pair and write it into the run directory."""
    if "toy" in cfg:
        t = cfg["toy"]
        pair = toy.gen_toy_pair(t.get("mode", "gated_coupling"), seed=int(t.get("seed", 0)),
                                noise=float(t.get("noise", toy.NOISE)))
        save_checkpoint(pair.pt, out / "pt.xpck")
        save_checkpoint(pair.it, out / "it.xpck")
        write_json(out / "toy_info.json", pair.info)
        return PairedCheckpoints(load_checkpoint(out / "pt.xpck"), load_checkpoint(out / "it.xpck"), pair.info)
    if "pt" not in cfg or "it" not in cfg:
        raise MissingInput("config needs 'pt' and 'it' checkpoint paths or a 'toy' block")
    for key in ("pt", "it"):
        if not Path(cfg[key]).exists():
            raise MissingInput(f"checkpoint {cfg[key]} not found")
    info = {}
    if cfg.get("info") and Path(cfg["info"]).exists():
        info = json.loads(Path(cfg["info"]).read_text(encoding="utf-8"))
    return PairedCheckpoints(load_checkpoint(cfg["pt"]), load_checkpoint(cfg["it"]), info)


def resolve_manifest(cfg: dict, pair: PairedCheckpoints, out: Path):
    if "manifest" in cfg and isinstance(cfg["manifest"], str):
        if not Path(cfg["manifest"]).exists():
            raise MissingInput(f"manifest {cfg['manifest']} not found")
        return dv.load_manifest(cfg["manifest"]), container.sha256_file(cfg["manifest"])
    m = cfg.get("toy_manifest", {})
    records = toy.toy_manifest(pair.info, int(m.get("n_prompts", 200)), int(m.get("seed", cfg["seed"])))
    dv.save_manifest(records, out / "manifest.jsonl")
    return records, container.sha256_file(out / "manifest.jsonl")


# ---------------------------------------------------------------- stages


def _results_rows(results):
    return [r.to_dict() for r in results]


def stage_factorial(pair, events, cfg, prov, out: Path) -> dict:
    rows, summaries, errors = [], {}, []
    for readout in cfg["readouts"]:
        res, err = fx.score_factorial(pair, events, readout, cfg["boundary"])
        rows.extend(_results_rows(res))
        errors.extend(err)
    write_jsonl(out / "factorial.jsonl", rows, prov)
    if errors:
        write_jsonl(out / "factorial_errors.jsonl", errors, prov)
    return summaries


def _results_from_rows(rows, readout=None):
    out = [fx.FourCellResult.from_dict(r) for r in rows]
    return [r for r in out if readout is None or r.readout == readout]


def stage_controls(pair, events, manifest, cfg, prov, out: Path) -> None:
    c = cfg["controls"]
    readout, b, seed = cfg["readout"], cfg["boundary"], cfg["seed"]
    res, _ = fx.score_factorial(pair, events, readout, b)
    result = {
        "provenance": prov,
        "interpolation": {k: v for k, v in controls.interpolation_sweep(pair, events, c["alphas"], readout, b).items()
                          if k != "per_event"},
        "signed_permutation": controls.signed_permutation_null(pair, events, seed, int(c["n_draws"]), readout, b),
        "pre_late_commitment": controls.pre_late_commitment(pair, events, readout, b, results=res),
        "selection_baselines": controls.selection_baselines(pair, manifest, events, seed, cfg["max_new"], readout,
                                                            c["horizons"], min(cfg["n_boot"], 2000)),
    }
    write_json(out / "controls.json", result)


def stage_bridges(pair, events, cfg, prov, out: Path) -> None:
    c = cfg["bridges"]
    cont = {"provenance": prov}
    for v in c["variants"]:
        r = bridges.constrained_continuation(pair, events, c["horizons"], v, cfg["readout"], cfg["boundary"],
                                             cfg["seed"], min(cfg["n_boot"], 2000))
        r.pop("per_event")
        cont[v] = r
    write_json(out / "bridge_continuation.json", cont)
    fb = bridges.forced_token_bridge(pair, events, budget=int(c["budget"]), n_boot=min(cfg["n_boot"], 2000),
                                     seed=cfg["seed"])
    write_jsonl(out / "bridge_forced_scores.jsonl", fb["score_rows"], prov)
    write_jsonl(out / "bridge_forced_diffs.jsonl", fb["diff_rows"], prov)
    write_json(out / "bridge_forced.json", {"provenance": prov, "summary": fb["summary"], "excluded": fb["excluded"]})


def stage_crosscoder_train(pair, events, cfg, prov, out: Path):
    """Train on the activations of ``events``; returns the model and held-out metrics."""
    c = cfg["crosscoder"]
    n = pair.config.n_layers
    layer_set = tuple(c["layer_set"] or (n - 1,))
    train, held = crosscoder.split_by_cluster(events, 0.2, cfg["seed"] + 1)
    if not train or not held:
        raise EmptyInput("crosscoder training needs events in both the train and held-out clusters")
    x_pt, x_it, _ = crosscoder.dump_activations(pair, train, layer_set)
    h_pt, h_it, _ = crosscoder.dump_activations(pair, held, layer_set)
    hyper = crosscoder.TrainConfig(int(c["n_features"]), int(c["k"]), float(c["lr"]), int(c["steps"]),
                                   int(c["batch_size"]), seed=cfg["seed"])
    model, metrics = crosscoder.train_crosscoder(x_pt, x_it, h_pt, h_it, hyper, layer_set, pair.config.d_model)
    model.meta["provenance"] = prov
    model.meta["heldout_metrics"] = metrics
    crosscoder.save_crosscoder(model, out / "crosscoder.xccd")
    return model, metrics


def stage_crosscoder_analyze(model, pair, events, cfg, prov, out: Path, metrics=None) -> None:
    b = cfg["boundary"] or pair.config.late_boundary
    metrics = metrics or model.meta.get("heldout_metrics") or crosscoder.evaluate(
        model, *crosscoder.dump_activations(pair, events, model.layer_set)[:2])
    analysis = crosscoder_analysis(model, pair, events, cfg["readout"], b, int(cfg["crosscoder"]["top_n"]),
                                   cfg["seed"], metrics)
    ranking = analysis.pop("ranking")
    write_json(out / "crosscoder.json", {"provenance": prov, **analysis})
    rows = [{"rank": i, "feature": f, "score": s} for i, (f, s) in enumerate(ranking)]
    write_csv(out / "features.csv", ["rank", "feature", "score"], rows, prov)


def stage_crosscoder(pair, events, cfg, prov, out: Path) -> None:
    train, held = crosscoder.split_by_cluster(events, cfg["crosscoder"]["heldout_fraction"], cfg["seed"])
    model, metrics = stage_crosscoder_train(pair, train, cfg, prov, out)
    stage_crosscoder_analyze(model, pair, held, cfg, prov, out, metrics)


def crosscoder_analysis(model, pair, events, readout, b, top_n, seed, metrics) -> dict:
    cells = crosscoder.prepare_cells(model, pair, events, readout, b)
    ranked = crosscoder.rank_features_causal(model, pair, events, readout, b, cells)
    n_top = min(top_n, model.n_features)
    top = ranked["ranking"][:n_top]
    rand = crosscoder.matched_random(model, top, seed)
    nonc = crosscoder.top_active_noncausal(model, cells, top)
    med = {
        "causal_topk": crosscoder.mediation_drop(model, pair, events, top, readout, b, cells),
        "matched_random": crosscoder.mediation_drop(model, pair, events, rand, readout, b, cells),
        "top_active_noncausal": crosscoder.mediation_drop(model, pair, events, nonc, readout, b, cells),
        "same_delta_random": crosscoder.same_delta_random_drop(model, cells, top, seed),
    }
    gate = crosscoder.QualityGate(metrics["ve_pt"], metrics["ve_it"], metrics["mean_l0"],
                                  metrics["alive_fraction_max"], med["causal_topk"]["drop"],
                                  med["matched_random"]["drop"], model.k)
    l0 = min(model.layer_set)
    handoff = {}
    windows = {"upstream_mlp": ((0, b), "mlp_only"), "boundary_entry": ((0, l0), "full_block")}
    for name, (w, unit) in windows.items():
        for direction in ("rescue", "degrade"):
            handoff[f"{name}/{direction}/causal"] = crosscoder.handoff_mediation(
                model, pair, events, w, direction, top, readout, unit, b)
            handoff[f"{name}/{direction}/matched_random"] = crosscoder.handoff_mediation(
                model, pair, events, w, direction, rand, readout, unit, b)
    return {
        "metrics": metrics,
        "quality_gate": gate.to_dict(),
        "top_n": n_top,
        "n_events": len(cells),
        "mediation": med,
        "causal_gate": {
            "causal_topk": crosscoder.causal_gate(model, pair, events, top, readout, b, cells),
            "matched_random": crosscoder.causal_gate(model, pair, events, rand, readout, b, cells),
            "top_active_noncausal": crosscoder.causal_gate(model, pair, events, nonc, readout, b, cells),
        },
        "rescue": {
            "causal_topk": crosscoder.feature_rescue(model, pair, events, top, readout, b, cells),
            "matched_random": crosscoder.feature_rescue(model, pair, events, rand, readout, b, cells),
            "empty": crosscoder.feature_rescue(model, pair, events, [], readout, b, cells),
        },
        "handoff": handoff,
        "dose_response": {
            "bucket": crosscoder.bucket_edit_dose_response(model, pair, events, top, readout=readout, boundary=b,
                                                           cells=cells),
            "matched_random": crosscoder.bucket_edit_dose_response(model, pair, events, rand, readout=readout,
                                                                   boundary=b, cells=cells),
        },
        "ranking": [(int(f), float(ranked["scores"][f])) for f in ranked["ranking"]],
    }


def stage_closure(pair, events, cfg, prov, out: Path) -> None:
    c = cfg["closure"]
    train, held = crosscoder.split_by_cluster(events, c["heldout_fraction"], cfg["seed"])
    ranks = sorted(int(r) for r in c["ranks"])
    fit = geometry.fit_boundary_pca(pair, train, cfg["boundary"], requested_rank=max(ranks))
    ranks = [r for r in ranks if r <= fit.components.shape[0] or r == fit.d_model]
    geometry.save_pca(fit, out / "pca.xpca")
    rows = [r.to_dict() for r in geometry.closure_table(pair, held, fit, ranks, readout=cfg["readout"],
                                                        seed=cfg["seed"])]
    cols = ["boundary", "rank", "control", "include_mean", "floor_margin", "native_margin", "rescued_margin",
            "closure_fraction", "degenerate", "n_events"]
    write_csv(out / "closure.csv", cols, rows, prov)
    write_json(out / "closure.json", {"provenance": prov, "rows": rows, "variances": fit.variances,
                                      "rank_deficient": fit.rank_deficient})


def stage_sweep(pair, events, cfg, prov, out: Path) -> None:
    c = cfg["stage_sweep"]
    stages = {}
    if c.get("checkpoints"):
        for name, path in c["checkpoints"].items():
            stages[name] = load_checkpoint(path)
    else:
        for t in c["interpolation"]:
            stages[f"interp_{t:g}"] = toy.interpolate(pair.pt, pair.it, float(t))
    rows = fx.stage_sweep(pair.pt, pair.it, stages, events, cfg["readout"], cfg["boundary"],
                          min(cfg["n_boot"], 2000), cfg["seed"])
    write_json(out / "stage_sweep.json", {"provenance": prov, "stages": rows})


# ---------------------------------------------------------------- pipeline


def run_pipeline(config, out) -> Path:
    """Execute the configured stages in dependency order into a fresh run directory."""
    cfg = load_config(config)
    check_stages(cfg["stages"])
    out = prepare_out(out)
    pair = resolve_pair(cfg, out)
    manifest, manifest_hash = resolve_manifest(cfg, pair, out)
    prov = {
        "toolkit_version": __version__,
        "config_sha256": config_hash(cfg),
        "inputs": {"pt": pair.pt.content_hash, "it": pair.it.content_hash, "manifest": manifest_hash},
        "seed": cfg["seed"],
    }
    write_json(out / "run.json", {"provenance": prov, "config": cfg})
    events = []
    if "diverge" in cfg["stages"]:
        col = dv.collect_first_divergences(pair, manifest, cfg["max_new"])
        events = col.events
        dv.write_events(out / "events.jsonl", events, {**prov, "max_new": cfg["max_new"]})
        write_jsonl(out / "exclusions.jsonl", col.exclusions, prov)
    if "factorial" in cfg["stages"]:
        stage_factorial(pair, events, cfg, prov, out)
    if not events and any(s in cfg["stages"] for s in ("controls", "bridges", "crosscoder", "closure")):
        log.warning("no events collected; downstream stages skipped")
    else:
        if "controls" in cfg["stages"]:
            stage_controls(pair, events, manifest, cfg, prov, out)
        if "bridges" in cfg["stages"]:
            stage_bridges(pair, events, cfg, prov, out)
        if "crosscoder" in cfg["stages"]:
            stage_crosscoder(pair, events, cfg, prov, out)
        if "closure" in cfg["stages"]:
            stage_closure(pair, events, cfg, prov, out)
        if "stage_sweep" in cfg["stages"]:
            stage_sweep(pair, events, cfg, prov, out)
    if "report" in cfg["stages"]:
        emit_report(out)
    return out


# ---------------------------------------------------------------- report


B1_COLUMNS = ["readout", "n_events", "y_pp", "y_pi", "y_ip", "y_ii", "late_effect_pt_up", "late_effect_it_up",
              "interaction", "interaction_ci_lo", "interaction_ci_hi", "native_diagonal_shift"]
B2_COLUMNS = ["family", "readout", "n_events", "late_effect_pt_up", "late_effect_it_up", "interaction",
              "interaction_ci_lo", "interaction_ci_hi", "native_diagonal_shift", "interaction_share",
              "portable_share", "odds_multiplier"]


def emit_report(run_dir, out_dir=None) -> dict:
    """Summary JSON plus table-shaped CSVs; a pure function of the run directory's files.

    Outputs go to ``out_dir`` when given, otherwise into ``run_dir`` itself.
    """
    run_dir = Path(run_dir)
    out_dir = run_dir if out_dir is None else Path(out_dir)
    fpath = run_dir / "factorial.jsonl"
    if not fpath.exists():
        raise NoResults(f"{fpath} not found")
    prov, rows = read_jsonl(fpath)
    run = json.loads((run_dir / "run.json").read_text(encoding="utf-8")) if (run_dir / "run.json").exists() else {}
    cfg = run.get("config", {})
    n_boot = int(cfg.get("n_boot", stats.DEFAULT_RESAMPLES))
    n_perms = int(cfg.get("n_perms", stats.DEFAULT_PERMS))
    seed = int(cfg.get("seed", 0))
    results = _results_from_rows(rows)
    if not results:
        raise NoResults("factorial results are empty")
    readouts = sorted({r.readout for r in results})
    summary = {"provenance": prov, "readouts": {}, "n_boot": n_boot, "n_perms": n_perms, "seed": seed}
    b1, b2 = [], []
    for ro in readouts:
        res = [r for r in results if r.readout == ro]
        s = fx.summarize(res, n_boot, seed)
        null = stats.label_swap_null(res, n_perms, seed)
        null.pop("null")
        s["label_swap_null"] = null
        fams = sorted({r.family for r in res})
        per_family = {}
        for fam in fams:
            fr = [r for r in res if r.family == fam]
            m = fx.cell_means(fr)
            ci = stats.cluster_bootstrap([r.interaction for r in fr], [r.cluster_id for r in fr], n_boot, seed)
            conv = fx.scale_conversions(m).to_dict()
            per_family[fam] = {"means": m, "interaction_ci": ci.to_dict(), "conversions": conv, "n_events": len(fr)}
            b2.append({"family": fam, "readout": ro, "n_events": len(fr), **m,
                       "interaction_ci_lo": ci.ci_lo, "interaction_ci_hi": ci.ci_hi,
                       "interaction_share": conv["interaction_share"], "portable_share": conv["portable_share"],
                       "odds_multiplier": conv["odds_multiplier"]})
        s["per_family"] = per_family
        s["family_balanced"] = stats.family_balanced_mean({f: v["means"]["interaction"] for f, v in per_family.items()})
        summary["readouts"][ro] = s
        b1.append({"readout": ro, "n_events": s["n_events"], **s["means"],
                   "interaction_ci_lo": s["ci"]["interaction"]["ci_lo"],
                   "interaction_ci_hi": s["ci"]["interaction"]["ci_hi"]})
    for name in ("controls", "bridge_continuation", "bridge_forced", "crosscoder", "closure", "stage_sweep"):
        p = run_dir / f"{name}.json"
        if p.exists():
            d = json.loads(p.read_text(encoding="utf-8"))
            d.pop("provenance", None)
            summary[name] = d
    write_json(out_dir / "summary.json", summary)
    write_csv(out_dir / "table_four_cell.csv", B1_COLUMNS, b1, prov)
    write_csv(out_dir / "table_family.csv", B2_COLUMNS, b2, prov)
    return summary
