"""Command-line entry points: gen, run, eval, report.

Exit codes are stable: 0 success, 2 configuration/validation problems,
3 protocol/runtime failures, 1 anything unexpected.  Errors go to stderr
as one JSON object so callers can parse failures without scraping text.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import zipfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConfigError, FedstillError, IncompatibleRuns,
                     ProtocolError, StaleRun, UnknownDataset, ValidationError)
from .federation import FederationState
from .losses import dice_score, format_float, MetricAccumulator
from .models import deserialize, forward
from .runner import (EvalSets, load_manifest, run_scenario, score_ood,
                     sha256_file, write_csv, write_json)
from .scenegen import AddClient, load_scenario

EPOCH_1980 = (1980, 1, 1, 0, 0, 0)   # zip timestamps below this are invalid


def _emit_error(exc: Exception, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc),
               "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def _default_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FEDSTILL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ValidationError(
                f"FEDSTILL_SEED must be an integer, got '{env}'") from exc
    return None


# ---------------------------------------------------------------------- gen

def _deterministic_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """np.savez with pinned zip metadata so equal inputs give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=EPOCH_1980)
            zf.writestr(info, buf.getvalue())


def cmd_gen(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = _default_seed(args)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=seed)
    registry = scenario.registry()
    state = FederationState(scenario)
    for stage in scenario.stages:
        state.apply_events(stage)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    client_meta = []
    for cid in sorted(state.clients):
        client = state.clients[cid]
        cdir = out / f"client_{cid:02d}"
        cdir.mkdir(exist_ok=True)
        names = [registry.name_of(c) for c in sorted(client.annotated)]
        if client.dataset is not None:
            for i, (vol, labels) in enumerate(client.dataset.samples):
                arrays = {"intensities": vol.intensities}
                for c in sorted(labels.annotated):
                    arrays[f"mask_{registry.name_of(c)}"] = labels.masks[c]
                _deterministic_npz(cdir / f"sample_{i:03d}.npz", arrays)
        client_meta.append({
            "client": cid, "classes": names,
            "num_samples": client.num_samples,
            "data_available": client.data_available,
            "shift": {"gain": client.shift.gain, "bias": client.shift.bias}})

    ddir = out / "distillation"
    ddir.mkdir(exist_ok=True)
    dist = state.store.dist_set
    for i, vol in enumerate(dist.volumes):
        _deterministic_npz(ddir / f"volume_{i:03d}.npz",
                           {"intensities": vol.intensities})
    write_json(out / "meta.json", {
        "scenario": scenario.name, "seed": scenario.seed,
        "classes": list(scenario.class_names),
        "coverage": [registry.name_of(c) for c in sorted(dist.coverage)],
        "clients": client_meta,
        "distillation_volumes": len(dist.volumes)})
    print(f"gen: {len(client_meta)} clients + {len(dist.volumes)} "
          f"distillation volumes -> {out}")
    return 0


# ---------------------------------------------------------------------- run

def cmd_run(args) -> int:
    manifest = run_scenario(args.scenario, args.out, seed=_default_seed(args),
                            strategy=args.strategy, jobs=args.jobs,
                            deterministic=args.deterministic)
    models = sum(1 for s in manifest.stages if s.model_file)
    print(f"run: {manifest.name} [{manifest.strategy}] seed={manifest.seed} "
          f"{len(manifest.stages)} stages, {models} global models "
          f"-> {args.out} ({manifest.wall_seconds:.1f}s)")
    return 0


# --------------------------------------------------------------------- eval

def _load_run(run_dir) -> tuple[dict, object]:
    """Manifest + scenario, with the staleness check the manifest promises."""
    manifest = load_manifest(run_dir)
    scenario_path = Path(manifest["scenario_path"])
    if not scenario_path.is_file():
        raise StaleRun(f"scenario file {scenario_path} is gone; "
                       "the run cannot be re-evaluated")
    if sha256_file(scenario_path) != manifest["scenario_sha256"]:
        raise StaleRun(f"{scenario_path} changed since the run; "
                       "metrics would not be comparable")
    scenario = load_scenario(scenario_path)
    if manifest["seed"] != scenario.seed:
        scenario = dataclasses.replace(scenario, seed=manifest["seed"])
    return manifest, scenario


def _client_shifts(scenario) -> dict[int, object]:
    shifts = {}
    for stage in scenario.stages:
        for event in stage.events:
            if isinstance(event, AddClient):
                shifts[event.client_id] = event.shift
    return shifts


def _stage_models(run_dir: Path, manifest: dict) -> dict[int, object]:
    models = {}
    for rec in manifest["stages"]:
        if rec["model_file"]:
            blob = (run_dir / rec["model_file"]).read_bytes()
            models[rec["stage"]] = (deserialize(blob), tuple(rec["union"]))
    return models


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    manifest, scenario = _load_run(run_dir)
    if args.dataset not in ("test", "ood"):
        raise UnknownDataset(f"no dataset named '{args.dataset}' "
                             "(choose 'test' or 'ood')")
    if scenario.evaluation is None:
        raise ValidationError("scenario has no evaluation block")
    registry = scenario.registry()
    exclude = set(args.exclude_classes or [])
    for name in exclude:
        if name not in scenario.class_names:
            raise ValidationError(f"cannot exclude unknown class '{name}'")
    out = Path(args.out) if args.out else run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)

    models = _stage_models(run_dir, manifest)
    if not models:
        raise ValidationError(f"{run_dir} holds no stage models")
    stages = ([args.stage] if args.stage else sorted(models))
    for t in stages:
        if t not in models:
            raise ValidationError(f"run has no stage-{t} model")

    if args.dataset == "ood":
        params, union_names = models[max(stages)]
        union = registry.ids_of(union_names)
        report = score_ood(scenario, registry, params, union, exclude=exclude)
        report.save(out / "ood")
        print(f"eval: ood table for stage {max(stages)} -> {out}")
        return 0

    evals = EvalSets(scenario, registry)
    shifts = _client_shifts(scenario)
    for t in stages:
        params, union_names = models[t]
        union = set(registry.ids_of(union_names))
        acc = MetricAccumulator(registry)
        excluded: dict[str, str] = {}
        for c in sorted(evals.annotate_ids):
            name = registry.name_of(c)
            if name in exclude:
                excluded[name] = "excluded"
            elif c not in union:
                excluded[name] = "not-in-union"
        wanted = {c for c in evals.annotate_ids
                  if registry.name_of(c) not in excluded}
        for cid in sorted(shifts):
            dataset = evals.for_client(cid, shifts[cid])
            for volume, labels in dataset.samples:
                ids = [c for c in sorted(labels.annotated) if c in wanted]
                pred = forward(params, volume, ids, registry)
                for c in ids:
                    acc.add_pair(c, pred.channel(c) >= 0.5, labels.masks[c])
        acc.report(excluded=excluded).save(out / f"test_stage_{t:02d}")
    print(f"eval: test tables for {len(stages)} stage(s) -> {out}")
    return 0


# ------------------------------------------------------------------- report

def _final_model(run_dir: Path, manifest: dict):
    recs = [r for r in manifest["stages"] if r["model_file"]]
    if not recs:
        raise ValidationError(f"{run_dir} holds no stage models")
    rec = recs[-1]
    blob = (run_dir / rec["model_file"]).read_bytes()
    return deserialize(blob), tuple(rec["union"]), rec["stage"]


def _run_label(manifest: dict) -> str:
    return f"{manifest['name']}:{manifest['strategy']}:seed{manifest['seed']}"


def cmd_report(args) -> int:
    run_dirs = [Path(d) for d in args.runs]
    loaded = []
    for rd in run_dirs:
        manifest, scenario = _load_run(rd)
        loaded.append((rd, manifest, scenario))
    base_names = loaded[0][2].class_names
    for rd, manifest, scenario in loaded[1:]:
        if scenario.class_names != base_names:
            raise IncompatibleRuns(
                f"{rd} uses classes {list(scenario.class_names)}, "
                f"first run uses {list(base_names)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    # --- per-stage communication and compute ---------------------------
    comm_rows, comms_by = [], {}
    for rd, manifest, scenario in loaded:
        label = _run_label(manifest)
        ledger = json.loads((rd / "ledger.json").read_text(encoding="utf-8"))
        per_stage: dict[int, dict] = {}
        for e in ledger["comm"]:
            row = per_stage.setdefault(e["stage"], {
                "communications": 0, "comm_bytes": 0, "refresh": 0,
                "train_units": 0.0, "inference_units": 0.0})
            if e["kind"] in ("upload", "download"):
                row["communications"] += 1
                row["comm_bytes"] += e["nbytes"]
            elif e["kind"] == "refresh":
                row["refresh"] += 1
        for e in ledger["compute"]:
            row = per_stage.setdefault(e["stage"], {
                "communications": 0, "comm_bytes": 0, "refresh": 0,
                "train_units": 0.0, "inference_units": 0.0})
            key = ("inference_units" if e["kind"] == "server_inference"
                   else "train_units")
            row[key] += e["units"]
        for t in sorted(per_stage):
            row = per_stage[t]
            comm_rows.append((label, t, row["communications"],
                              row["comm_bytes"], row["refresh"],
                              format_float(row["train_units"]),
                              format_float(row["inference_units"])))
            comms_by[(manifest["strategy"], t)] = row["communications"]
    write_csv(out / "comm_compute.csv",
              ["run", "stage", "communications", "comm_bytes", "refresh",
               "train_units", "inference_units"], comm_rows)

    # Communication ratio per stage: round-based baseline over one-shot
    # distillation; a single run compares against itself (all 1.0).
    stages_seen = sorted({t for (_, t) in comms_by})
    ratio_rows = []
    for t in stages_seen:
        mmds = comms_by.get(("mmds", t))
        mapcr = comms_by.get(("mapcr_fedavg", t))
        if mmds is not None and mapcr is not None:
            ratio_rows.append((t, mmds, mapcr, format_float(mapcr / mmds)))
        elif len(loaded) == 1 and (mmds is not None or mapcr is not None):
            only = mmds if mmds is not None else mapcr
            ratio_rows.append((t, only, only, format_float(1.0)))
    if ratio_rows:
        write_csv(out / "comm_ratio.csv",
                  ["stage", "mmds_communications", "mapcr_communications",
                   "ratio"], ratio_rows)

    # --- class-wise DICE/ASSD of each final global ----------------------
    class_rows = []
    final_dice: dict[tuple[str, str], float] = {}
    for rd, manifest, scenario in loaded:
        if scenario.evaluation is None:
            continue
        label = _run_label(manifest)
        registry = scenario.registry()
        params, union_names, _ = _final_model(rd, manifest)
        union = set(registry.ids_of(union_names))
        evals = EvalSets(scenario, registry)
        shifts = _client_shifts(scenario)
        acc = MetricAccumulator(registry)
        for cid in sorted(shifts):
            dataset = evals.for_client(cid, shifts[cid])
            for volume, labels in dataset.samples:
                ids = [c for c in sorted(labels.annotated) if c in union]
                pred = forward(params, volume, ids, registry)
                for c in ids:
                    acc.add_pair(c, pred.channel(c) >= 0.5, labels.masks[c])
        for row in acc.report().per_class:
            final_dice[(label, row.name)] = row.dice_mean
            class_rows.append((
                label, row.name, format_float(row.dice_mean),
                "" if row.assd_mean is None else format_float(row.assd_mean),
                row.n_samples))
    if class_rows:
        write_csv(out / "classwise_final.csv",
                  ["run", "class", "dice", "assd", "n_samples"], class_rows)

    # --- per-client personalization (before vs after joining) -----------
    pers_rows = []
    for rd, manifest, scenario in loaded:
        if manifest["strategy"] != "mmds" or scenario.evaluation is None:
            continue
        store_index = rd / "store" / "index.json"
        if not store_index.is_file():
            continue
        label = _run_label(manifest)
        registry = scenario.registry()
        params, union_names, _ = _final_model(rd, manifest)
        union = tuple(sorted(registry.ids_of(union_names)))
        evals = EvalSets(scenario, registry)
        shifts = _client_shifts(scenario)
        for entry in json.loads(store_index.read_text(encoding="utf-8")):
            cid = entry["client"]
            local = deserialize((rd / entry["file"]).read_bytes())
            annotated = set(registry.ids_of(entry["classes"]))
            dataset = evals.for_client(cid, shifts[cid])
            pers: dict[int, list[float]] = {}
            glob: dict[int, list[float]] = {}
            for volume, labels in dataset.samples:
                ids = [c for c in union if c in labels.annotated]
                gpred = forward(params, volume, ids, registry)
                for c in ids:
                    source = local if c in annotated else params
                    ppred = forward(source, volume, [c], registry)
                    pers.setdefault(c, []).append(
                        dice_score(ppred.channel(c) >= 0.5, labels.masks[c]))
                    glob.setdefault(c, []).append(
                        dice_score(gpred.channel(c) >= 0.5, labels.masks[c]))
            for c in sorted(pers):
                p = float(np.mean(pers[c]))
                g = float(np.mean(glob[c]))
                pers_rows.append((label, cid, registry.name_of(c),
                                  "local" if c in annotated else "global",
                                  format_float(p), format_float(g),
                                  format_float(p - g)))
    if pers_rows:
        write_csv(out / "personalization.csv",
                  ["run", "client", "class", "source", "personalized_dice",
                   "global_dice", "delta"], pers_rows)

    # --- architecture mix vs final quality ------------------------------
    arch_rows = []
    for rd, manifest, scenario in loaded:
        label = _run_label(manifest)
        archs = []
        for stage in scenario.stages:
            for event in stage.events:
                if isinstance(event, AddClient):
                    archs.append(event.model.arch)
        mix = "mixed" if len(set(archs)) > 1 else (archs[0] if archs else "-")
        macro = ""
        metrics = [r for r in manifest["stages"] if r["metrics_file"]]
        if metrics:
            with open(rd / metrics[-1]["metrics_file"], newline="",
                      encoding="utf-8") as fh:
                vals = [float(row["dice"]) for row in csv.DictReader(fh)
                        if row["class"] != "macro" and row["dice"]]
            macro = format_float(float(np.mean(vals))) if vals else ""
        arch_rows.append((label, scenario.global_model.arch, mix,
                          "+".join(archs), macro))
    write_csv(out / "architecture.csv",
              ["run", "global_arch", "client_mix", "client_archs",
               "final_macro_dice"], arch_rows)

    # --- OOD vs in-federation -------------------------------------------
    ood_rows = []
    for rd, manifest, scenario in loaded:
        if scenario.evaluation is None or scenario.evaluation.ood is None:
            continue
        label = _run_label(manifest)
        registry = scenario.registry()
        params, union_names, _ = _final_model(rd, manifest)
        union = registry.ids_of(union_names)
        report = score_ood(scenario, registry, params, union)
        for row in report.per_class:
            base = final_dice.get((label, row.name))
            delta = (format_float(base - row.dice_mean)
                     if base is not None else "")
            ood_rows.append((label, row.name, "scored", "",
                             format_float(row.dice_mean),
                             format_float(base) if base is not None else "",
                             delta))
        for name, reason in sorted(report.excluded.items()):
            ood_rows.append((label, name, "omitted", reason, "", "", ""))
    if ood_rows:
        write_csv(out / "ood_comparison.csv",
                  ["run", "class", "status", "reason", "ood_dice",
                   "in_federation_dice", "delta"], ood_rows)

    tables = sorted(p.name for p in out.glob("*.csv"))
    print(f"report: {len(loaded)} run(s) -> {out} ({', '.join(tables)})")
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedstill",
        description="Federated continual segmentation via one-shot "
                    "model storage and server-side distillation.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="materialize scenario datasets to disk")
    p_gen.add_argument("--scenario", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="execute a scenario end to end")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--strategy",
                       choices=["mmds", "mapcr_fedavg", "centralized"],
                       default=None, help="override the scenario's strategy")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="parallel local trainings")
    p_run.add_argument("--deterministic", action="store_true",
                       help="force single-job ordering")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="re-score a finished run")
    p_eval.add_argument("--run", required=True, help="run directory")
    p_eval.add_argument("--dataset", default="test",
                        help="'test' (per-client) or 'ood' (held-out site)")
    p_eval.add_argument("--stage", type=int, default=None,
                        help="evaluate one stage's global (default: all)")
    p_eval.add_argument("--exclude-classes", nargs="*", default=None)
    p_eval.add_argument("--out", default=None,
                        help="output directory (default: RUN/eval)")
    p_eval.set_defaults(func=cmd_eval)

    p_rep = sub.add_parser("report",
                           help="emit comparison tables for finished runs")
    p_rep.add_argument("runs", nargs="+", help="run directories")
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _emit_error(exc, 2)
    except ProtocolError as exc:
        return _emit_error(exc, 3)
    except FedstillError as exc:
        return _emit_error(exc, 3)
    except Exception as exc:            # noqa: BLE001 - CLI boundary
        return _emit_error(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
