"""Run a scenario end to end and leave a self-describing artifact directory.

Layout written under ``out_dir``::

    manifest.json            what ran, file inventory, wall-clock timings
    ledger.json              every communication and compute event
    stage_01/global.fstl     serialized global model after stage 1
    stage_01/metrics.csv     per-class DICE/ASSD of that model (+ .json)
    ...
    store/client_XX.fstl     the server's stored client models (one-shot runs)
    personalized.csv/.json   per-client routing results (source local|global)
    ood.csv/.json            held-out-site scores; never-federated classes
                             are omitted and listed under "excluded"

Everything except the manifest is byte-reproducible for a fixed scenario
and seed; the manifest carries timings and is the one file expected to
differ between identical runs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ValidationError
from .federation import (FederationState, GlobalModelRecord, personalized_infer,
                         run_centralized, spec_from_config)
from .losses import dice_score, format_float, MetricAccumulator, MetricReport
from .models import forward, serialize
from .scenegen import (STRATEGIES, load_scenario, make_client_dataset,
                       ScenarioConfig)
from .seeding import derive_seed

MODEL_SUFFIX = ".fstl"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    # In-memory first so the file appears atomically complete, with LF
    # endings regardless of platform.
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


@dataclass
class StageArtifact:
    stage: int
    participants: tuple[int, ...]
    active: tuple[int, ...]
    union: tuple[str, ...]
    model_file: str | None
    metrics_file: str | None
    wall_seconds: float


@dataclass
class RunManifest:
    scenario_path: str
    scenario_sha256: str
    name: str
    seed: int
    strategy: str
    deterministic: bool
    jobs: int
    version: str
    stages: list[StageArtifact] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    wall_seconds: float = 0.0

    def to_json_obj(self) -> dict:
        obj = dataclasses.asdict(self)
        obj["stages"] = [dataclasses.asdict(s) for s in self.stages]
        return obj


class EvalSets:
    """Per-client test volumes, built lazily and reused across stages.

    The derivation depends only on (scenario seed, client id, shift), so
    evaluation and reporting commands regenerate the exact sets a run
    scored against.
    """

    def __init__(self, scenario: ScenarioConfig, registry):
        self.scenario = scenario
        self.registry = registry
        self.annotate_ids = (registry.ids_of(scenario.evaluation.annotate)
                             if scenario.evaluation else ())
        self._cache: dict[int, object] = {}

    def for_client(self, client_id: int, shift):
        if client_id not in self._cache:
            self._cache[client_id] = make_client_dataset(
                self.scenario.scene_spec(shift), self.annotate_ids,
                self.scenario.evaluation.samples_per_client,
                derive_seed(self.scenario.seed, "eval", client_id),
                self.registry, client_id=client_id)
        return self._cache[client_id]


def score_global(params, class_union, evals: EvalSets,
                 clients: dict[int, object], client_ids) -> MetricReport:
    """Per-class metrics of one global model over clients' test sets."""
    registry = evals.registry
    acc = MetricAccumulator(registry)
    for cid in client_ids:
        dataset = evals.for_client(cid, clients[cid].shift)
        for volume, labels in dataset.samples:
            ids = [c for c in class_union if c in labels.annotated]
            pred = forward(params, volume, ids, registry)
            for c in ids:
                acc.add_pair(c, pred.channel(c) >= 0.5, labels.masks[c])
    return acc.report()


def make_ood_dataset(scenario: ScenarioConfig, registry):
    """The held-out-site volumes every OOD table is scored on."""
    ood = scenario.evaluation.ood
    ood_ids = registry.ids_of(ood.classes)
    return make_client_dataset(
        scenario.scene_spec(ood.shift), ood_ids, ood.num_samples,
        derive_seed(scenario.seed, "ood"), registry, client_id=0)


def score_ood(scenario: ScenarioConfig, registry, params, class_union,
              exclude: set[str] | None = None) -> MetricReport:
    """OOD metrics for the classes the federation actually covers.

    Classes no client ever federated are omitted from the per-class rows
    and recorded in the report's ``excluded`` map, as are any names in
    ``exclude``.
    """
    ood = scenario.evaluation.ood
    exclude = exclude or set()
    union = set(class_union)
    excluded: dict[str, str] = {}
    scored: list[int] = []
    for name in ood.classes:
        c = registry.id_of(name)
        if name in exclude:
            excluded[name] = "excluded"
        elif c not in union:
            excluded[name] = "never-federated"
        else:
            scored.append(c)
    dataset = make_ood_dataset(scenario, registry)
    acc = MetricAccumulator(registry)
    for volume, labels in dataset.samples:
        pred = forward(params, volume, scored, registry)
        for c in scored:
            acc.add_pair(c, pred.channel(c) >= 0.5, labels.masks[c])
    return acc.report(excluded=excluded)


def _write_personalized(out_dir: Path, state: FederationState,
                        evals: EvalSets) -> list[str]:
    registry = evals.registry
    rows = []
    for cid in sorted(state.clients):
        client = state.clients[cid]
        if client.received_global is None or client.params is None:
            continue
        union = tuple(sorted(client.received_global.class_union))
        dataset = evals.for_client(cid, client.shift)
        per: dict[int, list[float]] = {}
        for volume, labels in dataset.samples:
            pred = personalized_infer(client, volume, registry)
            for c in union:
                if c in labels.annotated:
                    per.setdefault(c, []).append(
                        dice_score(pred.channel(c) >= 0.5, labels.masks[c]))
        for c, vals in sorted(per.items()):
            source = "local" if c in client.annotated else "global"
            rows.append((cid, registry.name_of(c), source,
                         format_float(float(np.mean(vals))), len(vals)))
    if not rows:
        return []
    write_csv(out_dir / "personalized.csv",
              ["client", "class", "source", "dice", "n_samples"], rows)
    write_json(out_dir / "personalized.json",
               [{"client": r[0], "class": r[1], "source": r[2],
                 "dice": float(r[3]), "n_samples": r[4]} for r in rows])
    return ["personalized.csv", "personalized.json"]


def _write_store(out_dir: Path, state: FederationState) -> list[str]:
    """Persist the server's stored client models; the store is the whole
    point of the one-shot protocol, so the run directory keeps it."""
    store_dir = out_dir / "store"
    store_dir.mkdir(exist_ok=True)
    registry = state.registry
    files, index = [], []
    for cid in state.store.client_ids:
        stored = state.store.get(cid)
        name = f"store/client_{cid:02d}{MODEL_SUFFIX}"
        (out_dir / name).write_bytes(stored.blob)
        files.append(name)
        index.append({"client": cid, "stage": stored.stage,
                      "classes": [registry.name_of(c)
                                  for c in sorted(stored.annotated)],
                      "file": name})
    write_json(store_dir / "index.json", index)
    files.append("store/index.json")
    return files


def _pooled_samples(state: FederationState) -> list:
    pooled = []
    for cid in sorted(state.clients):
        client = state.clients[cid]
        if client.data_available and client.dataset is not None:
            pooled.extend(client.dataset.samples)
    return pooled


def run_scenario(scenario_path, out_dir, *, seed: int | None = None,
                 strategy: str | None = None, jobs: int = 1,
                 deterministic: bool = False) -> RunManifest:
    """Execute one scenario and populate ``out_dir``; returns the manifest."""
    scenario_path = Path(scenario_path)
    scenario = load_scenario(scenario_path)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=int(seed))
    if strategy is not None:
        if strategy not in STRATEGIES:
            raise ValidationError(
                f"strategy '{strategy}' not one of {list(STRATEGIES)}")
        scenario = dataclasses.replace(scenario, strategy=strategy)
    if deterministic:
        jobs = 1

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        scenario_path=str(scenario_path),
        scenario_sha256=sha256_file(scenario_path),
        name=scenario.name, seed=scenario.seed, strategy=scenario.strategy,
        deterministic=deterministic, jobs=jobs, version=__version__)

    state = FederationState(scenario)
    evals = EvalSets(scenario, state.registry)
    run_start = time.perf_counter()
    num_stages = scenario.num_stages()

    for t in range(1, num_stages + 1):
        stage_start = time.perf_counter()
        if scenario.strategy == "mmds":
            record = state.run_stage_mmds(t, jobs=jobs)
        elif scenario.strategy == "mapcr_fedavg":
            record = state.run_stage_mapcr(t)
        else:
            # Offline comparator: materialize each stage's federation events,
            # then train once on the final pooled data.
            state.apply_events(scenario.stages[t - 1])
            record = None
            if t == num_stages:
                plan = state.schedule.plan(t)
                pooled = _pooled_samples(state)
                epochs = scenario.centralized_epochs()
                params = run_centralized(
                    pooled, spec_from_config(scenario.global_model), epochs,
                    derive_seed(scenario.seed, "central"), state.registry)
                state.ledger.log_compute(t, "global_train", None, 1.0,
                                         steps=epochs * len(pooled))
                record = GlobalModelRecord(stage=t, params=params,
                                           class_union=plan.union_ids,
                                           strategy="centralized")
                state.store.global_record = record

        plan = state.schedule.plan(t)
        model_file = metrics_file = None
        if record is not None:
            stage_dir = out_dir / f"stage_{t:02d}"
            stage_dir.mkdir(exist_ok=True)
            (stage_dir / f"global{MODEL_SUFFIX}").write_bytes(
                serialize(record.params))
            model_file = f"stage_{t:02d}/global{MODEL_SUFFIX}"
            if scenario.evaluation is not None:
                report = score_global(record.params, record.class_union,
                                      evals, state.clients, plan.active_ids)
                report.save(stage_dir / "metrics")
                metrics_file = f"stage_{t:02d}/metrics.csv"
        manifest.stages.append(StageArtifact(
            stage=t, participants=plan.participant_ids, active=plan.active_ids,
            union=tuple(state.registry.name_of(c) for c in plan.union_ids),
            model_file=model_file, metrics_file=metrics_file,
            wall_seconds=round(time.perf_counter() - stage_start, 3)))

    files = [s.model_file for s in manifest.stages if s.model_file]
    files += [s.metrics_file for s in manifest.stages if s.metrics_file]
    if scenario.strategy == "mmds":
        files += _write_store(out_dir, state)
    if scenario.evaluation is not None and scenario.strategy == "mmds":
        files += _write_personalized(out_dir, state, evals)
        record = state.store.global_record
        if scenario.evaluation.ood is not None and record is not None:
            report = score_ood(scenario, state.registry, record.params,
                               record.class_union)
            report.save(out_dir / "ood")
            files += ["ood.csv", "ood.json"]
    write_json(out_dir / "ledger.json", state.ledger.to_json_obj())
    files.append("ledger.json")
    manifest.files = sorted(files)
    manifest.wall_seconds = round(time.perf_counter() - run_start, 3)
    write_json(out_dir / "manifest.json", manifest.to_json_obj())
    return manifest


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise ValidationError(f"{run_dir} has no manifest.json; not a run directory")
    return json.loads(path.read_text(encoding="utf-8"))
