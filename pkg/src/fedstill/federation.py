"""Federated continual-learning protocol engine.

Two strategies over the same staged schedule:

* ``mmds`` — each participating client trains once on its own data and
  uploads the finished model; the server stores one model per client,
  runs a single round of inference on a shared unlabeled distillation
  set, picks per-class soft targets by lowest entropy impurity, and
  distills a fresh global student from scratch.  Clients that did not
  change this stage are never retrained and never re-uploaded.

* ``mapcr_fedavg`` — the round-based baseline: every active client
  downloads the running global model, trains a little, uploads, and the
  server averages parameters weighted by dataset size, for ``rounds``
  iterations per stage.  Requires every client's data to stay available
  and all architectures to match.

Every transfer and every training/inference run is recorded in a
Ledger, whose per-stage totals reproduce the protocols' closed-form
communication counts exactly.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (DataUnavailable, EmptyDistillationSet, EmptyStore,
                     HeterogeneousArchitectures, MissingGlobalModel,
                     MissingLocalModel, OneTimeInferenceViolation,
                     UncoveredClass, UntrainedClient, ValidationError)
from .losses import (PseudoLabelVolume, distill_loss, entropy_impurity,
                     masked_bce_loss, masked_dice_loss)
from .models import (EMBED_DIM, ClassRegistry, ModelParams, PredictionVolume,
                     SegModelSpec, build_model, forward, serialize,
                     serialized_size)
from .scenegen import (AddClient, ClientDataset, DistillationSet, DomainShift,
                       DropData, ModelConfig, ScenarioConfig, UpdateClient,
                       make_client_dataset, make_distillation_set)
from .seeding import derive_seed


def spec_from_config(cfg: ModelConfig, init_seed: int = 0) -> SegModelSpec:
    return SegModelSpec(arch=cfg.arch, hidden=cfg.hidden, layers=cfg.layers,
                        feature_dim=EMBED_DIM, init_seed=init_seed)


# ================================================================ state types

@dataclass
class ClientState:
    """One site: its data, its annotated classes, and its two models."""
    client_id: int
    spec: SegModelSpec
    annotated: tuple[int, ...]
    dataset: ClientDataset | None
    base_seed: int
    shift: DomainShift
    num_samples: int
    data_available: bool = True
    params: ModelParams | None = None
    received_global: "GlobalModelRecord | None" = None
    dataset_version: int = 1
    params_version: int = 0


@dataclass(frozen=True)
class StoredModel:
    """Server-side copy of one client's uploaded model."""
    client_id: int
    blob: bytes
    annotated: tuple[int, ...]
    stage: int
    params: ModelParams


@dataclass(frozen=True)
class GlobalModelRecord:
    stage: int
    params: ModelParams
    class_union: tuple[int, ...]
    strategy: str


class ServerStore:
    """One stored model per client, plus the current global model."""

    def __init__(self):
        self._models: dict[int, StoredModel] = {}
        self.global_record: GlobalModelRecord | None = None
        self.dist_set: DistillationSet | None = None
        self._inference_stages: set[int] = set()

    def __len__(self) -> int:
        return len(self._models)

    @property
    def client_ids(self) -> list[int]:
        return sorted(self._models)

    def put(self, stored: StoredModel) -> None:
        self._models[stored.client_id] = stored

    def get(self, client_id: int) -> StoredModel:
        return self._models[client_id]

    def mark_inference(self, stage: int) -> None:
        if stage in self._inference_stages:
            raise OneTimeInferenceViolation(
                f"distillation-set inference already ran at stage {stage}")
        self._inference_stages.add(stage)


# ==================================================================== schedule

@dataclass(frozen=True)
class StagePlan:
    """Static per-stage facts derived from the scenario, used for accounting."""
    index: int
    participant_ids: tuple[int, ...]   # clients added or updated this stage
    dropped_ids: tuple[int, ...]
    active_ids: tuple[int, ...]        # every client in the federation so far
    new_class_ids: tuple[int, ...]     # classes first introduced this stage
    union_ids: tuple[int, ...]         # cumulative class union


class StageSchedule:
    """Participant sets, cumulative membership, and the growing class union."""

    def __init__(self, scenario: ScenarioConfig, registry: ClassRegistry):
        plans = []
        active: set[int] = set()
        union: set[int] = set()
        for stage in scenario.stages:
            participants: list[int] = []
            dropped: list[int] = []
            new_ids: set[int] = set()
            for event in stage.events:
                if isinstance(event, AddClient):
                    participants.append(event.client_id)
                    active.add(event.client_id)
                    new_ids.update(registry.ids_of(event.classes))
                elif isinstance(event, UpdateClient):
                    participants.append(event.client_id)
                    new_ids.update(registry.ids_of(event.added_classes))
                elif isinstance(event, DropData):
                    dropped.append(event.client_id)
            new_ids -= union
            union |= new_ids
            plans.append(StagePlan(
                index=stage.index,
                participant_ids=tuple(sorted(participants)),
                dropped_ids=tuple(sorted(dropped)),
                active_ids=tuple(sorted(active)),
                new_class_ids=tuple(sorted(new_ids)),
                union_ids=tuple(sorted(union)),
            ))
        self.plans = tuple(plans)

    def plan(self, stage_index: int) -> StagePlan:
        return self.plans[stage_index - 1]

    def num_stages(self) -> int:
        return len(self.plans)


# ====================================================================== ledger

@dataclass(frozen=True)
class CommEvent:
    stage: int
    kind: str          # upload | download | refresh
    client_id: int
    nbytes: int


@dataclass(frozen=True)
class ComputeEvent:
    stage: int
    kind: str          # local_train | global_train | server_inference
    client_id: int | None
    units: float       # fraction of one full training run
    steps: int


class Ledger:
    """Append-only record of transfers and compute."""

    def __init__(self):
        self.comm: list[CommEvent] = []
        self.compute: list[ComputeEvent] = []

    def log_comm(self, stage: int, kind: str, client_id: int, nbytes: int):
        self.comm.append(CommEvent(stage, kind, client_id, nbytes))

    def log_compute(self, stage: int, kind: str, client_id: int | None,
                    units: float, steps: int):
        self.compute.append(ComputeEvent(stage, kind, client_id, units, steps))

    def to_json_obj(self) -> dict:
        return {
            "comm": [dataclasses.asdict(e) for e in self.comm],
            "compute": [dataclasses.asdict(e) for e in self.compute],
        }


def ledger_totals(ledger: Ledger, strategy: str | None = None,
                  schedule: StageSchedule | None = None,
                  rounds: int | None = None) -> dict[int, dict]:
    """Per-stage communication and compute totals.

    Refresh pushes (global-model copies to clients that did not
    participate in the stage) are tallied separately and excluded from
    the headline communication count, which covers participant traffic
    only.  With ``strategy`` and ``schedule`` given, each row also
    carries the protocol's closed-form expected count so callers can
    assert actual == expected.
    """
    stages = sorted({e.stage for e in ledger.comm} |
                    {e.stage for e in ledger.compute})
    totals: dict[int, dict] = {}
    for t in stages:
        comm = [e for e in ledger.comm if e.stage == t]
        compute = [e for e in ledger.compute if e.stage == t]
        counted = [e for e in comm if e.kind in ("upload", "download")]
        refresh = [e for e in comm if e.kind == "refresh"]
        train = [e for e in compute if e.kind in ("local_train", "global_train")]
        infer = [e for e in compute if e.kind == "server_inference"]
        row = {
            "communications": len(counted),
            "comm_bytes": sum(e.nbytes for e in counted),
            "refresh": len(refresh),
            "train_units": float(sum(e.units for e in train)),
            "inference_units": float(sum(e.units for e in infer)),
            "compute_units": float(sum(e.units for e in compute)),
        }
        if strategy is not None and schedule is not None:
            plan = schedule.plan(t)
            if strategy == "mmds":
                row["expected_communications"] = 2 * len(plan.participant_ids)
            elif strategy == "mapcr_fedavg":
                if rounds is None:
                    raise ValidationError("rounds required for baseline totals")
                row["expected_communications"] = 2 * len(plan.active_ids) * rounds
        totals[t] = row
    return totals


# ============================================================== training loops

def _class_scaled_optimizer(num_classes: int) -> T.OptimizerState:
    """Optimizer whose step size grows with the trained class count.

    The masked and soft losses average their per-class terms, so each
    class's gradient shrinks as 1/C; scaling the base rate by C keeps
    the per-class learning rate the same whether a run trains one
    channel or the whole union.  Floored at 2: single-class runs
    otherwise crawl and underfit in the same epoch budget.
    """
    opt = T.OptimizerState()
    return dataclasses.replace(opt, base_lr=opt.base_lr * max(2, num_classes))


def _trained_class_count(samples) -> int:
    classes: set[int] = set()
    for _, labels in samples:
        classes.update(labels.annotated)
    return len(classes)


def _train_on_samples(spec: SegModelSpec, samples, epochs: int, seed: int,
                      registry: ClassRegistry) -> ModelParams:
    """Fresh model trained with the masked losses; the one loop every
    local and centralized run goes through.

    Supervision per sample covers exactly that sample's annotated
    classes.  Initialization and shuffle order derive from ``seed``
    alone, so identical (data, seed) pairs give bit-identical models no
    matter who calls.
    """
    init_spec = dataclasses.replace(spec, init_seed=derive_seed(seed, "init"))
    params = build_model(init_spec)
    if epochs <= 0 or not samples:
        return params
    opt = _class_scaled_optimizer(_trained_class_count(samples))
    total_steps = epochs * len(samples)
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, "shuffle", epoch))
        for idx in rng.permutation(len(samples)):
            volume, labels = samples[idx]
            with T.Tape() as tape:
                pred = forward(params, volume, sorted(labels.annotated), registry)
                loss = masked_bce_loss(pred, labels) + masked_dice_loss(pred, labels)
                grads = T.backward(loss, tape)
            T.adamw_step(params, grads, opt, total_steps)
    return params


def _continue_on_samples(params: ModelParams, samples, epochs: int, seed: int,
                         registry: ClassRegistry) -> ModelParams:
    """Resume training from given parameters (used by the round baseline)."""
    if epochs <= 0 or not samples:
        return params
    opt = _class_scaled_optimizer(_trained_class_count(samples))
    total_steps = epochs * len(samples)
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, "shuffle", epoch))
        for idx in rng.permutation(len(samples)):
            volume, labels = samples[idx]
            with T.Tape() as tape:
                pred = forward(params, volume, sorted(labels.annotated), registry)
                loss = masked_bce_loss(pred, labels) + masked_dice_loss(pred, labels)
                grads = T.backward(loss, tape)
            T.adamw_step(params, grads, opt, total_steps)
    return params


def train_local(client: ClientState, epochs: int, seed: int,
                registry: ClassRegistry, ledger: Ledger | None = None,
                stage: int = 0) -> ModelParams:
    """One-time local training on the client's own annotated data."""
    if not client.data_available or client.dataset is None:
        raise DataUnavailable(f"client {client.client_id} has no local data")
    params = _train_on_samples(client.spec, client.dataset.samples, epochs,
                               seed, registry)
    client.params = params
    client.params_version = client.dataset_version
    if ledger is not None:
        ledger.log_compute(stage, "local_train", client.client_id, 1.0,
                           steps=epochs * len(client.dataset.samples))
    return params


def run_centralized(samples, spec: SegModelSpec, epochs: int, seed: int,
                    registry: ClassRegistry) -> ModelParams:
    """Upper-bound model trained on pooled multi-site data.

    Each sample is supervised on its own annotated set, so pooling one
    client's data reduces to that client's local run bit for bit.
    """
    return _train_on_samples(spec, samples, epochs, seed, registry)


# ============================================================ protocol: mmds

def upload_model(client: ClientState, store: ServerStore,
                 ledger: Ledger | None = None, stage: int = 0) -> ServerStore:
    """Send the finished local model; replaces any previous entry."""
    if client.params is None:
        raise UntrainedClient(f"client {client.client_id} has not trained")
    if client.params_version != client.dataset_version:
        raise UntrainedClient(
            f"client {client.client_id} params are stale: trained on dataset "
            f"v{client.params_version}, current is v{client.dataset_version}")
    blob = serialize(client.params)
    store.put(StoredModel(client_id=client.client_id, blob=blob,
                          annotated=tuple(sorted(client.annotated)),
                          stage=stage, params=client.params.clone()))
    if ledger is not None:
        ledger.log_comm(stage, "upload", client.client_id, len(blob))
    return store


def generate_pseudolabels(store: ServerStore, dist_set: DistillationSet,
                          registry: ClassRegistry,
                          ledger: Ledger | None = None,
                          stage: int = 0) -> dict[int, list[PredictionVolume]]:
    """Run every stored model once over the distillation set.

    Inference happens off-tape (no gradients).  The compute cost is
    logged as a measured fraction of one training run: forward passes
    here divided by the mean step count of this stage's local training
    runs (floor 1), which is how the "much smaller than O" bookkeeping
    stays honest instead of assumed.
    """
    if len(store) == 0:
        raise EmptyStore("no client models stored")
    if len(dist_set) == 0:
        raise EmptyDistillationSet("distillation set is empty")
    store.mark_inference(stage)
    predictions: dict[int, list[PredictionVolume]] = {}
    for cid in store.client_ids:
        entry = store.get(cid)
        per_volume = []
        for volume in dist_set.volumes:
            per_volume.append(forward(entry.params, volume,
                                      sorted(entry.annotated), registry))
        predictions[cid] = per_volume
    if ledger is not None:
        forwards = len(store) * len(dist_set)
        stage_train_steps = [e.steps for e in ledger.compute
                             if e.stage == stage and e.kind == "local_train"]
        reference = max(1, int(round(np.mean(stage_train_steps)))
                        if stage_train_steps else 1)
        ledger.log_compute(stage, "server_inference", None,
                           units=forwards / reference, steps=forwards)
    return predictions


def aggregate_predictions(predictions: dict[int, list[PredictionVolume]],
                          class_union, registry: ClassRegistry
                          ) -> list[PseudoLabelVolume]:
    """Per volume and per class, keep the most confident teacher's mask.

    Confidence is lowest entropy impurity; a class only one model covers
    is taken verbatim; exact ties go to the lowest client id.
    """
    union = tuple(sorted(set(int(c) for c in class_union)))
    client_ids = sorted(predictions)
    if not client_ids:
        raise EmptyStore("no predictions to aggregate")
    n_volumes = len(predictions[client_ids[0]])
    out = []
    for v in range(n_volumes):
        channels = []
        sources: dict[int, int] = {}
        for c in union:
            best_cid = None
            best_val = None
            for cid in client_ids:
                pred = predictions[cid][v]
                if c not in pred.class_ids:
                    continue
                if best_cid is None:
                    best_cid = cid
                    best_val = None   # lazily scored only if contested
                    continue
                if best_val is None:
                    best_val = entropy_impurity(
                        predictions[best_cid][v].channel(c), c).value
                val = entropy_impurity(pred.channel(c), c).value
                if val < best_val:
                    best_cid, best_val = cid, val
            if best_cid is None:
                raise UncoveredClass(
                    f"no stored model predicts class "
                    f"'{registry.name_of(c)}' (id {c})")
            channels.append(predictions[best_cid][v].channel(c))
            sources[c] = best_cid
        out.append(PseudoLabelVolume(class_ids=union,
                                     targets=np.stack(channels, axis=0),
                                     sources=sources))
    return out


def distill_global(dist_set: DistillationSet,
                   pseudo_labels: list[PseudoLabelVolume],
                   student: SegModelSpec, class_union, epochs: int, seed: int,
                   registry: ClassRegistry, ledger: Ledger | None = None,
                   stage: int = 0, strategy: str = "mmds") -> GlobalModelRecord:
    """Train a fresh global student against the aggregated soft targets."""
    union = tuple(sorted(set(int(c) for c in class_union)))
    for pseudo in pseudo_labels:
        missing = set(union) - set(pseudo.class_ids)
        if missing:
            names = [registry.name_of(c) for c in sorted(missing)]
            raise UncoveredClass(f"pseudo-labels missing classes {names}")
    init_spec = dataclasses.replace(
        student, init_seed=derive_seed(seed, "global-init", stage))
    params = build_model(init_spec)
    n = len(dist_set)
    if epochs > 0 and n > 0:
        opt = _class_scaled_optimizer(len(union))
        total_steps = epochs * n
        # Polyak tail: the returned weights are the average over the last
        # quarter of steps, which damps the init-to-init wobble a fresh
        # student otherwise shows on the smaller classes.
        avg_from = int(total_steps * 0.75)
        sums = {name: np.zeros_like(t.data) for name, t in params.tensors.items()}
        averaged = 0
        step = 0
        for epoch in range(epochs):
            rng = np.random.default_rng(derive_seed(seed, "global-shuffle",
                                                    stage, epoch))
            for idx in rng.permutation(n):
                with T.Tape() as tape:
                    pred = forward(params, dist_set.volumes[idx], union, registry)
                    loss = distill_loss(pred, pseudo_labels[idx])
                    grads = T.backward(loss, tape)
                T.adamw_step(params, grads, opt, total_steps)
                step += 1
                if step > avg_from:
                    for name, tensor in params.tensors.items():
                        sums[name] += tensor.data
                    averaged += 1
        if averaged:
            for name, tensor in params.tensors.items():
                tensor.data = sums[name] / averaged
    if ledger is not None:
        ledger.log_compute(stage, "global_train", None, 1.0, steps=epochs * n)
    return GlobalModelRecord(stage=stage, params=params, class_union=union,
                             strategy=strategy)


# ========================================================== federation driver

class FederationState:
    """Mutable world state threaded through the stages of one run."""

    def __init__(self, scenario: ScenarioConfig,
                 registry: ClassRegistry | None = None):
        self.scenario = scenario
        self.registry = registry or scenario.registry()
        self.schedule = StageSchedule(scenario, self.registry)
        self.clients: dict[int, ClientState] = {}
        self.store = ServerStore()
        self.ledger = Ledger()
        dist_ids = self.registry.ids_of(scenario.distillation.include_classes)
        self.store.dist_set = make_distillation_set(
            scenario.scene_spec(), scenario.distillation.num_volumes,
            dist_ids, derive_seed(scenario.seed, "distillation"), self.registry)

    # ------------------------------------------------------------- events

    def _client_data_seed(self, client_id: int) -> int:
        return derive_seed(self.scenario.seed, "client-data", client_id)

    def apply_events(self, stage) -> None:
        """Materialize adds, updates, and data losses for one stage."""
        for event in stage.events:
            if isinstance(event, AddClient):
                ids = tuple(sorted(self.registry.ids_of(event.classes)))
                seed = self._client_data_seed(event.client_id)
                dataset = make_client_dataset(
                    self.scenario.scene_spec(event.shift), ids,
                    event.num_samples, seed, self.registry,
                    client_id=event.client_id)
                self.clients[event.client_id] = ClientState(
                    client_id=event.client_id,
                    spec=spec_from_config(event.model),
                    annotated=ids, dataset=dataset, base_seed=seed,
                    shift=event.shift, num_samples=event.num_samples)
            elif isinstance(event, UpdateClient):
                client = self.clients[event.client_id]
                if not client.data_available:
                    raise DataUnavailable(
                        f"client {client.client_id} cannot extend lost data")
                added = self.registry.ids_of(event.added_classes)
                ids = tuple(sorted(set(client.annotated) | set(added)))
                n = client.num_samples + event.added_samples
                # Same base seed: existing scenes stay identical, the new
                # classes gain masks, extra samples append at the end.
                client.dataset = make_client_dataset(
                    self.scenario.scene_spec(client.shift), ids, n,
                    client.base_seed, self.registry, client_id=client.client_id)
                client.annotated = ids
                client.num_samples = n
                client.dataset_version += 1
            elif isinstance(event, DropData):
                client = self.clients[event.client_id]
                client.dataset = None
                client.data_available = False

    # --------------------------------------------------------------- mmds

    def run_stage_mmds(self, stage_index: int, *, local_epochs: int | None = None,
                       distill_epochs: int | None = None,
                       jobs: int = 1) -> GlobalModelRecord | None:
        """Steps 1-3 for one stage: train & upload participants, pseudo-label,
        distill, broadcast.  Non-participants are left untouched except for a
        refresh copy of the new global model."""
        scenario = self.scenario
        stage = scenario.stages[stage_index - 1]
        plan = self.schedule.plan(stage_index)
        self.apply_events(stage)
        if not plan.participant_ids:
            return self.store.global_record
        epochs = scenario.local_epochs if local_epochs is None else local_epochs
        d_epochs = (scenario.distill_epochs_for(stage_index)
                    if distill_epochs is None else distill_epochs)

        def job(cid: int) -> ModelParams:
            return _train_on_samples(
                self.clients[cid].spec, self.clients[cid].dataset.samples,
                epochs, derive_seed(scenario.seed, "train", stage_index, cid),
                self.registry)

        for cid in plan.participant_ids:
            client = self.clients[cid]
            if not client.data_available or client.dataset is None:
                raise DataUnavailable(f"client {cid} has no local data")
        if jobs > 1 and len(plan.participant_ids) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = {cid: pool.submit(job, cid)
                           for cid in plan.participant_ids}
            results = {cid: futures[cid].result()
                       for cid in plan.participant_ids}
        else:
            results = {cid: job(cid) for cid in plan.participant_ids}
        # Apply in client-id order so the ledger and store are reproducible
        # regardless of completion order.
        for cid in plan.participant_ids:
            client = self.clients[cid]
            client.params = results[cid]
            client.params_version = client.dataset_version
            self.ledger.log_compute(stage_index, "local_train", cid, 1.0,
                                    steps=epochs * len(client.dataset.samples))
            upload_model(client, self.store, self.ledger, stage_index)

        predictions = generate_pseudolabels(self.store, self.store.dist_set,
                                            self.registry, self.ledger,
                                            stage_index)
        pseudo = aggregate_predictions(predictions, plan.union_ids, self.registry)
        record = distill_global(
            self.store.dist_set, pseudo,
            spec_from_config(scenario.global_model), plan.union_ids,
            d_epochs, derive_seed(scenario.seed, "distill", stage_index),
            self.registry, self.ledger, stage_index)
        self.store.global_record = record
        nbytes = serialized_size(record.params)
        for cid in plan.active_ids:
            kind = "download" if cid in plan.participant_ids else "refresh"
            self.ledger.log_comm(stage_index, kind, cid, nbytes)
            self.clients[cid].received_global = record
        return record

    # ------------------------------------------------------------ baseline

    def run_stage_mapcr(self, stage_index: int, *, rounds: int | None = None,
                        epochs_per_round: int | None = None
                        ) -> GlobalModelRecord:
        """Round-based averaging over every active client for one stage."""
        scenario = self.scenario
        stage = scenario.stages[stage_index - 1]
        plan = self.schedule.plan(stage_index)
        self.apply_events(stage)
        rounds = scenario.rounds if rounds is None else rounds
        epr = (scenario.epochs_per_round if epochs_per_round is None
               else epochs_per_round)
        active = [self.clients[cid] for cid in plan.active_ids]
        if not active:
            raise ValidationError(f"stage {stage_index} has no clients")
        for client in active:
            if not client.data_available or client.dataset is None:
                raise DataUnavailable(
                    f"client {client.client_id} has no local data; "
                    f"round-based averaging cannot proceed")
        first = active[0].spec
        for client in active[1:]:
            if not client.spec.same_architecture(first):
                raise HeterogeneousArchitectures(
                    f"client {client.client_id} runs {client.spec.arch} "
                    f"h{client.spec.hidden}x{client.spec.layers}, client "
                    f"{active[0].client_id} runs {first.arch} "
                    f"h{first.hidden}x{first.layers}")

        if self.store.global_record is None:
            init_spec = dataclasses.replace(
                first, init_seed=derive_seed(scenario.seed, "avg-init"))
            global_params = build_model(init_spec)
        else:
            global_params = self.store.global_record.params
        nbytes = serialized_size(global_params)
        weights = np.array([len(c.dataset.samples) for c in active], dtype=float)
        weights /= weights.sum()
        for r in range(rounds):
            locals_: list[ModelParams] = []
            for client in active:
                self.ledger.log_comm(stage_index, "download",
                                     client.client_id, nbytes)
                trained = _continue_on_samples(
                    global_params.clone(), client.dataset.samples, epr,
                    derive_seed(scenario.seed, "avg", stage_index, r,
                                client.client_id),
                    self.registry)
                locals_.append(trained)
                self.ledger.log_comm(stage_index, "upload", client.client_id,
                                     serialized_size(trained))
            global_params = average_params(locals_, weights)
        for client in active:
            self.ledger.log_compute(
                stage_index, "local_train", client.client_id, 1.0,
                steps=rounds * epr * len(client.dataset.samples))
        record = GlobalModelRecord(stage=stage_index, params=global_params,
                                   class_union=plan.union_ids,
                                   strategy="mapcr_fedavg")
        self.store.global_record = record
        for client in active:
            client.received_global = record
        return record


def average_params(models: list[ModelParams], weights) -> ModelParams:
    """Dataset-size-weighted parameter mean.

    Computed in anchored form p0 + sum_k w_k * (p_k - p0) so that
    averaging identical parameter sets returns them bit-for-bit — the
    zero-local-steps fixed point holds exactly, not just to rounding.
    """
    if not models:
        raise ValidationError("nothing to average")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(models):
        raise ValidationError(
            f"{len(w)} weights for {len(models)} models")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("weights must be non-negative and sum > 0")
    w = w / w.sum()
    base = models[0].clone()
    for name, p in base.tensors.items():
        acc = p.data.copy()
        for k in range(1, len(models)):
            delta = models[k].tensors[name].data - models[0].tensors[name].data
            acc = acc + w[k] * delta
        p.data = acc
    return base


# ======================================================= personalized serving

def personalized_infer(client: ClientState, volume,
                       registry: ClassRegistry) -> PredictionVolume:
    """Route per class: the client's own model where it was annotated,
    the global model everywhere else.  Channels are copied verbatim."""
    if client.received_global is None:
        raise MissingGlobalModel(
            f"client {client.client_id} never received a global model")
    union = tuple(sorted(client.received_global.class_union))
    local_ids = tuple(sorted(set(client.annotated) & set(union)))
    if local_ids and client.params is None:
        raise MissingLocalModel(
            f"client {client.client_id} has annotated classes but no "
            f"trained local model")
    global_pred = forward(client.received_global.params, volume, union, registry)
    if not local_ids:
        return global_pred
    local_pred = forward(client.params, volume, local_ids, registry)
    channels = []
    for c in union:
        if c in local_ids:
            channels.append(local_pred.channel(c))
        else:
            channels.append(global_pred.channel(c))
    probs = T.Tensor(np.stack(channels, axis=0))
    return PredictionVolume(class_ids=union, probs=probs)
