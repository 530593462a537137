"""Protocol engine: storage semantics, ledger closed forms, aggregation,
averaging baseline, personalization routing, and determinism."""

import dataclasses

import numpy as np
import pytest

import fedstill.federation as F
import fedstill.tensor as T
from fedstill.errors import (DataUnavailable, EmptyDistillationSet, EmptyStore,
                             HeterogeneousArchitectures, MissingGlobalModel,
                             MissingLocalModel, OneTimeInferenceViolation,
                             UncoveredClass, UntrainedClient)
from fedstill.models import (ModelParams, PredictionVolume, SegModelSpec,
                             build_model, forward, serialize)
from fedstill.scenegen import DistillationSet, parse_scenario
from fedstill.seeding import derive_seed


def mini_doc(**over):
    doc = {
        "name": "mini",
        "seed": 7,
        "volume": {"depth": 1, "height": 16, "width": 16},
        "background_intensity": 0.1,
        "noise_sigma": 0.0,
        "classes": [
            {"name": "liver", "kind": "organ", "shape": "ellipsoid",
             "size": [2.0, 3.0], "intensity": 0.9},
            {"name": "spleen", "kind": "organ", "shape": "box",
             "size": [1.0, 2.0], "intensity": 0.5},
        ],
        "distillation": {"num_volumes": 3,
                         "include_classes": ["liver", "spleen"]},
        "local_epochs": 2,
        "distill_epochs": 2,
        "rounds": 3,
        "stages": [
            {"stage": 1, "events": [
                {"kind": "add_client", "id": 1, "classes": ["liver"],
                 "num_samples": 3},
                {"kind": "add_client", "id": 2, "classes": ["spleen"],
                 "num_samples": 4},
            ]},
            {"stage": 2, "events": [
                {"kind": "update_client", "id": 1,
                 "added_classes": ["spleen"], "added_samples": 1},
            ]},
        ],
    }
    doc.update(over)
    return doc


def fresh_state(**over) -> F.FederationState:
    return F.FederationState(parse_scenario(mini_doc(**over)))


# ------------------------------------------------------------------ schedule

def test_schedule_membership_and_union():
    state = fresh_state()
    p1 = state.schedule.plan(1)
    p2 = state.schedule.plan(2)
    assert p1.participant_ids == (1, 2)
    assert p1.active_ids == (1, 2)
    assert len(p1.union_ids) == 2
    assert p2.participant_ids == (1,)
    assert p2.active_ids == (1, 2)
    # spleen was already introduced at stage 1, so stage 2 adds no classes
    assert p2.new_class_ids == ()
    assert set(p2.union_ids) >= set(p1.union_ids)


# ---------------------------------------------------------------- local runs

def test_train_local_is_deterministic():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    client = state.clients[1]
    seed = derive_seed(7, "train", 1, 1)
    a = F.train_local(client, 2, seed, state.registry)
    b = F.train_local(client, 2, seed, state.registry)
    assert serialize(a) == serialize(b)


def test_train_local_logs_one_unit():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    F.train_local(state.clients[1], 1, 99, state.registry, state.ledger, stage=1)
    (event,) = state.ledger.compute
    assert event.kind == "local_train"
    assert event.units == 1.0
    assert event.steps == 1 * 3


def test_train_local_zero_epochs_is_initialization():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    client = state.clients[1]
    init = build_model(dataclasses.replace(
        client.spec, init_seed=derive_seed(42, "init")))
    trained = F.train_local(client, 0, 42, state.registry)
    assert serialize(trained) == serialize(init)


def test_train_local_without_data():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    client = state.clients[2]
    client.data_available = False
    client.dataset = None
    with pytest.raises(DataUnavailable):
        F.train_local(client, 1, 0, state.registry)


def test_centralized_on_one_client_matches_local_run():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    client = state.clients[1]
    local = F.train_local(client, 2, 17, state.registry)
    pooled = F.run_centralized(client.dataset.samples, client.spec, 2, 17,
                               state.registry)
    assert serialize(local) == serialize(pooled)


# -------------------------------------------------------------------- store

def test_upload_requires_training():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    with pytest.raises(UntrainedClient):
        F.upload_model(state.clients[1], state.store)


def test_upload_add_and_replace():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    client = state.clients[1]
    F.train_local(client, 1, 1, state.registry)
    F.upload_model(client, state.store, state.ledger, stage=1)
    assert len(state.store) == 1
    first_blob = state.store.get(1).blob
    F.train_local(client, 1, 2, state.registry)
    F.upload_model(client, state.store, state.ledger, stage=2)
    assert len(state.store) == 1
    entry = state.store.get(1)
    assert entry.stage == 2
    assert entry.blob != first_blob
    assert [e.kind for e in state.ledger.comm] == ["upload", "upload"]
    assert state.ledger.comm[0].nbytes == len(first_blob)


def test_upload_rejects_stale_params():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    client = state.clients[1]
    F.train_local(client, 1, 1, state.registry)
    state.apply_events(state.scenario.stages[1])  # update bumps dataset version
    with pytest.raises(UntrainedClient, match="stale"):
        F.upload_model(client, state.store)


def test_unchanged_client_store_bytes_survive_other_uploads():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    for cid in (1, 2):
        F.train_local(state.clients[cid], 1, cid, state.registry)
        F.upload_model(state.clients[cid], state.store, stage=1)
    kept = state.store.get(2).blob
    F.train_local(state.clients[1], 1, 10, state.registry)
    F.upload_model(state.clients[1], state.store, stage=2)
    assert state.store.get(2).blob == kept
    assert state.store.get(2).blob is kept


def test_update_client_keeps_old_scenes_and_extends_labels():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    before = [vol.intensities.copy()
              for vol, _ in state.clients[1].dataset.samples]
    old_annotated = set(state.clients[1].annotated)
    state.apply_events(state.scenario.stages[1])
    client = state.clients[1]
    assert len(client.dataset.samples) == 4
    assert set(client.annotated) > old_annotated
    for old, (vol, labels) in zip(before, client.dataset.samples):
        assert np.array_equal(old, vol.intensities)
        assert labels.annotated == frozenset(client.annotated)
    assert client.dataset_version == 2


# ------------------------------------------------------------- pseudo-labels

def run_stage_one(state, epochs=1):
    state.apply_events(state.scenario.stages[0])
    for cid in (1, 2):
        F.train_local(state.clients[cid], epochs,
                      derive_seed(7, "train", 1, cid), state.registry,
                      state.ledger, stage=1)
        F.upload_model(state.clients[cid], state.store, state.ledger, stage=1)


def test_pseudolabels_cover_own_classes_only():
    state = fresh_state()
    run_stage_one(state)
    preds = F.generate_pseudolabels(state.store, state.store.dist_set,
                                    state.registry, state.ledger, stage=1)
    assert set(preds) == {1, 2}
    assert preds[1][0].class_ids == tuple(state.clients[1].annotated)
    assert preds[2][0].class_ids == tuple(state.clients[2].annotated)
    assert len(preds[1]) == len(state.store.dist_set)


def test_pseudolabel_inference_is_once_per_stage():
    state = fresh_state()
    run_stage_one(state)
    F.generate_pseudolabels(state.store, state.store.dist_set, state.registry,
                            state.ledger, stage=1)
    with pytest.raises(OneTimeInferenceViolation):
        F.generate_pseudolabels(state.store, state.store.dist_set,
                                state.registry, state.ledger, stage=1)
    # a later stage is a new inference budget
    F.generate_pseudolabels(state.store, state.store.dist_set, state.registry,
                            state.ledger, stage=2)


def test_pseudolabel_preconditions():
    state = fresh_state()
    with pytest.raises(EmptyStore):
        F.generate_pseudolabels(state.store, state.store.dist_set,
                                state.registry)
    run_stage_one(state)
    hollow = DistillationSet(volumes=[], coverage=frozenset())
    with pytest.raises(EmptyDistillationSet):
        F.generate_pseudolabels(state.store, hollow, state.registry)


def test_inference_units_are_fraction_of_training():
    state = fresh_state()
    run_stage_one(state, epochs=2)
    F.generate_pseudolabels(state.store, state.store.dist_set, state.registry,
                            state.ledger, stage=1)
    (infer,) = [e for e in state.ledger.compute
                if e.kind == "server_inference"]
    # 2 models x 3 volumes = 6 forwards; mean local steps = (6 + 8) / 2 = 7
    assert infer.steps == 6
    assert infer.units == pytest.approx(6 / 7)


# -------------------------------------------------------------- aggregation

def const_pred(class_ids, arrays):
    return PredictionVolume(class_ids=tuple(class_ids),
                            probs=T.Tensor(np.stack(arrays, axis=0)))


def test_aggregation_single_coverage_is_verbatim():
    state = fresh_state()
    run_stage_one(state)
    preds = F.generate_pseudolabels(state.store, state.store.dist_set,
                                    state.registry, state.ledger, stage=1)
    union = state.schedule.plan(1).union_ids
    pseudo = F.aggregate_predictions(preds, union, state.registry)
    liver_id = state.registry.id_of("liver")
    spleen_id = state.registry.id_of("spleen")
    for v, volume_pseudo in enumerate(pseudo):
        assert volume_pseudo.sources[liver_id] == 1
        assert volume_pseudo.sources[spleen_id] == 2
        assert np.array_equal(volume_pseudo.channel(liver_id),
                              preds[1][v].channel(liver_id))
        assert np.array_equal(volume_pseudo.channel(spleen_id),
                              preds[2][v].channel(spleen_id))


def test_aggregation_picks_lowest_impurity_per_volume():
    flat = np.full((1, 2, 2), 0.5)        # maximal ambiguity
    sharp = np.full((1, 2, 2), 0.9)       # much more confident
    preds = {
        4: [const_pred([0], [flat]), const_pred([0], [sharp])],
        9: [const_pred([0], [sharp]), const_pred([0], [flat])],
    }
    pseudo = F.aggregate_predictions(preds, [0], make_registry_ids(1))
    assert pseudo[0].sources[0] == 9   # sharp wins on volume 0
    assert pseudo[1].sources[0] == 4   # and on volume 1 the other way round
    assert np.array_equal(pseudo[0].targets[0], sharp)
    assert np.array_equal(pseudo[1].targets[0], sharp)


def test_aggregation_tie_goes_to_lowest_client_id():
    same = np.full((1, 2, 2), 0.7)
    preds = {
        12: [const_pred([0], [same])],
        3: [const_pred([0], [same.copy()])],
    }
    pseudo = F.aggregate_predictions(preds, [0], make_registry_ids(1))
    assert pseudo[0].sources[0] == 3


def test_aggregation_order_depends_only_on_ranking():
    # The winner is defined by the ordering of impurity scores, so any
    # monotone rescaling of the masks' sharpness keeps the selection.
    mild = np.full((1, 2, 2), 0.6)
    strong = np.full((1, 2, 2), 0.95)
    for a, b in [(mild, strong), (strong, mild)]:
        preds = {1: [const_pred([0], [a])], 2: [const_pred([0], [b])]}
        pseudo = F.aggregate_predictions(preds, [0], make_registry_ids(1))
        want = 1 if a is strong else 2
        assert pseudo[0].sources[0] == want


def test_aggregation_uncovered_class():
    preds = {1: [const_pred([0], [np.full((1, 2, 2), 0.5)])]}
    registry = make_registry_ids(2)
    with pytest.raises(UncoveredClass, match="c1"):
        F.aggregate_predictions(preds, [0, 1], registry)


def make_registry_ids(n):
    from fedstill.models import ClassRegistry
    return ClassRegistry([f"c{i}" for i in range(n)], seed=0)


# ------------------------------------------------------------- distillation

def test_distill_global_zero_epochs_is_seeded_init():
    state = fresh_state()
    run_stage_one(state)
    preds = F.generate_pseudolabels(state.store, state.store.dist_set,
                                    state.registry)
    union = state.schedule.plan(1).union_ids
    pseudo = F.aggregate_predictions(preds, union, state.registry)
    student = F.spec_from_config(state.scenario.global_model)
    rec = F.distill_global(state.store.dist_set, pseudo, student, union,
                           0, 7, state.registry, stage=1)
    want = build_model(dataclasses.replace(
        student, init_seed=derive_seed(7, "global-init", 1)))
    assert serialize(rec.params) == serialize(want)
    assert rec.class_union == union


def test_distill_global_rejects_missing_coverage():
    state = fresh_state()
    run_stage_one(state)
    preds = F.generate_pseudolabels(state.store, state.store.dist_set,
                                    state.registry)
    union = state.schedule.plan(1).union_ids
    pseudo = F.aggregate_predictions(preds, union[:1], state.registry)
    student = F.spec_from_config(state.scenario.global_model)
    with pytest.raises(UncoveredClass):
        F.distill_global(state.store.dist_set, pseudo, student, union,
                         1, 7, state.registry)


# ------------------------------------------------------------- mmds stages

def test_mmds_ledger_matches_closed_forms():
    state = fresh_state()
    state.run_stage_mmds(1, local_epochs=0, distill_epochs=0)
    state.run_stage_mmds(2, local_epochs=0, distill_epochs=0)
    totals = F.ledger_totals(state.ledger, "mmds", state.schedule)
    assert totals[1]["communications"] == 4 == totals[1]["expected_communications"]
    assert totals[2]["communications"] == 2 == totals[2]["expected_communications"]
    assert totals[1]["refresh"] == 0
    assert totals[2]["refresh"] == 1      # client 2 gets a courtesy copy
    # compute: participants + one distillation + measured inference
    eps1 = totals[1]["inference_units"]
    assert totals[1]["compute_units"] == pytest.approx(2 + 1 + eps1)
    assert totals[2]["train_units"] == 2.0


def test_mmds_comm_independent_of_round_budget():
    ledgers = []
    for rounds in (1, 10, 1000):
        state = fresh_state(rounds=rounds)
        state.run_stage_mmds(1, local_epochs=0, distill_epochs=0)
        state.run_stage_mmds(2, local_epochs=0, distill_epochs=0)
        totals = F.ledger_totals(state.ledger)
        ledgers.append([totals[t]["communications"] for t in sorted(totals)])
    assert ledgers[0] == ledgers[1] == ledgers[2]


def test_mmds_store_size_tracks_membership():
    state = fresh_state()
    state.run_stage_mmds(1, local_epochs=0, distill_epochs=0)
    assert len(state.store) == len(state.schedule.plan(1).active_ids)
    state.run_stage_mmds(2, local_epochs=0, distill_epochs=0)
    assert len(state.store) == len(state.schedule.plan(2).active_ids)


def test_mmds_reuses_stored_models_of_absent_clients():
    state = fresh_state()
    state.run_stage_mmds(1, local_epochs=1, distill_epochs=0)
    kept = state.store.get(2).blob
    state.run_stage_mmds(2, local_epochs=1, distill_epochs=0)
    assert state.store.get(2).blob == kept


def test_mmds_tolerates_nonparticipant_data_loss():
    doc = mini_doc()
    doc["stages"][1]["events"].append({"kind": "drop_data", "id": 2})
    state = F.FederationState(parse_scenario(doc))
    state.run_stage_mmds(1, local_epochs=1, distill_epochs=1)
    record = state.run_stage_mmds(2, local_epochs=1, distill_epochs=1)
    assert record is not None
    assert not state.clients[2].data_available
    assert len(state.store) == 2


def test_mmds_empty_stage_changes_nothing():
    doc = mini_doc()
    doc["stages"].append({"stage": 3, "events": []})
    state = F.FederationState(parse_scenario(doc))
    state.run_stage_mmds(1, local_epochs=0, distill_epochs=0)
    before = state.store.global_record
    n_comm = len(state.ledger.comm)
    state.run_stage_mmds(2, local_epochs=0, distill_epochs=0)
    record = state.run_stage_mmds(3)
    assert record is state.store.global_record
    assert len(state.ledger.comm) > n_comm  # stage 2 logged, stage 3 did not
    assert not [e for e in state.ledger.comm if e.stage == 3]


def test_mmds_parallel_jobs_bit_identical():
    serial = fresh_state()
    serial.run_stage_mmds(1, local_epochs=1, distill_epochs=1, jobs=1)
    threaded = fresh_state()
    threaded.run_stage_mmds(1, local_epochs=1, distill_epochs=1, jobs=4)
    assert (serialize(serial.store.global_record.params) ==
            serialize(threaded.store.global_record.params))
    for cid in (1, 2):
        assert serial.store.get(cid).blob == threaded.store.get(cid).blob


# ---------------------------------------------------------------- baseline

def scalar_params(values):
    spec = SegModelSpec(arch="pixel_mlp")
    tensors = {"w": T.Tensor(np.asarray(values, dtype=np.float64),
                             requires_grad=True)}
    return ModelParams(spec=spec, tensors=tensors)


def test_average_params_equal_weights():
    avg = F.average_params([scalar_params([1.0, 3.0]),
                            scalar_params([3.0, 5.0])], [1, 1])
    assert np.array_equal(avg.tensors["w"].data, [2.0, 4.0])


def test_average_params_weighted():
    avg = F.average_params([scalar_params([0.0]), scalar_params([4.0])], [1, 3])
    assert avg.tensors["w"].data[0] == 3.0


def test_average_params_identical_is_exact_fixed_point():
    p = scalar_params([0.1, 0.7, -2.5])
    avg = F.average_params([p.clone(), p.clone(), p.clone()], [1, 3, 5])
    assert np.array_equal(avg.tensors["w"].data, p.tensors["w"].data)


def test_mapcr_zero_step_rounds_keep_global_fixed():
    state = fresh_state()
    record = state.run_stage_mapcr(1, rounds=3, epochs_per_round=0)
    first = state.clients[1].spec
    want = build_model(dataclasses.replace(
        first, init_seed=derive_seed(7, "avg-init")))
    assert serialize(record.params) == serialize(want)


def test_mapcr_comm_and_compute_closed_forms():
    state = fresh_state()
    state.run_stage_mapcr(1, rounds=4, epochs_per_round=0)
    totals = F.ledger_totals(state.ledger, "mapcr_fedavg", state.schedule,
                             rounds=4)
    assert totals[1]["communications"] == 2 * 2 * 4
    assert totals[1]["expected_communications"] == 16
    assert totals[1]["compute_units"] == 2.0


def test_mapcr_requires_all_data_available():
    doc = mini_doc()
    doc["stages"][1]["events"] = [{"kind": "drop_data", "id": 2}]
    state = F.FederationState(parse_scenario(doc))
    state.run_stage_mapcr(1, rounds=1, epochs_per_round=0)
    with pytest.raises(DataUnavailable):
        state.run_stage_mapcr(2, rounds=1, epochs_per_round=0)


def test_mapcr_rejects_mixed_architectures_but_mmds_runs():
    doc = mini_doc()
    doc["stages"][0]["events"][1]["model"] = {"arch": "pixel_mlp"}
    state = F.FederationState(parse_scenario(doc))
    with pytest.raises(HeterogeneousArchitectures):
        state.run_stage_mapcr(1, rounds=1, epochs_per_round=0)
    hetero = F.FederationState(parse_scenario(doc))
    record = hetero.run_stage_mmds(1, local_epochs=1, distill_epochs=1)
    assert record.class_union == hetero.schedule.plan(1).union_ids


def test_mapcr_trains_and_improves_over_rounds():
    state = fresh_state()
    record = state.run_stage_mapcr(1, rounds=2, epochs_per_round=1)
    want_union = state.schedule.plan(1).union_ids
    assert record.class_union == want_union
    assert record.strategy == "mapcr_fedavg"


# ----------------------------------------------------------- personalization

def test_personalized_routing_is_bit_exact():
    state = fresh_state()
    state.run_stage_mmds(1, local_epochs=1, distill_epochs=1)
    client = state.clients[1]
    volume = state.store.dist_set.volumes[0]
    union = state.store.global_record.class_union
    combined = F.personalized_infer(client, volume, state.registry)
    local = forward(client.params, volume, client.annotated, state.registry)
    glob = forward(state.store.global_record.params, volume, union,
                   state.registry)
    for c in union:
        want = local.channel(c) if c in client.annotated else glob.channel(c)
        assert np.array_equal(combined.channel(c), want)
    assert combined.class_ids == union


def test_personalized_requires_global():
    state = fresh_state()
    state.apply_events(state.scenario.stages[0])
    with pytest.raises(MissingGlobalModel):
        F.personalized_infer(state.clients[1],
                             state.store.dist_set.volumes[0], state.registry)


def test_personalized_requires_local_when_annotated():
    state = fresh_state()
    state.run_stage_mmds(1, local_epochs=0, distill_epochs=0)
    client = state.clients[1]
    client.params = None
    with pytest.raises(MissingLocalModel):
        F.personalized_infer(client, state.store.dist_set.volumes[0],
                             state.registry)


def test_personalized_empty_local_set_is_global():
    state = fresh_state()
    state.run_stage_mmds(1, local_epochs=0, distill_epochs=0)
    ghost = F.ClientState(
        client_id=77, spec=state.clients[1].spec, annotated=(),
        dataset=None, base_seed=0, shift=state.clients[1].shift,
        num_samples=0, received_global=state.store.global_record)
    volume = state.store.dist_set.volumes[0]
    combined = F.personalized_infer(ghost, volume, state.registry)
    glob = forward(state.store.global_record.params, volume,
                   state.store.global_record.class_union, state.registry)
    assert np.array_equal(combined.probs.data, glob.probs.data)
