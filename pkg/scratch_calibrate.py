"""Scratch: end-to-end calibration of the five-stage scenario (not shipped)."""
import json
import sys
import time

import numpy as np

import fedstill.federation as F
import fedstill.losses as L
from fedstill.models import forward
from fedstill.scenegen import parse_scenario, make_client_dataset
from fedstill.seeding import derive_seed

def _arg(i, default):
    try:
        return int(sys.argv[i])
    except (IndexError, ValueError):
        return default


LOCAL_EPOCHS = _arg(1, 600)
DISTILL_EPOCHS = _arg(2, 300)
SEED = _arg(3, 0)
CENTRAL_EPOCHS = _arg(4, 200)

CLASSES = [
    {"name": "liver", "kind": "organ", "shape": "ellipsoid", "size": [3.5, 5.0], "intensity": 0.52},
    {"name": "kidney", "kind": "organ", "shape": "ellipsoid", "size": [2.8, 3.8], "intensity": 0.99},
    {"name": "spleen", "kind": "organ", "shape": "box", "size": [2.0, 3.0], "intensity": 0.38},
    {"name": "pancreas", "kind": "organ", "shape": "tube", "size": [2.0, 2.6], "intensity": 0.84},
    {"name": "bone", "kind": "organ", "shape": "box", "size": [1.2, 2.0], "intensity": 0.20},
    {"name": "liver_lesion", "kind": "lesion", "parent": "liver", "blobs": [1, 2], "size": [1.0, 1.5], "intensity": 0.70},
    {"name": "kidney_lesion", "kind": "lesion", "parent": "kidney", "blobs": [1, 1], "size": [0.8, 1.2], "intensity": 0.27},
]

DOC = {
    "name": "fivestage",
    "seed": SEED,
    "strategy": "mmds",
    "rounds": 1000,
    "local_epochs": LOCAL_EPOCHS,
    "distill_epochs": [min(150, DISTILL_EPOCHS), DISTILL_EPOCHS,
                       DISTILL_EPOCHS, DISTILL_EPOCHS, DISTILL_EPOCHS],
    "epochs_per_round": 1,
    "volume": {"depth": 1, "height": 36, "width": 36},
    "background_intensity": 0.08,
    "noise_sigma": 0.01,
    "classes": CLASSES,
    "global_model": {"arch": "patch_convnet", "hidden": 12, "layers": 2},
    "distillation": {"num_volumes": 14,
                     "include_classes": ["liver", "kidney", "spleen", "pancreas",
                                         "bone"]},
    "stages": [
        {"stage": 1, "events": [
            {"kind": "add_client", "id": 1, "classes": ["pancreas"], "num_samples": 16,
             "model": {"arch": "patch_convnet", "hidden": 12}, "domain_shift": {"gain": 1.0, "bias": 0.0}}]},
        {"stage": 2, "events": [
            {"kind": "add_client", "id": 2, "classes": ["spleen"], "num_samples": 12,
             "model": {"arch": "patch_convnet", "hidden": 12}, "domain_shift": {"gain": 0.97, "bias": 0.01}}]},
        {"stage": 3, "events": [
            {"kind": "add_client", "id": 3, "classes": ["kidney", "kidney_lesion"], "num_samples": 16,
             "model": {"arch": "patch_convnet", "hidden": 12}, "domain_shift": {"gain": 1.03, "bias": -0.01}}]},
        {"stage": 4, "events": [
            {"kind": "add_client", "id": 4, "classes": ["liver", "liver_lesion"], "num_samples": 12,
             "model": {"arch": "patch_convnet", "hidden": 12}, "domain_shift": {"gain": 0.98, "bias": -0.015}},
            {"kind": "add_client", "id": 5, "classes": ["liver", "kidney", "spleen"], "num_samples": 16,
             "model": {"arch": "patch_convnet", "hidden": 12}, "domain_shift": {"gain": 1.02, "bias": 0.015}}]},
        {"stage": 5, "events": [
            {"kind": "update_client", "id": 5, "added_classes": ["pancreas"], "added_samples": 4}]},
    ],
    "evaluation": {
        "samples_per_client": 8,
        "annotate": ["liver", "kidney", "spleen", "pancreas",
                     "liver_lesion", "kidney_lesion"],
        "ood": {"classes": ["liver", "kidney", "spleen", "pancreas", "bone"],
                "num_samples": 8, "domain_shift": {"gain": 1.05, "bias": 0.02}},
    },
}

ORGANS = ["liver", "kidney", "spleen", "pancreas"]
LESIONS = ["liver_lesion", "kidney_lesion"]


def eval_global(state, record, eval_sets):
    reg = state.registry
    per = {}
    for cid, ds in eval_sets.items():
        for vol, labels in ds.samples:
            ids = [c for c in record.class_union if c in labels.annotated]
            pred = forward(record.params, vol, ids, reg)
            for c in ids:
                per.setdefault(c, []).append(
                    L.dice_score(pred.channel(c) >= 0.5, labels.masks[c]))
    return {reg.name_of(c): float(np.mean(v)) for c, v in per.items()}


def main():
    scenario = parse_scenario(DOC)
    reg = scenario.registry()
    state = F.FederationState(scenario)
    annotate_ids = reg.ids_of(DOC["evaluation"]["annotate"])

    t0 = time.time()
    stage_scores = []
    eval_cache = {}
    for t in range(1, 6):
        ts = time.time()
        record = state.run_stage_mmds(t, local_epochs=LOCAL_EPOCHS)
        tr = time.time()
        # eval sets: per active client, own shift (cached across stages)
        eval_sets = {}
        for cid in state.schedule.plan(t).active_ids:
            if cid not in eval_cache:
                client = state.clients[cid]
                eval_cache[cid] = make_client_dataset(
                    scenario.scene_spec(client.shift), annotate_ids, 4,
                    derive_seed(scenario.seed, "eval", cid), reg, client_id=cid)
            eval_sets[cid] = eval_cache[cid]
        scores = eval_global(state, record, eval_sets)
        stage_scores.append(scores)
        print(f"stage {t} (run {tr-ts:.0f}s eval {time.time()-tr:.0f}s): " +
              " ".join(f"{k}={v:.3f}" for k, v in sorted(scores.items())))

    final = stage_scores[-1]
    organ_macro = np.mean([final[n] for n in ORGANS])
    lesion_macro = np.mean([final[n] for n in LESIONS if n in final])
    print(f"\nMMDS organ macro: {organ_macro:.3f}  lesion macro: {lesion_macro:.3f}  gap: {(organ_macro-lesion_macro)*100:.1f}pts")

    # no-forgetting deltas
    worst, worst_at = 0.0, ""
    for t in range(1, 5):
        prev, cur = stage_scores[t - 1], stage_scores[t]
        for name in prev:
            if name in cur and name in ORGANS:
                drop = (prev[name] - cur[name]) * 100
                if drop > worst:
                    worst, worst_at = drop, f"{name} s{t}->s{t+1}"
    print(f"worst organ stage-to-stage drop: {worst:.1f}pts ({worst_at})")

    # centralized comparison
    t0 = time.time()
    pooled = []
    for cid in sorted(state.clients):
        pooled.extend(state.clients[cid].dataset.samples)
    cen = F.run_centralized(pooled, F.spec_from_config(scenario.global_model),
                            CENTRAL_EPOCHS, derive_seed(scenario.seed, "central"),
                            reg)
    eval_sets = eval_cache
    record = state.store.global_record
    cen_rec = F.GlobalModelRecord(stage=5, params=cen,
                                  class_union=record.class_union,
                                  strategy="centralized")
    cen_scores = eval_global(state, cen_rec, eval_sets)
    cen_macro = np.mean([cen_scores[n] for n in ORGANS])
    print(f"centralized ({time.time()-t0:.0f}s) organ macro: {cen_macro:.3f} "
          f"(delta {abs(cen_macro-organ_macro)*100:.1f}pts) "
          + " ".join(f"{k}={v:.3f}" for k, v in sorted(cen_scores.items())))

    # OOD
    ood_cfg = scenario.evaluation.ood
    ood_ids = reg.ids_of(ood_cfg.classes)
    ood_ds = make_client_dataset(scenario.scene_spec(ood_cfg.shift), ood_ids,
                                 ood_cfg.num_samples,
                                 derive_seed(scenario.seed, "ood"), reg,
                                 client_id=999)
    per = {}
    for vol, labels in ood_ds.samples:
        ids = [c for c in record.class_union if c in labels.annotated]
        pred = forward(record.params, vol, ids, reg)
        for c in ids:
            per.setdefault(c, []).append(
                L.dice_score(pred.channel(c) >= 0.5, labels.masks[c]))
    ood_scores = {reg.name_of(c): float(np.mean(v)) for c, v in per.items()}
    ood_macro = np.mean(list(ood_scores.values()))
    infed_same_classes = np.mean([final[n] for n in ood_scores])
    print(f"OOD macro: {ood_macro:.3f} vs in-fed {infed_same_classes:.3f} "
          f"(delta {(infed_same_classes-ood_macro)*100:.1f}pts) "
          + " ".join(f"{k}={v:.3f}" for k, v in sorted(ood_scores.items())))


if __name__ == "__main__":
    main()
