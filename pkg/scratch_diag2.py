"""Scratch: why is kidney hard? (not shipped)"""
import copy
import sys
import time

import numpy as np

import fedstill.federation as F
import fedstill.losses as L
from fedstill.models import forward
from fedstill.scenegen import parse_scenario, make_client_dataset, DomainShift
from fedstill.seeding import derive_seed

from scratch_calibrate import DOC


def run(doc, label, names, shift, epochs=300):
    scenario = parse_scenario(doc)
    reg = scenario.registry()
    ids = reg.ids_of(names)
    spec = scenario.scene_spec(shift)
    train = make_client_dataset(spec, ids, 12, derive_seed(0, "diag-train"), reg)
    test = make_client_dataset(spec, ids, 6, derive_seed(0, "diag-test"), reg)
    t0 = time.time()
    params = F.run_centralized(train.samples, F.spec_from_config(scenario.global_model),
                               epochs, derive_seed(0, "diag"), reg)
    per = {}
    for vol, labels in test.samples:
        pred = forward(params, vol, sorted(labels.annotated), reg)
        for c in sorted(labels.annotated):
            per.setdefault(reg.name_of(c), []).append(
                L.dice_score(pred.channel(c) >= 0.5, labels.masks[c]))
    print(f"{label} ({time.time()-t0:.0f}s): " +
          " ".join(f"{k}={np.mean(v):.3f}" for k, v in sorted(per.items())))


shift = DomainShift(gain=1.03, bias=-0.01)

# A: hole painted at kidney intensity (invisible lesion, same masks)
doc_a = copy.deepcopy(DOC)
for c in doc_a["classes"]:
    if c["name"] == "kidney_lesion":
        c["intensity"] = 0.78
run(doc_a, "A invisible-hole", ["kidney", "kidney_lesion"], shift)

# B: no bone/vessel clutter in scenes
doc_b = copy.deepcopy(DOC)
doc_b["classes"] = [c for c in doc_b["classes"] if c["name"] not in ("bone", "vessel")]
doc_b["evaluation"]["ood"]["classes"] = ["liver", "kidney", "spleen", "pancreas"]
run(doc_b, "B no-clutter     ", ["kidney", "kidney_lesion"], shift)

# C: both changes at once
doc_c = copy.deepcopy(doc_b)
for c in doc_c["classes"]:
    if c["name"] == "kidney_lesion":
        c["intensity"] = 0.78
run(doc_c, "C both           ", ["kidney", "kidney_lesion"], shift)

# D: baseline repeat for reference
run(DOC, "D baseline       ", ["kidney", "kidney_lesion"], shift)
