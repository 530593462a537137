"""Scratch: seed variance of the kidney specialist (not shipped)."""
import copy
import time

import numpy as np

import fedstill.federation as F
import fedstill.losses as L
from fedstill.models import forward
from fedstill.scenegen import parse_scenario, make_client_dataset, DomainShift
from fedstill.seeding import derive_seed

from scratch_calibrate import DOC

doc = copy.deepcopy(DOC)
for c in doc["classes"]:
    if c["name"] == "kidney_lesion":
        c["intensity"] = 0.99
        c["size"] = [0.8, 1.2]
    elif c["name"] == "kidney":
        c["size"] = [2.8, 3.8]
    elif c["name"] == "bone":
        c["intensity"] = 0.20
    elif c["name"] == "spleen":
        c["intensity"] = 0.35
    elif c["name"] == "liver":
        c["intensity"] = 0.50
    elif c["name"] == "vessel":
        c["intensity"] = 0.645
    elif c["name"] == "pancreas":
        c["intensity"] = 0.91

scenario = parse_scenario(doc)
reg = scenario.registry()
ids = reg.ids_of(["kidney", "kidney_lesion"])
spec = scenario.scene_spec(DomainShift(gain=1.03, bias=-0.01))

for trial in range(5):
    train = make_client_dataset(spec, ids, 12, derive_seed(trial, "var-train"), reg)
    test = make_client_dataset(spec, ids, 6, derive_seed(trial, "var-test"), reg)
    t0 = time.time()
    params = F.run_centralized(train.samples, F.spec_from_config(scenario.global_model),
                               300, derive_seed(trial, "var-init"), reg)
    per = {}
    for vol, labels in test.samples:
        pred = forward(params, vol, sorted(labels.annotated), reg)
        for c in sorted(labels.annotated):
            per.setdefault(reg.name_of(c), []).append(
                L.dice_score(pred.channel(c) >= 0.5, labels.masks[c]))
    print(f"trial {trial} ({time.time()-t0:.0f}s): " +
          " ".join(f"{k}={np.mean(v):.3f}" for k, v in sorted(per.items())))
