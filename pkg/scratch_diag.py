"""Scratch: single-client learnability diagnostics (not shipped)."""
import sys
import time

import numpy as np

import fedstill.federation as F
import fedstill.losses as L
from fedstill.models import forward
from fedstill.scenegen import parse_scenario, make_client_dataset, DomainShift
from fedstill.seeding import derive_seed

from scratch_calibrate import DOC

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 300
WHICH = sys.argv[2] if len(sys.argv) > 2 else "kidney"

SUBSETS = {
    "kidney": (["kidney", "kidney_lesion"], DomainShift(gain=1.03, bias=-0.01)),
    "liver": (["liver", "liver_lesion"], DomainShift(gain=0.98, bias=-0.015)),
    "multi": (["liver", "kidney", "spleen"], DomainShift(gain=1.02, bias=0.015)),
    "pancreas": (["pancreas"], DomainShift()),
}


def main():
    scenario = parse_scenario(DOC)
    reg = scenario.registry()
    names, shift = SUBSETS[WHICH]
    ids = reg.ids_of(names)
    spec = scenario.scene_spec(shift)
    train = make_client_dataset(spec, ids, 12, derive_seed(0, "diag-train"), reg)
    test = make_client_dataset(spec, ids, 6, derive_seed(0, "diag-test"), reg)

    t0 = time.time()
    params = F.run_centralized(train.samples, F.spec_from_config(scenario.global_model),
                               EPOCHS, derive_seed(0, "diag"), reg)
    per = {}
    for vol, labels in test.samples:
        pred = forward(params, vol, sorted(labels.annotated), reg)
        for c in sorted(labels.annotated):
            per.setdefault(reg.name_of(c), []).append(
                L.dice_score(pred.channel(c) >= 0.5, labels.masks[c]))
    print(f"{WHICH} {EPOCHS}ep ({time.time()-t0:.0f}s): " +
          " ".join(f"{k}={np.mean(v):.3f}" for k, v in sorted(per.items())))


if __name__ == "__main__":
    main()
