"""Scratch: revised ladder — bright kidney lesion (not shipped)."""
import copy

from scratch_calibrate import DOC
from scratch_diag2 import run
from fedstill.scenegen import DomainShift

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

run(doc, "kidney-client", ["kidney", "kidney_lesion"], DomainShift(gain=1.03, bias=-0.01))
run(doc, "liver-client ", ["liver", "liver_lesion"], DomainShift(gain=0.98, bias=-0.015))
run(doc, "multi-client ", ["liver", "kidney", "spleen"], DomainShift(gain=1.02, bias=0.015))
run(doc, "pancreas     ", ["pancreas"], DomainShift())
run(doc, "spleen       ", ["spleen"], DomainShift(gain=0.97, bias=0.01))
