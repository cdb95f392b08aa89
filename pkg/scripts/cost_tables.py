"""Memory and communication units for the full-size presets."""

import json

from _common import write_result

from spes.cost import cost_report
from spes.model import PRESETS

if __name__ == "__main__":
    out = {}
    for name, N in (("moe-1b", 8), ("moe-2b", 16), ("moe-7b", 4), ("moe-9b", 4)):
        r = cost_report(PRESETS[name], N)
        out[f"{name}/N={N}"] = r.to_dict()
        print(f"{name:7s} N={N:2d}  psi={r.psi:.3e} phi={r.phi:.3e}  comm ratio {r.comm_ratio:.3f}  memory ratio {r.memory_ratio:.3f}  upload/node {r.upload_spes_per_node:.3e}")
    print(write_result("cost", out))
