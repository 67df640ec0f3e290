"""Regenerate ``src/gridest/data/grid_d.json``, the single-phase grid D fixture.

Reduction of the IEEE 13-node feeder used here:

* series impedance of each line configuration = positive-sequence value
  mean(self) - mean(mutual) of its phase impedance matrix (ohm/mile); one- and
  two-phase laterals use the self term / the same formula over present phases,
  multiplied by 3 / 1.5 so that a balanced equivalent load sees the voltage drop
  of the real lateral (it carries 3 / 1.5 times the per-phase current);
* regulator 650-632 ignored (line 650-632 modeled as its 2000 ft of config 601);
* transformer XFM-1 (633-634) as its 1.1% + j2% series impedance on 500 kVA;
* switch 671-692 as an 800 ft section of config 601 (a zero-impedance link
  would dominate the admittance matrix);
* loads: every non-generator node serves a random number of customers between
  5 and 15, each drawing 35 kW, with a random lagging power factor between 0.85
  and 0.95 per node (fixed seed).  The customer size makes the mean current
  magnitude at load nodes about 0.03 p.u., so that a noise level of 1e-5 p.u. is
  3 sigma = 0.1% of the average load current;
* buses 646 and 611 become controllable generators (300 kW nominal, 1.0 p.u.);
* added ties 650-646 (2500 ft of config 601) and 671-611 (X/R of config 605,
  |y| = 9.8 p.u.);
* base 4.16 kV, 12.5 MVA, which puts the Frobenius norm of Y near 100.
  No shunts, so Y is Laplacian.
"""
import json
from pathlib import Path

import numpy as np

MILE = 5280.0
KV = 4.16
S_BASE = 12.5

Z_CFG = {
    601: (0.3465 + 1.0179j + 0.3375 + 1.0478j + 0.3414 + 1.0348j) / 3
    - (0.1560 + 0.5017j + 0.1580 + 0.4236j + 0.1535 + 0.3849j) / 3,
    602: (0.7526 + 1.1814j + 0.7475 + 1.1983j + 0.7436 + 1.2112j) / 3
    - (0.1580 + 0.4236j + 0.1560 + 0.5017j + 0.1535 + 0.3849j) / 3,
    603: (1.3294 + 1.3471j + 1.3238 + 1.3569j) / 2 - (0.2066 + 0.4591j),
    604: (1.3238 + 1.3569j + 1.3294 + 1.3471j) / 2 - (0.2066 + 0.4591j),
    605: 1.3292 + 1.3475j,
    606: (0.7982 + 0.4463j + 0.7891 + 0.4041j + 0.7982 + 0.4463j) / 3
    - (0.3192 + 0.0328j + 0.2849 - 0.0143j + 0.3192 + 0.0328j) / 3,
    607: 1.3425 + 0.5124j,
}

PHASE_FACTOR = {601: 1.0, 602: 1.0, 603: 1.5, 604: 1.5, 605: 3.0, 606: 1.0, 607: 3.0}

# id: (IEEE node, kind)
BUSES = {
    1: (650, "slack"), 2: (632, "load"), 3: (633, "load"), 4: (634, "load"),
    5: (645, "load"), 6: (646, "generator"), 7: (671, "load"), 8: (680, "load"),
    9: (684, "load"), 10: (611, "generator"), 11: (652, "load"), 12: (692, "load"),
    13: (675, "load"),
}
SEGMENTS = [  # from, to, config, feet
    (1, 2, 601, 2000), (2, 3, 602, 500), (2, 5, 603, 500), (5, 6, 603, 300),
    (2, 7, 601, 2000), (7, 9, 604, 300), (9, 10, 605, 300), (9, 11, 607, 800),
    (12, 13, 606, 500), (7, 8, 601, 1000), (7, 12, 601, 800), (1, 6, 601, 2500),
]
CUSTOMER_KW = 35.0
CUSTOMERS = (5, 15)
POWER_FACTOR = (0.85, 0.95)
SEED = 7


def build() -> dict:
    zb = KV**2 / S_BASE
    lines = []
    for f, t, c, ft in SEGMENTS:
        lines.append((f, t, 1.0 / (Z_CFG[c] * PHASE_FACTOR[c] * ft / MILE / zb)))
    lines.append((3, 4, 1.0 / ((0.011 + 0.02j) * S_BASE / 0.5)))
    z605 = Z_CFG[605]
    lines.append((7, 10, 9.8 * np.conj(z605) / abs(z605)))

    rng = np.random.default_rng(SEED)
    buses = []
    for bid, (node, kind) in BUSES.items():
        row = {"id": bid, "kind": kind, "ieee_node": node, "v_limits": [0.95, 1.05]}
        if kind == "slack":
            row["v_set"] = 1.0
        elif kind == "generator":
            row.update(v_set=1.0, p_set=0.3 / S_BASE, p_limits=[0.0, 1.5 / S_BASE],
                       q_limits=[-1.5 / S_BASE, 1.5 / S_BASE])
        else:
            count = int(rng.integers(CUSTOMERS[0], CUSTOMERS[1] + 1))
            pf = rng.uniform(*POWER_FACTOR)
            p = count * CUSTOMER_KW / 1000 / S_BASE
            row["customers"] = count
            row["demand"] = [p, p * np.tan(np.arccos(pf))]
        buses.append(row)
    return {
        "name": "grid_d",
        "notes": __doc__.strip(),
        "base": {"mva": S_BASE, "kv": KV},
        "buses": buses,
        "lines": [{"from": f, "to": t, "y": [y.real, y.imag]} for f, t, y in lines],
        "shunts": [],
    }


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "gridest" / "data" / "grid_d.json"
    out.write_text(json.dumps(build(), indent=1) + "\n")
    print(f"wrote {out}")
