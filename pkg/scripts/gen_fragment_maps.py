#!/usr/bin/env python3
"""Write the shipped MMA fragment maps from the instruction-set ownership rules.

Volta m8n8k4 tiles are stacked per quadpair: quadpair q owns rows 8q..8q+7 of
the warp-level A and C tiles and columns 8q..8q+7 of the warp-level B tile.
"""

import argparse
import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "tiledattn" / "data" / "fragments"


def m16n8k16():
    a, b, c = [], [], []
    for lane in range(32):
        g, tig = lane >> 2, lane & 3
        a.append([[g + 8 * ((i >> 1) & 1), 2 * tig + (i & 1) + 8 * (i >= 4)] for i in range(8)])
        b.append([[2 * tig + (i & 1) + 8 * (i >= 2), g] for i in range(4)])
        c.append([[g + 8 * (i >= 2), 2 * tig + (i & 1)] for i in range(4)])
    return {
        "instr": "m16n8k16",
        "mma_shape": [16, 8, 16],
        "quadpairs": None,
        "roles": {"A": {"shape": [16, 16], "threads": a}, "B": {"shape": [16, 8], "threads": b},
                  "C": {"shape": [16, 8], "threads": c}},
    }


def _qp(lane):
    return (lane % 16) // 4


def m8n8k4(acc):
    a, b, c = [], [], []
    for lane in range(32):
        q, tig, hi = _qp(lane), lane % 4, 4 * (lane >= 16)
        base = 8 * q
        a.append([[base + tig + hi, i] for i in range(4)])
        b.append([[i, base + tig + hi] for i in range(4)])
        if acc == "f16":
            c.append([[base + tig + hi, i] for i in range(8)])
        else:
            c.append([[base + (tig & 1) + (i & 2) + hi, (i & 4) + (tig & 2) + (i & 1)] for i in range(8)])
    return {
        "instr": f"m8n8k4_{acc}acc",
        "mma_shape": [8, 8, 4],
        "quadpairs": [[4 * q + j for j in range(4)] + [4 * q + 16 + j for j in range(4)] for q in range(4)],
        "roles": {"A": {"shape": [32, 4], "threads": a}, "B": {"shape": [4, 32], "threads": b},
                  "C": {"shape": [32, 8], "threads": c}},
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for doc in (m16n8k16(), m8n8k4("f32"), m8n8k4("f16")):
        doc = {"schema_version": 1, **doc}
        path = args.out / f"{doc['instr']}.json"
        path.write_text(json.dumps(doc, separators=(",", ":")) + "\n")
        print(path)


if __name__ == "__main__":
    main()
