#!/usr/bin/env python3
"""Writes the cluster payload golden files.

Each case is packed MSB-first: for every region, each word as B appearance
bits then ceil(log2(area)) pose bits; then every positive as B bits; the
stream is zero-padded to a whole byte.
"""
import json
import math
import pathlib

CASES = [
    {
        "name": "g1_single_region",
        "vocab_bits": 20,
        "regions": [{"bbox": [0, 0, 32, 32], "words": [[1, 0], [0xABCDE, 1023], [0xFFFFF, 512]]}],
        "positives": [],
    },
    {
        "name": "g2_regions_and_positives",
        "vocab_bits": 5,
        "regions": [
            {"bbox": [3, 4, 7, 6], "words": [[2, 7], [31, 0]]},
            {"bbox": [10, 10, 11, 11], "words": [[17, 0]]},
        ],
        "positives": [0, 31, 9],
    },
    {
        "name": "g3_full_frame",
        "vocab_bits": 16,
        "regions": [{"bbox": [0, 0, 640, 480], "words": [[0, 0], [4660, 123456], [65535, 307199]]}],
        "positives": [1],
    },
    {
        "name": "g4_one_bit_words",
        "vocab_bits": 1,
        "regions": [{"bbox": [5, 5, 7, 7], "words": [[0, 3], [1, 2]]}],
        "positives": [1],
    },
]


def pose_width(bbox):
    x0, y0, x1, y1 = bbox
    area = (x1 - x0) * (y1 - y0)
    return math.ceil(math.log2(area)) if area > 1 else 0


def field(value, width):
    return format(value, "b").zfill(width) if width else ""


def pack(case):
    b = case["vocab_bits"]
    bits = ""
    for r in case["regions"]:
        pw = pose_width(r["bbox"])
        for a, p in r["words"]:
            bits += field(a, b) + field(p, pw)
    for a in case["positives"]:
        bits += field(a, b)
    n = len(bits)
    bits += "0" * (-n % 8)
    return n, bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8))


def main():
    here = pathlib.Path(__file__).parent
    index = []
    for case in CASES:
        n, data = pack(case)
        (here / f"{case['name']}.bin").write_bytes(data)
        index.append(dict(case, bits=n))
    (here / "cases.json").write_text(json.dumps(index, indent=1) + "\n")


if __name__ == "__main__":
    main()
