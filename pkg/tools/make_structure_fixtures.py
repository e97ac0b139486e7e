#!/usr/bin/env python3
"""Freeze cluster separation/homogeneity values for a seeded synthetic set.

The metric computation below is deliberately independent of
groundcap.analysis (plain double loops over explicitly normalized
vectors); only the dataset comes from the package generator so the test
can rebuild the identical inputs.

Run from the repository root:  python3 tools/make_structure_fixtures.py
"""

import json
import math
from pathlib import Path

import numpy as np

from groundcap.data import SyntheticSpec, generate_synthetic_dataset

SEED = 2718
SPEC = SyntheticSpec(num_classes=10, spread=0.3, images=60, feature_size=32)


def plain_cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def independent_separation(vectors, labels):
    mean = [sum(col) / len(vectors) for col in zip(*vectors)]
    centered = [[x - m for x, m in zip(row, mean)] for row in vectors]
    classes = sorted(set(labels))

    within_means = []
    for c in classes:
        rows = [centered[i] for i, l in enumerate(labels) if l == c]
        if len(rows) < 2:
            continue
        sims = []
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                sims.append(plain_cosine(rows[i], rows[j]))
        within_means.append(sum(sims) / len(sims))
    intra = 100.0 * max(0.0, sum(within_means) / len(within_means))

    centroids = []
    for c in classes:
        rows = [vectors[i] for i, l in enumerate(labels) if l == c]
        centroids.append([sum(col) / len(rows) for col in zip(*rows)])
    pair_vals = []
    for i in range(len(centroids)):
        for j in range(i + 1, len(centroids)):
            pair_vals.append((1.0 - plain_cosine(centroids[i], centroids[j])) / 2.0)
    inter = 100.0 * sum(pair_vals) / len(pair_vals)
    return inter, intra


def main():
    ds = generate_synthetic_dataset(SPEC, seed=SEED)
    vectors, labels = [], []
    for ex in ds.train + ds.val + ds.test:
        for vec, label in zip(ex.features, ex.labels):
            vectors.append([float(x) for x in vec])
            labels.append(int(label))
    inter, intra = independent_separation(vectors, labels)
    payload = {
        "seed": SEED,
        "spec": {
            "num_classes": SPEC.num_classes,
            "spread": SPEC.spread,
            "images": SPEC.images,
            "feature_size": SPEC.feature_size,
        },
        "num_vectors": len(vectors),
        "inter_cluster": inter,
        "intra_cluster": intra,
    }
    out = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "structure_reference.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    print(f"  inter={inter:.12f} intra={intra:.12f} over {len(vectors)} vectors")


if __name__ == "__main__":
    main()
