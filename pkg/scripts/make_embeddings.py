"""Regenerate src/ordtopk/data/embeddings50.txt.

The vocabulary is four semantic groups of five nouns. Each vector is a shared
component, a group component and a word-specific component, so cosines are
high within a group and low across groups.
"""

from pathlib import Path

import numpy as np

GROUPS = {
    "animal": ["cat", "dog", "wolf", "fox", "horse"],
    "vehicle": ["car", "truck", "bus", "bicycle", "train"],
    "fruit": ["apple", "banana", "orange", "grape", "lemon"],
    "instrument": ["guitar", "piano", "violin", "drum", "flute"],
}
DIM = 50


def main():
    rng = np.random.default_rng(20190531)
    shared = rng.standard_normal(DIM)
    lines = []
    for words in GROUPS.values():
        group = rng.standard_normal(DIM)
        for word in words:
            v = 0.35 * shared + 1.0 * group + 0.75 * rng.standard_normal(DIM)
            lines.append(word + " " + " ".join(f"{x:.5f}" for x in v))
    out = Path(__file__).resolve().parents[1] / "src" / "ordtopk" / "data" / "embeddings50.txt"
    out.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
