"""
Datasets on disk
================

A dataset directory holds a manifest, item vectors, optional labels and
user sequences. Loading validates widths and identifiers and reports the
offending line. Each user's sequence is split in time order, 80% for
training, then 10% validation and 10% test.
"""

import tempfile
from pathlib import Path

from contok.data import (DataError, SyntheticSpec, generate_synthetic, load_dataset,
                         load_sequences, write_dataset)

spec = SyntheticSpec(branching=(3, 3, 2), n_users=50, seed=11)
data = generate_synthetic(spec)

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "ds"
    write_dataset(root, data)
    print(sorted(p.name for p in root.iterdir()))

    ds = load_dataset(root)
    print(len(ds.item_ids), "items,", [x.shape for x in ds.matrices()])

    splits = load_sequences(ds.sequences_path, set(ds.item_ids), min_item_count=1)
    user = splits.users[0]
    print(user, "train", len(splits.train[user]), "valid", splits.valid[user], "test", splits.test[user])

    # a vector with the wrong width is rejected with its location
    items = root / "items.jsonl"
    lines = items.read_text().splitlines()
    lines[3] = lines[3].replace("[", "[0.0, ", 1)
    items.write_text("\n".join(lines) + "\n")
    try:
        load_dataset(root)
    except DataError as exc:
        print("error:", exc)
