"""
The command line pipeline
=========================

The ``contok`` command chains the stages: generate a dataset, train, tokenize
and evaluate retrieval. Each output directory gets a ``config.json`` echo of
the resolved settings.
"""

import tempfile
from pathlib import Path

from contok.cli import main

with tempfile.TemporaryDirectory() as tmp:
    t = Path(tmp)
    main(["gen-synthetic", "--out", str(t / "ds"), "--branching", "4,4,2", "--n-users", "80"])
    main(["train", "--data", str(t / "ds"), "--out", str(t / "run"), "--epochs", "40", "--batch", "16",
          "--levels", "2", "--codebook-size", "8", "--dim", "8", "--hidden", "32", "--lr", "1e-3"])
    main(["tokenize", "--checkpoint", str(t / "run/model.ckpt"), "--data", str(t / "ds"),
          "--out", str(t / "tok")])
    main(["eval-retrieval", "--table", str(t / "tok/tokens.jsonl"), "--data", str(t / "ds"),
          "--out", str(t / "eval"), "--min-item-count", "1", "--baseline"])
    main(["report", str(t / "run"), "--rows", "4"])
