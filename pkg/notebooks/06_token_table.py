"""
From codes to a bijective token table
=====================================

Items that land on the same code tuple get an ordinal suffix, so every item
has a distinct identifier. The table is written as JSON lines and reads back
exactly.
"""

import tempfile
from pathlib import Path

from contok.tokens import (build_table, code_perplexity, collision_rate, export_table,
                           import_table)

ids = ["a", "b", "c", "d", "e"]
codes = [(0, 1), (0, 1), (2, 0), (0, 1), (1, 1)]
table = build_table(ids, codes, levels=2, size=3, mode="shared", checksum="demo")
for item in ids:
    print(item, table.token(item))

print("raw collision rate", collision_rate(codes))
print("level-1 perplexity", round(code_perplexity([c[0] for c in codes]), 3))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "tokens.jsonl"
    export_table(table, path)
    print(path.read_text())
    assert import_table(path, "demo").item_to_token == table.item_to_token

    # a damaged record is reported with its line number
    lines = path.read_text().splitlines()
    lines[2] = lines[2].replace('"codes"', '"cods"')
    path.write_text("\n".join(lines) + "\n")
    try:
        import_table(path)
    except ValueError as exc:
        print("error:", exc)
