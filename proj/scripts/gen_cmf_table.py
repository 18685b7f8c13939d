#!/usr/bin/env python3
"""Regenerate src/cie1931_table.inc from data/cie1931_2deg_1nm.txt.

Values are copied as text so the compiled table parses to the same doubles
as the data file.
"""
import hashlib
import pathlib

root = pathlib.Path(__file__).resolve().parent.parent
src = root / "data" / "cie1931_2deg_1nm.txt"
raw = src.read_bytes()
rows = [l.split() for l in raw.decode().splitlines() if l and not l.startswith("#")]
assert len(rows) == 471, len(rows)

out = ["// Generated by scripts/gen_cmf_table.py from data/cie1931_2deg_1nm.txt.",
       f"// sha256 of source: {hashlib.sha256(raw).hexdigest()}",
       "// Do not edit by hand."]
for r in rows:
    out.append("{" + ", ".join(r) + "},")
(root / "src" / "cie1931_table.inc").write_text("\n".join(out) + "\n")
print(hashlib.sha256(raw).hexdigest())
