"""Deterministic CSV writing shared by batches, diagnostics and experiments.

Floats are rendered with repr (shortest round-trip), so identical values
always produce identical bytes regardless of how they were computed.
"""

from __future__ import annotations

import csv
import json
import numpy as np


def fmt_value(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([fmt_value(row[name]) for name in fieldnames])


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
