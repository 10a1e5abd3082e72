"""Turn experiment CSVs into whitespace-separated series for gnuplot."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import SchemaError
from .io import read_csv

__all__ = ["SCHEMAS", "emit_plotdata", "read_series"]

# header -> (x column, grouping column or None)
SCHEMAS = {
    ("step", "alpha", "gamma", "theta_bar_sq_norm", "evidence_bound"): ("step", None),
    ("step", "alpha", "gamma_hat", "theta_bar_sq_norm"): ("step", None),
    ("step", "layer", "alpha", "gamma_hat", "theta_bar_sq_norm"): ("step", "layer"),
    ("step", "layer", "alpha", "gamma", "theta_bar_sq_norm"): ("step", "layer"),
    ("variant", "step", "sample_error"): ("step", "variant"),
    ("variant", "step", "sample_index", "objective", "sample_error"): ("step", "variant"),
    ("solve_id", "iterations", "final_residual"): ("solve_id", None),
    ("x", "mean", "std"): ("x", None),
}


def emit_plotdata(csv_paths, out_dir) -> dict:
    """Write one ``<stem>[.<group>].<column>.dat`` file per value column.

    Each line is ``x value`` with the original CSV text copied verbatim, so
    the series parse back to exactly the source numbers.  A manifest
    ``plotdata.json`` lists every file with its source and columns.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"series": []}
    for path in csv_paths:
        path = Path(path)
        header, rows = read_csv(path)
        if header not in SCHEMAS:
            raise SchemaError(f"{path}: unrecognised columns {header}")
        xcol, gcol = SCHEMAS[header]
        xi = header.index(xcol)
        gi = None if gcol is None else header.index(gcol)
        groups = [None] if gi is None else sorted({r[gi] for r in rows}) or [None]
        for col in header:
            if col in (xcol, gcol):
                continue
            ci = header.index(col)
            for grp in groups:
                name = ".".join(p for p in (path.stem, grp, col) if p is not None) + ".dat"
                sel = [r for r in rows if gi is None or r[gi] == grp]
                with open(out / name, "w") as fh:
                    for r in sel:
                        fh.write(f"{r[xi]} {r[ci]}\n")
                manifest["series"].append({"file": name, "source": path.name, "x": xcol, "y": col,
                                           "group": grp, "points": len(sel)})
    with open(out / "plotdata.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_series(path):
    """Parse a ``.dat`` series into lists of floats ``(x, y)``."""
    xs, ys = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                a, b = line.split()
                xs.append(float(a))
                ys.append(float(b))
    return xs, ys
