"""CSV/JSON exports and run manifests.

CSV files are time series or long-format tables with a header row; JSON
files are reports and configs written with sorted keys.  Every write is
atomic.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from pathlib import Path

import numpy as np

from .container import atomic_write_bytes
from .objectives import TERMS

LOSS_HEADER = ["epoch", "step"] + list(TERMS)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    atomic_write_bytes(path, buf.getvalue().encode())


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"
    atomic_write_bytes(path, text.encode())


def write_loss_history(path, history):
    write_csv(path, LOSS_HEADER, [r.row() for r in history])


def write_routing(path, assignments):
    """Long format: one row per (image, patch) with its part id (-1 if masked)."""
    rows = [(i, p, int(k)) for i, row in enumerate(assignments) for p, k in enumerate(row)]
    write_csv(path, ["image", "patch", "part"], rows)


def entropy_histogram(seen, novel, bins=20, upper=None):
    """Shared-bin counts of seen and novel entropy scores."""
    seen = np.asarray(seen, dtype=np.float64)
    novel = np.asarray(novel, dtype=np.float64)
    hi = upper if upper is not None else max(seen.max(initial=0.0), novel.max(initial=0.0), 1e-12)
    edges = np.linspace(0.0, hi, bins + 1)
    return edges, np.histogram(seen, edges)[0], np.histogram(novel, edges)[0]


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions():
    import scipy
    import sklearn

    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "opengcd": __version__}


def write_manifest(out_dir, command, cfg, seed, outputs, extra=None):
    """manifest.json: config, its hash, seed, library versions and output digests."""
    out_dir = Path(out_dir)
    man = {"command": command, "seed": int(seed), "config_hash": cfg.digest(), "config": cfg.to_dict(),
           "versions": versions(),
           "outputs": {Path(p).name: file_digest(p) for p in outputs}}
    if extra:
        man.update(extra)
    write_json(out_dir / "manifest.json", man)
    return man
