"""
Bringing external features into FTEN files
==========================================

Any toolchain that can produce, per image, patch embeddings (N x D), a CLS
embedding (D) and CLS-to-patch attention rows (H x N) can feed the routing
and training commands.  Stack them, write one FTEN file, and read it back.
"""

import tempfile
from pathlib import Path

import numpy as np

from opengcd.cli import load_features
from opengcd.container import read_container, write_container

rng = np.random.default_rng(0)
n_images, n_patches, dim, heads = 5, 196, 64, 6

# stand-ins for backbone outputs; real features come from the backbone's last block
F_patch = rng.normal(size=(n_images, n_patches, dim)).astype(np.float32)
f_cls = rng.normal(size=(n_images, dim)).astype(np.float32)
A_cls = rng.dirichlet(np.ones(n_patches), size=(n_images, heads)).astype(np.float32)
labels = np.array([0, 0, 1, 1, 2])

path = Path(tempfile.mkdtemp()) / "features.ften"
write_container(path, {"F_patch": F_patch, "f_cls": f_cls, "A_cls": A_cls,
                       "labels": labels, "classes": np.arange(3)})
print(f"wrote {path.stat().st_size} bytes to {path}")

entries = read_container(path)
for name, arr in entries.items():
    print(f"{name:>8}: {arr.dtype} {arr.shape}")
assert entries["F_patch"].tobytes() == F_patch.tobytes()

data = load_features(entries)
print("loaded", len(data), "images; routing and fit accept this file via --features")
