"""Plain-text triangle mesh (OBJ) reading and writing.

Only ``v`` and ``f`` records are handled; faces must be triangles.  Floats
are written with 17 significant digits so a write/read round trip is exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_obj(path: str | Path, vertices, faces) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    vertices = []
    faces = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}: line {i}: malformed vertex")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}: line {i}: only triangle faces are supported")
                # tolerate v/vt/vn syntax, keep the vertex index
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return (
        np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )
