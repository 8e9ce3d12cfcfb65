"""File formats: ASCII PLY points, CSV tables, JSON documents, P6 PPM images.

All writers are byte-deterministic for identical inputs: floats are written
with repr (shortest round-trip form), JSON keys are sorted, and line endings
are always "\n". Nothing here writes wall-clock times.

Exact column orders live in docs/FORMATS.md.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def _fmt(v):
    return repr(float(v))


# ---------------------------------------------------------------------------
# PLY (ASCII, points with optional uchar RGB)


def write_ply(path, points, colors=None):
    points = np.asarray(points, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {points.shape[0]}"]
    lines += ["property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.dtype != np.uint8:
            colors = np.clip(np.round(np.asarray(colors, dtype=np.float64) * 255.0), 0, 255
                             ).astype(np.uint8)
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i in range(points.shape[0]):
        row = " ".join(_fmt(v) for v in points[i])
        if colors is not None:
            row += " " + " ".join(str(int(v)) for v in colors[i])
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    props = []
    body_at = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element" and tok[1] == "vertex":
            n = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    rows = [text[body_at + i].split() for i in range(n)]
    data = np.array([[float(v) for v in r] for r in rows])
    points = data[:, :3]
    colors = None
    if len(props) >= 6:
        colors = data[:, 3:6].astype(np.uint8)
    return points, colors


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, header, rows):
    """Rows of mixed ints/floats; floats through repr, everything else str()."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(_fmt(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:] if line]


# ---------------------------------------------------------------------------
# JSON


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# PPM (binary P6)


def write_ppm(path, image):
    """image: (H, W, 3) uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    if image.dtype != np.uint8:
        raise ValueError("image must be uint8")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


# ---------------------------------------------------------------------------
# package-specific tables


TRAJECTORY_HEADER = ["frame", "index", "x", "y", "z", "qw", "qx", "qy", "qz",
                     "sx", "sy", "sz"]


def write_trajectory_csv(path, sets):
    rows = []
    for t, gset in enumerate(sets):
        for i in range(gset.n):
            rows.append(
                [t, i, *gset.centers[i], *gset.orientations[i], *gset.scales[i]]
            )
    write_csv(path, TRAJECTORY_HEADER, rows)


def read_trajectory_csv(path):
    """Returns (centers (T,N,3), orientations (T,N,4), scales (T,N,3))."""
    header, rows = read_csv(path)
    if header != TRAJECTORY_HEADER:
        raise ValueError(f"{path}: unexpected trajectory header {header}")
    data = np.array([[float(v) for v in r] for r in rows])
    T = int(data[:, 0].max()) + 1
    n = int(data[:, 1].max()) + 1
    if data.shape[0] != T * n:
        raise ValueError(f"{path}: ragged trajectory table")
    order = np.lexsort((data[:, 1], data[:, 0]))
    data = data[order].reshape(T, n, -1)
    return data[..., 2:5], data[..., 5:9], data[..., 9:12]


LOSSES_HEADER = ["frame", "iteration", "rigidity", "isometry", "rotation",
                 "scale", "data", "total"]


def write_losses_csv(path, frame_reports):
    rows = []
    for rep in frame_reports:
        for it, entry in enumerate(rep.curve):
            rows.append(
                [rep.frame_index, it, entry["rigidity"], entry["isometry"],
                 entry["rotation"], entry["scale"], entry["data"], entry["total"]]
            )
    write_csv(path, LOSSES_HEADER, rows)


def write_labels_csv(path, labels):
    write_csv(path, ["index", "label"], [[i, int(v)] for i, v in enumerate(labels)])


def read_labels_csv(path):
    header, rows = read_csv(path)
    if header != ["index", "label"]:
        raise ValueError(f"{path}: unexpected labels header {header}")
    out = np.empty(len(rows), dtype=np.int64)
    for r in rows:
        out[int(r[0])] = int(r[1])
    return out


def write_gt_trajectory_csv(path, gt_centers):
    rows = []
    T, n = gt_centers.shape[:2]
    for t in range(T):
        for i in range(n):
            rows.append([t, i, *gt_centers[t, i]])
    write_csv(path, ["frame", "index", "x", "y", "z"], rows)


def read_gt_trajectory_csv(path):
    header, rows = read_csv(path)
    if header != ["frame", "index", "x", "y", "z"]:
        raise ValueError(f"{path}: unexpected header {header}")
    data = np.array([[float(v) for v in r] for r in rows])
    T = int(data[:, 0].max()) + 1
    n = int(data[:, 1].max()) + 1
    order = np.lexsort((data[:, 1], data[:, 0]))
    return data[order].reshape(T, n, -1)[..., 2:5]


def write_mte_csv(path, entries):
    """entries: list of (track_id, gaussian_index, mte_fraction)."""
    write_csv(path, ["track", "gaussian_index", "mte"], [list(e) for e in entries])
