"""Panel files: a long-format landmark table plus a per-subject table.

Panel CSV columns: ``subject_id, j, landmark_time, <covariates...>, a, y, q``
with one row per subject and landmark; cells after a subject's exit are
empty.  Subjects CSV columns: ``subject_id, event_time, censor_time,
event_observed``.  Floats are written with ``repr`` so files round-trip
exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .panel import Landmarks, Panel

PANEL_FIXED = ("subject_id", "j", "landmark_time")
PANEL_TAIL = ("a", "y", "q")
SUBJECT_COLUMNS = ("subject_id", "event_time", "censor_time", "event_observed")


class PanelFormatError(ValueError):
    """A panel or subjects file does not follow the expected layout."""


def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    if float(v).is_integer() and abs(v) < 2 ** 53:
        return str(int(v))
    return repr(float(v))


def _id(v) -> str:
    return str(v.item() if hasattr(v, "item") else v)


def write_panel(panel: Panel, panel_path, subjects_path) -> None:
    times = panel.landmarks.times
    with open(panel_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*PANEL_FIXED, *panel.covariate_names, *PANEL_TAIL])
        for i in range(panel.n):
            sid = _id(panel.ids[i])
            for j in range(panel.K + 1):
                present = bool(panel.y[i, j])
                cells = [_fmt(c) if present else "" for c in panel.z[i, j]]
                w.writerow([sid, j, _fmt(times[j]), *cells, _fmt(panel.a[i, j]) if present else "",
                            int(panel.y[i, j]), _fmt(panel.q[i, j]) if present else ""])
    with open(subjects_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUBJECT_COLUMNS)
        for i in range(panel.n):
            w.writerow([_id(panel.ids[i]), _fmt(panel.event_time[i]), _fmt(panel.censor_time[i]),
                        int(panel.event_observed[i])])


def _float(cell: str, where: str) -> float:
    if cell == "":
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise PanelFormatError(f"{where}: {cell!r} is not a number") from None


def _parse_id(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def read_panel(panel_path, subjects_path) -> Panel:
    """Load a panel; structural problems raise ``PanelFormatError``, invariants are left to validation."""
    with open(panel_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PanelFormatError(f"{panel_path}: empty file")
    header = rows[0]
    if tuple(header[:3]) != PANEL_FIXED or tuple(header[-3:]) != PANEL_TAIL or len(header) < 6:
        raise PanelFormatError(f"{panel_path}: header must be {', '.join(PANEL_FIXED)}, <covariates>, "
                               f"{', '.join(PANEL_TAIL)}")
    names = tuple(header[3:-3])
    d = len(names)
    by_subject: dict[str, dict[int, list[str]]] = {}
    order: list[str] = []
    times: dict[int, float] = {}
    for line, row in enumerate(rows[1:], start=2):
        where = f"{panel_path}:{line}"
        if len(row) != len(header):
            raise PanelFormatError(f"{where}: expected {len(header)} cells, found {len(row)}")
        sid = row[0]
        try:
            j = int(row[1])
        except ValueError:
            raise PanelFormatError(f"{where}: landmark index {row[1]!r} is not an integer") from None
        t = _float(row[2], where)
        if times.setdefault(j, t) != t:
            raise PanelFormatError(f"{where}: landmark {j} has inconsistent times")
        if sid not in by_subject:
            by_subject[sid] = {}
            order.append(sid)
        if j in by_subject[sid]:
            raise PanelFormatError(f"{where}: duplicate row for subject {sid} landmark {j}")
        by_subject[sid][j] = row
    K = max(times) if times else -1
    if sorted(times) != list(range(K + 1)):
        raise PanelFormatError(f"{panel_path}: landmark indices must run 0..K without gaps")
    landmarks = Landmarks(np.array([times[j] for j in range(K + 1)]))

    subj: dict[str, tuple[float, float]] = {}
    with open(subjects_path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or tuple(head) != SUBJECT_COLUMNS:
            raise PanelFormatError(f"{subjects_path}: header must be {', '.join(SUBJECT_COLUMNS)}")
        for line, row in enumerate(reader, start=2):
            where = f"{subjects_path}:{line}"
            if len(row) != len(SUBJECT_COLUMNS):
                raise PanelFormatError(f"{where}: expected {len(SUBJECT_COLUMNS)} cells")
            subj[row[0]] = (_float(row[1], where), _float(row[2], where))
    missing = [s for s in order if s not in subj]
    if missing:
        raise PanelFormatError(f"{subjects_path}: no record for subjects {missing[:5]}")

    n = len(order)
    z = np.full((n, K + 1, d), np.nan)
    a = np.full((n, K + 1), np.nan)
    q = np.full((n, K + 1), np.nan)
    y = np.zeros((n, K + 1), dtype=np.int8)
    for i, sid in enumerate(order):
        rec = by_subject[sid]
        if len(rec) != K + 1:
            raise PanelFormatError(f"{panel_path}: subject {sid} has {len(rec)} rows, expected {K + 1}")
        for j, row in rec.items():
            where = f"{panel_path}: subject {sid} landmark {j}"
            z[i, j] = [_float(c, where) for c in row[3:3 + d]]
            a[i, j] = _float(row[-3], where)
            yv = _float(row[-2], where)
            if yv not in (0.0, 1.0):
                raise PanelFormatError(f"{where}: y must be 0 or 1")
            y[i, j] = int(yv)
            q[i, j] = _float(row[-1], where)
    T = np.array([subj[s][0] for s in order])
    C = np.array([subj[s][1] for s in order])
    ids = np.array([_parse_id(s) for s in order], dtype=object)
    if all(isinstance(v, int) for v in ids):
        ids = ids.astype(np.int64)
    return Panel(landmarks, ids, z, a, q, T, C, names, y, {"source": str(panel_path)})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(obj, path) -> None:
    """Deterministic JSON (sorted keys, shortest round-trip floats)."""
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=json_default) + "\n")


def json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
