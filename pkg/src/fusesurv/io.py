"""On-disk formats: PFME embedding files and the labels/clinical/prediction CSVs."""

import csv
import os
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import yaml

from .data import Cohort
from .encoders.clinical import DEFAULT_SCHEMA, ClinicalSchema

PFME_MAGIC = b"PFME"
PFME_VERSION = 1
LABEL_HEADER = ("case_id", "time_months", "event")
EMBEDDING_SUFFIX = {"pathology": ".pathology.pfme", "radiology": ".radiology.pfme"}


def fmt_float(x):
    return f"{x:.9g}"


# -- PFME --------------------------------------------------------------------

def write_embedding(path, matrix):
    """Write an ``M x D`` matrix as little-endian float32 rows."""
    dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
    if dense.ndim != 2:
        raise ValueError("embedding must be a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(PFME_MAGIC)
        fh.write(struct.pack("<III", PFME_VERSION, *dense.shape))
        fh.write(np.ascontiguousarray(dense, dtype="<f4").tobytes())


def read_embedding(path, sparse_below=0.25):
    """Read a PFME file as float64; mostly-zero matrices come back as CSR."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != PFME_MAGIC:
            raise ValueError(f"{path}: not a PFME file")
        version, rows, cols = struct.unpack("<III", head[4:])
        if version != PFME_VERSION:
            raise ValueError(f"{path}: unsupported PFME version {version}")
        body = fh.read()
    if len(body) != rows * cols * 4:
        raise ValueError(f"{path}: expected {rows}x{cols} floats, found {len(body) // 4}")
    m = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{path}: non-finite values")
    if m.size and np.count_nonzero(m) < sparse_below * m.size:
        return sp.csr_matrix(m)
    return m


# -- CSV ---------------------------------------------------------------------

def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file (header required)") from None
        rows = [r for r in reader if r]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise ValueError(f"{path}: row {i + 2} has {len(r)} fields, header has {len(header)}")
    return [h.strip() for h in header], rows


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_labels(path):
    """Return ``(case_ids, time, event)`` from a ``case_id,time_months,event`` CSV."""
    header, rows = _read_csv(path)
    if tuple(header) != LABEL_HEADER:
        raise ValueError(f"{path}: header must be {','.join(LABEL_HEADER)}")
    ids, time, event = [], [], []
    for i, (cid, t, e) in enumerate(rows):
        try:
            t = float(t)
        except ValueError:
            raise ValueError(f"{path}: row {i + 2}: time_months {t!r} is not a number") from None
        if e.strip() not in ("0", "1"):
            raise ValueError(f"{path}: row {i + 2}: event must be 0 or 1")
        ids.append(cid.strip())
        time.append(t)
        event.append(e.strip() == "1")
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate case ids")
    return ids, np.asarray(time), np.asarray(event, dtype=bool)


def write_labels(path, case_ids, time, event):
    write_csv(path, LABEL_HEADER, [(c, fmt_float(t), int(e)) for c, t, e in zip(case_ids, time, event)])


def read_clinical(path, schema=DEFAULT_SCHEMA):
    """Map case id -> record; empty cells are unknown values."""
    header, rows = _read_csv(path)
    if not header or header[0] != "case_id":
        raise ValueError(f"{path}: first column must be case_id")
    extra = [h for h in header[1:] if h not in schema.names]
    missing = [n for n in schema.names if n not in header]
    if extra:
        raise ValueError(f"{path}: columns not in schema: {', '.join(extra)}")
    if missing:
        raise ValueError(f"{path}: missing schema columns: {', '.join(missing)}")
    out = {}
    for r in rows:
        cid = r[0].strip()
        if cid in out:
            raise ValueError(f"{path}: duplicate case id {cid}")
        out[cid] = {h: (v.strip() or None) for h, v in zip(header[1:], r[1:])}
    return out


def write_clinical(path, case_ids, records, schema=DEFAULT_SCHEMA):
    rows = []
    for cid, rec in zip(case_ids, records):
        if rec is None:
            continue
        cells = []
        for name in schema.names:
            v = rec.get(name)
            cells.append("" if v is None else (fmt_float(v) if isinstance(v, float) else str(v)))
        rows.append([cid, *cells])
    write_csv(path, ["case_id", *schema.names], rows)


def write_ground_truth(path, case_ids, truth):
    write_csv(path, ("case_id", "true_log_risk", "uncensored_time"),
              [(c, fmt_float(h), fmt_float(t)) for c, h, t in zip(case_ids, truth.true_log_risk, truth.event_time)])


def write_predictions(path, case_ids, log_risk):
    log_risk = np.asarray(log_risk, dtype=np.float64)
    write_csv(path, ("case_id", "log_risk", "ttr"),
              [(c, fmt_float(lr), fmt_float(np.exp(-lr))) for c, lr in zip(case_ids, log_risk)])


def read_predictions(path):
    header, rows = _read_csv(path)
    if "case_id" not in header or "log_risk" not in header:
        raise ValueError(f"{path}: needs case_id and log_risk columns")
    ci, li = header.index("case_id"), header.index("log_risk")
    ids = [r[ci].strip() for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate case ids")
    return ids, np.array([float(r[li]) for r in rows])


def load_schema(path):
    if path is None:
        return DEFAULT_SCHEMA
    with open(path, encoding="utf-8") as fh:
        return ClinicalSchema.from_dict(yaml.safe_load(fh))


# -- cohort directories --------------------------------------------------------

def write_cohort(out_dir, cohort, truth=None, schema=DEFAULT_SCHEMA):
    """Materialize a cohort: labels.csv, clinical.csv, embeddings/ and ground_truth.csv."""
    out = Path(out_dir)
    emb = out / "embeddings"
    emb.mkdir(parents=True, exist_ok=True)
    if cohort.has_labels:
        write_labels(out / "labels.csv", cohort.case_ids, cohort.time, cohort.event)
    write_clinical(out / "clinical.csv", cohort.case_ids, cohort.clinical, schema)
    for modality, suffix in EMBEDDING_SUFFIX.items():
        for cid, m in zip(cohort.case_ids, getattr(cohort, modality)):
            if m is not None:
                write_embedding(emb / f"{cid}{suffix}", m)
    if truth is not None:
        write_ground_truth(out / "ground_truth.csv", cohort.case_ids, truth)


def _data_path(data_dir, name):
    p = Path(name)
    return p if p.is_absolute() else Path(data_dir) / p


def read_cohort(data_dir, data_section=None, schema=DEFAULT_SCHEMA, require_labels=True):
    """Assemble a :class:`Cohort` from a data directory.

    Subjects come from the labels file when it exists, otherwise from the
    union of clinical rows and embedding files. A subject without a
    clinical row or an embedding file has that modality marked absent.
    """
    clinical_name = getattr(data_section, "clinical", "clinical.csv")
    labels_name = getattr(data_section, "labels", "labels.csv")
    emb_name = getattr(data_section, "embeddings", "embeddings")
    labels_path = _data_path(data_dir, labels_name)
    clinical_path = _data_path(data_dir, clinical_name)
    emb_dir = _data_path(data_dir, emb_name)
    if not Path(data_dir).is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")

    clinical = read_clinical(clinical_path, schema) if clinical_path.exists() else {}
    files = {m: {} for m in EMBEDDING_SUFFIX}
    if emb_dir.is_dir():
        for name in sorted(os.listdir(emb_dir)):
            for m, suffix in EMBEDDING_SUFFIX.items():
                if name.endswith(suffix):
                    files[m][name[: -len(suffix)]] = emb_dir / name

    if labels_path.exists():
        case_ids, time, event = read_labels(labels_path)
    elif require_labels:
        raise FileNotFoundError(f"labels file not found: {labels_path}")
    else:
        case_ids = sorted(set(clinical) | set(files["pathology"]) | set(files["radiology"]))
        time = event = None
    if not case_ids:
        raise ValueError(f"{data_dir}: no subjects found")

    path = [read_embedding(files["pathology"][c]) if c in files["pathology"] else None for c in case_ids]
    rad = [read_embedding(files["radiology"][c]) if c in files["radiology"] else None for c in case_ids]
    clin = [clinical.get(c) for c in case_ids]
    return Cohort(case_ids, clin, path, rad, time, event)
