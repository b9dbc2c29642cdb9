"""In-memory multi-modal cohort container."""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._validation import make_survival_y

MODALITIES = ("clinical", "pathology", "radiology")


@dataclass
class Cohort:
    """Per-subject inputs for all three modalities plus survival labels.

    ``pathology`` and ``radiology`` hold one ``M x D`` embedding matrix per
    subject (dense array or CSR matrix), or ``None`` when the modality is
    missing for that subject. ``clinical`` holds one record per subject
    mapping attribute name to a raw value (``None`` = unknown).
    """

    case_ids: list
    clinical: list
    pathology: list
    radiology: list
    time: np.ndarray = field(default=None)
    event: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.case_ids)
        for name in ("clinical", "pathology", "radiology"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        if len(set(self.case_ids)) != n:
            raise ValueError("duplicate case ids")
        if self.time is not None:
            self.time = np.asarray(self.time, dtype=np.float64)
            self.event = np.asarray(self.event).astype(bool)

    def __len__(self):
        return len(self.case_ids)

    @property
    def has_labels(self):
        return self.time is not None

    @property
    def y(self):
        if self.time is None:
            raise ValueError("cohort has no survival labels")
        return make_survival_y(self.time, self.event)

    def modality_mask(self):
        """Boolean ``(n, 3)`` availability matrix in clinical/pathology/radiology order."""
        return np.array(
            [[c is not None, p is not None, r is not None]
             for c, p, r in zip(self.clinical, self.pathology, self.radiology)],
            dtype=bool,
        )

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        pick = lambda seq: [seq[i] for i in idx]
        return Cohort(
            pick(self.case_ids),
            pick(self.clinical),
            pick(self.pathology),
            pick(self.radiology),
            None if self.time is None else self.time[idx],
            None if self.event is None else self.event[idx],
        )

    def with_labels(self, time, event):
        return Cohort(self.case_ids, self.clinical, self.pathology, self.radiology, time, event)


def as_dense(matrix):
    return matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
