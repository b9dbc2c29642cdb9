"""Clinical attribute encoding: one-hot + z-score vectors or dummy rows."""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str  # "numeric" or "categorical"
    categories: tuple = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"attribute {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and len(self.categories) < 2:
            raise ValueError(f"attribute {self.name!r} needs at least two categories")
        object.__setattr__(self, "categories", tuple(str(c) for c in self.categories))

    @property
    def onehot_width(self):
        return 1 if self.kind == "numeric" else len(self.categories)

    @property
    def dummy_width(self):
        return 1 if self.kind == "numeric" else len(self.categories) - 1


@dataclass(frozen=True)
class ClinicalSchema:
    attributes: tuple
    total_width: int = field(default=None)

    def __post_init__(self):
        width = sum(a.onehot_width for a in self.attributes)
        if self.total_width is None:
            object.__setattr__(self, "total_width", width)
        elif width != self.total_width:
            raise ValueError(f"schema widths sum to {width}, declared {self.total_width}")

    @property
    def names(self):
        return [a.name for a in self.attributes]

    @property
    def dummy_width(self):
        return sum(a.dummy_width for a in self.attributes)

    def to_dict(self):
        return {
            "total_width": self.total_width,
            "attributes": [
                {"name": a.name, "kind": a.kind, **({"categories": list(a.categories)} if a.categories else {})}
                for a in self.attributes
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - {"total_width", "attributes"}
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        attrs = []
        for a in doc["attributes"]:
            extra = set(a) - {"name", "kind", "categories"}
            if extra:
                raise ValueError(f"unknown attribute keys: {sorted(extra)}")
            attrs.append(Attribute(a["name"], a["kind"], tuple(a.get("categories", ()))))
        return cls(tuple(attrs), doc.get("total_width"))


BINARY = ("0", "1")

# 1 + 5 + 9 + 5*2 = 25
DEFAULT_SCHEMA = ClinicalSchema(
    (
        Attribute("age_at_rp", "numeric"),
        Attribute("isup_grade", "categorical", ("1", "2", "3", "4", "5")),
        Attribute(
            "pt_stage",
            "categorical",
            ("pT2", "pT2a", "pT2b", "pT2c", "pT3", "pT3a", "pT3b", "pT3c", "pT4"),
        ),
        Attribute("lymph_nodes", "categorical", BINARY),
        Attribute("capsular_penetration", "categorical", BINARY),
        Attribute("surgical_margins", "categorical", BINARY),
        Attribute("svi", "categorical", BINARY),
        Attribute("lvi", "categorical", BINARY),
    ),
    25,
)


def _is_unknown(value):
    return value is None or (isinstance(value, str) and value.strip() == "") or (
        isinstance(value, float) and np.isnan(value)
    )


def _category(attr, value):
    if isinstance(value, (int, np.integer)) or (isinstance(value, float) and value.is_integer()):
        value = str(int(value))
    value = str(value).strip()
    if value not in attr.categories:
        raise ValueError(f"category not in schema: {attr.name}={value!r}")
    return attr.categories.index(value)


@dataclass
class ClinicalStats:
    """Training-split statistics: numeric mean/std and categorical modes."""

    mean: dict
    std: dict
    mode: dict

    @classmethod
    def fit(cls, records, schema=DEFAULT_SCHEMA):
        mean, std, mode = {}, {}, {}
        for attr in schema.attributes:
            values = [r.get(attr.name) for r in records if not _is_unknown(r.get(attr.name))]
            if attr.kind == "numeric":
                v = np.asarray(values, dtype=np.float64)
                if v.size == 0:
                    raise ValueError(f"degenerate numeric attribute: {attr.name}")
                mean[attr.name] = float(v.mean())
                std[attr.name] = float(v.std())
            else:
                counts = np.zeros(len(attr.categories), dtype=int)
                for v in values:
                    counts[_category(attr, v)] += 1
                # ties resolve to the earliest schema category
                mode[attr.name] = int(np.argmax(counts))
        return cls(mean, std, mode)


def _encode(record, schema, stats, dummy):
    out = []
    for attr in schema.attributes:
        value = record.get(attr.name)
        if attr.kind == "numeric":
            if stats.std[attr.name] == 0:
                raise ValueError(f"degenerate numeric attribute: {attr.name}")
            x = stats.mean[attr.name] if _is_unknown(value) else float(value)
            out.append((x - stats.mean[attr.name]) / stats.std[attr.name])
        else:
            k = stats.mode[attr.name] if _is_unknown(value) else _category(attr, value)
            block = np.zeros(len(attr.categories))
            block[k] = 1.0
            out.extend(block[1:] if dummy else block)
    return np.asarray(out, dtype=np.float64)


def encode_clinical_vector(record, schema, stats):
    """One-hot categoricals and z-scored numerics, concatenated in schema order."""
    return _encode(record, schema, stats, dummy=False)


def encode_clinical_dummy(record, schema, stats):
    """Reference-coded row: a k-category attribute yields k-1 indicator columns."""
    return _encode(record, schema, stats, dummy=True)


class ClinicalEncoder(BaseEstimator, TransformerMixin):
    """Fit imputation and z-score statistics on training records.

    Parameters
    ----------
    schema : ClinicalSchema
    encoding : {"onehot", "dummy"}
        ``"onehot"`` produces the fusion-model vector, ``"dummy"`` the
        reference-coded covariates for a linear Cox model.
    """

    def __init__(self, schema=DEFAULT_SCHEMA, encoding="onehot"):
        self.schema = schema
        self.encoding = encoding

    def fit(self, X, y=None):
        if self.encoding not in ("onehot", "dummy"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        self.stats_ = ClinicalStats.fit([r for r in X if r is not None], self.schema)
        for name, s in self.stats_.std.items():
            if s == 0:
                raise ValueError(f"degenerate numeric attribute: {name}")
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        dummy = self.encoding == "dummy"
        width = self.schema.dummy_width if dummy else self.schema.total_width
        # a missing record (modality absent) encodes as zeros; callers mask it
        rows = [np.zeros(width) if r is None else _encode(r, self.schema, self.stats_, dummy) for r in X]
        return np.vstack(rows) if rows else np.empty((0, width))
