"""Manifest I/O, report label extraction, exclusion, and the temporal split."""

import datetime
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .common import DENSITY_PHRASES, MAX_INTENSITY, VIEWS, ViewImage

SPLIT_NAMES = ("train", "validation", "test")


class AmbiguousReportError(ValueError):
    def __init__(self, classes):
        self.classes = tuple(sorted(classes))
        super().__init__(f"report mentions conflicting density classes {self.classes}")


class ManifestError(ValueError):
    pass


class PGMError(ValueError):
    pass


class MalformedHeaderError(PGMError):
    pass


class UnsupportedMaxvalError(PGMError):
    pass


class TruncatedDataError(PGMError):
    pass


_PHRASE_RES = [re.compile(re.escape(p), re.IGNORECASE) for p in DENSITY_PHRASES]
_BIRADS_RE = re.compile(r"BI-?RADS\s*([0-6])", re.IGNORECASE)


def parse_report(text):
    """Density class named in a report, or None when no canonical phrase occurs."""
    found = {c for c, pattern in enumerate(_PHRASE_RES) if pattern.search(text)}
    if len(found) > 1:
        raise AmbiguousReportError(found)
    return found.pop() if found else None


def parse_birads(text):
    """Overall BI-RADS assessment from the impression line, or None."""
    found = {int(m) for m in _BIRADS_RE.findall(text)}
    if len(found) != 1:
        return None
    value = found.pop()
    return value if value <= 2 else None


@dataclass
class Exam:
    """One screening exam with its four views loaded."""

    exam_id: str
    patient_id: str
    date: datetime.date
    views: dict
    report: str = ""
    density: int = None
    birads: int = None

    def pixel_stack(self):
        return np.stack([self.views[v].pixels for v in VIEWS])


@dataclass
class ExamRecord:
    exam_id: str
    patient_id: str
    date: datetime.date
    view_paths: dict
    report: str
    density: int = None
    birads: int = None
    labelled: bool = field(default=False, repr=False)

    def __post_init__(self):
        if isinstance(self.date, str):
            self.date = datetime.date.fromisoformat(self.date)
        missing = [v for v in VIEWS if v not in self.view_paths]
        if missing:
            raise ManifestError(f"exam {self.exam_id} is missing views {missing}")

    def to_json(self):
        return {
            "exam_id": self.exam_id,
            "patient_id": self.patient_id,
            "date": self.date.isoformat(),
            "views": {v: self.view_paths[v] for v in VIEWS},
            "report": self.report,
        }

    def extract_labels(self):
        self.density = parse_report(self.report)
        self.birads = parse_birads(self.report)
        self.labelled = True
        return self


class Manifest:
    """Ordered exam records; view paths are relative to ``root``."""

    def __init__(self, records, root=None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        seen = set()
        for r in self.records:
            if r.exam_id in seen:
                raise ManifestError(f"duplicate exam id {r.exam_id}")
            seen.add(r.exam_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self):
        return {r.exam_id: r for r in self.records}

    def extract_labels(self):
        for r in self.records:
            r.extract_labels()
        return self

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=False) + "\n")

    @classmethod
    def read_jsonl(cls, path):
        path = Path(path)
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    records.append(ExamRecord(d["exam_id"], d["patient_id"], d["date"], d["views"], d["report"]))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise ManifestError(f"{path}:{lineno}: bad manifest record ({exc})") from None
        return cls(records, root=path.parent)

    def load_exam(self, record):
        if self.root is None:
            raise ManifestError("manifest has no root directory to resolve view paths")
        views = {v: load_view(self.root / record.view_paths[v], v) for v in VIEWS}
        return Exam(record.exam_id, record.patient_id, record.date, views, record.report,
                    record.density, record.birads)


def apply_exclusion(manifest):
    """Drop exams whose report names no density class; returns ``(retained, excluded_count)``."""
    for r in manifest.records:
        if not r.labelled:
            r.extract_labels()
    kept = [r for r in manifest.records if r.density is not None]
    return Manifest(kept, manifest.root), len(manifest.records) - len(kept)


@dataclass
class SplitAssignment:
    train: list
    validation: list
    test: list  # (patient_id, exam_id) pairs, latest exam only

    def partition_of(self):
        out = {p: "train" for p in self.train}
        out.update({p: "validation" for p in self.validation})
        out.update({p: "test" for p, _ in self.test})
        return out

    def exam_ids(self, manifest, name):
        """Exam ids belonging to split ``name``, in manifest order."""
        if name == "test":
            keep = {e for _, e in self.test}
            return [r.exam_id for r in manifest if r.exam_id in keep]
        patients = set(self.train if name == "train" else self.validation)
        return [r.exam_id for r in manifest if r.patient_id in patients]

    def to_json(self):
        return {
            "train": list(self.train),
            "validation": list(self.validation),
            "test": [{"patient_id": p, "exam_id": e} for p, e in self.test],
        }

    @classmethod
    def from_json(cls, d):
        return cls(list(d["train"]), list(d["validation"]), [(t["patient_id"], t["exam_id"]) for t in d["test"]])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def split_sizes(n, fractions=(0.8, 0.1, 0.1)):
    """Partition sizes from cumulative floors of the fractions."""
    cum = np.cumsum(fractions)
    b1 = math.floor(cum[0] * n + 1e-9)
    b2 = math.floor(cum[1] * n + 1e-9)
    return b1, b2 - b1, n - b2


def temporal_split(manifest, fractions=(0.8, 0.1, 0.1)):
    """Assign patients to train/validation/test by the date of their latest exam."""
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    latest = {}
    for r in manifest:
        best = latest.get(r.patient_id)
        if best is None or (r.date, r.exam_id) > (best.date, best.exam_id):
            latest[r.patient_id] = r
    if not latest:
        raise ValueError("cannot split an empty manifest")
    order = sorted(latest, key=lambda p: (latest[p].date, p))
    n_train, n_val, _ = split_sizes(len(order), fractions)
    train = order[:n_train]
    validation = order[n_train : n_train + n_val]
    test = [(p, latest[p].exam_id) for p in order[n_train + n_val :]]
    return SplitAssignment(train, validation, test)


# ---------------------------------------------------------------------------
# binary PGM (P5), 16-bit big-endian samples

def save_view(image, path):
    pixels = np.asarray(image.pixels if isinstance(image, ViewImage) else image)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{MAX_INTENSITY}\n".encode("ascii"))
        fh.write(pixels.astype(">u2").tobytes())


def _header_tokens(blob):
    """Yield (token, end_offset) for the four header fields, skipping comments."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise MalformedHeaderError("header ends before all fields were read")
        if blob[pos : pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise MalformedHeaderError("unterminated header comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if pos >= len(blob):
        # a single whitespace byte must separate maxval from the raster
        raise TruncatedDataError("unexpected end of data")
    return tokens, pos + 1


def load_view(path, view="L-CC"):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise MalformedHeaderError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    try:
        tokens, start = _header_tokens(blob)
    except PGMError as exc:
        raise type(exc)(f"{path}: {exc}") from None
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise MalformedHeaderError(f"{path}: non-numeric header field in {tokens[1:]}") from None
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"{path}: invalid dimensions {width}x{height}")
    if maxval != MAX_INTENSITY:
        raise UnsupportedMaxvalError(f"{path}: unsupported maxval {maxval} (only {MAX_INTENSITY})")
    need = 2 * width * height
    raster = blob[start : start + need]
    if len(raster) < need:
        raise TruncatedDataError(f"{path}: unexpected end of data ({len(raster)} of {need} bytes)")
    pixels = np.frombuffer(raster, dtype=">u2").reshape(height, width).astype(np.uint16)
    return ViewImage(view, pixels)
