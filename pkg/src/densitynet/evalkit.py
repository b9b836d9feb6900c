"""Evaluation metrics and reader-agreement mathematics."""

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from .common import N_CLASSES


class MetricError(ValueError):
    pass


class UndefinedAUCError(MetricError):
    pass


class DegenerateAgreementError(MetricError):
    pass


def _probs_truths(probabilities, truths):
    p = np.asarray(probabilities, dtype=np.float64)
    t = np.asarray(truths, dtype=np.int64)
    if p.ndim != 2 or len(p) == 0:
        raise MetricError("need a non-empty (n, classes) probability array")
    if t.shape != (len(p),):
        raise MetricError(f"{len(t)} truths for {len(p)} predictions")
    if t.min() < 0 or t.max() >= p.shape[1]:
        raise MetricError("truth labels out of range")
    return p, t


def ranked_classes(probabilities):
    """Classes ordered from most to least likely; ties go to the lower index."""
    p = np.asarray(probabilities, dtype=np.float64)
    return np.argsort(-p, axis=-1, kind="stable")


def top_k_accuracy(probabilities, truths, k):
    p, t = _probs_truths(probabilities, truths)
    if not 1 <= k <= p.shape[1]:
        raise MetricError(f"k must be in 1..{p.shape[1]}, got {k}")
    top = ranked_classes(p)[:, :k]
    return float(np.mean((top == t[:, None]).any(axis=1)))


def superclass_labels(labels):
    return (np.asarray(labels) >= 2).astype(np.int64)


def collapse_superclass(labels):
    """Density classes to dense (1) vs not dense (0)."""
    a = np.asarray(labels)
    if a.size and (a.min() < 0 or a.max() > 3):
        raise MetricError("density labels must be in 0..3")
    return superclass_labels(a)


def superclass_accuracy(probabilities, truths):
    p, t = _probs_truths(probabilities, truths)
    pred = ranked_classes(p)[:, 0]
    return float(np.mean(superclass_labels(pred) == superclass_labels(t)))


def confusion_matrix(truths, predictions, n_classes=N_CLASSES):
    """Rows are ground truth, columns predictions."""
    t = np.asarray(truths, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


# ---------------------------------------------------------------------------
# ROC

@dataclass
class RocCurve:
    thresholds: np.ndarray  # first entry is +inf: nothing predicted positive
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def roc_and_auc(scores, truths):
    """Sweep thresholds over distinct scores (descending); trapezoidal AUC.

    Areas are accumulated in integer counts, so the result equals the
    Mann-Whitney statistic with half credit for ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths).astype(bool)
    if s.shape != t.shape or s.ndim != 1:
        raise MetricError("scores and truths must be aligned 1-d arrays")
    n_pos = int(t.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.r_[0, np.cumsum(t)[ends]]
    fp = np.r_[0, np.cumsum(~t)[ends]]
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    thresholds = np.r_[np.inf, s[ends]]
    return RocCurve(thresholds, fp / n_neg, tp / n_pos, float(auc))


def auc_pair_count(scores, truths):
    """O(n^2) Mann-Whitney reference: P(score+ > score-) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truths).astype(bool)
    pos, neg = s[t], s[~t]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def mac_auc(probabilities, truths):
    """One-vs-rest AUC per class and their mean."""
    p, t = _probs_truths(probabilities, truths)
    aucs = []
    for c in range(p.shape[1]):
        try:
            aucs.append(roc_and_auc(p[:, c], t == c).auc)
        except UndefinedAUCError:
            raise UndefinedAUCError(f"AUC for class {c} is undefined: class {c} is absent or the only class") from None
    aucs = np.array(aucs)
    return aucs, float(np.mean(aucs))


# ---------------------------------------------------------------------------
# report

@dataclass
class EvalReport:
    counts: list
    top1: float
    top2: float
    top3: float
    superclass: float
    class_auc: list
    mac_auc: float
    confusion: list

    def to_dict(self, digits=None):
        fmt = (lambda v: float(f"{v:.{digits}g}")) if digits else float
        return {
            "counts": [int(c) for c in self.counts],
            "top1": fmt(self.top1),
            "top2": fmt(self.top2),
            "top3": fmt(self.top3),
            "superclass": fmt(self.superclass),
            "class_auc": [fmt(v) for v in self.class_auc],
            "mac_auc": fmt(self.mac_auc),
            "confusion": [[int(v) for v in row] for row in self.confusion],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def evaluate(probabilities, truths):
    p, t = _probs_truths(probabilities, truths)
    aucs, mac = mac_auc(p, t)
    return EvalReport(
        counts=np.bincount(t, minlength=p.shape[1]).tolist(),
        top1=top_k_accuracy(p, t, 1),
        top2=top_k_accuracy(p, t, 2),
        top3=top_k_accuracy(p, t, 3),
        superclass=superclass_accuracy(p, t),
        class_auc=aucs.tolist(),
        mac_auc=mac,
        confusion=confusion_matrix(t, ranked_classes(p)[:, 0], p.shape[1]).tolist(),
    )


# ---------------------------------------------------------------------------
# agreement

def cohen_kappa(labels_a, labels_b, n_classes=N_CLASSES):
    """Unweighted kappa, (p_o - p_e) / (1 - p_e)."""
    a = np.asarray(labels_a, dtype=np.int64)
    b = np.asarray(labels_b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise MetricError("kappa needs two aligned, non-empty label vectors")
    if min(a.min(), b.min()) < 0 or max(a.max(), b.max()) >= n_classes:
        raise MetricError(f"labels must be in 0..{n_classes - 1}")
    n = len(a)
    p_o = np.count_nonzero(a == b) / n
    p_e = float(np.dot(np.bincount(a, minlength=n_classes), np.bincount(b, minlength=n_classes))) / (n * n)
    if p_e == 1.0:
        raise DegenerateAgreementError("chance agreement is 1: both raters use one and the same class")
    return (p_o - p_e) / (1 - p_e)


@dataclass
class KappaMatrix:
    raters: list
    values: np.ndarray  # symmetric, unit diagonal

    def __getitem__(self, pair):
        a, b = pair
        return float(self.values[self.raters.index(a), self.raters.index(b)])

    def to_dict(self, digits=None):
        out = {}
        for i, j in itertools.combinations(range(len(self.raters)), 2):
            v = float(self.values[i, j])
            out[f"{self.raters[i]}-{self.raters[j]}"] = float(f"{v:.{digits}g}") if digits else v
        return {"raters": list(self.raters), "kappa": out}

    def dominates(self, other):
        """True when every off-diagonal cell is strictly greater than ``other``'s."""
        off = ~np.eye(len(self.raters), dtype=bool)
        return bool(np.all(self.values[off] > other.values[off]))


def kappa_matrix(raters, n_classes=N_CLASSES):
    """Pairwise kappa between named label vectors (insertion order kept)."""
    names = list(raters)
    vectors = [np.asarray(raters[n]) for n in names]
    lengths = {len(v) for v in vectors}
    if len(lengths) > 1:
        raise MetricError("all raters must label the same exams")
    values = np.eye(len(names))
    for i, j in itertools.combinations(range(len(names)), 2):
        try:
            values[i, j] = values[j, i] = cohen_kappa(vectors[i], vectors[j], n_classes)
        except DegenerateAgreementError as exc:
            raise DegenerateAgreementError(f"raters {names[i]} and {names[j]}: {exc}") from None
    return KappaMatrix(names, values)


# ---------------------------------------------------------------------------
# reader rankings

@dataclass(frozen=True)
class ReaderRanking:
    reader_id: str
    exam_id: str
    ranking: tuple  # classes from most to least likely

    def __post_init__(self):
        r = tuple(int(c) for c in self.ranking)
        if sorted(r) != list(range(N_CLASSES)):
            raise MetricError(f"ranking {self.ranking} by {self.reader_id} on {self.exam_id} is not a permutation of 0..3")
        object.__setattr__(self, "ranking", r)

    @property
    def top(self):
        return self.ranking[0]


def average_one_hot(rankings):
    """Mean of one-hot vectors at each reader's top class."""
    rankings = list(rankings)
    if not rankings:
        raise MetricError("need at least one reader")
    scores = np.zeros(N_CLASSES)
    for r in rankings:
        if not isinstance(r, ReaderRanking):
            r = ReaderRanking("", "", tuple(r))
        scores[r.top] += 1
    return scores / len(rankings)


RANKING_HEADER = ["reader_id", "exam_id", "rank1", "rank2", "rank3", "rank4"]


def write_rankings_csv(rankings, path_or_buffer):
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANKING_HEADER)
        for r in rankings:
            w.writerow([r.reader_id, r.exam_id, *r.ranking])

    if isinstance(path_or_buffer, io.TextIOBase):
        emit(path_or_buffer)
    else:
        with open(path_or_buffer, "w", newline="") as fh:
            emit(fh)


def read_rankings_csv(path_or_buffer):
    def parse(fh):
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RANKING_HEADER:
            raise MetricError(f"rankings CSV header must be {','.join(RANKING_HEADER)}, got {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise MetricError(f"rankings CSV line {lineno}: expected 6 fields, got {len(row)}")
            try:
                ranks = tuple(int(v) for v in row[2:])
            except ValueError:
                raise MetricError(f"rankings CSV line {lineno}: non-integer class index") from None
            out.append(ReaderRanking(row[0], row[1], ranks))
        return out

    if isinstance(path_or_buffer, io.TextIOBase):
        return parse(path_or_buffer)
    with open(path_or_buffer, newline="") as fh:
        return parse(fh)


def rankings_by_exam(rankings):
    """exam_id -> list of rankings, in file order."""
    out = {}
    for r in rankings:
        out.setdefault(r.exam_id, []).append(r)
    return out


def reader_labels(rankings, exam_ids):
    """reader_id -> top-choice label vector over ``exam_ids``."""
    table = {}
    for r in rankings:
        table.setdefault(r.reader_id, {})[r.exam_id] = r.top
    out = {}
    for reader, labels in table.items():
        missing = [e for e in exam_ids if e not in labels]
        if missing:
            raise MetricError(f"reader {reader} did not rank exams {missing[:5]}")
        out[reader] = np.array([labels[e] for e in exam_ids])
    return out


# ---------------------------------------------------------------------------
# ROC CSV

def write_roc_csv(curve, path_or_buffer):
    """``threshold,fpr,tpr`` rows with round-trip float formatting, then ``# auc=``."""
    def emit(fh):
        fh.write("threshold,fpr,tpr\n")
        for th, f, t in curve.points():
            fh.write(f"{th!r},{f!r},{t!r}\n")
        fh.write(f"# auc={curve.auc!r}\n")

    if isinstance(path_or_buffer, io.TextIOBase):
        emit(path_or_buffer)
    else:
        with open(path_or_buffer, "w") as fh:
            emit(fh)


def read_roc_csv(path_or_buffer):
    def parse(fh):
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines or lines[0] != "threshold,fpr,tpr":
            raise MetricError("ROC CSV must start with the header threshold,fpr,tpr")
        if not lines[-1].startswith("# auc="):
            raise MetricError("ROC CSV must end with a '# auc=' line")
        rows = [tuple(float(v) for v in ln.split(",")) for ln in lines[1:-1]]
        th, fpr, tpr = (np.array(col) for col in zip(*rows)) if rows else (np.array([]),) * 3
        return RocCurve(th, fpr, tpr, float(lines[-1][len("# auc="):]))

    if isinstance(path_or_buffer, io.TextIOBase):
        return parse(path_or_buffer)
    with open(path_or_buffer) as fh:
        return parse(fh)


# ---------------------------------------------------------------------------
# synthetic readers

def within_superclass_reader(truths, confusion_rate, rng):
    """Copy of ``truths`` where each label swaps to its superclass partner with
    probability ``confusion_rate`` (0<->1, 2<->3)."""
    t = np.asarray(truths, dtype=np.int64)
    flip = rng.random(len(t)) < confusion_rate
    return np.where(flip, t ^ 1, t)


def noisy_reader(truths, error_rate, rng, n_classes=N_CLASSES):
    """Copy of ``truths`` where each label is replaced by a uniformly drawn
    different class with probability ``error_rate``."""
    t = np.asarray(truths, dtype=np.int64)
    flip = rng.random(len(t)) < error_rate
    other = (t + rng.integers(1, n_classes, size=len(t))) % n_classes
    return np.where(flip, other, t)


def ranking_from_top(top, rng, n_classes=N_CLASSES):
    """A full ranking with ``top`` first and the rest in random order."""
    rest = [c for c in range(n_classes) if c != top]
    rng.shuffle(rest)
    return (int(top), *rest)
