"""Synthetic four-view screening exams.

Each view is a phantom: a half-ellipse breast against the chest wall, a
pectoral wedge on oblique views, and bright fibroglandular blobs covering a
class-dependent fraction of the breast over a darker fatty background. Every
exam renders from its own RNG stream derived from ``(seed, exam serial)`` so
exams can be rendered lazily, in any order, and in parallel.
"""

import datetime
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .common import (
    BIRADS_GIVEN_DENSITY,
    DENSITY_MARGINALS,
    DENSITY_PHRASES,
    MAX_INTENSITY,
    MISSING_DENSITY_FRACTION,
    VIEWS,
    ViewImage,
    is_mlo,
    is_right,
)
from .corpus import ExamRecord, Manifest, save_view

DEFAULT_TISSUE_INTERVALS = ((0.02, 0.10), (0.10, 0.40), (0.40, 0.75), (0.75, 0.95))
FIRST_EXAM_DATE = datetime.date(2010, 1, 1)


@dataclass
class PhantomConfig:
    height: int = 128
    width: int = 96
    tissue_intervals: tuple = DEFAULT_TISSUE_INTERVALS
    noise_sigma: float = 2000.0
    class_marginals: tuple = tuple(DENSITY_MARGINALS)
    birads_given_density: tuple = tuple(map(tuple, BIRADS_GIVEN_DENSITY))
    seed: int = 0
    missing_density_fraction: float = MISSING_DENSITY_FRACTION
    # intensity model; the clinical calibration is unknown, these are tunables
    fat_level: float = 14000.0
    gland_level: float = 30000.0
    pectoral_level: float = 24000.0
    exposure_range: tuple = (0.4, 2.0)
    # tissue thins towards the skin line: intensity scales by 1 - a * r^2
    falloff_range: tuple = (0.3, 0.8)
    n_blobs: int = 14
    # both breasts share one tissue fraction per exam, each view jittered by this sd
    view_jitter: float = 0.02
    # screening findings behind the overall BI-RADS label: benign exams show
    # calcification specks, recalled exams a focal asymmetry (an extra patch
    # of glandular tissue) in one breast
    calcification_level: float = 52000.0
    asymmetry_radius: tuple = (6.0, 10.0)

    def __post_init__(self):
        self.tissue_intervals = tuple(tuple(float(v) for v in iv) for iv in self.tissue_intervals)
        self.class_marginals = tuple(float(v) for v in self.class_marginals)
        self.birads_given_density = tuple(tuple(float(v) for v in row) for row in self.birads_given_density)
        self.exposure_range = tuple(float(v) for v in self.exposure_range)
        self.falloff_range = tuple(float(v) for v in self.falloff_range)
        self.asymmetry_radius = tuple(float(v) for v in self.asymmetry_radius)
        if self.height < 8 or self.width < 8:
            raise ValueError("phantom images must be at least 8x8")
        if len(self.class_marginals) != 4 or abs(sum(self.class_marginals) - 1) > 1e-9:
            raise ValueError("class marginals must be 4 probabilities summing to 1")
        if len(self.birads_given_density) != 4:
            raise ValueError("BI-RADS table needs one row per density class")
        for row in self.birads_given_density:
            if len(row) != 3 or abs(sum(row) - 1) > 1e-9:
                raise ValueError("each BI-RADS-given-density row must be 3 probabilities summing to 1")
        if len(self.tissue_intervals) != 4:
            raise ValueError("need one tissue-fraction interval per class")
        prev_hi = -np.inf
        for lo, hi in self.tissue_intervals:
            if not (0 <= lo < hi <= 1) or lo < prev_hi:
                raise ValueError("tissue-fraction intervals must lie in [0, 1], be disjoint and increase with class")
            prev_hi = hi
        if not 0 <= self.missing_density_fraction <= 1:
            raise ValueError("missing_density_fraction must be in [0, 1]")
        if not 0 <= self.falloff_range[0] <= self.falloff_range[1] < 1:
            raise ValueError("falloff_range must satisfy 0 <= low <= high < 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.view_jitter < 0:
            raise ValueError("view_jitter must be non-negative")
        if not 0 < self.asymmetry_radius[0] <= self.asymmetry_radius[1]:
            raise ValueError("asymmetry_radius must satisfy 0 < low <= high")

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "tissue_intervals": [list(iv) for iv in self.tissue_intervals],
            "noise_sigma": self.noise_sigma,
            "class_marginals": list(self.class_marginals),
            "birads_given_density": [list(r) for r in self.birads_given_density],
            "seed": self.seed,
            "missing_density_fraction": self.missing_density_fraction,
            "fat_level": self.fat_level,
            "gland_level": self.gland_level,
            "pectoral_level": self.pectoral_level,
            "exposure_range": list(self.exposure_range),
            "falloff_range": list(self.falloff_range),
            "n_blobs": self.n_blobs,
            "view_jitter": self.view_jitter,
            "calcification_level": self.calcification_level,
            "asymmetry_radius": list(self.asymmetry_radius),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PhantomTruth:
    """Ground-truth geometry behind one rendered view."""

    breast: np.ndarray  # breast region, pectoral wedge excluded
    pectoral: np.ndarray
    gland: np.ndarray
    fraction: float
    exposure: float
    findings: np.ndarray = None  # pixels covered by calcifications or an asymmetry


def _breast_geometry(view, config, rng):
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h * rng.uniform(0.45, 0.55)
    semi_y = h * rng.uniform(0.36, 0.46)
    semi_x = w * rng.uniform(0.65, 0.9)
    radius2 = ((yy + 0.5 - cy) / semi_y) ** 2 + ((xx + 0.5) / semi_x) ** 2
    breast = radius2 <= 1.0
    pectoral = np.zeros_like(breast)
    if is_mlo(view):
        # wedge against the chest wall in the top corner
        ph = h * rng.uniform(0.3, 0.45)
        pw = w * rng.uniform(0.2, 0.35)
        pectoral = ((yy + 0.5) / ph + (xx + 0.5) / pw <= 1.0) & breast
    breast &= ~pectoral
    return yy, xx, breast, pectoral, radius2


def _blob_field(yy, xx, breast, n_blobs, rng):
    ys, xs = np.nonzero(breast)
    field = np.zeros(breast.shape)
    scale = np.sqrt(breast.sum() / np.pi)
    picks = rng.integers(0, len(ys), size=n_blobs)
    for k in range(n_blobs):
        cy, cx = ys[picks[k]] + 0.5, xs[picks[k]] + 0.5
        sa, sb = scale * rng.uniform(0.15, 0.45), scale * rng.uniform(0.08, 0.3)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (yy + 0.5 - cy) * c + (xx + 0.5 - cx) * s
        v = -(yy + 0.5 - cy) * s + (xx + 0.5 - cx) * c
        field += rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((u / sa) ** 2 + (v / sb) ** 2))
    # tiny ramp towards the nipple breaks ties in flat regions deterministically
    return field + 1e-6 * xx / xx.max()


def _findings_mask(kind, breast, config, rng):
    ys, xs = np.nonzero(breast)
    mask = np.zeros_like(breast)
    if kind == "calcifications":
        for k in rng.integers(0, len(ys), size=int(rng.integers(4, 9))):
            mask[ys[k] : ys[k] + 2, xs[k] : xs[k] + 2] = True
    elif kind == "asymmetry":
        k = rng.integers(0, len(ys))
        r = rng.uniform(*config.asymmetry_radius)
        yy, xx = np.ogrid[: breast.shape[0], : breast.shape[1]]
        mask = (yy - ys[k]) ** 2 + (xx - xs[k]) ** 2 <= r * r
    elif kind is not None:
        raise ValueError(f"unknown finding {kind!r}")
    return mask & breast


def render_view_with_truth(density, view, config, rng, finding=None, fraction=None):
    """Render one view and return it with its ground-truth masks.

    ``finding`` is None, ``"calcifications"`` or ``"asymmetry"``. The tissue
    fraction is drawn from the class interval unless given.
    """
    if fraction is None:
        fraction = rng.uniform(*config.tissue_intervals[density])
    exposure = rng.uniform(*config.exposure_range)
    yy, xx, breast, pectoral, radius2 = _breast_geometry(view, config, rng)
    field = _blob_field(yy, xx, breast, config.n_blobs, rng)
    values = field[breast]
    n_gland = int(round(fraction * values.size))
    gland = np.zeros_like(breast)
    if n_gland > 0:
        cut = np.partition(values, values.size - n_gland)[values.size - n_gland]
        gland = breast & (field >= cut)
    img = np.zeros(breast.shape)
    img[breast] = config.fat_level
    img[gland] = config.gland_level
    img[pectoral] = config.pectoral_level
    findings = _findings_mask(finding, breast, config, rng) if finding else np.zeros_like(breast)
    img[findings] = config.gland_level if finding == "asymmetry" else config.calcification_level
    falloff = rng.uniform(*config.falloff_range)
    img *= exposure * (1.0 - falloff * np.minimum(radius2, 1.0))
    img += rng.normal(0.0, config.noise_sigma, size=img.shape)
    if is_right(view):
        flip = np.s_[:, ::-1]
        img, breast, pectoral, gland = img[flip], breast[flip], pectoral[flip], gland[flip]
        findings = findings[flip]
    image = ViewImage(view, np.clip(np.rint(img), 0, MAX_INTENSITY).astype(np.uint16))
    truth = PhantomTruth(breast, pectoral, gland, float(gland.sum() / breast.sum()), exposure, findings)
    return image, truth


def render_view(density, view, config, rng, finding=None, fraction=None):
    """Render one phantom view of the given density class."""
    return render_view_with_truth(density, view, config, rng, finding, fraction)[0]


def view_findings(birads, rng):
    """Finding to draw in each view for an overall BI-RADS assessment."""
    if birads == 2:
        return {v: "calcifications" for v in VIEWS}
    if birads == 0:
        side = "L" if rng.random() < 0.5 else "R"
        return {v: "asymmetry" if v.startswith(side) else None for v in VIEWS}
    return {v: None for v in VIEWS}


_INTRO = (
    "Bilateral screening mammogram.",
    "Digital screening mammography, standard CC and MLO views of both breasts.",
    "Screening examination of both breasts was performed.",
)
_COMPARISON = (
    "Comparison is made to prior studies.",
    "No prior examinations are available for comparison.",
    "Compared with the examination of the previous year.",
)
_DENSITY_SENTENCES = (
    ("The breasts are {}.", "Breast composition: the breasts are {}."),
    ("There are {}.", "Breast composition: there are {}."),
    ("The breasts are {}, which may obscure small masses.", "The breast tissue is {}."),
    ("The breasts are {}, which lowers the sensitivity of mammography.", "The breast tissue is {}."),
)
_FINDINGS = (
    "No suspicious masses, calcifications or architectural distortion.",
    "There is no mammographic evidence of malignancy.",
    "Stable benign-appearing calcifications are noted.",
    "Skin and nipple are unremarkable.",
)
_IMPRESSION = (
    "IMPRESSION: BI-RADS 0 - incomplete, additional imaging evaluation is needed.",
    "IMPRESSION: BI-RADS 1 - negative.",
    "IMPRESSION: BI-RADS 2 - benign findings.",
)


def compose_report(density, rng, birads=None):
    """Templated report text mentioning the density phrase for ``density`` (or none)."""
    parts = [rng.choice(_INTRO), rng.choice(_COMPARISON)]
    if density is not None:
        template = rng.choice(_DENSITY_SENTENCES[density])
        parts.append(str(template).format(DENSITY_PHRASES[density]))
    n_findings = int(rng.integers(1, 3))
    parts.extend(rng.choice(_FINDINGS, size=n_findings, replace=False))
    if birads is not None:
        parts.append(_IMPRESSION[birads])
    return " ".join(str(p) for p in parts)


@dataclass
class SyntheticExam:
    exam_id: str
    patient_id: str
    date: datetime.date
    density: int
    birads: int
    report: str
    missing_density: bool
    serial: int
    config: PhantomConfig = field(repr=False)

    def rng(self):
        return np.random.default_rng([self.config.seed, 1, self.serial])

    @cached_property
    def views(self):
        """The four rendered views, keyed by view kind."""
        return self.render()[0]

    def render(self):
        rng = self.rng()
        findings = view_findings(self.birads, rng)
        exam_fraction = rng.uniform(*self.config.tissue_intervals[self.density])
        images, truths = {}, {}
        for view in VIEWS:
            fraction = float(np.clip(exam_fraction + rng.normal(0.0, self.config.view_jitter), 0.0, 1.0))
            images[view], truths[view] = render_view_with_truth(self.density, view, self.config, rng, findings[view],
                                                                fraction)
        return images, truths

    def pixel_stack(self):
        return np.stack([self.views[v].pixels for v in VIEWS])


def generate_corpus(n_patients=None, exams_per_patient=(1, 3), config=None, n_exams=None):
    """Sample patients, exam dates, labels and reports.

    Returns ``(exams, manifest)``: exams ordered by patient then date, and the
    matching manifest with image paths relative to the corpus directory.
    Pixel data is rendered on first access to ``exam.views``. With
    ``n_exams`` patients are added until exactly that many exams exist (the
    last patient's history is cut short).
    """
    if n_patients is None and n_exams is None:
        raise ValueError("give n_patients or n_exams")
    if n_patients is not None and n_patients < 1:
        raise ValueError("n_patients must be at least 1")
    if n_exams is not None and n_exams < 1:
        raise ValueError("n_exams must be at least 1")
    lo, hi = exams_per_patient
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid exams_per_patient range {exams_per_patient}")
    config = config or PhantomConfig()
    rng = np.random.default_rng([config.seed, 0])
    marginals = np.array(config.class_marginals)
    conditional = np.array(config.birads_given_density)
    exams = []
    serial = 0
    p = 0
    while (n_patients is None or p < n_patients) and (n_exams is None or serial < n_exams):
        patient_id = f"P{p:06d}"
        p += 1
        count = int(rng.integers(lo, hi + 1))
        if n_exams is not None:
            count = min(count, n_exams - serial)
        date = FIRST_EXAM_DATE + datetime.timedelta(days=int(rng.integers(0, 6 * 365)))
        for _ in range(count):
            density = int(rng.choice(4, p=marginals))
            birads = int(rng.choice(3, p=conditional[density]))
            missing = bool(rng.random() < config.missing_density_fraction)
            report = compose_report(None if missing else density, rng, birads=birads)
            exams.append(
                SyntheticExam(
                    exam_id=f"E{serial:07d}",
                    patient_id=patient_id,
                    date=date,
                    density=density,
                    birads=birads,
                    report=report,
                    missing_density=missing,
                    serial=serial,
                    config=config,
                )
            )
            serial += 1
            date += datetime.timedelta(days=int(rng.integers(300, 800)))
    return exams, build_manifest(exams)


def image_path(exam_id, view):
    return f"images/{exam_id}_{view}.pgm"


def build_manifest(exams, root=None):
    records = [
        ExamRecord(e.exam_id, e.patient_id, e.date, {v: image_path(e.exam_id, v) for v in VIEWS}, e.report)
        for e in exams
    ]
    return Manifest(records, root=root)


def truth_table(exams):
    """Ground-truth labels per exam, for the corpus sidecar file."""
    return [
        {
            "exam_id": e.exam_id,
            "patient_id": e.patient_id,
            "density": e.density,
            "birads": e.birads,
            "missing_density": e.missing_density,
        }
        for e in exams
    ]


def write_corpus(exams, out_dir, config):
    """Write PGM images, ``manifest.jsonl``, ``truth.json`` and ``phantom.json``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(exams, root=out_dir)
    for exam in exams:
        for view, image in exam.views.items():
            save_view(image, out_dir / image_path(exam.exam_id, view))
        # release rendered pixels; a corpus may not fit in memory
        exam.__dict__.pop("views", None)
    manifest.write_jsonl(out_dir / "manifest.jsonl")
    with open(out_dir / "truth.json", "w") as fh:
        json.dump(truth_table(exams), fh, indent=0)
        fh.write("\n")
    with open(out_dir / "phantom.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=1)
        fh.write("\n")
    return manifest
