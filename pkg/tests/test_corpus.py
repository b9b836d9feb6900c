import datetime
import math

import numpy as np
import pytest

from densitynet import corpus as cp
from densitynet import synthgen as sg
from densitynet.common import VIEWS, ViewImage


def record(exam_id, patient_id, date, report="The breasts are extremely dense."):
    return cp.ExamRecord(exam_id, patient_id, date, {v: f"{exam_id}_{v}.pgm" for v in VIEWS}, report)


# report parsing

def test_parse_report_examples():
    assert cp.parse_report("Findings: The breast tissue is heterogeneously dense, which may obscure.") == 2
    assert cp.parse_report("Unremarkable exam.") is None
    assert cp.parse_report("THE BREASTS ARE ALMOST ENTIRELY FATTY.") == 0
    assert cp.parse_report("There are scattered areas of fibroglandular density.") == 1


def test_conflicting_phrases_are_ambiguous():
    with pytest.raises(cp.AmbiguousReportError) as info:
        cp.parse_report("extremely dense ... almost entirely fatty")
    assert info.value.classes == (0, 3)


def test_parse_birads():
    assert cp.parse_birads("IMPRESSION: BI-RADS 2 - benign findings.") == 2
    assert cp.parse_birads("no assessment") is None


# exclusion

def test_exclusion_counts():
    recs = [record(f"E{i}", f"P{i}", "2015-01-01") for i in range(5)]
    kept, n = cp.apply_exclusion(cp.Manifest(recs))
    assert n == 0 and len(kept) == 5
    recs = [record(f"E{i}", f"P{i}", "2015-01-01", "No density statement.") for i in range(5)]
    kept, n = cp.apply_exclusion(cp.Manifest(recs))
    assert n == 5 and len(kept) == 0


def test_exclusion_rate_matches_generator_flag():
    cfg = sg.PhantomConfig(seed=21, missing_density_fraction=0.0025)
    exams, manifest = sg.generate_corpus(n_exams=20000, config=cfg)
    _, n = cp.apply_exclusion(manifest)
    assert n == sum(e.missing_density for e in exams)
    mean, sd = 20000 * 0.0025, math.sqrt(20000 * 0.0025 * 0.9975)
    assert abs(n - mean) <= 3 * sd


def test_duplicate_exam_ids_rejected():
    with pytest.raises(cp.ManifestError):
        cp.Manifest([record("E1", "P1", "2015-01-01"), record("E1", "P2", "2015-01-01")])


def test_manifest_round_trip(tmp_path):
    recs = [record(f"E{i}", f"P{i % 3}", f"201{i}-03-04") for i in range(6)]
    path = tmp_path / "manifest.jsonl"
    cp.Manifest(recs).write_jsonl(path)
    back = cp.Manifest.read_jsonl(path)
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]
    path.write_text('{"exam_id": "E1"}\n')
    with pytest.raises(cp.ManifestError, match="manifest.jsonl:1"):
        cp.Manifest.read_jsonl(path)


# split

def test_ten_patients_one_per_year():
    recs = [record(f"E{y}", f"P{y}", f"{y}-06-01") for y in range(2010, 2020)]
    split = cp.temporal_split(cp.Manifest(recs))
    assert split.train == [f"P{y}" for y in range(2010, 2018)]
    assert split.validation == ["P2018"]
    assert split.test == [("P2019", "E2019")]


def test_test_patient_keeps_latest_exam():
    recs = [record(f"A{y}", f"P{y}", f"{y}-06-01") for y in range(2000, 2009)]
    recs += [record("X1", "PX", "2020-01-01"), record("X3", "PX", "2022-01-01"), record("X2", "PX", "2021-01-01")]
    split = cp.temporal_split(cp.Manifest(recs))
    assert split.test == [("PX", "X3")]
    assert split.exam_ids(cp.Manifest(recs), "test") == ["X3"]


def test_split_sizes_are_cumulative_floors():
    for n in range(1, 300):
        a, b, c = cp.split_sizes(n)
        assert a == math.floor(0.8 * n + 1e-9) and a + b == math.floor(0.9 * n + 1e-9)
        assert a + b + c == n


def random_manifest(rng, n_patients):
    recs = []
    k = 0
    base = datetime.date(2010, 1, 1)
    for p in range(n_patients):
        for _ in range(int(rng.integers(1, 4))):
            date = base + datetime.timedelta(days=int(rng.integers(0, 400)))
            recs.append(record(f"E{k}", f"P{p}", date))
            k += 1
    return recs


def check_split(recs, split):
    manifest = cp.Manifest(recs)
    parts = [set(split.train), set(split.validation), {p for p, _ in split.test}]
    assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
    patients = {r.patient_id for r in recs}
    assert set().union(*parts) == patients
    n_train, n_val, n_test = cp.split_sizes(len(patients))
    assert (len(parts[0]), len(parts[1]), len(parts[2])) == (n_train, n_val, n_test)
    latest = {}
    for r in recs:
        latest[r.patient_id] = max(latest.get(r.patient_id, (r.date, r.exam_id)), (r.date, r.exam_id))
    for p, e in split.test:
        assert latest[p][1] == e
    assert len(split.exam_ids(manifest, "test")) == n_test


def test_random_manifests_split_cleanly():
    rng = np.random.default_rng(22)
    for _ in range(300):
        recs = random_manifest(rng, int(rng.integers(1, 40)))
        split = cp.temporal_split(cp.Manifest(recs))
        check_split(recs, split)
        shuffled = [recs[i] for i in rng.permutation(len(recs))]
        assert cp.temporal_split(cp.Manifest(shuffled)) == split


def test_bad_fractions_and_empty_manifest():
    with pytest.raises(ValueError):
        cp.temporal_split(cp.Manifest([record("E", "P", "2015-01-01")]), (0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        cp.temporal_split(cp.Manifest([]))


def test_split_file_round_trip(tmp_path):
    rng = np.random.default_rng(23)
    split = cp.temporal_split(cp.Manifest(random_manifest(rng, 25)))
    split.save(tmp_path / "split.json")
    assert cp.SplitAssignment.load(tmp_path / "split.json") == split


# PGM

def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(24)
    pixels = rng.integers(0, 65536, size=(13, 7)).astype(np.uint16)
    pixels[0, 0], pixels[-1, -1] = 0, 65535
    cp.save_view(ViewImage("R-CC", pixels), tmp_path / "a.pgm")
    back = cp.load_view(tmp_path / "a.pgm", "R-CC")
    assert back.view == "R-CC" and back.pixels.dtype == np.uint16
    assert np.array_equal(back.pixels, pixels)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 13\n65535\n")
    assert raw[len(b"P5\n7 13\n65535\n"):][:2] == b"\x00\x00"


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n65535\n" + np.array([1, 258], dtype=">u2").tobytes())
    assert cp.load_view(path).pixels.tolist() == [[1, 258]]


def test_pgm_errors(tmp_path):
    path = tmp_path / "b.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(cp.UnsupportedMaxvalError, match="unsupported maxval"):
        cp.load_view(path)
    path.write_bytes(b"P5\n2 2\n65535\n" + bytes(5))
    with pytest.raises(cp.TruncatedDataError, match="unexpected end of data"):
        cp.load_view(path)
    path.write_bytes(b"P2\n2 2\n65535\n")
    with pytest.raises(cp.MalformedHeaderError):
        cp.load_view(path)
    path.write_bytes(b"P5\n2 x\n65535\n" + bytes(8))
    with pytest.raises(cp.MalformedHeaderError):
        cp.load_view(path)
