import numpy as np
import pytest

from dynsurv.data import (
    Dataset,
    LongitudinalObservation,
    SubjectRecord,
    assemble_dataset,
    load_dataset,
    load_longitudinal_csv,
    load_survival_csv,
    risk_set,
    save_longitudinal_csv,
    save_survival_csv,
)
from dynsurv.errors import DataError

from conftest import make_subject


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_longitudinal_basic(tmp_path):
    p = write(tmp_path / "l.csv", "subject_id,time,value\ns1,0.0,2.1\ns1,1.0,2.4\n")
    obs = load_longitudinal_csv(p)
    assert len(obs) == 2
    assert obs[0] == LongitudinalObservation("s1", 0.0, 2.1)
    assert obs[1].time == 1.0


def test_load_longitudinal_header_only(tmp_path):
    p = write(tmp_path / "l.csv", "subject_id,time,value\n")
    assert load_longitudinal_csv(p) == []


def test_load_longitudinal_bad_cell_reports_row(tmp_path):
    p = write(tmp_path / "l.csv", "subject_id,time,value\ns1,abc,2.0\n")
    with pytest.raises(DataError, match="row 1"):
        load_longitudinal_csv(p)


def test_load_longitudinal_missing_file_and_bad_header(tmp_path):
    with pytest.raises(DataError):
        load_longitudinal_csv(tmp_path / "nope.csv")
    p = write(tmp_path / "l.csv", "id,time,value\n")
    with pytest.raises(DataError, match="header"):
        load_longitudinal_csv(p)


def test_load_survival_basic(tmp_path):
    p = write(tmp_path / "s.csv",
              "subject_id,event_time,status,trt\ns1,5.2,1,1\n")
    records, names = load_survival_csv(p)
    assert names == ["trt"]
    assert records[0]["status"] == 1
    assert records[0]["covariates"] == {"trt": 1.0}


def test_load_survival_domain_errors(tmp_path):
    p = write(tmp_path / "s.csv", "subject_id,event_time,status\ns1,-1.0,0\n")
    with pytest.raises(DataError, match="event_time"):
        load_survival_csv(p)
    p = write(tmp_path / "s.csv", "subject_id,event_time,status\ns1,1.0,2\n")
    with pytest.raises(DataError, match="status"):
        load_survival_csv(p)
    p = write(tmp_path / "s.csv",
              "subject_id,event_time,status\ns1,1.0,1\ns1,2.0,0\n")
    with pytest.raises(DataError, match="duplicate"):
        load_survival_csv(p)


def test_assemble_basic():
    obs = [LongitudinalObservation("s1", 0.0, 1.0),
           LongitudinalObservation("s1", 1.0, 2.0)]
    recs = [{"subject_id": "s1", "event_time": 5.0, "status": 1,
             "covariates": {"x": 0.0}}]
    ds = assemble_dataset(obs, recs, ("x",))
    assert len(ds) == 1
    assert len(ds.subject("s1").observations) == 2


def test_assemble_rejects_observation_after_event_time():
    obs = [LongitudinalObservation("s1", 0.0, 1.0),
           LongitudinalObservation("s1", 6.0, 2.0)]
    recs = [{"subject_id": "s1", "event_time": 5.0, "status": 1, "covariates": {}}]
    with pytest.raises(DataError, match="after event time"):
        assemble_dataset(obs, recs, ())


def test_assemble_rejects_orphans_and_empty_subjects():
    obs = [LongitudinalObservation("s9", 0.0, 1.0)]
    recs = [{"subject_id": "s1", "event_time": 5.0, "status": 1, "covariates": {}}]
    with pytest.raises(DataError, match="no survival record"):
        assemble_dataset(obs, recs, ())
    with pytest.raises(DataError, match="no longitudinal observations"):
        assemble_dataset([], recs, ())


def test_observation_time_may_equal_event_time():
    subject = make_subject("s1", [0.0, 5.0], [1.0, 2.0], 5.0, 1)
    assert subject.observations[-1].time == subject.event_time


def test_subject_invariants():
    with pytest.raises(DataError):
        make_subject("s1", [0.0, 0.0], [1.0, 2.0], 5.0, 1)
    with pytest.raises(DataError):
        make_subject("s1", [], [], 5.0, 1)
    with pytest.raises(DataError):
        make_subject("s1", [0.0], [1.0], 5.0, 2)
    with pytest.raises(DataError):
        SubjectRecord("s1", {"x": float("nan")}, 5.0, 1,
                      (LongitudinalObservation("s1", 0.0, 1.0),))


def test_dataset_schema_checks(toy_dataset):
    with pytest.raises(DataError, match="duplicate"):
        Dataset(toy_dataset.subjects + (toy_dataset.subjects[0],),
                toy_dataset.covariate_names)
    with pytest.raises(DataError, match="schema"):
        Dataset(toy_dataset.subjects, ("other",))


def test_risk_set_examples():
    ds = Dataset(
        (
            make_subject("a", [0.0], [1.0], 3.0, 1),
            make_subject("b", [0.0], [1.0], 5.0, 0),
            make_subject("c", [0.0], [1.0], 7.0, 1),
        ),
        (),
    )
    assert risk_set(ds, 4.0) == {"b", "c"}
    assert risk_set(ds, 0.0) == {"a", "b", "c"}
    assert risk_set(ds, 7.0) == set()
    with pytest.raises(ValueError):
        risk_set(ds, -1.0)


def test_risk_set_monotone(toy_dataset):
    grid = np.linspace(0, 10, 21)
    sets = [risk_set(toy_dataset, float(t)) for t in grid]
    for earlier, later in zip(sets, sets[1:]):
        assert later <= earlier
    assert len(sets[0]) == len(toy_dataset)


def test_csv_round_trip(tmp_path, scenario_i_dataset):
    dataset, _ = scenario_i_dataset
    lpath, spath = tmp_path / "l.csv", tmp_path / "s.csv"
    save_longitudinal_csv(dataset, lpath)
    save_survival_csv(dataset, spath)
    back = load_dataset(lpath, spath)
    assert back.covariate_names == dataset.covariate_names
    assert len(back) == len(dataset)
    for s1, s2 in zip(dataset.subjects, back.subjects):
        assert s1 == s2
    # writing the round-tripped dataset reproduces the files byte for byte
    lpath2, spath2 = tmp_path / "l2.csv", tmp_path / "s2.csv"
    save_longitudinal_csv(back, lpath2)
    save_survival_csv(back, spath2)
    assert lpath.read_bytes() == lpath2.read_bytes()
    assert spath.read_bytes() == spath2.read_bytes()
