import numpy as np
import pytest

from dynsurv.data import Dataset, LongitudinalObservation, SubjectRecord
from dynsurv.jointmodel import JointModelConfig, fit_joint
from dynsurv.simbench import SCENARIOS, simulate_dataset


def make_subject(sid, times, values, event_time, status, **covariates):
    obs = tuple(LongitudinalObservation(sid, float(t), float(v))
                for t, v in zip(times, values))
    return SubjectRecord(subject_id=sid, covariates={k: float(v) for k, v in covariates.items()},
                         event_time=float(event_time), status=int(status),
                         observations=obs)


@pytest.fixture(scope="session")
def scenario_i_dataset():
    dataset, truth = simulate_dataset(SCENARIOS["I"], n=120, seed=2024)
    return dataset, truth


@pytest.fixture(scope="session")
def small_joint_fit(scenario_i_dataset):
    """Joint fit with a single-knotless basis (q=2) so tests stay fast."""
    dataset, _ = scenario_i_dataset
    config = JointModelConfig(
        form="value", baseline="weibull", internal_knots=(),
        group_covariate="treatment", gamma_covariates=("treatment",),
        diagonal_D=True,
    )
    return dataset, fit_joint(dataset, config)


@pytest.fixture
def toy_dataset():
    subjects = (
        make_subject("a", [0.0, 1.0], [2.0, 2.5], 3.0, 1, trt=0),
        make_subject("b", [0.0, 2.0], [1.0, 1.5], 5.0, 0, trt=1),
        make_subject("c", [0.0], [0.5], 7.0, 1, trt=0),
        make_subject("d", [0.0, 0.5, 4.0], [3.0, 2.0, 1.0], 8.0, 0, trt=1),
    )
    return Dataset(subjects, ("trt",))
