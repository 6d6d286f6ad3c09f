import numpy as np
import pytest

from trans_ehr.ehr import build_vocabulary, cohort_samples, make_record
from trans_ehr.model import ModelConfig, TransModel
from trans_ehr.synthetic import GeneratorConfig, generate_synthetic_cohort


def three_visit_record(pid="a"):
    return make_record(
        pid,
        [
            {"time": 0.0, "diagnoses": ["d1", "d2"], "medications": ["m1"], "procedures": ["p1"]},
            {"time": 12.0, "diagnoses": ["d2", "d3"], "medications": ["m1", "m2"]},
            {"time": 40.0, "diagnoses": ["d4"], "medications": ["m2"], "procedures": ["p2"]},
        ],
    )


def tiny_model(dtype="float64", **overrides):
    """d=8, h=2, L=1 model over a hand-written 3-visit record."""
    rec = three_visit_record()
    other = make_record(
        "b",
        [
            {"time": 0.0, "diagnoses": ["d1"], "medications": ["m2"]},
            {"time": 5.0, "diagnoses": ["d5"], "procedures": ["p1"]},
        ],
    )
    vocab = build_vocabulary([rec, other], 4)
    cfg = dict(hidden_dim=8, n_heads=2, n_layers=1, se_dim=2, te_dim=4, dropout=0.0, dtype=dtype)
    cfg.update(overrides)
    model = TransModel(ModelConfig(**cfg), vocab)
    samples = cohort_samples([rec, other], vocab)
    return model, samples


@pytest.fixture(scope="session")
def small_cohort():
    records, truth = generate_synthetic_cohort(GeneratorConfig(n_patients=60, noise=0.1), seed=11)
    return records, truth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
