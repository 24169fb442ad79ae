import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dynlat import LatencyPredictor
from dynlat.errors import DomainError, NotFoundError
from dynlat.model import preset_hardware
from dynlat.sched import network_latency


def test_params_and_clone():
    est = LatencyPredictor("tx2", "resnet50", s_net=(8, 4, 7, 1))
    params = est.get_params()
    assert params["hardware"] == "tx2" and params["s_net"] == (8, 4, 7, 1)
    assert clone(est).get_params() == params
    est.set_params(hardware="nano")
    assert est.hardware == "nano"


def test_predict_matches_network_latency():
    est = LatencyPredictor("v100", "resnet50").fit()
    rates = np.random.default_rng(0).random((2, est.n_features_in_))
    got = est.predict(rates)
    for row, val in zip(rates, got):
        assert val == pytest.approx(network_latency(est.network_, row, est.hardware_).total,
                                    rel=1e-12)


def test_uniform_column_broadcasts():
    est = LatencyPredictor("v100", "resnet50").fit()
    a = est.predict([[0.4]])
    b = est.predict(np.full((1, est.n_features_in_), 0.4))
    assert a[0] == b[0]
    assert est.transform([[0.4]]).shape == (1, 16)


def test_static_baseline():
    est = LatencyPredictor("v100", "resnet50", maskers=False).fit()
    assert est.speedup([[1.0]])[0] == 0.0


def test_validation():
    est = LatencyPredictor("v100", "resnet50")
    with pytest.raises(NotFittedError):
        est.predict([[0.5]])
    est.fit()
    with pytest.raises(DomainError):
        est.predict([[1.5]])
    with pytest.raises(DomainError):
        est.predict(np.full((1, 3), 0.5))
    with pytest.raises(ValueError):
        est.predict([[np.nan]])
    with pytest.raises(NotFoundError):
        LatencyPredictor("v101").fit()
    with pytest.raises(TypeError):
        LatencyPredictor(3.0).fit()


def test_accepts_spec_objects():
    est = LatencyPredictor(preset_hardware("nano"), "resnet50").fit()
    assert est.hardware_.name == "nano"
