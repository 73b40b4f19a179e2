import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ncenet import NCENet
from ncenet.data import StreamConfig, generate_synthetic_stream


@pytest.fixture(scope="module")
def stream():
    return generate_synthetic_stream(StreamConfig(base_classes=4, novel_classes_per_session=2, sessions=1, train_per_class=40, test_per_class=20, ambient_dim=8, class_separation=8.0))


def small(**kw):
    return NCENet(encoder_dims=(16, 16), head_hidden_dim=16, head_output_dim=16, base_epochs=15, incremental_epochs=2, random_state=0, **kw)


def test_get_params_and_clone():
    est = small(lambda_b=0.3)
    params = est.get_params()
    assert params["lambda_b"] == 0.3 and params["k"] == 5
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "state_")
    assert est.set_params(k=3).k == 3


def test_fit_predict_partial_fit(stream):
    s0, s1 = stream.sessions
    est = small().fit(s0.train_x, s0.visible_labels)
    assert est.n_clusters_ == 4
    x0, y0 = stream.test_set(0)
    assert est.score(x0, y0) > 0.8
    assert est.transform(x0).shape == (len(x0), 16)
    est.partial_fit(s1.train_x, n_novel=2)
    assert est.n_clusters_ == 6 and est.n_sessions_ == 2
    assert stream.label_reads() == 0
    x1, y1 = stream.test_set(1)
    labels = est.predict(x1)
    assert set(labels.tolist()) <= set(range(6))


def test_deterministic(stream):
    s0 = stream.sessions[0]
    a = small().fit(s0.train_x, s0.visible_labels).transform(s0.test_x)
    b = small().fit(s0.train_x, s0.visible_labels).transform(s0.test_x)
    assert a.tobytes() == b.tobytes()


def test_input_validation(stream):
    s0 = stream.sessions[0]
    est = small()
    with pytest.raises(NotFittedError):
        est.transform(s0.test_x)
    with pytest.raises(ValueError):
        est.fit(s0.train_x, s0.visible_labels[:-1])
    with pytest.raises(ValueError):
        est.fit(np.full_like(s0.train_x, np.nan), s0.visible_labels)
    est.base_epochs = 1
    est.fit(s0.train_x, s0.visible_labels)
    with pytest.raises(ValueError):
        est.partial_fit(s0.train_x, s0.visible_labels)
    with pytest.raises(ValueError):
        est.transform(s0.test_x[:, :3])
