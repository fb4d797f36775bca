import os

import mlflow
import pytest

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a model for many epochs")


@pytest.fixture(autouse=True)
def mlflow_tracking(tmp_path, monkeypatch):
    uri = (tmp_path / "mlruns").as_uri()
    monkeypatch.setenv("MLFLOW_TRACKING_URI", uri)
    mlflow.set_tracking_uri(uri)
    yield uri
    while mlflow.active_run() is not None:
        mlflow.end_run()


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def fixtures_path():
    return os.path.join(DATA_DIR, "fixtures.jsonl")
