import pytest

from mrbs.scenario import load_config, run_scenario


@pytest.fixture(scope="session")
def scenario1_run(tmp_path_factory):
    cfg, sc, params = load_config("scenario1")
    out = tmp_path_factory.mktemp("scenario1")
    trace, metrics, manifest = run_scenario(cfg, sc, params, out_dir=out)
    return cfg, sc, trace, metrics, manifest, out


@pytest.fixture(scope="session")
def scenario2_run(tmp_path_factory):
    cfg, sc, params = load_config("scenario2")
    out = tmp_path_factory.mktemp("scenario2")
    trace, metrics, manifest = run_scenario(cfg, sc, params, out_dir=out)
    return cfg, sc, trace, metrics, manifest, out
