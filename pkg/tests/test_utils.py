from pathlib import Path

import numpy as np
import pytest
import yaml
from pydantic import BaseModel, ConfigDict

from ihpmp.integrate import IntegratorConfig
from ihpmp.pmp_check import PMPTolerances
from ihpmp.utils import (
    as_vector,
    load_config,
    parallel_map,
    read_config_file,
    replace_pydantic_model,
    save_csv,
    successive_differences,
    to_tuple,
    write_json,
    write_yaml,
)
from ihpmp.wandb_utils import scalar_metrics


class Inner(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    integrator: IntegratorConfig = IntegratorConfig()
    tolerances: PMPTolerances = PMPTolerances()


class Outer(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    name: str = "run"
    inner: Inner = Inner()


def test_replace_pydantic_model():
    model = Outer()
    updated = replace_pydantic_model(model, {"inner": {"integrator": {"step": 5e-3}}})
    assert updated.inner.integrator.step == 5e-3
    assert updated.inner.integrator.method == model.inner.integrator.method
    assert updated.inner.tolerances == model.inner.tolerances
    assert model.inner.integrator.step == 1e-2

    updated = replace_pydantic_model(model, {"name": "a"}, {"name": "b"})
    assert updated.name == "b"


def test_load_config(tmp_path: Path):
    path = tmp_path / "config.yaml"
    data = {"name": "from-file", "inner": {"tolerances": {"adjoint": 1e-8}}}
    path.write_text(yaml.safe_dump(data))
    config = load_config(path, Outer)
    assert config.name == "from-file"
    assert config.inner.tolerances.adjoint == 1e-8

    same = Outer(name="object")
    assert load_config(same, Outer) is same


def test_read_config_file_accepts_json(tmp_path: Path):
    path = tmp_path / "config.json"
    path.write_text('{"name": "json", "inner": {}}')
    assert read_config_file(path) == {"name": "json", "inner": {}}


def test_read_config_file_errors(tmp_path: Path):
    with pytest.raises(ValueError):
        read_config_file(tmp_path / "config.toml")
    with pytest.raises(FileNotFoundError):
        read_config_file(tmp_path / "missing.yaml")
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError, match="mapping"):
        read_config_file(path)


def test_as_vector():
    np.testing.assert_array_equal(as_vector(2.0, 3, "b"), [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(as_vector([1, 2], 2, "b"), [1.0, 2.0])
    with pytest.raises(ValueError, match="psi0"):
        as_vector([1.0, 2.0], 3, "psi0")
    assert to_tuple(np.array([[1.0], [2.5]])) == (1.0, 2.5)


def test_successive_differences():
    values = np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 5.0]])
    np.testing.assert_allclose(successive_differences(values), [5.0, 1.0])


def test_parallel_map_keeps_order():
    items = list(range(10))
    assert parallel_map(lambda x: x * x, items) == [x * x for x in items]
    assert parallel_map(lambda x: x * x, items, jobs=4) == [x * x for x in items]


def test_save_and_write(tmp_path: Path):
    path = save_csv(tmp_path / "nested" / "table.csv", ["t", "x1"], np.array([[0.0, 1.0]]))
    assert path.read_text().splitlines()[0] == "t,x1"

    write_json(tmp_path / "config.json", Outer())
    assert read_config_file(tmp_path / "config.json")["name"] == "run"
    write_yaml(tmp_path / "config.yaml", Outer(name="yaml"))
    assert load_config(tmp_path / "config.yaml", Outer) == Outer(name="yaml")


def test_scalar_metrics():
    data = {"passed": True, "sweep": {"eps": 1e-6, "horizons": [1, 2]}, "name": "x", "n": 3}
    assert scalar_metrics(data) == {"passed": 1.0, "sweep/eps": 1e-6, "n": 3.0}
