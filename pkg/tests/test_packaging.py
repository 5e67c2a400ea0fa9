import toml

import tunefree_pnp

from conftest import REPO_ROOT


def _project() -> dict:
    return toml.load(REPO_ROOT / "pyproject.toml")["project"]


def test_version_matches_the_manifest():
    assert tunefree_pnp.__version__ == _project()["version"]


def test_scipy_is_a_test_only_dependency():
    project = _project()
    assert not any(dep.startswith("scipy") for dep in project["dependencies"])
    assert any(dep.startswith("scipy") for dep in project["optional-dependencies"]["dev"])
    for path in (REPO_ROOT / "tunefree_pnp").rglob("*.py"):
        assert "scipy" not in path.read_text(encoding="utf-8"), path
