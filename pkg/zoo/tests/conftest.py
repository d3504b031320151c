from pathlib import Path

import pytest

from axmap_zoo import ExportSpec, train_and_export


@pytest.fixture(scope="session")
def export(tmp_path_factory):
    out = tmp_path_factory.mktemp("export")
    return train_and_export(ExportSpec(architecture="lenet-mnist", seed=0,
                                       out_dir=out))


@pytest.fixture(scope="session")
def export_dir(export) -> Path:
    return Path(export.model_path).parent
