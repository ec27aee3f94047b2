import numpy as np
import pytest

from weakbox_kit.synth import DatasetSpec, generate_dataset, save_dataset


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Small mixed dataset shared by pipeline-level tests."""
    root = tmp_path_factory.mktemp("tinyds")
    spec = DatasetSpec(count=20, size=64, n_objects_min=1, n_objects_max=2, shapes=("ellipse", "fused"), noise=0.25, seed=19)
    save_dataset(generate_dataset(spec), spec, root)
    return str(root)
