import pytest

from scribbleseg.phantom import PhantomParams, ScribbleSynthParams, write_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Ten 48x48 samples split 6/2/2, shared by the harness and CLI tests."""
    root = tmp_path_factory.mktemp("tinyset")
    manifest = write_dataset(
        str(root), 10, PhantomParams(image_size=48), ScribbleSynthParams(),
        split=(0.6, 0.2, 0.2), seed=7,
    )
    return str(root), manifest
