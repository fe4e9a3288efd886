import numpy as np
import pytest
import torch

from liversearch.augment import AugmentConfig
from liversearch.imaging.phantom import generate_phantom_dataset
from liversearch.imaging.manifest import build_manifest_from_dir
from liversearch.selfsup.models import EncoderSpec, HeadSpec, SiameseModel


TINY_SPEC = EncoderSpec(kind="tiny_conv", out_dim=16, width=4)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    model = SiameseModel(TINY_SPEC, HeadSpec())
    model.eval()
    return model


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    """Four small phantom volumes shared by the unit tests."""
    root = tmp_path_factory.mktemp("phantom") / "volumes"
    generate_phantom_dataset(root, 4, seed=11, size=(32, 32))
    return root


@pytest.fixture(scope="session")
def phantom_manifest(phantom_dir):
    return build_manifest_from_dir(phantom_dir, 3, seed=5, n_liver=3, n_nonliver=3)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, phantom_dir, phantom_manifest):
    """A short training run; shared by checkpoint/embed/service/cli tests."""
    from liversearch.selfsup.train import TrainConfig, train

    out_dir = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(batch_size=4, epochs=2, seed=3, checkpoint_every=0)
    aug = AugmentConfig(out_size=(32, 32))
    result = train(
        phantom_manifest,
        TINY_SPEC,
        HeadSpec(),
        cfg,
        aug,
        data_root=phantom_dir,
        out_dir=out_dir,
    )
    return result
