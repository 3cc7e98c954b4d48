import json

import pytest
import torch

from sbvqa.backbone import BackboneConfig
from sbvqa.datagen import SynthSpec, generate
from sbvqa.head import HeadConfig
from sbvqa.model import BranchConfig, SamplerConfig, TrainConfig
from sbvqa.stacker import StackConfig, train_ensemble

TINY_SAMPLER = SamplerConfig(grid_count=2, patch_size=8, t_frames=4)


def tiny_branch(epochs=2, seed=0, **backbone):
    kw = dict(window=(2, 2, 2), depths=(1, 1), embed_dims=(8, 16), heads=(1, 2))
    kw.update(backbone)
    bb = BackboneConfig(**kw)
    return BranchConfig(bb, HeadConfig(bb.out_channels, 8), TrainConfig(epochs=epochs, batch_size=4, seed=seed))


def tiny_stack(K=1, J=2, epochs=2, seed=0):
    return StackConfig([tiny_branch(epochs, seed + 100 * k) for k in range(K)], folds=J,
                       sampler=TINY_SAMPLER, fold_seed=seed)


TINY_RUN = {
    "stack": {"folds": 2, "sampler": {"grid_count": 2, "patch_size": 8, "t_frames": 4},
              "branches": [{"backbone": {"window": [2, 2, 2], "depths": [1, 1], "embed_dims": [8, 16],
                                         "heads": [1, 2]},
                            "head": {"in_channels": 16, "hidden_channels": 8}}]},
    "train": {"epochs": 2, "batch_size": 4},
}


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    spec = SynthSpec(n_clips=6, frames=8, dims=(32, 32), seed=3)
    manifest = generate(spec, out)
    return out, manifest


@pytest.fixture(scope="session")
def tiny_ensemble(tiny_data, tmp_path_factory):
    root, manifest = tiny_data
    out = tmp_path_factory.mktemp("tiny_ens")
    ens = train_ensemble(tiny_stack(), manifest, out)
    return out, ens


@pytest.fixture(scope="session")
def tiny_run_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "run.json"
    p.write_text(json.dumps(TINY_RUN))
    return p


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)
