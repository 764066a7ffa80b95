import numpy as np
import pytest
import torch

from pointrecon.data import gen_synthetic
from pointrecon.harness import OptimizerSpec, TeacherConfig, micro_preset, pretrain

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def dataset100(tmp_path_factory):
    """Fixed 5-class, 100-sample synthetic dataset (80 train / 20 test)."""
    root = tmp_path_factory.mktemp("data100")
    manifest = gen_synthetic(5, 20, 1024, seed=7, out_dir=root)
    return manifest


@pytest.fixture(scope="session")
def dataset64(tmp_path_factory):
    """4-class dataset with exactly 64 training samples."""
    root = tmp_path_factory.mktemp("data64")
    manifest = gen_synthetic(4, 20, 1024, seed=11, out_dir=root)
    assert len(manifest.split["train"]) == 64
    return manifest


@pytest.fixture(scope="session")
def converged_run(tmp_path_factory, dataset100):
    """Micro pretraining to convergence with noise-free oracle teachers;
    shared by the zero-shot, fine-tune, and analysis tests."""
    out = tmp_path_factory.mktemp("converged")
    cfg = micro_preset(
        data_dir=str(dataset100.root), out_dir=str(out / "run"), mode="recon_cmc",
        teachers=TeacherConfig(dim=64, sigma=0.0), seed=3, eval_every=500,
    )
    summary = pretrain(cfg)
    return {"summary": summary, "checkpoint": summary["checkpoint"],
            "manifest": dataset100, "config": cfg}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
