import pytest

from stmtl.config import RunConfig

# a model and dataset small enough to train all phases in about a second
TINY = dict(T=8, H=32, W=32, n_train=2, n_val=1, n_instruments=2, enc_channels=(4, 4, 4, 4),
            seg_channels=(4, 4, 4, 4), sal_channels=(4, 4, 4, 4), clip_len=4, clip_batch=2, batch_size=8,
            max_epochs_spatial=2, max_epochs_temporal=2, max_epochs_regularize=2, max_epochs_joint=2,
            sinkhorn_iters=5, lr=3e-3, beta1=0.9, auc_splits=5)


@pytest.fixture(scope="session")
def tiny_config():
    return RunConfig(**TINY).validate()


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    path = tmp_path / "tiny.cfg"
    tiny_config.save(path)
    return path
