import pytest

from detector.config import ConfigBundle, config_from_dict, load_config
from detector.losses import MMDKernel
from detector.transfer import Stage2Mode
from gridsim.errors import ConfigError
from gridsim.grid_model import PerturbScope


def test_defaults():
    bundle = load_config()
    assert bundle == ConfigBundle()
    assert bundle.train.lam == 1e-2 and bundle.train.mu == 5e2
    assert bundle.train.lr_stage1 == 1e-3 and bundle.train.lr_stage2 == 1e-5
    assert bundle.generation.n_base == 10 and bundle.generation.n_per_base == 1000
    assert bundle.sweep.trials == 5


def test_toml_document(tmp_path):
    path = tmp_path / "fdia.toml"
    path.write_text(
        """
[model]
hidden_width = 32
mmd_depth = 2

[train]
lambda = 0.5
mmd_kernel = "gaussian"
stage2_mode = "strict"

[baselines]
knn_k = [3, 7]

[generation]
n_base = 2

[sweep]
trials = 2
methods = ["proposed", "lr"]
perturb_scope = "x_only"
""",
        encoding="utf-8",
    )
    bundle = load_config(path)
    assert bundle.train.lam == 0.5
    assert bundle.train.mmd_kernel is MMDKernel.GAUSSIAN
    assert bundle.train.stage2_mode is Stage2Mode.STRICT
    assert bundle.baselines.knn_k == (3, 7)
    assert bundle.generation.n_base == 2
    assert bundle.sweep.methods == ("proposed", "lr")
    assert bundle.sweep.perturb_scope is PerturbScope.X_ONLY

    mlp = bundle.mlp_config(96)
    assert mlp.input_dim == 96 and mlp.hidden_width == 32 and mlp.mmd_depth == 2
    assert bundle.to_dict()["train"]["mmd_kernel"] == "gaussian"


@pytest.mark.parametrize(
    "document",
    [
        {"train": {"learning_rate": 0.1}},
        {"training": {}},
        {"train": {"lam": -1.0}},
        {"model": {"hidden_layers": 1, "mmd_depth": 4}},
        {"model": {"input_dim": 10}},
        {"sweep": {"methods": ["svm"]}},
        {"train": 3},
    ],
)
def test_rejected_documents(document):
    with pytest.raises(ConfigError) as info:
        config_from_dict(document)
    assert info.value.exit_code == 1


def test_missing_file_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[train\nlam = ", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(broken)
