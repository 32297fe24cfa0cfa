import textwrap

import numpy as np
import pytest

from vflunlearn.data import BackdoorSpec, partition_clients, synth_dataset, vertical_split
from vflunlearn.protocol import TrainConfig, build_architecture


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of the scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + eps
        plus = f()
        flat_x[i] = original - eps
        minus = f()
        flat_x[i] = original
        flat_g[i] = (plus - minus) / (2 * eps)
    return grad


@pytest.fixture
def finite_difference():
    return central_difference


@pytest.fixture
def tiny_raw():
    return synth_dataset(seed=1, n=60, height=8, width=8)


@pytest.fixture
def tiny_split(tiny_raw):
    return vertical_split(tiny_raw)


@pytest.fixture
def tiny_arch(tiny_split):
    return build_architecture("mlp", tiny_split.left_shape, tiny_split.right_shape, hidden=8)


@pytest.fixture
def tiny_clients(tiny_split):
    return partition_clients(tiny_split, 3, seed=5)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(num_clients=3, epochs=2, batch_size=8, lr=0.1, seed=3)


@pytest.fixture
def small_trigger():
    return BackdoorSpec(trigger_size=2)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("VFLU_OUTPUT_ROOT", raising=False)
    monkeypatch.delenv("VFLU_LOG_LEVEL", raising=False)


SMOKE_CONFIG = """
[experiment]
name = "smoke"
arm = "{arm}"
seed = 1
output_dir = "{output_dir}"

[dataset]
name = "synth"
architecture = "mlp"
hidden = 8
synth_train = 120
synth_test = 60
synth_height = 8
synth_width = 8

[train]
num_clients = 3
epochs = 3
batch_size = 16
lr = 0.1

[unlearn]
target_client = 1
epochs = 2
batch_size = 16
threshold = 1000.0
post_train_rounds = 2

[backdoor]
trigger_size = 2

[mia]
num_shadows = 2
shadow_epochs = 2
pool_size = 80

[grid]
thresholds = [1000.0, 0.001]
radius_multipliers = [3.0, 0.5]
"""


@pytest.fixture
def smoke_config(tmp_path):
    """Factory writing a tiny synthetic experiment config for the given arm."""

    def make(arm="fedavg", output_dir=None, extra=""):
        out = output_dir or (tmp_path / "runs")
        path = tmp_path / f"{arm}.toml"
        body = SMOKE_CONFIG.format(arm=arm, output_dir=str(out).replace("\\", "/"))
        path.write_text(body + textwrap.dedent(extra))
        return str(path)

    return make
