import numpy as np
import pytest

from era_kd.data import SyntheticSpec, generate, random_means
from era_kd.distiller import EncoderSpec, TrainConfig, train_teacher
from era_kd.losses import LossWeights
from era_kd.model import build_era_model
from era_kd.nn import ClassifierHead, MlpEncoder


def toy_teacher(input_dim=6, hidden=(8,), dim=5, num_classes=3, seed=0):
    enc = MlpEncoder(input_dim, list(hidden), dim)
    head = ClassifierHead(dim, num_classes)
    rng = np.random.default_rng(seed)
    enc.reset_parameters(rng)
    head.reset_parameters(rng)
    # nontrivial BN statistics so eval mode is not the identity
    for bn in enc.norms:
        bn.running_mean.values[...] = rng.normal(0, 0.3, bn.num_features)
        bn.running_var.values[...] = rng.uniform(0.5, 2.0, bn.num_features)
    head.linear.bias.values[...] = rng.normal(0, 0.1, num_classes)
    enc.freeze()
    head.freeze()
    enc.eval()
    return enc, head


def toy_model(K=2, m=2, seed=0, student_dim=3, branch_feed="cascaded", head_t_frozen=True,
              input_dim=6, num_classes=3, teacher_dim=5):
    enc, head = toy_teacher(input_dim=input_dim, dim=teacher_dim, num_classes=num_classes, seed=seed + 100)
    return build_era_model(enc, head, [4], student_dim, K=K, m=m, branch_feed=branch_feed,
                           head_t_frozen=head_t_frozen, seed=seed)


def randomize_branches(model, seed=1):
    """Nonzero final branch layers so the cascade is exercised."""
    rng = np.random.default_rng(seed)
    for b in model.branches:
        lin = b.linears[-1]
        lin.weight.values[...] = rng.normal(0, 0.5, lin.weight.shape)
        lin.bias.values[...] = rng.normal(0, 0.1, lin.bias.shape)


def toy_cfg(K=2, epochs=3, **kw):
    weights = kw.pop("weights", LossWeights(K=K))
    return TrainConfig(epochs=epochs, batch_size=16, learning_rate=kw.pop("learning_rate", 0.005),
                       weights=weights, student_hidden=(4,), **kw)


@pytest.fixture(scope="session")
def small_data():
    spec = SyntheticSpec(3, 6, 40, random_means(3, 6, 4.0, 0), seed=0)
    return generate(spec)


@pytest.fixture(scope="session")
def trained_teacher(small_data):
    train, test = small_data
    cfg = TrainConfig(epochs=5, batch_size=16)
    enc, head, _ = train_teacher(EncoderSpec(6, (8,), 5), 3, train, test, cfg)
    return enc, head


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
