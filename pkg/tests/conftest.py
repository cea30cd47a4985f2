import numpy as np
import pytest
from hypothesis import settings

from ordtopk import campaign, classifier, semantics

settings.register_profile("ci", max_examples=100, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def fixture_config():
    return campaign.CampaignConfig(seed=0)


@pytest.fixture(scope="session")
def fixture_data(fixture_config):
    table = campaign.embedding_table(fixture_config)
    train, names = campaign.load_split(fixture_config, "train", table)
    val, _ = campaign.load_split(fixture_config, "validation", table)
    return train, val, names


@pytest.fixture(scope="session")
def fixture_model(fixture_config, fixture_data):
    """The 20-class synthetic classifier every campaign trains by default."""
    train, val, names = fixture_data
    layers, shape = campaign.architecture(fixture_config, train, len(names))
    tc = classifier.TrainingConfig(epochs=fixture_config.epochs, batch_size=fixture_config.train_batch,
                                   learning_rate=fixture_config.learning_rate, seed=fixture_config.train_seed)
    model, report = classifier.train(train, layers, tc, names, input_shape=shape, validation=val)
    return model, report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_samples(fixture_config, fixture_data, fixture_model):
    """200 correctly classified validation samples with seeded random targets, as a campaign picks them."""
    _, val, _ = fixture_data
    model, _ = fixture_model
    ids = campaign.select_samples(fixture_config, model, val)
    X = val.features[ids]
    y = val.labels[ids]

    def specs(k, seed=0):
        return [semantics.select_targets("random", k, int(g), model.n_classes, seed=[seed, sid])
                for g, sid in zip(y, ids)]

    return X, y, specs


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
