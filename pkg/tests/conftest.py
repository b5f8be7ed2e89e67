import numpy as np
import pytest

from slimkit.core.instrument import tracking
from slimkit.core.tensor import make_rng
from slimkit.model.params import init_params

from .helpers import tiny


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def counters():
    with tracking() as (stats, ledger):
        yield stats, ledger


@pytest.fixture(params=["block", "ps"])
def attention(request):
    return request.param


@pytest.fixture
def tiny_config(attention):
    return tiny(attention)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)


@pytest.fixture
def tiny_tokens(tiny_config):
    return make_rng(99).integers(0, tiny_config.vocab, size=tiny_config.seq_len)
