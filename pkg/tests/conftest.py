import logging

import numpy as np
import pytest

import net_service
import payload_crypto
import utils
from scheme_core import PRF_KEY_BYTES, SchemeKey
from vector_store import StoreIndex


@pytest.fixture(autouse=True)
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(level)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_key(s=2.0 ** 20, beta=0.2, seed=0):
    return SchemeKey(s=s, K=np.random.default_rng(seed).bytes(PRF_KEY_BYTES), beta=beta)


@pytest.fixture(params=[2.0 ** 20, 2.0 ** 30], ids=['s=2^20', 's=2^30'])
def scheme_key(request):
    return make_key(request.param)


@pytest.fixture
def key():
    return make_key()


@pytest.fixture
def payload_key():
    return payload_crypto.PayloadKey(bytes(range(payload_crypto.PAYLOAD_KEY_BYTES)))


@pytest.fixture
def nonces():
    return utils.SeededNonceSource(2024)


@pytest.fixture
def served_store(tmp_path):
    store = StoreIndex(8, path=str(tmp_path / 'served.pprg'))
    server = net_service.StoreServer(store, ('127.0.0.1', 0)).start_background()
    yield server
    server.stop()


@pytest.fixture
def key_factory():
    return make_key
