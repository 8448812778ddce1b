from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from service_harness import FaultProxy, engine_config, start_service


@pytest.fixture(scope="session")
def service_url():
    server, thread, url = start_service(engine_config())
    yield url
    server.should_exit = True
    thread.join(timeout=5)


@pytest.fixture(scope="session")
def auth_service_url():
    server, thread, url = start_service(
        engine_config(auth_token_env="CAPREWARD_CLIENT_TEST_TOKEN")
    )
    yield url
    server.should_exit = True
    thread.join(timeout=5)


@pytest.fixture
def fault_proxy_factory(service_url):
    proxies = []

    def make(fail_first: int = 0) -> FaultProxy:
        proxy = FaultProxy(service_url, fail_first=fail_first)
        proxies.append(proxy)
        return proxy

    yield make
    for proxy in proxies:
        proxy.close()
