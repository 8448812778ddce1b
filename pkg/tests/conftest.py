from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from oracles import fresh_keyword_backend


@pytest.fixture
def keyword_backend():
    return fresh_keyword_backend()
