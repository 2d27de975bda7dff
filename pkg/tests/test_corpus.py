"""End-to-end pipeline over every fixture that carries a weak routine.

Slow; select or skip with ``-m corpus`` / ``-m 'not corpus'``.
"""

import importlib.util
import json
import os
from functools import lru_cache

import pytest

from conftest import CORPUS, MANIFEST, ROOT
from hashswap.bundle import DEFAULT_BUNDLE

GAS = 50_000_000

pytestmark = pytest.mark.corpus


def _load_harness():
    loader = importlib.util.spec_from_file_location('corpus_harness', os.path.join(ROOT, 'scripts', 'corpus-harness.py'))
    module = importlib.util.module_from_spec(loader)
    loader.loader.exec_module(module)
    return module


with open(MANIFEST) as _f:
    _MANIFEST = json.load(_f)
WEAK = {f['name']: f for f in _MANIFEST['fixtures'] if f.get('weak_routines')}
SCRIPT = os.path.join(CORPUS, _MANIFEST['script'])


@lru_cache(maxsize=None)
def outcome(name):
    return _load_harness().run_fixture(CORPUS, WEAK[name], SCRIPT, GAS, DEFAULT_BUNDLE)


@pytest.mark.parametrize('name', sorted(WEAK))
def test_fixture(name):
    result = outcome(name)
    assert result['ok'], result.get('error')
    assert result['identified']
    assert result['false_positives'] == 0
    assert result['sizes']['added'] <= 13 * 1024
    assert result['sizes']['injected_code'] <= 4 * 1024
    assert result['instructions']['ratio'] <= 1.05


def test_library_overhead_stays_within_five_hundred_instructions():
    overheads = {name: outcome(name)['instructions']['overhead'] for name, fixture in WEAK.items()
                 if fixture['kind'] == 'library' and outcome(name)['ok']}
    assert overheads
    assert {name: o for name, o in overheads.items() if abs(o) > 500} == {}
