"""
Shared pytest fixtures: the bundled catalog, a tiny hand-written catalog and
small seeded corpora that keep every suite fast.
"""

import pytest

import config
from corpus import GeneratorSpec, generate_corpus, split_corpus
from feature_catalog import load_catalog, parse_catalog

TINY_CATALOG = """\
#! counts PERM=2 INT=1 HW=1 API=2 SEQ=2
INTERNET\tPERM\tB
SEND_SMS\tPERM\tM
action.MAIN\tINT\tB
telephony\tHW\tM
HttpURLConnection.disconnect\tAPI\tB
SmsManager.sendTextMessage\tAPI\tM
Send Sms\tSEQ\tM
Get Logs\tSEQ\tM
"""


@pytest.fixture(scope="session")
def catalog():
    return load_catalog(config.CATALOG_FILE)


@pytest.fixture(scope="session")
def tiny_catalog():
    return parse_catalog(TINY_CATALOG)


@pytest.fixture(scope="session")
def small_spec(catalog):
    return GeneratorSpec(catalog=catalog, n_benign=150, n_malicious=150, seed=7)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return generate_corpus(small_spec)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return split_corpus(small_corpus, 0.2, seed=7)
