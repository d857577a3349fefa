import pytest

from semswarm.prompt2param import bundled_dataset, train_mapping
from semswarm.semantic import oracle_embed_text


@pytest.fixture(scope="session")
def mapping():
    return train_mapping(bundled_dataset(), oracle_embed_text)
