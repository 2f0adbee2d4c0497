import numpy as np
import pytest

from hybridasr.lm import CharRnnLm, LmConfig
from hybridasr.model import AttentionConfig, DecoderConfig, E2E, EncoderConfig, ModelConfig


def tiny_model_config(v=4, idim=5, kind="blstmp", att="location", subsample=(1,), seed=3, init_scale=1.0,
                      precision="double"):
    if kind == "vggblstm":
        enc = EncoderConfig(kind="vggblstm", num_layers=1, units=3, projection=4, subsample=(1,), vgg_channels=(2, 3))
    else:
        enc = EncoderConfig(num_layers=len(subsample), units=3, projection=4, subsample=subsample)
    return ModelConfig(
        idim=idim,
        odim=v,
        encoder=enc,
        attention=AttentionConfig(kind=att, dim=4, conv_channels=2, conv_width=3),
        decoder=DecoderConfig(units=4, embed=3),
        precision=precision,
        init_scale=init_scale,
        seed=seed,
    )


def tiny_model(**kw):
    return E2E(tiny_model_config(**kw))


def tiny_lm(v=4, seed=5, init_scale=1.0):
    return CharRnnLm(v, LmConfig(embed=3, units=4, layers=1, precision="double", init_scale=init_scale, seed=seed))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_RECIPE = """\
exp_dir: exp
precision: double
seed: 3
data: {train: corpus/train, test: corpus/test}
model:
  encoder: {num_layers: 2, units: 16, projection: 16, subsample: [2, 2]}
  attention: {dim: 16, conv_channels: 4, conv_width: 5}
  decoder: {units: 16, embed: 8}
train: {epochs: 2, batch_size: 8}
lm: {enabled: true, embed: 8, units: 16, layers: 1, epochs: 1}
decode: {beam_size: 3}
"""


def tiny_recipe(root, num_train=24, num_test=6, seed=5):
    """A synthetic corpus plus a small double-precision recipe config under ``root``."""
    from hybridasr.synth import synth_corpus

    synth_corpus(seed, num_train, num_test, 4, 4, 0.1, root / "corpus")
    (root / "cfg.yaml").write_text(TINY_RECIPE)
    return root / "cfg.yaml"


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
