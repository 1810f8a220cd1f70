import numpy as np
import pytest
import torch

from stvlp.corpus import load_corpus
from stvlp.encoders import EncoderConfig
from stvlp.synthetic import DEFAULT_VOCAB, GenSpec, generate_corpus
from stvlp.trainer import PretrainModel, TrainConfig, train

torch.set_num_threads(1)


def state_np(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def seeded(*shape: int, seed: int = 0, scale: float = 0.6) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return scale * torch.randn(*shape, generator=gen, dtype=torch.float64)


SMALL_ENC = EncoderConfig(
    image_size=16, patch_size=8, embed_dim=32, proj_dim=16,
    n_heads=4, n_blocks=2, vocab_size=len(DEFAULT_VOCAB), max_text_len=12, n_text_blocks=2,
)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "tiny"
    generate_corpus(GenSpec(n_patients=12, seq_len=4, image_size=16,
                            singleton_fraction=0.1, n_sentence_pairs=40), out, seed=123)
    return out


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_dir):
    return load_corpus(tiny_corpus_dir)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_corpus_dir):
    """A short real training run shared by checkpoint-consuming tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(epochs=2, batch_sequences=4, lr=1e-3, seed=0)
    result = train(cfg, tiny_corpus_dir, out, enc_cfg=SMALL_ENC)
    return result


@pytest.fixture()
def small_model():
    torch.manual_seed(7)
    return PretrainModel(SMALL_ENC)
