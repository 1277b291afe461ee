import struct

import pytest
import torch

from promptner.checkpoint import (
    MAGIC,
    CheckpointVersionError,
    CorruptCheckpointError,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from promptner.config import ModelConfig, RunConfig, TrainConfig
from promptner.episode_data import sample_episode
from promptner.inference import InferenceOptions, predict_episode
from promptner.model import PromptNER
from promptner.synthetic import TRAIN_CLASSES, make_corpus
from promptner.tokenization import WordPieceTokenizer
from promptner.training import train


@pytest.fixture(scope="module")
def setup():
    corpus = make_corpus(TRAIN_CLASSES, 40, seed=0)
    tok = WordPieceTokenizer.build([s.words for s in corpus.sentences], min_freq=1)
    cfg = RunConfig(model=ModelConfig(d=16, layers=1, heads=2, h=8), train=TrainConfig(max_steps=5))
    return corpus, tok, cfg


def test_tensor_file_roundtrip(tmp_path):
    tensors = {"a": torch.randn(3, 4), "b": torch.arange(5), "c": torch.tensor([True, False]), "d": torch.randn(2, dtype=torch.float64)}
    write_tensors(tensors, tmp_path / "t.bin")
    back = read_tensors(tmp_path / "t.bin")
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])


def test_truncated_file_is_corrupt(tmp_path):
    write_tensors({"a": torch.randn(10)}, tmp_path / "t.bin")
    blob = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[:-7])
    with pytest.raises(CorruptCheckpointError):
        read_tensors(tmp_path / "t.bin")
    (tmp_path / "t.bin").write_bytes(b"junk")
    with pytest.raises(CorruptCheckpointError):
        read_tensors(tmp_path / "t.bin")


def test_flipped_byte_fails_checksum(tmp_path):
    write_tensors({"a": torch.randn(10)}, tmp_path / "t.bin")
    blob = bytearray((tmp_path / "t.bin").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "t.bin").write_bytes(bytes(blob))
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        read_tensors(tmp_path / "t.bin")


def test_version_mismatch(tmp_path):
    write_tensors({"a": torch.randn(2)}, tmp_path / "t.bin")
    blob = bytearray((tmp_path / "t.bin").read_bytes())
    blob[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 99)
    (tmp_path / "t.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        read_tensors(tmp_path / "t.bin")


def test_model_roundtrip_predicts_identically(tmp_path, setup):
    corpus, tok, cfg = setup
    model = PromptNER(cfg.model, tok)
    ep = sample_episode(corpus, 2, 2, 0)
    train(model, [ep], TrainConfig(encoder_lr=1e-3, decoder_lr=3e-3, max_steps=5))
    save_checkpoint(model, tmp_path / "ck", cfg, step=5)
    loaded, run_cfg, meta = load_checkpoint(tmp_path / "ck")
    assert run_cfg == cfg and meta["step"] == 5
    for (na, a), (nb, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert na == nb and torch.equal(a, b)
    model.eval()
    opts = InferenceOptions()
    with torch.no_grad():
        x = model([ep.query[0].words], ep.type_set)[0].scores.R
        y = loaded([ep.query[0].words], ep.type_set)[0].scores.R
    assert torch.equal(x, y)
    assert predict_episode(model, ep, opts) == predict_episode(loaded, ep, opts)


def test_trained_checkpoint_differs_on_disk(tmp_path, setup):
    corpus, tok, cfg = setup
    model = PromptNER(cfg.model, tok)
    save_checkpoint(model, tmp_path / "s0", cfg, step=0)
    train(model, [sample_episode(corpus, 2, 2, 0)], TrainConfig(encoder_lr=1e-3, decoder_lr=3e-3, max_steps=100))
    save_checkpoint(model, tmp_path / "s100", cfg, step=100)
    assert (tmp_path / "s0" / "model.bin").read_bytes() != (tmp_path / "s100" / "model.bin").read_bytes()


def test_single_encoder_roundtrip(tmp_path, setup):
    corpus, tok, cfg = setup
    cfg1 = RunConfig(model=ModelConfig(d=16, layers=1, heads=2, h=8, two_encoders=False))
    model = PromptNER(cfg1.model, tok)
    assert model.span_encoder is model.class_encoder
    save_checkpoint(model, tmp_path / "one", cfg1)
    loaded, _, _ = load_checkpoint(tmp_path / "one")
    assert loaded.span_encoder is loaded.class_encoder
