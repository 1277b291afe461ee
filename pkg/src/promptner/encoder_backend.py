"""Encoder backends producing per-word representations of a prompted input.

Both backends subtokenize the prompted words, run a contextual encoder and
mean-pool subtoken vectors back to words. ``TinyEncoder`` is a small
self-attention stack trained from scratch; ``PretrainedEncoder`` wraps a
Hugging Face checkpoint directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from promptner.prompt_builder import PromptedInput
from promptner.tokenization import WordPieceTokenizer


class SequenceTooLongError(ValueError):
    pass


@dataclass
class EncodedInput:
    H_l: torch.Tensor
    H_m: torch.Tensor
    H_n: torch.Tensor

    @property
    def d(self) -> int:
        return self.H_n.shape[-1]


def mean_pool_words(hidden: torch.Tensor, alignment: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Average each word's subtoken rows. ``hidden`` is (T, d)."""
    word_idx = torch.cat(
        [torch.full((hi - lo,), w, dtype=torch.long) for w, (lo, hi) in enumerate(alignment)]
    )
    counts = torch.tensor([hi - lo for lo, hi in alignment], dtype=hidden.dtype)
    sums = hidden.new_zeros(len(alignment), hidden.shape[-1]).index_add(0, word_idx, hidden[: len(word_idx)])
    return sums / counts[:, None]


def split_segments(words: torch.Tensor, pi: PromptedInput) -> EncodedInput:
    def take(idx):
        return words[torch.as_tensor(list(idx), dtype=torch.long)]

    return EncodedInput(take(pi.prefix_positions), take(pi.label_positions), take(pi.sentence_positions))


class EncoderHandle(nn.Module):
    """Common surface: ``encode`` / ``encode_batch`` over prompted inputs."""

    kind = "abstract"
    tokenizer = None
    d: int
    max_len: int

    def _hidden(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _special_offset(self) -> int:
        return 0

    def _wrap_ids(self, ids: Sequence[int]) -> list[int]:
        return list(ids)

    def encode_batch(self, pis: Sequence[PromptedInput], names: Sequence[str] | None = None) -> list[EncodedInput]:
        seqs = [self._wrap_ids(pi.input_ids) for pi in pis]
        for j, seq in enumerate(seqs):
            if len(seq) > self.max_len:
                label = names[j] if names else " ".join(pis[j].words[-pis[j].n:])
                raise SequenceTooLongError(
                    f"prompted input of {len(seq)} subtokens exceeds encoder limit {self.max_len}: {label!r}"
                )
        T = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), T), self.pad_id, dtype=torch.long)
        pad = torch.ones(len(seqs), T, dtype=torch.bool)
        for j, s in enumerate(seqs):
            ids[j, : len(s)] = torch.tensor(s, dtype=torch.long)
            pad[j, : len(s)] = False
        hidden = self._hidden(ids, pad)
        off = self._special_offset()
        out = []
        for j, pi in enumerate(pis):
            words = mean_pool_words(hidden[j, off : off + len(pi.input_ids)], pi.alignment)
            out.append(split_segments(words, pi))
        return out

    def encode(self, pi: PromptedInput) -> EncodedInput:
        return self.encode_batch([pi])[0]


class _Block(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, 4 * d)
        self.ff2 = nn.Linear(4 * d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        B, T, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(self.ln1(x)).view(B, T, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(pad[:, None, None, :], float("-inf"))
        att = self.drop(att.softmax(-1))
        ctx = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.drop(self.proj(ctx))
        return x + self.drop(self.ff2(nn.functional.gelu(self.ff1(self.ln2(x)))))


class TinyEncoder(EncoderHandle):
    kind = "tiny"

    def __init__(
        self,
        tokenizer: WordPieceTokenizer,
        d: int = 32,
        layers: int = 2,
        heads: int = 4,
        max_len: int = 128,
        dropout: float = 0.1,
        seed: int = 0,
    ):
        super().__init__()
        if d < 8 or layers < 1 or d % heads:
            raise ValueError(f"invalid tiny encoder shape d={d} layers={layers} heads={heads}")
        self.tokenizer = tokenizer
        self.d, self.max_len = d, max_len
        self.config = dict(d=d, layers=layers, heads=heads, max_len=max_len, dropout=dropout, seed=seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.tok = nn.Embedding(len(tokenizer), d)
            self.pos = nn.Embedding(max_len, d)
            nn.init.normal_(self.tok.weight, std=0.1)
            nn.init.normal_(self.pos.weight, std=0.1)
            self.blocks = nn.ModuleList(_Block(d, heads, dropout) for _ in range(layers))
            self.ln = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    @property
    def pad_id(self) -> int:
        return self.tokenizer.pad_id

    def _hidden(self, ids, pad):
        T = ids.shape[1]
        x = self.drop(self.tok(ids) + self.pos(torch.arange(T))[None])
        for blk in self.blocks:
            x = blk(x, pad)
        return self.ln(x)


def make_tiny_encoder(d: int, layers: int, seed: int, tokenizer: WordPieceTokenizer, **kw) -> TinyEncoder:
    return TinyEncoder(tokenizer, d=d, layers=layers, seed=seed, **kw)


class HFTokenizerAdapter:
    """Adapts a Hugging Face tokenizer to the subtokenizer handle surface."""

    def __init__(self, hf_tokenizer):
        self.hf = hf_tokenizer
        self.unk_token = hf_tokenizer.unk_token

    def tokenize_word(self, word: str) -> list[str]:
        return self.hf.tokenize(word)

    def convert_tokens_to_ids(self, tokens):
        return self.hf.convert_tokens_to_ids(list(tokens))


class PretrainedEncoder(EncoderHandle):
    kind = "pretrained"

    def __init__(self, checkpoint: str):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer

        self.checkpoint = checkpoint
        hf_tok = AutoTokenizer.from_pretrained(checkpoint)
        self.tokenizer = HFTokenizerAdapter(hf_tok)
        self.model = AutoModel.from_pretrained(checkpoint)
        self.d = self.model.config.hidden_size
        self.max_len = min(self.model.config.max_position_embeddings, hf_tok.model_max_length)
        self._cls = hf_tok.cls_token_id
        self._sep = hf_tok.sep_token_id
        self._pad = hf_tok.pad_token_id if hf_tok.pad_token_id is not None else 0
        self.config = dict(checkpoint=checkpoint)

    @property
    def pad_id(self) -> int:
        return self._pad

    def _special_offset(self) -> int:
        return 1 if self._cls is not None else 0

    def _wrap_ids(self, ids):
        head = [self._cls] if self._cls is not None else []
        tail = [self._sep] if self._sep is not None else []
        return head + list(ids) + tail

    def _hidden(self, ids, pad):
        return self.model(input_ids=ids, attention_mask=(~pad).long()).last_hidden_state
