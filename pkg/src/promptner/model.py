from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from promptner.config import ModelConfig
from promptner.encoder_backend import EncodedInput, EncoderHandle, PretrainedEncoder, TinyEncoder
from promptner.episode_data import EntityTypeSet
from promptner.prompt_builder import PromptedInput, PromptTemplate, build_prompted_input
from promptner.span_detector import BiaffineScorer, ScoreMatrix, score_spans
from promptner.tokenization import WordPieceTokenizer


@dataclass
class SentenceOutput:
    scores: ScoreMatrix
    H_m: torch.Tensor  # classifier label-word embeddings (m, d)
    H_n: torch.Tensor  # classifier word embeddings (n, d)


class PromptNER(nn.Module):
    """Span detector and prompt classifier over two (or one shared) encoders."""

    def __init__(self, cfg: ModelConfig, tokenizer: WordPieceTokenizer | None = None):
        super().__init__()
        self.cfg = cfg
        self.template = PromptTemplate(cfg.template)
        if cfg.backend == "tiny":
            if tokenizer is None:
                raise ValueError("tiny backend needs a tokenizer")
            kw = dict(d=cfg.d, layers=cfg.layers, heads=cfg.heads, max_len=cfg.max_len, dropout=cfg.dropout)
            self.span_encoder: EncoderHandle = TinyEncoder(tokenizer, seed=cfg.seed, **kw)
            self.class_encoder: EncoderHandle = (
                TinyEncoder(tokenizer, seed=cfg.seed + 1, **kw) if cfg.two_encoders else self.span_encoder
            )
        elif cfg.backend == "pretrained":
            self.span_encoder = PretrainedEncoder(cfg.checkpoint)
            self.class_encoder = PretrainedEncoder(cfg.checkpoint) if cfg.two_encoders else self.span_encoder
        else:
            raise ValueError(f"unknown encoder backend {cfg.backend!r}")
        self.biaffine = BiaffineScorer(
            self.span_encoder.d, cfg.h, rope_base=cfg.rope_base, slope=cfg.leaky_slope, seed=cfg.seed + 2
        )

    @property
    def tokenizer(self):
        return self.span_encoder.tokenizer

    def prompt(self, words: Sequence[str], type_set: EntityTypeSet) -> PromptedInput:
        return build_prompted_input(words, type_set, self.template, self.tokenizer)

    def encode_class(self, pis: Sequence[PromptedInput]) -> list[EncodedInput]:
        return self.class_encoder.encode_batch(pis)

    def forward(
        self, sentences: Sequence[Sequence[str]], type_set: EntityTypeSet, use_rope: bool = True
    ) -> list[SentenceOutput]:
        pis = [self.prompt(w, type_set) for w in sentences]
        span_enc = self.span_encoder.encode_batch(pis)
        cls_enc = span_enc if self.class_encoder is self.span_encoder else self.class_encoder.encode_batch(pis)
        return [
            SentenceOutput(score_spans(s.H_n, self.biaffine, use_rope=use_rope), c.H_m, c.H_n)
            for s, c in zip(span_enc, cls_enc)
        ]

    def encoder_parameters(self) -> list[nn.Parameter]:
        params = list(self.span_encoder.parameters())
        if self.class_encoder is not self.span_encoder:
            params += list(self.class_encoder.parameters())
        return params

    def decoder_parameters(self) -> list[nn.Parameter]:
        return list(self.biaffine.parameters())
