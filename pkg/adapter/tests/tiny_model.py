"""Builders for the tiny in-process test model."""

from __future__ import annotations

import torch
from tokenizers import Tokenizer, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

from kbrag_adapter.model import AdapterConfig, CausalBackbone

WORDS = (
    "the a is of river city answer question shown item reference tag "
    "summary idx keep merge relevant needed unknown water mountain"
).split()


def make_tokenizer() -> PreTrainedTokenizerFast:
    vocab = {"[UNK]": 0, "[PAD]": 1, "[EOS]": 2}
    for word in WORDS:
        vocab[word] = len(vocab)
    tok = Tokenizer(models.WordLevel(vocab=vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    return PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="[UNK]", pad_token="[PAD]", eos_token="[EOS]"
    )


def make_backbone(tag_mode: str = "add", tags=None) -> CausalBackbone:
    tokenizer = make_tokenizer()
    torch.manual_seed(0)
    config = GPT2Config(
        vocab_size=len(tokenizer),
        n_positions=256,
        n_embd=16,  # fewer dims than vocab rows keeps resized embeddings distinct
        n_layer=2,
        n_head=2,
        bos_token_id=2,
        eos_token_id=2,
        pad_token_id=1,
    )
    model = GPT2LMHeadModel(config)
    # Keep greedy decoding on real words: a random model that immediately
    # emits UNK/PAD/EOS decodes to "" and would (correctly) 503 every call.
    model.generation_config.suppress_tokens = [0, 1, 2]
    adapter_config = AdapterConfig(
        model_id="tiny-random",
        max_context=256,
        max_new_tokens=8,
        tag_mode=tag_mode,
        tags=tags or ("[Ret]", "[NoRet]", "[Rel]", "[NoRel]"),
    )
    return CausalBackbone(model, tokenizer, adapter_config)
