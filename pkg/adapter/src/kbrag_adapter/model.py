"""Causal-LM backbone: tag/token binding and serialized forward passes.

Tags are bound to token ids either by registering them as new vocabulary
entries ("add", resizes the embedding matrix) or by mapping each tag to the
first sub-token of its existing tokenization ("map"). Either way the
reported logit for a tag is the raw pre-softmax value of its first token id
at the first generated position; no normalization happens here.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import torch

logger = logging.getLogger(__name__)

DEFAULT_TAGS = ("[Ret]", "[NoRet]", "[Rel]", "[NoRel]")


class TagBindingError(ValueError):
    """A tag cannot be bound to a usable, distinct first token id."""


@dataclass
class AdapterConfig:
    model_id: str
    device: str = "cpu"
    max_context: int = 1024
    max_new_tokens: int = 48
    tag_mode: str = "add"  # "add" new vocab entries | "map" to first sub-token
    tags: tuple[str, ...] = DEFAULT_TAGS
    host: str = "127.0.0.1"
    port: int = 8800

    def __post_init__(self) -> None:
        if self.tag_mode not in ("add", "map"):
            raise ValueError(f"tag_mode must be 'add' or 'map', got {self.tag_mode!r}")
        if self.max_context < 8:
            raise ValueError("max_context too small")


@dataclass
class TagBinding:
    """Resolved tag vocabulary: tag string -> token id sequence."""

    mode: str
    ids_by_tag: dict[str, list[int]] = field(default_factory=dict)

    def first_id(self, tag: str) -> int:
        if tag not in self.ids_by_tag:
            raise TagBindingError(f"tag {tag!r} is not registered with this adapter")
        return self.ids_by_tag[tag][0]


class CausalBackbone:
    """Wraps a HF causal LM; one forward pass at a time."""

    def __init__(self, model, tokenizer, config: AdapterConfig):
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.config = config
        self._lock = threading.Lock()
        self.binding = self._bind_tags()
        logger.info("tag binding (%s mode): %s", self.binding.mode, self.binding.ids_by_tag)

    @classmethod
    def from_pretrained(cls, config: AdapterConfig) -> "CausalBackbone":
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(config.model_id)
        model = AutoModelForCausalLM.from_pretrained(config.model_id).to(config.device)
        return cls(model, tokenizer, config)

    def _bind_tags(self) -> TagBinding:
        ids_by_tag: dict[str, list[int]] = {}
        if self.config.tag_mode == "add":
            added = self.tokenizer.add_tokens(list(self.config.tags))
            if added:
                self.model.resize_token_embeddings(len(self.tokenizer))
            for tag in self.config.tags:
                tag_id = self.tokenizer.convert_tokens_to_ids(tag)
                if tag_id is None or tag_id < 0:
                    raise TagBindingError(f"could not register tag {tag!r}")
                ids_by_tag[tag] = [int(tag_id)]
        else:
            for tag in self.config.tags:
                ids = self.tokenizer.encode(tag, add_special_tokens=False)
                if not ids:
                    raise TagBindingError(f"tag {tag!r} tokenizes to nothing")
                ids_by_tag[tag] = [int(i) for i in ids]
        firsts = [ids[0] for ids in ids_by_tag.values()]
        if len(set(firsts)) != len(firsts):
            raise TagBindingError(
                f"tags collide on their first token id: "
                f"{ {t: ids[0] for t, ids in ids_by_tag.items()} }; "
                "use add mode or pick distinguishable tags"
            )
        return TagBinding(mode=self.config.tag_mode, ids_by_tag=ids_by_tag)

    def _encode(self, prompt: str) -> torch.Tensor:
        ids = self.tokenizer(prompt, return_tensors="pt").input_ids
        budget = self.config.max_context - self.config.max_new_tokens
        if ids.shape[1] > budget:
            ids = ids[:, -budget:]
        return ids.to(self.config.device)

    def score_first_token(self, prompt: str, tags: tuple[str, str]) -> dict[str, float]:
        """Raw logits for each tag's first token at the next-token position."""
        first_ids = {tag: self.binding.first_id(tag) for tag in tags}
        if first_ids[tags[0]] == first_ids[tags[1]]:
            raise TagBindingError(f"requested tags {tags!r} share a first token id")
        ids = self._encode(prompt)
        with self._lock, torch.no_grad():
            logits = self.model(ids).logits[0, -1, :]
        return {tag: float(logits[first_id]) for tag, first_id in first_ids.items()}

    def generate_text(self, prompt: str) -> str:
        ids = self._encode(prompt)
        pad_id = self.tokenizer.pad_token_id
        if pad_id is None:
            pad_id = self.tokenizer.eos_token_id
        with self._lock, torch.no_grad():
            out = self.model.generate(
                ids,
                max_new_tokens=self.config.max_new_tokens,
                do_sample=False,
                pad_token_id=pad_id,
            )
        return self.tokenizer.decode(out[0, ids.shape[1]:], skip_special_tokens=True).strip()
