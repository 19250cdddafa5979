"""Prompt template pack.

Templates are plain text files with ``{question}`` / ``{document}`` /
``{documents}`` placeholders. The shipped defaults are generic
placeholders; backends and training exports may load a user-supplied pack
instead (same four file names).
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import ValidationError
from .wire import PROMPT_CST, PROMPT_RET, PROMPT_SRT, PROMPT_VQA

_FILES = {
    PROMPT_RET: "p_ret.txt",
    PROMPT_SRT: "p_srt.txt",
    PROMPT_CST: "p_cst.txt",
    PROMPT_VQA: "p_vqa.txt",
}


def load_prompt_pack(directory: str | Path | None = None) -> dict[str, str]:
    """Load the four templates, from ``directory`` or the shipped defaults."""
    pack: dict[str, str] = {}
    if directory is None:
        base = resources.files("kbrag") / "prompts"
        for prompt_id, name in _FILES.items():
            pack[prompt_id] = (base / name).read_text(encoding="utf-8")
        return pack
    directory = Path(directory)
    for prompt_id, name in _FILES.items():
        path = directory / name
        if not path.is_file():
            raise ValidationError(f"prompt pack missing {name} in {directory}")
        pack[prompt_id] = path.read_text(encoding="utf-8")
    return pack


def render_document_block(page_title: str, text: str) -> str:
    return f"{page_title} — {text}" if page_title else text


def render_documents(blocks: list[str]) -> str:
    if not blocks:
        return "(none)"
    return "\n\n".join(blocks)
