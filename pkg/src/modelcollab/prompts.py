"""Prompt templates are plain-text files with ``$name`` placeholders."""
from __future__ import annotations

from collections.abc import Iterable
from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def template(name: str) -> Template:
    text = resources.files(__package__).joinpath("templates", f"{name}.txt").read_text("utf-8")
    return Template(text.rstrip("\n"))


def render(name: str, **fields) -> str:
    return template(name).substitute({k: str(v) for k, v in fields.items()})


def blocks(items: Iterable[tuple[str, str]]) -> str:
    """Delimit labelled texts as ``### label`` sections closed by a bare ``###``."""
    body = "\n".join(f"### {label}\n{text}" for label, text in items)
    return f"{body}\n###" if body else "(none)"


def parse_blocks(text: str) -> list[tuple[str, str]]:
    """Inverse of :func:`blocks` (used by scripted mocks in tests and demos)."""
    out = []
    label = None
    buf: list[str] = []
    for line in text.splitlines():
        if line.strip() == "###":
            if label is not None:
                out.append((label, "\n".join(buf).strip()))
            label, buf = None, []
        elif line.startswith("### "):
            if label is not None:
                out.append((label, "\n".join(buf).strip()))
            label, buf = line[4:].strip(), []
        elif label is not None:
            buf.append(line)
    if label is not None:
        out.append((label, "\n".join(buf).strip()))
    return out
