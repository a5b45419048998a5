"""Tiny regex tokenizer shared by the MSpec, FlexC and config parsers."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Type

from .errors import ParseError


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(text: str, rules: Iterable[tuple[str, str]], error: Type[ParseError] = ParseError) -> list[Token]:
    """Split `text` into tokens. Whitespace and ``#`` comments are skipped."""
    pattern = "|".join(f"(?P<{kind}>{regex})" for kind, regex in rules)
    master = re.compile(rf"(?P<_ws>\s+)|(?P<_comment>#[^\n]*)|{pattern}")
    tokens = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = master.match(text, pos)
        if m is None:
            raise error(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind not in ("_ws", "_comment"):
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        newlines = m.group().count("\n")
        if newlines:
            line += newlines
            line_start = m.start() + m.group().rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("EOF", "", line, pos - line_start + 1))
    return tokens


class TokenStream:
    def __init__(self, tokens: list[Token], error: Type[ParseError] = ParseError):
        self.tokens = tokens
        self.pos = 0
        self.error = error

    def peek(self, offset: int = 0) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        self.pos += 1
        return tok

    def at(self, kind: str, text: str | None = None, offset: int = 0) -> bool:
        tok = self.peek(offset)
        return tok.kind == kind and (text is None or tok.text == text)

    def accept(self, kind: str, text: str | None = None) -> Token | None:
        if self.at(kind, text):
            return self.next()
        return None

    def expect(self, kind: str, text: str | None = None) -> Token:
        tok = self.peek()
        if not self.at(kind, text):
            want = repr(text) if text is not None else kind
            got = repr(tok.text) if tok.kind != "EOF" else "end of input"
            raise self.fail(f"expected {want}, got {got}", tok)
        return self.next()

    def fail(self, message: str, tok: Token | None = None, error: Type[ParseError] | None = None) -> ParseError:
        tok = tok or self.peek()
        return (error or self.error)(message, tok.line, tok.column)
