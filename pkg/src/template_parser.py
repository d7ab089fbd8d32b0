"""Parser for prompt template files using Lark."""

import inspect
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from functools import wraps
from pathlib import Path
from typing import TypeVar

from lark import Lark, Token, Transformer, v_args
from lark.exceptions import UnexpectedInput

from src.errors import PromptError

GRAMMAR_PATH = Path(__file__).with_name("template.lark")


@dataclass
class SourceLocation:
    """Position of a template construct, for error messages."""

    file: str | None = None
    line: int | None = None
    column: int | None = None
    end_line: int | None = None
    end_column: int | None = None

    def __str__(self) -> str:
        if self.file and self.line and self.column:
            return f"{self.file}:{self.line}:{self.column}"
        elif self.line and self.column:
            return f"line {self.line}, column {self.column}"
        return "unknown location"


@dataclass
class TemplateNode:
    """Base class for template segments."""

    location: SourceLocation | None = field(default=None, kw_only=True)

    def location_str(self) -> str:
        return str(self.location) if self.location else "unknown location"


@dataclass
class Text(TemplateNode):
    """Literal text copied into the prompt unchanged."""

    value: str


@dataclass
class Placeholder(TemplateNode):
    """A {{name}} slot filled at render time."""

    name: str


@dataclass
class ParsedTemplate:
    """A template file as an ordered list of text and placeholder segments."""

    segments: list[Text | Placeholder]
    filename: str | None = None

    @property
    def placeholders(self) -> list[Placeholder]:
        return [s for s in self.segments if isinstance(s, Placeholder)]

    @property
    def placeholder_names(self) -> frozenset[str]:
        return frozenset(p.name for p in self.placeholders)

    def substitute(self, values: dict[str, str]) -> str:
        """Join the segments, replacing every placeholder by its value.

        Raises:
            PromptError: A placeholder has no value.
        """
        parts = []
        for segment in self.segments:
            if isinstance(segment, Text):
                parts.append(segment.value)
            elif segment.name in values:
                parts.append(values[segment.name])
            else:
                raise PromptError(
                    f"{segment.location_str()}: no value for placeholder '{segment.name}'"
                )
        return "".join(parts)


N = TypeVar("N", bound=TemplateNode)


def with_location(node_factory: Callable[..., N]) -> Callable[..., N]:
    """Wrap a transformer method so the node it returns carries its source location."""

    @wraps(node_factory)
    @v_args(meta=True)
    def wrapper(self: "TemplateBuilder", meta, children: list) -> N:
        params = list(inspect.signature(node_factory).parameters)
        node = node_factory(self, children) if len(params) > 1 else node_factory(self)
        if meta and not getattr(meta, "empty", True):
            node.location = SourceLocation(
                file=self.filename,
                line=meta.line,
                column=meta.column,
                end_line=getattr(meta, "end_line", None),
                end_column=getattr(meta, "end_column", None),
            )
        return node

    return wrapper


class TemplateBuilder(Transformer):
    """Turns the Lark parse tree into template segments with locations."""

    def __init__(self) -> None:
        super().__init__()
        self.filename: str | None = None

    def start(self, items: list[Text | Placeholder]) -> ParsedTemplate:
        return ParsedTemplate(segments=items, filename=self.filename)

    @with_location
    def placeholder(self, children: list) -> Placeholder:
        name: Token = children[0]
        return Placeholder(name=str(name))

    @with_location
    def text(self, children: list) -> Text:
        return Text(value=str(children[0]))


class TemplateParser:
    """Parses template text and checks placeholder names against an allowed set."""

    def __init__(self, grammar_path: str | Path = GRAMMAR_PATH):
        grammar = Path(grammar_path).read_text(encoding="utf-8")
        self.parser = Lark(grammar, parser="lalr", propagate_positions=True)
        self.transformer = TemplateBuilder()

    def parse(
        self,
        code: str,
        filename: str | None = None,
        allowed: Iterable[str] | None = None,
    ) -> ParsedTemplate:
        """Parse template text.

        Args:
            code: Template text.
            filename: Used in locations and error messages.
            allowed: Placeholder names that may appear; None accepts any name.

        Raises:
            PromptError: Malformed placeholder syntax or an unknown placeholder name.
        """
        self.transformer.filename = filename
        try:
            tree = self.parser.parse(code)
        except UnexpectedInput as e:
            line = e.line if getattr(e, "line", -1) > 0 else None
            column = e.column if getattr(e, "column", -1) > 0 else None
            where = SourceLocation(file=filename, line=line, column=column)
            raise PromptError(f"{where}: malformed placeholder in template") from e
        result = self.transformer.transform(tree)
        assert isinstance(result, ParsedTemplate)
        if allowed is not None:
            allowed_names = frozenset(allowed)
            for p in result.placeholders:
                if p.name not in allowed_names:
                    raise PromptError(f"{p.location_str()}: unknown placeholder '{p.name}'")
        return result
