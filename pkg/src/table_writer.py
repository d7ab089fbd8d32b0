"""Writer for aligned plain-text tables made of titled sections."""

from textwrap import dedent


class SectionWriter:
    """Collects the rows of one table section and renders them column-aligned.

    The first column is left-aligned and every other column right-aligned, which
    keeps numbers readable. Free-text lines (notes, blank separators) are kept
    verbatim between rows.

    Attributes:
        section_name: Optional title printed above the section.
        rows: Emitted lines: a list of cells, a verbatim string, or None for a rule.
    """

    section_name: str | None
    rows: list[list[str] | str | None]

    def __init__(self, section_name: str | None = None):
        self.section_name = section_name
        self.rows = []

    def emit(self, *cells: object) -> None:
        """Emit one table row; cells are converted with str()."""
        self.rows.append([str(cell) for cell in cells])

    def emit_raw(self, text: str) -> None:
        """Emit verbatim text (one entry per line), outside the column layout."""
        for line in dedent(text).strip("\n").split("\n"):
            self.rows.append(line.rstrip())

    def emit_rule(self) -> None:
        """Emit a horizontal rule spanning the table width."""
        self.rows.append(None)

    def column_widths(self) -> list[int]:
        widths: list[int] = []
        for row in self.rows:
            if not isinstance(row, list):
                continue
            for i, cell in enumerate(row):
                if i == len(widths):
                    widths.append(0)
                widths[i] = max(widths[i], len(cell))
        return widths

    def get_output(self) -> str:
        """Render the section; empty string if nothing was emitted."""
        if not self.rows:
            return ""
        widths = self.column_widths()
        total = sum(widths) + 2 * max(len(widths) - 1, 0)
        lines = [self.section_name] if self.section_name else []
        for row in self.rows:
            if row is None:
                lines.append("-" * max(total, 1))
            elif isinstance(row, str):
                lines.append(row)
            else:
                cells = [
                    cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                    for i, cell in enumerate(row)
                ]
                lines.append("  ".join(cells).rstrip())
        return "\n".join(lines)


def join_sections(sections: list[SectionWriter]) -> str:
    """Render sections separated by blank lines, skipping empty ones, newline-terminated."""
    rendered = [out for out in (section.get_output() for section in sections) if out]
    return "\n\n".join(rendered) + "\n" if rendered else ""
