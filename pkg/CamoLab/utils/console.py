"""
Progress printing in the house format
Banners are 70 '=' wide; status lines carry a glyph prefix
"""

import sys

WIDTH = 70


def banner(title: str, *lines: str, stream=None):
    """
    Print a titled banner block

    Args:
        title: Upper-case heading
        lines: Optional detail lines printed under the heading
    """
    out = stream or sys.stdout
    print(f"\n{'='*WIDTH}", file=out)
    print(title, file=out)
    print(f"{'='*WIDTH}", file=out)
    for line in lines:
        print(line, file=out)
    if lines:
        print(f"{'='*WIDTH}", file=out)


def ok(message: str, indent: int = 0):
    print(f"{' '*indent}✓ {message}")


def warn(message: str, indent: int = 0):
    print(f"{' '*indent}⚠ {message}")


def fail(message: str, indent: int = 0):
    print(f"{' '*indent}✗ {message}", file=sys.stderr)


def stat(message: str, indent: int = 0):
    print(f"{' '*indent}📊 {message}")


def saved(message: str, indent: int = 0):
    print(f"{' '*indent}💾 {message}")
