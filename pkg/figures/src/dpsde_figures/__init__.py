"""Figure rendering for dpsde harness outputs."""

from .render import KINDS, FigureSpec, load_rows, render

__all__ = ["KINDS", "FigureSpec", "load_rows", "render"]
