"""Entry point for python -m spef_te."""

from .cli import main

main()
