"""
Entry point for `python -m coupler`.
"""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
