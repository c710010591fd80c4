# src/obpuf/__main__.py
from __future__ import annotations


def main() -> int:
    """Module entrypoint: ``python -m obpuf <command>`` runs the CLI."""
    from obpuf.cli import main as cli_main

    return int(cli_main())


if __name__ == "__main__":
    raise SystemExit(main())
