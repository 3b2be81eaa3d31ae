"""Entry point: `python app.py <command> ...` runs the sea-ice classification pipeline."""

from cli_harness import main

if __name__ == "__main__":
    raise SystemExit(main())
