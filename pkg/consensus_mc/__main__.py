"""Run the command-line interface with ``python -m consensus_mc``."""

from .cli import main

raise SystemExit(main())
