"""
Main entry point when running the package with `python -m src`
"""

import sys
from .cli import main

if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nExiting.")
        sys.exit(1)
